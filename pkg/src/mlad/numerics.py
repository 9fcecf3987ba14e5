"""Dense float64 linear algebra, hand-differentiated layers, Adam, Jacobi eigensolver, RNG streams.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The checked
wrappers here (``matmul``, ``softmax_rows``...) are the public contract; hot
training loops call numpy directly on arrays already validated upstream.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backend
from .errors import DimensionError, NumericalError, ValidationError

VAR_FLOOR = 1e-6
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def as_mat(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite values in {what}")
    return a


# ---------------------------------------------------------------------------
# elementwise and matrix ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> np.ndarray:
    a, b = as_mat(a), as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def _same_shape(a, b, op):
    a, b = as_mat(a), as_mat(b)
    if a.shape != b.shape:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def add(a, b):
    a, b = _same_shape(a, b, "add")
    return check_finite(a + b, "add result")


def sub(a, b):
    a, b = _same_shape(a, b, "sub")
    return check_finite(a - b, "sub result")


def mul(a, b):
    a, b = _same_shape(a, b, "mul")
    return check_finite(a * b, "mul result")


def transpose(a):
    return np.ascontiguousarray(as_mat(a).T)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    """Gradient through ReLU given its *input* ``x``."""
    return dy * (x > 0.0)


def logsumexp(v) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    m = v.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


def logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True)))[..., 0]


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction (works on stacked matrices too)."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    return x - logsumexp_rows(x)[..., None]


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    Returns ``(loss, dlogits)`` with ``dlogits = (softmax - onehot) / N``.
    """
    logits = as_mat(logits)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, c = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range for {c} classes")
    logp = log_softmax_rows(logits)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def weighted_mean_cov(x: np.ndarray, w: np.ndarray):
    """Weighted mean and (biased) covariance; weights must sum to one."""
    x = as_mat(x)
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.shape[0] != x.shape[0]:
        raise DimensionError("one weight per row required")
    mu = w @ x
    xc = x - mu
    cov = (xc * w[:, None]).T @ xc
    return mu, 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# parameters, layers, optimizer
# ---------------------------------------------------------------------------

@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = as_mat(self.value).copy()
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def reset_optimizer(self):
        self.adam_m.fill(0.0)
        self.adam_v.fill(0.0)
        self.step_count = 0


def adam_step(p: Param, lr: float, weight_decay: float = 0.0,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
    """One Adam update with bias correction and decoupled weight decay."""
    p.step_count += 1
    g = p.grad
    p.adam_m *= beta1
    p.adam_m += (1.0 - beta1) * g
    p.adam_v *= beta2
    p.adam_v += (1.0 - beta2) * g * g
    mhat = p.adam_m / (1.0 - beta1 ** p.step_count)
    vhat = p.adam_v / (1.0 - beta2 ** p.step_count)
    p.value -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.value)


class Linear:
    """Affine map ``y = x W + b`` with explicit backward."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator | None = None):
        self.fan_in, self.fan_out = fan_in, fan_out
        bound = np.sqrt(6.0 / fan_in)
        w = np.zeros((fan_in, fan_out)) if rng is None else rng.uniform(-bound, bound, (fan_in, fan_out))
        self.w = Param(w)
        self.b = Param(np.zeros((1, fan_out)))

    def params(self):
        return [self.w, self.b]

    def __call__(self, x):
        return x @ self.w.value + self.b.value

    def backward(self, x, dy, need_dx=True):
        self.w.grad += x.T @ dy
        self.b.grad += dy.sum(axis=0, keepdims=True)
        return dy @ self.w.value.T if need_dx else None


class MLP1:
    """One-hidden-layer ReLU network ``in -> hidden -> out``."""

    def __init__(self, fan_in, hidden, fan_out, rng=None):
        self.l1 = Linear(fan_in, hidden, rng)
        self.l2 = Linear(hidden, fan_out, rng)

    def params(self):
        return self.l1.params() + self.l2.params()

    def forward(self, x):
        pre = self.l1(x)
        h = relu(pre)
        return self.l2(h), (x, pre, h)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dy, need_dx=True):
        x, pre, h = cache
        dh = self.l2.backward(h, dy)
        return self.l1.backward(x, relu_backward(pre, dh), need_dx)


# ---------------------------------------------------------------------------
# Gaussians and eigendecomposition
# ---------------------------------------------------------------------------

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GaussianDiag:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.var = np.maximum(np.asarray(self.var, dtype=np.float64).ravel(), VAR_FLOOR)
        if self.mean.shape != self.var.shape:
            raise DimensionError("mean and var must have equal length")

    def log_density(self, z):
        """Log density of each row of ``z`` (or of a single vector)."""
        z = np.asarray(z, dtype=np.float64)
        d = (z - self.mean) ** 2 / self.var
        return -0.5 * (np.sum(d, axis=-1) + np.sum(np.log(self.var)) + self.mean.size * LOG_2PI)


@dataclass
class SymEig:
    eigvecs: np.ndarray
    eigvals: np.ndarray
    sweeps: int = 0


def sym_eig(a, backend_name: str | None = None, tol: float = JACOBI_TOL,
            max_sweeps: int = JACOBI_MAX_SWEEPS) -> SymEig:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues come back in descending order; each eigenvector's largest-magnitude
    entry is made nonnegative.
    """
    a = as_mat(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValidationError(f"sym_eig needs a square matrix, got {a.shape}")
    check_finite(a, "sym_eig input")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * scale:
        raise ValidationError("sym_eig input is not symmetric")
    work = np.ascontiguousarray(0.5 * (a + a.T))
    fro = float(np.sqrt(np.sum(work ** 2)))
    diag, vecs, sweeps, converged = backend.get(backend_name).jacobi_eigh(
        work, tol * max(1.0, fro), max_sweeps)
    if not converged:
        raise NumericalError(f"Jacobi did not converge in {max_sweeps} sweeps")
    order = np.argsort(-diag, kind="stable")
    vals = np.asarray(diag)[order]
    vecs = np.asarray(vecs)[:, order]
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.where(vecs[idx, np.arange(n)] < 0.0, -1.0, 1.0)
    return SymEig(eigvecs=np.ascontiguousarray(vecs * signs), eigvals=vals, sweeps=sweeps)


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def rng_stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Independent Philox stream for ``(seed, purpose, *extra)``.

    Streams for different purposes never share draws, so enabling one feature
    cannot shift the random numbers another consumes.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode("utf-8"))]
    key.extend(int(e) & 0xFFFFFFFF for e in extra)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal draws built from the stream's uniforms."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    n = int(np.prod(shape, dtype=np.int64))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * m)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:n].reshape(shape)


def gaussian_sample(rng: np.random.Generator, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), mean.shape)
    if np.any(std < 0.0):
        raise ValidationError("negative standard deviation")
    return mean + std * box_muller(rng, mean.shape)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(loss_fn, params, h: float = 1e-5, max_coords: int = 40,
                      seed: int = 0, abs_floor: float = 1e-6) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn()`` must zero and refill ``p.grad`` for every param and return the
    loss; it must be a pure function of the parameter values. Coordinates are
    sampled per param (up to ``max_coords`` each).
    """
    for p in params:
        p.zero_grad()
    loss_fn()
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        k = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn()
            flat[i] = old - h
            fm = loss_fn()
            flat[i] = old
            num = (fp - fm) / (2.0 * h)
            ana = g.reshape(-1)[i]
            err = abs(num - ana) / max(abs(num), abs(ana), abs_floor)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# binary matrix files
# ---------------------------------------------------------------------------

def mat_to_bytes(a) -> bytes:
    a = as_mat(a)
    return struct.pack("<QQ", a.shape[0], a.shape[1]) + np.ascontiguousarray(a, dtype="<f8").tobytes()


def mat_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise ValidationError("matrix blob shorter than its header")
    rows, cols = struct.unpack("<QQ", buf[:16])
    if len(buf) != 16 + 8 * rows * cols:
        raise ValidationError(f"matrix blob size does not match header {rows}x{cols}")
    return np.frombuffer(buf[16:], dtype="<f8").astype(np.float64).reshape(rows, cols)


def write_mat(path, a):
    Path(path).write_bytes(mat_to_bytes(a))


def read_mat(path) -> np.ndarray:
    return mat_from_bytes(Path(path).read_bytes())
