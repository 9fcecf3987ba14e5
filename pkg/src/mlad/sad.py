"""Sample-adaptive deconfusion: posterior entropies, GMM confusion split,
confusion-free priors and entropy-gated cross-modal rectification."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import NumericalError, ValidationError
from .numerics import (
    LOG_2PI, Linear, Param, SymEig, adam_step, cross_entropy, log_softmax_rows, rng_stream,
    softmax_rows, sym_eig, weighted_mean_cov,
)

GMM_MAX_ITER = 200
GMM_TOL = 1e-8
GMM_SD_FLOOR = 1e-4
GMM_W_FLOOR = 1e-3


# ---------------------------------------------------------------------------
# posterior entropy
# ---------------------------------------------------------------------------

def posterior_log_probs(z, table, m):
    """log p(c | z) from pi_c * p_c^m(z), normalized in log space; shape (N, C)."""
    ll = table.class_log_likelihoods(m, z) + np.log(np.maximum(table.class_prior, 1e-300))
    return log_softmax_rows(ll)


def entropy_from_log_probs(logp):
    p = np.exp(logp)
    h = -np.sum(np.where(p > 0.0, p * logp, 0.0), axis=-1)
    return np.clip(h, 0.0, math.log(logp.shape[-1]))


def posterior_entropy(z, table, m):
    """Entropy of the class posterior for one latent (float) or each row (vector)."""
    z = np.asarray(z, dtype=np.float64)
    h = entropy_from_log_probs(posterior_log_probs(np.atleast_2d(z), table, m))
    return float(h[0]) if z.ndim == 1 else h


# ---------------------------------------------------------------------------
# two-component GMM on entropies
# ---------------------------------------------------------------------------

@dataclass
class GmmSplit:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    threshold: float
    converged: bool
    iterations: int

    def weighted_densities(self, h):
        h = np.asarray(h, dtype=np.float64)
        return [w * np.exp(-0.5 * ((h - mu) / s) ** 2) / (s * math.sqrt(2.0 * math.pi))
                for w, mu, s in zip(self.weights, self.means, self.stds)]

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "stds": self.stds.tolist(),
                "threshold": self.threshold, "converged": self.converged, "iterations": self.iterations}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["weights"]), np.array(doc["means"]), np.array(doc["stds"]),
                   float(doc["threshold"]), bool(doc["converged"]), int(doc["iterations"]))


def _log_weighted(h, w, mu, s):
    return math.log(w) - math.log(s) - 0.5 * ((h - mu) / s) ** 2


def gmm_threshold(weights, means, stds):
    """Point between the means where the two weighted densities are equal, or None.

    Solves the quadratic from equating the log weighted densities, then polishes
    the root with Newton steps on the log-density difference.
    """
    (w1, w2), (m1, m2), (s1, s2) = weights, means, stds
    a = 0.5 / s2 ** 2 - 0.5 / s1 ** 2
    b = m1 / s1 ** 2 - m2 / s2 ** 2
    c = 0.5 * m2 ** 2 / s2 ** 2 - 0.5 * m1 ** 2 / s1 ** 2 + math.log(w1 / s1) - math.log(w2 / s2)
    if abs(a) < 1e-12 * max(abs(b), 1.0):
        roots = [] if b == 0.0 else [-c / b]
    else:
        disc = b * b - 4.0 * a * c
        if disc < 0.0:
            return None
        sq = math.sqrt(disc)
        q = -0.5 * (b + math.copysign(sq, b))
        roots = [q / a] + ([c / q] if q != 0.0 else [])
    lo, hi = min(m1, m2), max(m1, m2)
    inside = [r for r in roots if lo < r < hi]
    if not inside:
        return None
    r = min(inside, key=lambda v: abs(v - 0.5 * (lo + hi)))
    for _ in range(3):
        f = _log_weighted(r, w1, m1, s1) - _log_weighted(r, w2, m2, s2)
        df = -(r - m1) / s1 ** 2 + (r - m2) / s2 ** 2
        if df == 0.0:
            break
        step = f / df
        if not lo < r - step < hi:
            break
        r -= step
    return float(r)


def fit_entropy_gmm(h, backend_name=None) -> GmmSplit:
    """Two-component EM on 1-D entropies; the threshold separates the components."""
    h = np.ascontiguousarray(np.asarray(h, dtype=np.float64).ravel())
    if h.size < 4:
        raise ValidationError("the entropy GMM needs at least 4 values")
    if not np.all(np.isfinite(h)):
        raise NumericalError("non-finite entropy")
    kern = backend.get(backend_name)
    m1, m2 = np.percentile(h, [25.0, 75.0])
    s0 = max(float(h.std()), GMM_SD_FLOOR)
    w1, w2, m1, m2, s1, s2, it, _, conv = kern.em_gmm_1d(h, float(m1), float(m2), s0, s0, GMM_MAX_ITER,
                                                         GMM_TOL, GMM_SD_FLOOR, GMM_W_FLOOR)
    weights, means, stds = np.array([w1, w2]), np.array([m1, m2]), np.array([s1, s2])
    collapsed = abs(m1 - m2) < 1e-6 or min(w1, w2) <= GMM_W_FLOOR
    thr = None if collapsed else gmm_threshold(weights, means, stds)
    if thr is None:
        return GmmSplit(weights, means, stds, float(np.median(h)), False, int(it))
    return GmmSplit(weights, means, stds, thr, bool(conv), int(it))


class EmptyLowConfusionSet(ValidationError):
    """No sample fell below the entropy threshold; use :func:`low_confusion_support`."""


def select_low_confusion(h, split: GmmSplit):
    h = np.asarray(h, dtype=np.float64)
    low = h < split.threshold
    if not np.any(low):
        raise EmptyLowConfusionSet("empty low-confusion set; fall back to the lowest-entropy half")
    return np.flatnonzero(low), np.flatnonzero(~low)


def low_confusion_support(h, split: GmmSplit):
    """S_l, falling back to the N/2 lowest-entropy samples when the split leaves it empty."""
    try:
        return select_low_confusion(h, split)[0]
    except EmptyLowConfusionSet:
        order = np.argsort(h, kind="stable")
        return np.sort(order[: max(2, len(h) // 2)])


# ---------------------------------------------------------------------------
# confusion-free prior
# ---------------------------------------------------------------------------

def reweight_vector(eigvals, mode="normal"):
    """Axis weights: softmax(-lambda) ("normal"), softmax(+lambda) ("negative")."""
    lam = np.asarray(eigvals, dtype=np.float64)
    if mode == "normal":
        return softmax_rows(-lam[None, :])[0]
    if mode == "negative":
        return softmax_rows(lam[None, :])[0]
    raise ValidationError(f"no reweight vector for mode {mode!r}")


@dataclass
class ModalityPrior:
    mean: np.ndarray
    cov: np.ndarray
    eig: SymEig
    reweight: np.ndarray
    support_count: int

    @property
    def eigvals(self):
        return self.eig.eigvals

    @property
    def eigvecs(self):
        return self.eig.eigvecs

    def log_density(self, z):
        """Full-covariance Gaussian log density via the eigendecomposition."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        proj = (z - self.mean) @ self.eigvecs
        lam = self.eigvals
        return -0.5 * (np.sum(proj ** 2 / lam, axis=1) + np.sum(np.log(lam)) + lam.size * LOG_2PI)

    def nll_grad(self, z):
        """d(-log p)/dz for each row."""
        proj = (np.atleast_2d(z) - self.mean) @ self.eigvecs
        return (proj / self.eigvals) @ self.eigvecs.T


def fit_prior(z, h, ridge=1e-3, backend_name=None) -> ModalityPrior:
    """Entropy-weighted Gaussian over low-confusion latents, plus its eigen-reweighting."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    h = np.asarray(h, dtype=np.float64).ravel()
    if z.shape[0] < 2:
        raise ValidationError("a modality prior needs at least 2 low-confusion samples")
    if h.shape[0] != z.shape[0]:
        raise ValidationError("one entropy per latent required")
    w = softmax_rows(-h[None, :])[0]
    mu, cov = weighted_mean_cov(z, w)
    cov = cov + ridge * np.eye(z.shape[1])
    eig = sym_eig(cov, backend_name)
    eig = SymEig(eig.eigvecs, np.maximum(eig.eigvals, ridge), eig.sweeps)
    return ModalityPrior(mu, cov, eig, reweight_vector(eig.eigvals), int(z.shape[0]))


# ---------------------------------------------------------------------------
# gates, rectifier, head
# ---------------------------------------------------------------------------

def entropy_gates(h, eps=1e-6):
    """Gate tensor G[..., m, n] = softmax over n of H_m / (H_n + eps).

    ``h`` has shape (M,) for one sample or (N, M); row m of G is the gate set of
    target modality m, G[m, n] its weight on source n.
    """
    h = np.asarray(h, dtype=np.float64)
    ratio = h[..., :, None] / (h[..., None, :] + eps)
    shape = ratio.shape
    return softmax_rows(ratio.reshape(-1, shape[-1])).reshape(shape)


def entropy_gate(h, target, eps=1e-6):
    """Gate vector of one target modality over all sources (entries sum to 1)."""
    return entropy_gates(h, eps)[target]


class Rectifier:
    """Per target modality: W_Q, W_K, W_V acting on column latents (q = W_Q z)."""

    def __init__(self, num_modalities, latent_dim, rng_for=None):
        self.M, self.k = num_modalities, latent_dim
        bound = math.sqrt(6.0 / latent_dim)

        def init(m, role):
            if rng_for is None:
                return Param(np.zeros((latent_dim, latent_dim)))
            return Param(rng_for(m, role).uniform(-bound, bound, (latent_dim, latent_dim)))
        self.wq = [init(m, 0) for m in range(num_modalities)]
        self.wk = [init(m, 1) for m in range(num_modalities)]
        self.wv = [init(m, 2) for m in range(num_modalities)]

    def named_params(self):
        out = {}
        for m in range(self.M):
            out[f"{m}/wq"], out[f"{m}/wk"], out[f"{m}/wv"] = self.wq[m], self.wk[m], self.wv[m]
        return out

    def params(self):
        return list(self.named_params().values())


@dataclass
class RectifyOptions:
    gate_mode: str = "multiplicative"
    rotate_back: bool = True
    reweight: str = "normal"     # "normal", "negative": eigen-reweighted; "none": z + z_tilde
    gate_eps: float = 1e-6

    @classmethod
    def from_config(cls, sad_cfg, toggles=None):
        mode = sad_cfg.reweight if toggles is None or toggles.cfmp else "none"
        return cls(sad_cfg.gate_mode, sad_cfg.rotate_back, mode, sad_cfg.gate_eps)


@dataclass
class RectifyCache:
    z: list
    gates: np.ndarray
    q: list
    kv: dict        # (m, m') -> (key, value, attention)
    z_tilde: list
    weights: list   # reweight vector per modality (None for "none")


def rectify_batch(z, gates, priors, rect: Rectifier, opts: RectifyOptions):
    """Rectified latents for a batch: ``z[m]`` is (B, k), ``gates`` is (B, M, M).

    Returns ``(z_hat, cache)``; the cache carries attention maps and feeds
    :func:`rectify_backward`.
    """
    M = len(z)
    if M < 2:
        raise ValidationError("rectification needs at least 2 modalities")
    k = z[0].shape[1]
    scale = 1.0 / math.sqrt(k)
    qs, kv, zt, z_hat, ws = [], {}, [], [], []
    for m in range(M):
        q = z[m] @ rect.wq[m].value.T
        qs.append(q)
        acc = np.zeros_like(z[m])
        for src in range(M):
            if src == m:
                continue
            key = z[src] @ rect.wk[m].value.T
            val = z[src] @ rect.wv[m].value.T
            s = q[:, :, None] * key[:, None, :] * scale
            g = gates[:, m, src]
            if opts.gate_mode == "additive":
                s = s + g[:, None, None]
            a = softmax_rows(s)
            t = np.einsum("bij,bj->bi", a, val)
            acc += g[:, None] * t if opts.gate_mode == "multiplicative" else t
            kv[(m, src)] = (key, val, a)
        zt.append(acc)
        if opts.reweight == "none":
            z_hat.append(z[m] + acc)
            ws.append(None)
        else:
            w = priors[m].reweight if opts.reweight == "normal" else reweight_vector(priors[m].eigvals, "negative")
            u = priors[m].eigvecs
            rec = ((acc - z[m]) @ u) * w
            z_hat.append(z[m] + (rec @ u.T if opts.rotate_back else rec))
            ws.append(w)
    return z_hat, RectifyCache(z, gates, qs, kv, zt, ws)


def rectify_backward(dz_hat, cache: RectifyCache, priors, rect: Rectifier, opts: RectifyOptions,
                     need_dz=False):
    """Accumulate W_Q/W_K/W_V gradients; optionally return d/dz per modality."""
    M = len(cache.z)
    k = cache.z[0].shape[1]
    scale = 1.0 / math.sqrt(k)
    dz = [np.zeros_like(zm) for zm in cache.z] if need_dz else None
    for m in range(M):
        if opts.reweight == "none":
            dzt = dz_hat[m]
            if need_dz:
                dz[m] += dz_hat[m]
        else:
            u = priors[m].eigvecs
            drec = dz_hat[m] @ u if opts.rotate_back else dz_hat[m]
            dzt = (drec * cache.weights[m]) @ u.T
            if need_dz:
                dz[m] += dz_hat[m] - dzt
        q = cache.q[m]
        dq = np.zeros_like(q)
        for src in range(M):
            if src == m:
                continue
            key, val, a = cache.kv[(m, src)]
            g = cache.gates[:, m, src]
            dt = g[:, None] * dzt if opts.gate_mode == "multiplicative" else dzt
            da = dt[:, :, None] * val[:, None, :]
            dval = np.einsum("bij,bi->bj", a, dt)
            ds = a * (da - np.sum(a * da, axis=2, keepdims=True))
            dq += np.einsum("bij,bj->bi", ds, key) * scale
            dkey = np.einsum("bij,bi->bj", ds, q) * scale
            rect.wk[m].grad += dkey.T @ cache.z[src]
            rect.wv[m].grad += dval.T @ cache.z[src]
            if need_dz:
                dz[src] += dkey @ rect.wk[m].value + dval @ rect.wv[m].value
        rect.wq[m].grad += dq.T @ cache.z[m]
        if need_dz:
            dz[m] += dq @ rect.wq[m].value
    return dz


def rectify(z, h, priors, rect: Rectifier, opts: RectifyOptions | None = None):
    """Single-sample rectification: ``z`` is a list of M latent vectors and ``h``
    their posterior entropies. Returns ``(z_hat list, attention dict, gates)``."""
    opts = opts or RectifyOptions()
    zb = [np.asarray(v, dtype=np.float64).reshape(1, -1) for v in z]
    gates = entropy_gates(np.asarray(h, dtype=np.float64)[None, :], opts.gate_eps)
    z_hat, cache = rectify_batch(zb, gates, priors, rect, opts)
    maps = {key: a[0] for key, (_, _, a) in cache.kv.items()}
    return [v[0] for v in z_hat], maps, gates[0]


class ClassifierHead:
    def __init__(self, num_modalities, latent_dim, num_classes, rng=None):
        self.linear = Linear(num_modalities * latent_dim, num_classes, rng)

    def named_params(self):
        return {"w": self.linear.w, "b": self.linear.b}

    def params(self):
        return self.linear.params()

    def __call__(self, z_list):
        return self.linear(np.concatenate(z_list, axis=1))


# ---------------------------------------------------------------------------
# phase-2 objective and training
# ---------------------------------------------------------------------------

def total_loss(z, gates, y, priors, rect, head, opts, use_rectifier=True, need_grad=True, need_dz=False):
    """L_tot = (1/(M N)) sum -log p^m(z_hat) + CE(head(concat z_hat), y).

    With ``use_rectifier`` False the head reads ``z`` directly and the prior term
    is constant. Returns ``(loss, parts, dz)``.
    """
    M = len(z)
    n = z[0].shape[0]
    if use_rectifier:
        z_hat, cache = rectify_batch(z, gates, priors, rect, opts)
    else:
        z_hat, cache = list(z), None
    nll = 0.0
    for m in range(M):
        nll -= float(np.sum(priors[m].log_density(z_hat[m])))
    nll /= M * n
    logits = head(z_hat)
    ce, dlogits = cross_entropy(logits, y)
    dz = None
    if need_grad:
        dcat = head.linear.backward(np.concatenate(z_hat, axis=1), dlogits)
        k = z[0].shape[1]
        dzh = [dcat[:, m * k:(m + 1) * k] + priors[m].nll_grad(z_hat[m]) / (M * n) for m in range(M)]
        if use_rectifier:
            dz = rectify_backward(dzh, cache, priors, rect, opts, need_dz)
        elif need_dz:
            dz = dzh
    return nll + ce, {"nll": nll, "ce": ce}, dz


def lr_at(epoch, epochs, lr, decay, every):
    step = every if every > 0 else max(1, epochs // 2)
    return lr * decay ** (epoch // step)


def phase2_train(z, gates, y, num_classes, priors, rect, head, sad_cfg, seed, opts,
                 use_rectifier=True, log=None):
    """Adam on rectifier and head with frozen latents/gates. Returns per-epoch losses."""
    params = (rect.params() if use_rectifier else []) + head.params()
    rng = rng_stream(seed, "batch", 2)
    n = len(y)
    bs = max(1, min(sad_cfg.batch_size, n))
    losses = []
    for epoch in range(sad_cfg.epochs):
        lr = lr_at(epoch, sad_cfg.epochs, sad_cfg.lr, sad_cfg.lr_decay, sad_cfg.lr_decay_every)
        perm = rng.permutation(n)
        ep = []
        for start in range(0, n, bs):
            idx = np.sort(perm[start:start + bs])
            for p in params:
                p.zero_grad()
            loss, _, _ = total_loss([zm[idx] for zm in z], gates[idx], y[idx], priors, rect, head, opts,
                                    use_rectifier)
            if not math.isfinite(loss):
                raise NumericalError(f"phase-2 loss became non-finite at epoch {epoch + 1}")
            for p in params:
                adam_step(p, lr, sad_cfg.weight_decay)
            ep.append(loss)
        losses.append(float(np.mean(ep)))
        if log:
            log(f"phase2 epoch {epoch + 1}/{sad_cfg.epochs} loss {losses[-1]:.6f}")
    return losses


def new_rectifier(num_modalities, latent_dim, seed):
    return Rectifier(num_modalities, latent_dim, lambda m, role: rng_stream(seed, "init", 200 + 3 * m + role))


def new_head(num_modalities, latent_dim, num_classes, seed):
    return ClassifierHead(num_modalities, latent_dim, num_classes, rng_stream(seed, "init", 300))
