"""Class-adaptive deconfusion: dynamic-exit towers, class latent distributions,
residual cross-class reconstruction and the Q-learning exit policy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .numerics import (
    VAR_FLOOR, GaussianDiag, Linear, MLP1, adam_step, box_muller, cross_entropy,
    relu, relu_backward, rng_stream,
)


# ---------------------------------------------------------------------------
# towers
# ---------------------------------------------------------------------------

class ModalityTower:
    """Stack of linear+ReLU blocks with an exit (latent head + aux classifier) per layer.

    All exits share one latent space, decoded by ``decoder`` (latent -> input) and,
    for cross-class residual comparison, ``transform`` (input -> input).
    """

    def __init__(self, in_dim, num_classes, depth=5, width=128, latent_dim=128,
                 decoder_hidden=256, transform_hidden=512, rng=None):
        if depth < 1:
            raise ValidationError("tower depth must be >= 1")
        self.in_dim, self.num_classes, self.depth = in_dim, num_classes, depth
        self.latent_dim = latent_dim
        widths = [in_dim] + [width] * depth
        self.blocks = [Linear(widths[i], widths[i + 1], rng) for i in range(depth)]
        self.heads = [Linear(width, latent_dim, rng) for _ in range(depth)]
        self.aux = [Linear(latent_dim, num_classes, rng) for _ in range(depth)]
        self.decoder = MLP1(latent_dim, decoder_hidden, in_dim, rng)
        self.transform = MLP1(in_dim, transform_hidden, in_dim, rng)

    def named_params(self):
        out = {}
        for d in range(self.depth):
            for role, layer in (("block", self.blocks[d]), ("head", self.heads[d]), ("aux", self.aux[d])):
                out[f"layer{d + 1}/{role}/w"] = layer.w
                out[f"layer{d + 1}/{role}/b"] = layer.b
        for role, mlp in (("decoder", self.decoder), ("transform", self.transform)):
            for i, layer in enumerate((mlp.l1, mlp.l2)):
                out[f"{role}/l{i + 1}/w"] = layer.w
                out[f"{role}/l{i + 1}/b"] = layer.b
        return out

    def params(self):
        return list(self.named_params().values())

    def encoder_params(self):
        ps = []
        for d in range(self.depth):
            ps += self.blocks[d].params() + self.heads[d].params()
        return ps

    def hidden(self, x, upto=None):
        """Pre-activations and activations of blocks 1..upto; ``acts[0]`` is the input."""
        upto = self.depth if upto is None else upto
        pres, acts = [], [x]
        for d in range(upto):
            pre = self.blocks[d](acts[-1])
            pres.append(pre)
            acts.append(relu(pre))
        return pres, acts

    def forward_all(self, x):
        """Latents at every depth (list index d-1 for depth d) plus the cache for backward."""
        pres, acts = self.hidden(x)
        latents = [self.heads[d](acts[d + 1]) for d in range(self.depth)]
        return latents, (pres, acts)

    def backward_all(self, cache, dlatents):
        """Accumulate encoder gradients given d(loss)/d(latent) per depth (None = zero)."""
        pres, acts = cache
        dh = None
        for d in range(self.depth - 1, -1, -1):
            g = None if dlatents[d] is None else self.heads[d].backward(acts[d + 1], dlatents[d])
            if dh is not None:
                g = dh if g is None else g + dh
            if g is None:
                continue
            dpre = relu_backward(pres[d], g)
            dh = self.blocks[d].backward(acts[d], dpre, need_dx=d > 0)


def forward_to_depth(tower: ModalityTower, x, d: int) -> np.ndarray:
    """Latent of ``x`` at exit ``d`` (1-based): blocks 1..d followed by head d."""
    if not 1 <= d <= tower.depth:
        raise ValidationError(f"depth {d} outside 1..{tower.depth}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, acts = tower.hidden(x, d)
    return tower.heads[d - 1](acts[d])


def build_towers(dims, num_classes, model_cfg, seed):
    return [ModalityTower(d, num_classes, model_cfg.depth, model_cfg.width, model_cfg.latent_dim,
                          model_cfg.decoder_hidden, model_cfg.transform_hidden,
                          rng_stream(seed, "init", m))
            for m, d in enumerate(dims)]


# ---------------------------------------------------------------------------
# class distributions
# ---------------------------------------------------------------------------

def fit_class_distribution(latents) -> GaussianDiag:
    z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    if z.shape[0] < 2:
        raise ValidationError("a class distribution needs at least 2 latents")
    return GaussianDiag(z.mean(axis=0), z.var(axis=0))


def fit_depth_cache(towers, ds):
    """Class distributions at every depth: ``cache[m][d-1][c]``."""
    cache = []
    for m, tower in enumerate(towers):
        latents, _ = tower.forward_all(ds.features[m])
        cache.append([[fit_class_distribution(lat[ds.labels == c]) for c in range(ds.num_classes)]
                      for lat in latents])
    return cache


@dataclass
class ClassLatentTable:
    dists: list              # [m][c] GaussianDiag at the chosen exit depth
    depths: np.ndarray       # (M, C) exit depths, 1-based
    class_prior: np.ndarray  # (C,)
    cache: list = field(default_factory=list)   # [m][d-1][c] per-depth distributions

    @classmethod
    def from_cache(cls, cache, labels, num_classes, depths=None):
        m_count = len(cache)
        if depths is None:
            depths = np.array([[len(cache[m])] * num_classes for m in range(m_count)], dtype=np.int64)
        depths = np.asarray(depths, dtype=np.int64)
        dists = [[cache[m][depths[m, c] - 1][c] for c in range(num_classes)] for m in range(m_count)]
        prior = np.bincount(labels, minlength=num_classes) / float(len(labels))
        return cls(dists, depths, prior, cache)

    @property
    def num_classes(self):
        return len(self.class_prior)

    def class_log_likelihoods(self, m, z):
        """(N, C) matrix of log p_c^m(z_i)."""
        z = np.atleast_2d(z)
        return np.stack([g.log_density(z) for g in self.dists[m]], axis=1)


# ---------------------------------------------------------------------------
# residual cross-class reconstruction loss
# ---------------------------------------------------------------------------

@dataclass
class CadLossParts:
    intra: float
    cross: float

    @property
    def total(self):
        return self.intra + self.cross


@dataclass
class CadDraws:
    """Fixed randomness for one evaluation of the CAD loss.

    ``eps[m][c]`` reparameterization normals (n_c x k), ``noise[m][c]`` residual
    normals (n_c x d^m), ``sub[c]`` row indices equalizing class sizes in the cross term.
    """
    eps: list
    noise: list
    sub: list


def draw_cad(rng, class_sizes, latent_dim, dims) -> CadDraws:
    n_min = min(class_sizes)
    eps = [[box_muller(rng, (n, latent_dim)) for n in class_sizes] for _ in dims]
    noise = [[box_muller(rng, (n, d)) for n in class_sizes] for d in dims]
    sub = [np.sort(rng.permutation(n)[:n_min]) for n in class_sizes]
    return CadDraws(eps, noise, sub)


def reparameterize(lat):
    """Differentiable class sample: returns ``(z, backward)`` for z = mu + sqrt(var) * eps."""
    def build(eps):
        n = lat.shape[0]
        mu = lat.mean(axis=0)
        cen = lat - mu
        var = (cen ** 2).mean(axis=0)
        live = var > VAR_FLOOR
        s = np.sqrt(np.where(live, var, VAR_FLOOR))
        z = mu + s * eps

        def backward(dz):
            dmu = dz.sum(axis=0)
            ds = (dz * eps).sum(axis=0)
            dvar = np.where(live, ds / (2.0 * s), 0.0)
            return dmu / n + cen * (2.0 * dvar / n)
        return z, backward
    return build


def compute_residual(x, z, tower, alpha, noise):
    """R = X - psi(z) + alpha * std(X - psi(z)) * noise, with ``noise`` standard normal.

    Returns ``(R, cache)``; the cache feeds :func:`residual_backward`.
    """
    xhat, dec_cache = tower.decoder.forward(z)
    q = x - xhat
    sd = float(q.std())
    r = q + alpha * sd * noise
    return r, (q, sd, xhat, dec_cache)


def _modality_terms(tower, z_list, x_list, draws_noise, sub, alpha, use_cross,
                    residual_decoder, w_intra, w_cross, need_grad):
    """Per-class intra terms and cross matrix for one modality.

    With ``need_grad`` the weighted sum ``w_intra * sum(intra) + w_cross * sum(cross)``
    is backpropagated into decoder/transform params; returns d/dz per class.
    """
    C = len(z_list)
    intra = np.zeros(C)
    cross = np.zeros((C, C))
    states = []
    for c in range(C):
        r, (q, sd, xhat, dec_cache) = compute_residual(x_list[c], z_list[c], tower, alpha, draws_noise[c])
        intra[c] = float(np.sum(q * q))
        states.append((r, q, sd, dec_cache))
    x_sub = [x_list[c][sub[c]] for c in range(C)]
    dq = [w_intra * 2.0 * st[1] for st in states] if need_grad else None
    if use_cross and C > 1:
        x_sub_total = sum(x_sub)
        for c in range(C):
            r, q, sd, _ = states[c]
            r_sub = r[sub[c]]
            if residual_decoder:
                y, t_cache = tower.transform.forward(r_sub)
            else:
                y, t_cache = r_sub, None
            for c2 in range(C):
                if c2 != c:
                    diff = y - x_sub[c2]
                    cross[c, c2] = float(np.sum(diff * diff))
            if need_grad:
                dy = w_cross * 2.0 * ((C - 1) * y - (x_sub_total - x_sub[c]))
                dr_sub = tower.transform.backward(t_cache, dy) if residual_decoder else dy
                dr = np.zeros_like(r)
                dr[sub[c]] = dr_sub
                g = dr
                if sd > 0.0:
                    dsd = alpha * float(np.sum(dr * draws_noise[c]))
                    g = g + dsd * (q - q.mean()) / (q.size * sd)
                dq[c] = dq[c] + g
    dz = None
    if need_grad:
        dz = [tower.decoder.backward(states[c][3], -dq[c]) for c in range(C)]
    return intra, cross, dz


def cad_weights(M, C):
    w_intra = 1.0 / (M * C)
    w_cross = 1.0 / (M * C * (C - 1)) if C > 1 else 0.0
    return w_intra, w_cross


def loss_cad_from_samples(towers, z, x, draws: CadDraws, alpha, use_cross=True,
                          residual_decoder=True, scale=1.0, need_grad=True):
    """L_CAD for given class samples ``z[m][c]`` and inputs ``x[m][c]``.

    Returns ``(CadLossParts, dz)`` with ``dz[m][c]`` the gradient of ``scale * total``.
    """
    M, C = len(towers), len(z[0])
    w_intra, w_cross = cad_weights(M, C)
    intra = cross = 0.0
    dz = []
    for m, tower in enumerate(towers):
        i_m, x_m, g = _modality_terms(tower, z[m], x[m], draws.noise[m], draws.sub, alpha, use_cross,
                                      residual_decoder, scale * w_intra, scale * w_cross, need_grad)
        intra += w_intra * i_m.sum()
        cross += w_cross * x_m.sum()
        dz.append(g)
    return CadLossParts(float(intra), float(cross)), dz


def loss_cad(towers, class_latents, x, draws: CadDraws, alpha, use_cross=True,
             residual_decoder=True, scale=1.0, need_grad=True):
    """L_CAD from per-class encoder latents ``class_latents[m][c]`` via reparameterized sampling.

    Returns ``(CadLossParts, dlatents)`` where ``dlatents[m][c]`` is the gradient of
    ``scale * total`` with respect to the class latents; decoder and transform
    gradients are accumulated in place.
    """
    M, C = len(towers), len(class_latents[0])
    if any(lat.shape[0] < 1 for lat in class_latents[0]):
        raise ValidationError("every class must be present in the batch")
    z, backs = [], []
    for m in range(M):
        zs, bs = [], []
        for c in range(C):
            zc, b = reparameterize(class_latents[m][c])(draws.eps[m][c])
            zs.append(zc)
            bs.append(b)
        z.append(zs)
        backs.append(bs)
    parts, dz = loss_cad_from_samples(towers, z, x, draws, alpha, use_cross, residual_decoder,
                                      scale, need_grad)
    dlat = None
    if need_grad:
        dlat = [[backs[m][c](dz[m][c]) for c in range(C)] for m in range(M)]
    return parts, dlat


# ---------------------------------------------------------------------------
# phase 1
# ---------------------------------------------------------------------------

def stratified_batches(labels, num_classes, batch_size, rng):
    """Shuffled minibatches that each contain at least two samples of every class."""
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in range(num_classes)]
    n = len(labels)
    n_batches = max(1, min(n // max(batch_size, 1), min(len(p) for p in per_class) // 2))
    batches = [[] for _ in range(n_batches)]
    for idx in per_class:
        for b, chunk in enumerate(np.array_split(idx, n_batches)):
            batches[b].append(chunk)
    out = [np.sort(np.concatenate(b)) for b in batches]
    return [out[i] for i in rng.permutation(n_batches)]


def lr_at(epoch, cfg):
    step = cfg.lr_decay_every if cfg.lr_decay_every > 0 else max(1, cfg.epochs // 2)
    return cfg.lr * cfg.lr_decay ** (epoch // step)


def phase1_objective(towers, xb, yb, num_classes, draws_by_depth, cfg, use_cross=True, need_grad=True):
    """Phase-1 loss on one batch: sum of per-exit CE plus L_CAD at the final exit
    (and, with ``cad_depths == "all"``, plus L_CAD at every earlier exit).

    Gradients are accumulated into the towers. ``draws_by_depth[d-1]`` holds the
    sampling randomness for depth d (only the final entry is used with "final").
    """
    M = len(towers)
    D = towers[0].depth
    fwd = [t.forward_all(x) for t, x in zip(towers, xb)]
    dlat = [[None] * D for _ in range(M)]
    total = 0.0
    for m in range(M):
        for d in range(D):
            logits = towers[m].aux[d](fwd[m][0][d])
            ce, dlogits = cross_entropy(logits, yb)
            total += ce
            if need_grad:
                dlat[m][d] = towers[m].aux[d].backward(fwd[m][0][d], dlogits)
    masks = [yb == c for c in range(num_classes)]
    xs = [[x[mk] for mk in masks] for x in xb]
    depths = [D] if cfg.cad_depths == "final" or D == 1 else list(range(1, D + 1))
    cad_parts = {}
    for d in depths:
        scale = 1.0
        lats = [[fwd[m][0][d - 1][mk] for mk in masks] for m in range(M)]
        parts, g = loss_cad(towers, lats, xs, draws_by_depth[d - 1], cfg.alpha, use_cross,
                            cfg.residual_decoder, scale, need_grad)
        cad_parts[d] = parts
        total += scale * parts.total
        if need_grad:
            for m in range(M):
                full = np.zeros_like(fwd[m][0][d - 1])
                for c, mk in enumerate(masks):
                    full[mk] = g[m][c]
                dlat[m][d - 1] = full if dlat[m][d - 1] is None else dlat[m][d - 1] + full
    if need_grad:
        for m in range(M):
            towers[m].backward_all(fwd[m][1], dlat[m])
    return float(total), cad_parts


def phase1_draws(rng, labels, num_classes, towers, D):
    sizes = [int(np.sum(labels == c)) for c in range(num_classes)]
    dims = [t.in_dim for t in towers]
    return [draw_cad(rng, sizes, towers[0].latent_dim, dims) for _ in range(D)]


@dataclass
class Phase1Result:
    table: ClassLatentTable
    losses: list
    cad_history: list


def phase1_train(towers, train, cfg, seed, use_cross=True, log=None) -> Phase1Result:
    """Minibatch Adam on the phase-1 objective; returns the all-final-depth table."""
    params = [p for t in towers for p in t.params()]
    batch_rng = rng_stream(seed, "batch", 1)
    sample_rng = rng_stream(seed, "sample", 1)
    C = train.num_classes
    D = towers[0].depth
    losses, cad_history = [], []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        ep_loss = []
        for idx in stratified_batches(train.labels, C, cfg.batch_size, batch_rng):
            xb = [f[idx] for f in train.features]
            yb = train.labels[idx]
            draws = phase1_draws(sample_rng, yb, C, towers, D)
            for p in params:
                p.zero_grad()
            loss, _ = phase1_objective(towers, xb, yb, C, draws, cfg, use_cross)
            if not math.isfinite(loss):
                raise NumericalError(f"phase-1 loss became non-finite at epoch {epoch + 1}")
            for p in params:
                adam_step(p, lr, cfg.weight_decay)
            ep_loss.append(loss)
        losses.append(float(np.mean(ep_loss)))
        if cfg.cache_every > 0 and (epoch + 1) % cfg.cache_every == 0:
            cad_history.append({"epoch": epoch + 1, "loss": losses[-1]})
        if log:
            log(f"phase1 epoch {epoch + 1}/{cfg.epochs} loss {losses[-1]:.6f}")
    cache = fit_depth_cache(towers, train)
    table = ClassLatentTable.from_cache(cache, train.labels, C)
    return Phase1Result(table, losses, cad_history)


# ---------------------------------------------------------------------------
# exit policy
# ---------------------------------------------------------------------------

CONTINUE, EXIT = 0, 1


class ExitPolicy:
    """Per-modality Q heads for layers 1..D-1 mapping a latent to (Q[a_C], Q[a_E])."""

    def __init__(self, num_modalities, depth, latent_dim, rng_for):
        self.depth = depth
        self.heads = [[Linear(latent_dim, 2, rng_for(m)) for _ in range(depth - 1)]
                      for m in range(num_modalities)]

    def named_params(self):
        out = {}
        for m, heads in enumerate(self.heads):
            for d, h in enumerate(heads):
                out[f"{m}/layer{d + 1}/q/w"] = h.w
                out[f"{m}/layer{d + 1}/q/b"] = h.b
        return out

    def q_values(self, m, d, s):
        return self.heads[m][d - 1](np.atleast_2d(s))


def greedy_exit(q):
    """Greedy action per row: exit when Q[a_E] >= Q[a_C]."""
    return q[:, EXIT] >= q[:, CONTINUE]


def choose_exit_batch(tower, policy, m, x, force_final=False):
    """Exit depth and latent per row of ``x``; greedy, seed-free."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    D = tower.depth
    latents, _ = tower.forward_all(x)
    depth = np.full(n, D, dtype=np.int64)
    if not force_final:
        open_ = np.ones(n, dtype=bool)
        for d in range(1, D):
            ex = open_ & greedy_exit(policy.q_values(m, d, latents[d - 1]))
            depth[ex] = d
            open_ &= ~ex
    z = np.stack([latents[depth[i] - 1][i] for i in range(n)]) if n else np.zeros((0, tower.latent_dim))
    return depth, z


def choose_exit(tower, policy, m, x, force_final=False):
    """Single-sample form: ``(depth, latent vector)``."""
    depth, z = choose_exit_batch(tower, policy, m, np.asarray(x, dtype=np.float64).reshape(1, -1),
                                 force_final)
    return int(depth[0]), z[0]


def class_rewards(towers, train, table, cfg_p1, qcfg, seed, use_cross=True):
    """Reward table ``r[m, c, d-1] = exp(-L)``, L the CAD loss of class c at depth d.

    With ``reward_scope == "class"`` L keeps only class c's terms (its intra term and
    its row of the cross sum); with "global" every class shares the modality-wide
    loss. ``reward_scale == "entry_mean"`` divides each Frobenius term by its entry count.
    """
    M, C, D = len(towers), train.num_classes, towers[0].depth
    rng = rng_stream(seed, "sample", 2)
    sizes = [int(np.sum(train.labels == c)) for c in range(C)]
    n_min = min(sizes)
    xs = [[f[train.labels == c] for c in range(C)] for f in train.features]
    rewards = np.zeros((M, C, D))
    for d in range(1, D + 1):
        draws = draw_cad(rng, sizes, towers[0].latent_dim, [t.in_dim for t in towers])
        for m, tower in enumerate(towers):
            z = [table.cache[m][d - 1][c].mean + np.sqrt(table.cache[m][d - 1][c].var) * draws.eps[m][c]
                 for c in range(C)]
            intra, cross, _ = _modality_terms(tower, z, xs[m], draws.noise[m], draws.sub, cfg_p1.alpha,
                                              use_cross, cfg_p1.residual_decoder, 0.0, 0.0, False)
            dim = tower.in_dim
            if qcfg.reward_scale == "entry_mean":
                per = intra / (np.array(sizes) * dim)
                if C > 1:
                    per = per + cross.sum(axis=1) / ((C - 1) * n_min * dim)
            else:
                per = intra + (cross.sum(axis=1) / (C - 1) if C > 1 else 0.0)
            if qcfg.reward_scope == "global":
                per = np.full(C, per.mean())
            rewards[m, :, d - 1] = np.exp(-per)
    return rewards


def bellman_targets(policy, m, d, actions, rewards_exit, next_states, gamma, D, rewards_final):
    """Targets for transitions taken at layer d: r for exit, gamma * max Q(s') for continue.

    At layer D-1 the continue action leads to the forced exit at D, so its
    target is ``gamma * rewards_final``.
    """
    t = np.array(rewards_exit, dtype=np.float64)
    cont = actions == CONTINUE
    if np.any(cont):
        if d + 1 == D:
            t[cont] = gamma * rewards_final[cont]
        else:
            t[cont] = gamma * policy.q_values(m, d + 1, next_states[cont]).max(axis=1)
    return t


@dataclass
class QResult:
    depths: np.ndarray
    rewards: np.ndarray
    losses: list


def qlearn_train(towers, policy, train, table, cfg_p1, qcfg, seed, use_cross=True) -> QResult:
    """Epsilon-greedy episodes over the layers; one squared-Bellman Adam step per
    episode batch and layer; then per-class exit depths from the greedy policy on
    the class-mean latents. ``table`` is refitted in place at the chosen depths."""
    M, C, D = len(towers), train.num_classes, towers[0].depth
    rewards = class_rewards(towers, train, table, cfg_p1, qcfg, seed, use_cross)
    losses = []
    depths = np.full((M, C), D, dtype=np.int64)
    if D > 1:
        n = train.n_samples
        n_batches_per_epoch = max(1, n // qcfg.batch_size)
        total = max(1, qcfg.epochs * n_batches_per_epoch)
        for m, tower in enumerate(towers):
            states, _ = tower.forward_all(train.features[m])
            rng = rng_stream(seed, "explore", m)
            step = 0
            every = qcfg.lr_decay_every if qcfg.lr_decay_every > 0 else max(1, qcfg.epochs // 2)
            for epoch in range(qcfg.epochs):
                lr = qcfg.lr * qcfg.lr_decay ** (epoch // every)
                perm = rng.permutation(n)
                for b in range(n_batches_per_epoch):
                    frac = step / max(1, total - 1)
                    eps = qcfg.eps_start + (qcfg.eps_end - qcfg.eps_start) * frac
                    idx = perm[b * qcfg.batch_size:(b + 1) * qcfg.batch_size]
                    y = train.labels[idx]
                    transitions = []
                    open_ = np.ones(idx.size, dtype=bool)
                    for d in range(1, D):
                        s = states[d - 1][idx]
                        greedy = np.where(greedy_exit(policy.q_values(m, d, s)), EXIT, CONTINUE)
                        explore = rng.random(idx.size) < eps
                        rand = rng.integers(0, 2, size=idx.size)
                        act = np.where(explore, rand, greedy)
                        rows = np.flatnonzero(open_)
                        transitions.append((d, rows, act[rows]))
                        open_ &= act != EXIT
                        if not np.any(open_):
                            break
                    batch_loss = 0.0
                    updates = []
                    for d, rows, act in transitions:
                        s = states[d - 1][idx[rows]]
                        nxt = states[d][idx[rows]]
                        r_exit = np.where(act == EXIT, rewards[m, y[rows], d - 1], 0.0)
                        tgt = bellman_targets(policy, m, d, act, r_exit, nxt, qcfg.gamma, D,
                                              rewards[m, y[rows], D - 1])
                        updates.append((d, s, act, tgt))
                    for d, s, act, tgt in updates:
                        head = policy.heads[m][d - 1]
                        q = head(s)
                        err = q[np.arange(len(act)), act] - tgt
                        batch_loss += float(np.mean(err ** 2))
                        dq = np.zeros_like(q)
                        dq[np.arange(len(act)), act] = 2.0 * err / len(act)
                        head.w.zero_grad()
                        head.b.zero_grad()
                        head.backward(s, dq, need_dx=False)
                        adam_step(head.w, lr)
                        adam_step(head.b, lr)
                    losses.append(batch_loss)
                    step += 1
            for c in range(C):
                for d in range(1, D):
                    mean_lat = states[d - 1][train.labels == c].mean(axis=0)
                    if greedy_exit(policy.q_values(m, d, mean_lat))[0]:
                        depths[m, c] = d
                        break
    table.depths = depths
    table.dists = [[table.cache[m][depths[m, c] - 1][c] for c in range(C)] for m in range(M)]
    return QResult(depths, rewards, losses)


def new_policy(towers, seed):
    return ExitPolicy(len(towers), towers[0].depth, towers[0].latent_dim,
                      lambda m: rng_stream(seed, "init", 100 + m))
