"""Staged MLAD training and inference: phase 1, exit policy, priors, phase 2."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cad, sad
from .config import ExperimentConfig
from .data import MultimodalDataset, NoiseSpec, Normalizer, inject_noise, load_dataset, stratified_split, \
    SynthSpec, synth_generate
from .errors import NumericalError, ValidationError
from .numerics import adam_step, rng_stream, softmax_rows

STAGES = ("phase1", "qlearn", "priors", "phase2")


@dataclass
class MladModel:
    config: ExperimentConfig
    towers: list
    policy: cad.ExitPolicy
    table: cad.ClassLatentTable | None = None
    splits: list = field(default_factory=list)
    priors: list = field(default_factory=list)
    rectifier: sad.Rectifier | None = None
    head: sad.ClassifierHead | None = None
    stages: dict = field(default_factory=lambda: {s: False for s in STAGES})
    history: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return self.towers[0].num_classes

    @property
    def num_modalities(self):
        return len(self.towers)

    @property
    def toggles(self):
        return self.config.ablation

    def rectify_options(self):
        return sad.RectifyOptions.from_config(self.config.sad, self.toggles)

    def require(self, stage):
        done = [s for s in STAGES if self.stages[s]]
        need = STAGES[:STAGES.index(stage)]
        missing = [s for s in need if not self.stages[s]]
        if missing:
            raise ValidationError(f"stage {stage!r} requires {missing} first (completed: {done})")


def new_model(cfg: ExperimentConfig, dims, num_classes) -> MladModel:
    seed = cfg.seed
    towers = cad.build_towers(dims, num_classes, cfg.model, seed)
    M, k = len(dims), cfg.model.latent_dim
    return MladModel(cfg, towers, cad.new_policy(towers, seed),
                     rectifier=sad.new_rectifier(M, k, seed),
                     head=sad.new_head(M, k, num_classes, seed))


# ---------------------------------------------------------------------------
# encodings
# ---------------------------------------------------------------------------

@dataclass
class Encoded:
    depths: np.ndarray     # (N, M)
    z: list                # per modality (N, k)
    entropies: np.ndarray  # (N, M)
    gates: np.ndarray      # (N, M, M)


def encode(model: MladModel, features) -> Encoded:
    """Exit depths, latents, posterior entropies and gates for a batch of samples."""
    force = not model.toggles.de
    depths, zs, hs = [], [], []
    for m, tower in enumerate(model.towers):
        d, z = cad.choose_exit_batch(tower, model.policy, m, features[m], force_final=force)
        depths.append(d)
        zs.append(z)
        hs.append(sad.posterior_entropy(z, model.table, m))
    h = np.stack(hs, axis=1)
    gates = sad.entropy_gates(h, model.config.sad.gate_eps) if len(zs) > 1 else np.ones((len(h), 1, 1))
    return Encoded(np.stack(depths, axis=1), zs, h, gates)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def train_phase1(model: MladModel, train: MultimodalDataset, log=None):
    cfg = model.config
    res = cad.phase1_train(model.towers, train, cfg.phase1, cfg.seed, use_cross=cfg.ablation.rccr, log=log)
    model.table = res.table
    model.history["phase1"] = res.losses
    model.stages["phase1"] = True
    for s in STAGES[1:]:
        model.stages[s] = False


def train_qlearn(model: MladModel, train: MultimodalDataset, log=None):
    model.require("qlearn")
    cfg = model.config
    if cfg.ablation.de:
        res = cad.qlearn_train(model.towers, model.policy, train, model.table, cfg.phase1, cfg.qlearn,
                               cfg.seed, use_cross=cfg.ablation.rccr)
        model.history["qlearn"] = res.losses
        model.history["rewards"] = res.rewards.tolist()
    else:
        D = model.towers[0].depth
        model.table.depths = np.full((model.num_modalities, model.num_classes), D, dtype=np.int64)
        model.table.dists = [[model.table.cache[m][D - 1][c] for c in range(model.num_classes)]
                             for m in range(model.num_modalities)]
        model.history["qlearn"] = []
    if log:
        log(f"exit depths {model.table.depths.tolist()}")
    model.stages["qlearn"] = True
    model.stages["priors"] = model.stages["phase2"] = False


def fit_priors(model: MladModel, enc: Encoded):
    cfg = model.config.sad
    splits, priors = [], []
    for m in range(model.num_modalities):
        h = enc.entropies[:, m]
        split = sad.fit_entropy_gmm(h)
        sl = sad.low_confusion_support(h, split)
        splits.append(split)
        priors.append(sad.fit_prior(enc.z[m][sl], h[sl], cfg.ridge))
    return splits, priors


def train_priors(model: MladModel, train: MultimodalDataset, log=None):
    model.require("priors")
    enc = encode(model, train.features)
    model.splits, model.priors = fit_priors(model, enc)
    if log:
        log("priors " + ", ".join(f"m{m}: |S_l|={p.support_count} H_th={s.threshold:.4g}"
                                  for m, (s, p) in enumerate(zip(model.splits, model.priors))))
    model.stages["priors"] = True
    model.stages["phase2"] = False


def _joint_phase2(model: MladModel, train: MultimodalDataset, opts, log=None):
    """Phase 2 with the encoders fine-tuned through the chosen exits; entropies,
    gates and priors are held fixed within a batch and refreshed every K epochs."""
    cfg = model.config
    scfg = cfg.sad
    use_rect = cfg.ablation.cmr
    enc_params = [p for t in model.towers for p in t.encoder_params()]
    params = (model.rectifier.params() if use_rect else []) + model.head.params() + enc_params
    rng = rng_stream(cfg.seed, "batch", 2)
    n = train.n_samples
    bs = max(1, min(scfg.batch_size, n))
    losses = []
    for epoch in range(scfg.epochs):
        if epoch > 0 and scfg.prior_refresh_every > 0 and epoch % scfg.prior_refresh_every == 0:
            model.table = cad.ClassLatentTable.from_cache(cad.fit_depth_cache(model.towers, train),
                                                          train.labels, model.num_classes, model.table.depths)
            model.splits, model.priors = fit_priors(model, encode(model, train.features))
        lr = sad.lr_at(epoch, scfg.epochs, scfg.lr, scfg.lr_decay, scfg.lr_decay_every)
        perm = rng.permutation(n)
        ep = []
        for start in range(0, n, bs):
            idx = np.sort(perm[start:start + bs])
            feats = [f[idx] for f in train.features]
            enc = encode(model, feats)
            for p in params:
                p.zero_grad()
            loss, _, dz = sad.total_loss(enc.z, enc.gates, train.labels[idx], model.priors, model.rectifier,
                                         model.head, opts, use_rect, need_dz=True)
            if not math.isfinite(loss):
                raise NumericalError(f"phase-2 loss became non-finite at epoch {epoch + 1}")
            for m, tower in enumerate(model.towers):
                lat, cache = tower.forward_all(feats[m])
                dl = [None] * tower.depth
                for d in range(1, tower.depth + 1):
                    rows = enc.depths[:, m] == d
                    if np.any(rows):
                        g = np.zeros_like(lat[d - 1])
                        g[rows] = dz[m][rows]
                        dl[d - 1] = g
                tower.backward_all(cache, dl)
            for p in params:
                adam_step(p, lr, scfg.weight_decay)
            ep.append(loss)
        losses.append(float(np.mean(ep)))
        if log:
            log(f"phase2 epoch {epoch + 1}/{scfg.epochs} loss {losses[-1]:.6f}")
    return losses


def train_phase2(model: MladModel, train: MultimodalDataset, log=None):
    model.require("phase2")
    cfg = model.config
    opts = model.rectify_options()
    if cfg.sad.freeze_cad:
        enc = encode(model, train.features)
        losses = sad.phase2_train(enc.z, enc.gates, train.labels, model.num_classes, model.priors,
                                  model.rectifier, model.head, cfg.sad, cfg.seed, opts,
                                  use_rectifier=cfg.ablation.cmr, log=log)
    else:
        losses = _joint_phase2(model, train, opts, log)
    model.history["phase2"] = losses
    model.stages["phase2"] = True


STAGE_FUNCS = {"phase1": train_phase1, "qlearn": train_qlearn, "priors": train_priors, "phase2": train_phase2}


def train_all(cfg: ExperimentConfig, train: MultimodalDataset, log=None) -> MladModel:
    model = new_model(cfg, train.dims, train.num_classes)
    for s in STAGES:
        STAGE_FUNCS[s](model, train, log)
    return model


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    labels: np.ndarray
    probs: np.ndarray
    logits: np.ndarray
    depths: np.ndarray
    entropies: np.ndarray
    gates: np.ndarray
    latents: list
    rectified: list
    attention: dict = field(default_factory=dict)   # sample index -> {(m, m'): map}


def predict_batch(model: MladModel, features, chunk=128, attention_for=()) -> Prediction:
    """Class predictions plus diagnostics for every row of ``features``."""
    if not model.stages["phase2"]:
        raise ValidationError("prediction needs a model with all stages trained")
    opts = model.rectify_options()
    enc = encode(model, features)
    n = enc.z[0].shape[0]
    use_rect = model.toggles.cmr and model.num_modalities > 1
    z_hat = [np.empty_like(z) for z in enc.z]
    attention = {}
    want = set(int(i) for i in attention_for)
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        zb = [z[sl] for z in enc.z]
        if use_rect:
            zh, cache = sad.rectify_batch(zb, enc.gates[sl], model.priors, model.rectifier, opts)
            for i in range(sl.start, sl.stop):
                if i in want:
                    attention[i] = {key: a[i - sl.start].copy() for key, (_, _, a) in cache.kv.items()}
        else:
            zh = zb
        for m in range(model.num_modalities):
            z_hat[m][sl] = zh[m]
    logits = model.head(z_hat)
    probs = softmax_rows(logits)
    return Prediction(np.argmax(logits, axis=1), probs, logits, enc.depths, enc.entropies, enc.gates,
                      enc.z, z_hat, attention)


def predict(model: MladModel, sample):
    """One multimodal sample (list of feature vectors) -> (class, logits, diagnostics)."""
    feats = [np.asarray(x, dtype=np.float64).reshape(1, -1) for x in sample]
    p = predict_batch(model, feats, attention_for=(0,))
    diag = {"depths": p.depths[0].tolist(), "entropies": p.entropies[0].tolist(),
            "gates": p.gates[0].tolist(),
            "attention": {f"{a}<-{b}": v.tolist() for (a, b), v in p.attention.get(0, {}).items()}}
    return int(p.labels[0]), p.logits[0], diag


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    train: MultimodalDataset
    val: MultimodalDataset
    test: MultimodalDataset
    normalizer: Normalizer
    raw_train: MultimodalDataset
    raw_test: MultimodalDataset


def source_dataset(cfg: ExperimentConfig) -> MultimodalDataset:
    if "manifest" in cfg.data:
        return load_dataset(cfg.data["manifest"])
    return synth_generate(SynthSpec.from_dict(cfg.data["synth"]))


def noise_spec(cfg: ExperimentConfig, sigma=None, kind=None) -> NoiseSpec:
    n = cfg.noise
    return NoiseSpec(kind=kind or n.kind, sigma=n.sigma if sigma is None else sigma, fraction=n.fraction,
                     target_modalities=n.target_modalities, shared_selection=n.shared_selection).validate()


def prepare(cfg: ExperimentConfig, ds: MultimodalDataset | None = None, sigma=None, kind=None,
            split_seed=None) -> PreparedData:
    """Split, corrupt in raw space (train+test or test only), then z-score with
    statistics of the clean training split."""
    ds = source_dataset(cfg) if ds is None else ds
    seed = cfg.seed if split_seed is None else split_seed
    train, val, test = stratified_split(ds, cfg.split.train_frac, cfg.split.val_frac, seed)
    norm = Normalizer.fit(train)
    spec = noise_spec(cfg, sigma, kind)
    bounds = [(f.min(axis=0), f.max(axis=0)) for f in train.features]
    noisy_test = inject_noise(test, spec, seed, bounds)
    noisy_val = inject_noise(val, spec, seed + 1, bounds) if val.n_samples else val
    noisy_train = inject_noise(train, spec, seed + 2, bounds) if cfg.noise.apply_to == "both" else train
    return PreparedData(norm.apply(noisy_train), norm.apply(noisy_val), norm.apply(noisy_test), norm,
                        noisy_train, noisy_test)
