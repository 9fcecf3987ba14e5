"""Multimodal datasets: CSV ingestion, synthetic generation, noise injection, splitting."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ValidationError
from .numerics import box_muller, rng_stream


@dataclass
class MultimodalDataset:
    modality_names: list
    features: list
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = [np.ascontiguousarray(np.asarray(f, dtype=np.float64)) for f in self.features]
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        self.modality_names = [str(n) for n in self.modality_names]
        if len(self.features) != len(self.modality_names):
            raise ValidationError("one feature matrix per modality name required")
        n = self.labels.shape[0]
        for name, f in zip(self.modality_names, self.features):
            if f.ndim != 2:
                raise DimensionError(f"modality {name!r} features must be 2-D")
            if f.shape[0] != n:
                raise ValidationError(f"row-count mismatch: modality {name!r} has {f.shape[0]} rows, labels {n}")
            if not np.all(np.isfinite(f)):
                raise ValidationError(f"non-finite feature in modality {name!r}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"label outside 0..{self.num_classes - 1}")

    @property
    def n_samples(self):
        return int(self.labels.shape[0])

    @property
    def n_modalities(self):
        return len(self.features)

    @property
    def dims(self):
        return [f.shape[1] for f in self.features]

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def validate(self, min_per_class=2):
        counts = self.class_counts()
        if np.any(counts < min_per_class):
            bad = [int(c) for c in np.flatnonzero(counts < min_per_class)]
            raise ValidationError(f"classes {bad} have fewer than {min_per_class} samples")
        return self

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return MultimodalDataset(self.modality_names, [f[idx] for f in self.features],
                                 self.labels[idx], self.num_classes, dict(self.meta))

    def with_features(self, features):
        return MultimodalDataset(self.modality_names, features, self.labels.copy(),
                                 self.num_classes, dict(self.meta))

    def modality_index(self, key):
        if isinstance(key, (int, np.integer)):
            if not 0 <= key < self.n_modalities:
                raise ValidationError(f"modality index {key} out of range")
            return int(key)
        try:
            return self.modality_names.index(str(key))
        except ValueError:
            raise ValidationError(f"unknown modality {key!r}") from None


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    means: list
    stds: list

    @classmethod
    def fit(cls, ds: MultimodalDataset):
        means, stds = [], []
        for f in ds.features:
            mu = f.mean(axis=0)
            sd = f.std(axis=0)
            means.append(mu)
            stds.append(np.where(sd > 1e-12, sd, 1.0))
        return cls(means, stds)

    def apply(self, ds: MultimodalDataset) -> MultimodalDataset:
        feats = [(f - mu) / sd for f, mu, sd in zip(ds.features, self.means, self.stds)]
        return ds.with_features(feats)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _read_csv_matrix(path: Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: non-numeric cell") from None
    if not rows:
        raise ValidationError(f"{path}: empty file")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValidationError(f"{path}: ragged rows")
    return np.array(rows, dtype=np.float64)


def _write_csv_matrix(path: Path, a: np.ndarray):
    a = np.atleast_2d(a)
    with open(path, "w", newline="") as fh:
        for row in a:
            fh.write(",".join(format(float(v), ".17g") for v in row))
            fh.write("\n")


def load_dataset(manifest_path) -> MultimodalDataset:
    """Read a manifest JSON listing one CSV per modality plus a labels CSV.

    Manifest layout::

        {"modalities": [{"name": "mRNA", "path": "mRNA.csv"}, ...],
         "labels": "labels.csv", "num_classes": 5}

    Relative paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{manifest_path}: invalid JSON ({exc})") from None
    base = manifest_path.parent
    mods = doc.get("modalities")
    if not mods or "labels" not in doc or "num_classes" not in doc:
        raise ValidationError(f"{manifest_path}: needs 'modalities', 'labels', 'num_classes'")
    if isinstance(mods, dict):
        mods = [{"name": k, "path": v} for k, v in mods.items()]
    names = [m["name"] for m in mods]
    feats = [_read_csv_matrix(base / m["path"]) for m in mods]
    lab = _read_csv_matrix(base / doc["labels"])
    if lab.shape[1] != 1:
        raise ValidationError("labels CSV must have exactly one column")
    if np.any(lab != np.round(lab)):
        raise ValidationError("labels must be integers")
    labels = lab[:, 0].astype(np.int64)
    c = int(doc["num_classes"])
    if labels.size and labels.max() >= c:
        raise ValidationError(f"label {labels.max()} >= declared num_classes {c}")
    ds = MultimodalDataset(names, feats, labels, c, {"source": str(manifest_path)})
    return ds.validate()


def save_dataset(ds: MultimodalDataset, out_dir, stem="") -> Path:
    """Write CSVs and a manifest loadable by :func:`load_dataset`; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mods = []
    for name, f in zip(ds.modality_names, ds.features):
        fname = f"{stem}{name}.csv"
        _write_csv_matrix(out / fname, f)
        mods.append({"name": name, "path": fname})
    _write_csv_matrix(out / f"{stem}labels.csv", ds.labels.reshape(-1, 1))
    manifest = {"modalities": mods, "labels": f"{stem}labels.csv", "num_classes": ds.num_classes}
    path = out / f"{stem}manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    num_classes: int = 4
    num_modalities: int = 2
    dims: list = field(default_factory=lambda: [16, 16])
    samples_per_class: int | list = 100
    confusion_pairs: list = field(default_factory=list)
    depth_profile: list | None = None
    displacement_fraction: float = 0.0
    displacement_strength: float = 0.5
    class_sep: float = 4.0
    within_std: float | list = 1.0
    max_depth: int = 5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.dims, int):
            self.dims = [self.dims] * self.num_modalities
        self.dims = [int(d) for d in self.dims]
        self.confusion_pairs = [tuple(p) for p in self.confusion_pairs]
        if self.depth_profile is None:
            self.depth_profile = [1] * self.num_classes

    def validate(self):
        c = self.num_classes
        if c < 2 or self.num_modalities < 1:
            raise ValidationError("need at least 2 classes and 1 modality")
        if len(self.dims) != self.num_modalities or min(self.dims) < 1:
            raise ValidationError("one positive dim per modality required")
        for a, b, s in self.confusion_pairs:
            if not (0 <= a < c and 0 <= b < c and a != b):
                raise ValidationError(f"bad confusion pair ({a}, {b})")
            if not 0.0 <= s <= 1.0:
                raise ValidationError("overlap strength must lie in [0, 1]")
        if len(self.depth_profile) != c:
            raise ValidationError("depth_profile needs one entry per class")
        if any(not 1 <= k <= self.max_depth for k in self.depth_profile):
            raise ValidationError(f"depth_profile entries must lie in [1, {self.max_depth}]")
        if not 0.0 <= self.displacement_fraction <= 1.0:
            raise ValidationError("displacement_fraction must lie in [0, 1]")
        counts = self.class_sizes()
        if min(counts) < 2:
            raise ValidationError("every class needs at least 2 samples")
        return self

    def class_sizes(self):
        spc = self.samples_per_class
        return [int(spc)] * self.num_classes if np.isscalar(spc) else [int(s) for s in spc]

    def within_stds(self):
        w = self.within_std
        return [float(w)] * self.num_modalities if np.isscalar(w) else [float(v) for v in w]

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ValidationError("a SynthSpec document must be an object")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown SynthSpec keys {sorted(unknown)}")
        try:
            return cls(**doc).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"invalid SynthSpec: {exc}") from None

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _nearest_partner(means, c):
    dist = np.linalg.norm(means - means[c], axis=1)
    dist[c] = np.inf
    p = int(np.argmin(dist))
    return p, float(dist[p])


def synth_parameters(spec: SynthSpec):
    """Generating class means per modality (after confusion blending)."""
    spec.validate()
    params = []
    for m, d in enumerate(spec.dims):
        rng = rng_stream(spec.seed, "synth-means", m)
        g = box_muller(rng, (spec.num_classes, d))
        means = spec.class_sep * g / np.linalg.norm(g, axis=1, keepdims=True)
        for a, b, s in spec.confusion_pairs:
            shared = box_muller(rng, d)
            shared = spec.class_sep * shared / np.linalg.norm(shared)
            means[a] = (1.0 - s) * means[a] + s * shared
            means[b] = (1.0 - s) * means[b] + s * shared
        params.append({"means": means})
    return params


def synth_generate(spec: SynthSpec) -> MultimodalDataset:
    """Draw a labelled multimodal dataset with controllable confusion.

    Every class is Gaussian around its class mean. Confusion pairs blend a shared
    direction into both means. A class with depth k > 1 is split along the line
    towards its nearest neighbouring class into 2**(k-1) modes spaced by the
    distance between the two means, so the neighbour sits between the class's
    own modes and separating them needs k-1 piecewise-linear folds. A displaced
    fraction of samples is pulled toward another class's mean, independently
    per modality.
    """
    spec.validate()
    params = synth_parameters(spec)
    sizes = spec.class_sizes()
    labels = np.repeat(np.arange(spec.num_classes), sizes)
    n = labels.shape[0]
    stds = spec.within_stds()
    feats = []
    for m, d in enumerate(spec.dims):
        means = params[m]["means"]
        rng = rng_stream(spec.seed, "synth-samples", m)
        x = means[labels] + stds[m] * box_muller(rng, (n, d))
        for c, k in enumerate(spec.depth_profile):
            if k <= 1:
                continue
            rows = np.flatnonzero(labels == c)
            p, gap = _nearest_partner(means, c)
            if gap < 1e-9:
                continue
            w = (means[p] - means[c]) / gap
            t = (x[rows] - means[c]) @ w
            modes = 2 ** (k - 1)
            j = rng.integers(0, modes, size=rows.size)
            t_new = gap * (j - (modes - 1) / 2.0) + 0.25 * t
            x[rows] += np.outer(t_new - t, w)
        if spec.displacement_fraction > 0.0:
            drng = rng_stream(spec.seed, "synth-displace", m)
            k = int(math.floor(spec.displacement_fraction * n))
            chosen = drng.permutation(n)[:k]
            shift = drng.integers(1, spec.num_classes, size=k)
            other = (labels[chosen] + shift) % spec.num_classes
            x[chosen] += spec.displacement_strength * (means[other] - means[labels[chosen]])
        feats.append(x)
    names = [f"m{m}" for m in range(spec.num_modalities)]
    return MultimodalDataset(names, feats, labels, spec.num_classes,
                             {"synth": spec.to_dict()}).validate()


def pairwise_bayes_accuracy(spec: SynthSpec, a: int, b: int) -> float:
    """Closed-form Bayes accuracy between two depth-1 classes with equal priors.

    Both classes are isotropic Gaussians with a shared per-modality std, so the
    optimal rule is linear and its accuracy is Phi(delta / 2) with delta the
    Mahalanobis distance between the stacked class means.
    """
    params = synth_parameters(spec)
    stds = spec.within_stds()
    delta2 = sum(np.sum((p["means"][a] - p["means"][b]) ** 2) / s ** 2 for p, s in zip(params, stds))
    return 0.5 * (1.0 + math.erf(math.sqrt(delta2) / 2.0 / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# noise injection
# ---------------------------------------------------------------------------

@dataclass
class NoiseSpec:
    kind: str = "gaussian"
    sigma: float = 0.0
    fraction: float = 0.5
    target_modalities: list | None = None
    seed_stream: str = "noise"
    shared_selection: bool = False

    def validate(self):
        if self.kind not in ("gaussian", "salt_pepper"):
            raise ValidationError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0.0:
            raise ValidationError("noise sigma must be >= 0")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValidationError("noise fraction must lie in [0, 1]")
        return self


def affected_indices(n: int, spec: NoiseSpec, seed: int, modality: int) -> np.ndarray:
    """Seeded permutation prefix of length floor(fraction * n) for one modality."""
    key = 0 if spec.shared_selection else modality
    perm = rng_stream(seed, spec.seed_stream + "-select", key).permutation(n)
    return np.sort(perm[: int(math.floor(spec.fraction * n))])


def salt_pepper_probability(sigma: float) -> float:
    return min(sigma / 20.0, 0.5)


def inject_noise(ds: MultimodalDataset, spec: NoiseSpec, seed: int = 0,
                 bounds: list | None = None) -> MultimodalDataset:
    """Return a corrupted copy of ``ds``; unaffected samples are untouched.

    ``bounds`` gives per-modality ``(min, max)`` feature vectors for salt-pepper
    replacement values (normally from the training split); defaults to ``ds``'s own.
    """
    spec.validate()
    targets = range(ds.n_modalities) if spec.target_modalities is None else \
        [ds.modality_index(t) for t in spec.target_modalities]
    feats = [f.copy() for f in ds.features]
    if spec.sigma == 0.0:
        return ds.with_features(feats)
    n = ds.n_samples
    for m in targets:
        idx = affected_indices(n, spec, seed, m)
        if idx.size == 0:
            continue
        d = feats[m].shape[1]
        rng = rng_stream(seed, spec.seed_stream, m)
        if spec.kind == "gaussian":
            feats[m][idx] += spec.sigma * box_muller(rng, (idx.size, d))
        else:
            lo, hi = bounds[m] if bounds is not None else (ds.features[m].min(axis=0), ds.features[m].max(axis=0))
            p = salt_pepper_probability(spec.sigma)
            hit = rng.random((idx.size, d)) < p
            pick_hi = rng.random((idx.size, d)) < 0.5
            block = feats[m][idx]
            block[hit] = np.where(pick_hi, np.broadcast_to(hi, block.shape), np.broadcast_to(lo, block.shape))[hit]
            feats[m][idx] = block
    return ds.with_features(feats)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def stratified_split_indices(labels, num_classes, train_frac, val_frac, seed):
    if not (0.0 < train_frac < 1.0 and 0.0 <= val_frac < 1.0 and train_frac + val_frac < 1.0):
        raise ValidationError("need 0 < train_frac, 0 <= val_frac, train_frac + val_frac < 1")
    rng = rng_stream(seed, "split")
    parts = ([], [], [])
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_tr = int(math.floor(idx.size * train_frac))
        n_va = int(math.floor(idx.size * val_frac))
        n_te = idx.size - n_tr - n_va
        if n_tr < 2 or (val_frac > 0 and n_va < 1) or n_te < 1:
            raise ValidationError(f"class {c} has too few samples ({idx.size}) for the requested split")
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr:n_tr + n_va])
        parts[2].append(idx[n_tr + n_va:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def stratified_split(ds: MultimodalDataset, train_frac: float, val_frac: float, seed: int):
    tr, va, te = stratified_split_indices(ds.labels, ds.num_classes, train_frac, val_frac, seed)
    return ds.subset(tr), ds.subset(va), ds.subset(te)
