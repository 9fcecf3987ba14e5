"""Experiment configuration: one JSON document, fully defaulted."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ValidationError


@dataclass
class ModelConfig:
    depth: int = 5
    width: int = 128
    latent_dim: int = 128
    decoder_hidden: int = 256
    transform_hidden: int = 512


@dataclass
class Phase1Config:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_decay: float = 0.2
    lr_decay_every: int = 0          # epochs between decays; 0 = once, at the midpoint
    alpha: float = 0.1               # residual noise scale
    cache_every: int = 5             # per-depth class distribution refresh period (epochs)
    cad_depths: str = "all"          # "final": L*_CAD on the last layer only; "all": plus mean over earlier exits
    residual_decoder: bool = True    # pass residuals through the transform decoder before cross-class comparison


@dataclass
class QLearnConfig:
    epochs: int = 800
    batch_size: int = 32
    gamma: float = 0.9
    eps_start: float = 0.9
    eps_end: float = 0.05
    lr: float = 1e-3
    lr_decay: float = 0.2
    lr_decay_every: int = 0          # 0 = once, at the midpoint
    reward_scope: str = "class"      # "class" or "global"
    reward_scale: str = "entry_mean"  # "entry_mean" or "raw"


@dataclass
class SadConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_decay: float = 0.2
    lr_decay_every: int = 0
    ridge: float = 1e-3
    gate_eps: float = 1e-6
    gate_mode: str = "multiplicative"  # or "additive" (inside the softmax, as printed)
    rotate_back: bool = True           # map the reweighted projection back through U
    reweight: str = "normal"           # "normal", "none", "negative"
    freeze_cad: bool = True
    prior_refresh_every: int = 5       # only used when freeze_cad is False


@dataclass
class NoiseConfig:
    kind: str = "gaussian"
    sigma: float = 0.0
    fraction: float = 0.5
    target_modalities: list | None = None
    apply_to: str = "both"           # "both" (train and test) or "test"
    shared_selection: bool = False


@dataclass
class AblationToggles:
    de: bool = True
    rccr: bool = True
    cfmp: bool = True
    cmr: bool = True

    def label(self):
        off = [k.upper() for k in ("de", "rccr", "cfmp", "cmr") if not getattr(self, k)]
        return "full" if not off else "no-" + "-".join(off)


@dataclass
class SplitConfig:
    train_frac: float = 0.6
    val_frac: float = 0.2


@dataclass
class SweepConfig:
    sigmas: list = field(default_factory=lambda: [0.0, 5.0, 10.0])
    kinds: list = field(default_factory=lambda: ["gaussian"])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    variants: list = field(default_factory=lambda: [
        {}, {"de": False}, {"rccr": False}, {"cfmp": False}, {"cmr": False}])
    reweights: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: {"synth": {}})
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    qlearn: QLearnConfig = field(default_factory=QLearnConfig)
    sad: SadConfig = field(default_factory=SadConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    ablation: AblationToggles = field(default_factory=AblationToggles)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self):
        if self.model.depth < 1:
            raise ValidationError("tower depth must be >= 1")
        if self.phase1.cad_depths not in ("final", "all"):
            raise ValidationError("phase1.cad_depths must be 'final' or 'all'")
        if self.qlearn.reward_scope not in ("class", "global"):
            raise ValidationError("qlearn.reward_scope must be 'class' or 'global'")
        if self.qlearn.reward_scale not in ("entry_mean", "raw"):
            raise ValidationError("qlearn.reward_scale must be 'entry_mean' or 'raw'")
        if self.sad.gate_mode not in ("multiplicative", "additive"):
            raise ValidationError("sad.gate_mode must be 'multiplicative' or 'additive'")
        if self.sad.reweight not in ("normal", "none", "negative"):
            raise ValidationError("sad.reweight must be 'normal', 'none' or 'negative'")
        if self.noise.apply_to not in ("both", "test"):
            raise ValidationError("noise.apply_to must be 'both' or 'test'")
        if ("synth" in self.data) == ("manifest" in self.data):
            raise ValidationError("data needs exactly one of 'synth' or 'manifest'")
        return self

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **sections):
        """Deep copy with sections overridden by partial dicts, e.g. ``replace(ablation={"de": False})``."""
        doc = self.to_dict()
        for key, val in sections.items():
            if isinstance(val, dict) and isinstance(doc.get(key), dict) and key != "data":
                doc[key] = {**doc[key], **val}
            else:
                doc[key] = copy.deepcopy(val)
        return from_dict(doc)


def _build(cls, doc, path):
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expected an object")
    names = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(names)
    if unknown:
        raise ValidationError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, f in names.items():
        if name not in doc:
            continue
        sub = getattr(defaults, name)
        kwargs[name] = _build(type(sub), doc[name], f"{path}.{name}") if is_dataclass(sub) else doc[name]
    return cls(**kwargs)


def from_dict(doc) -> ExperimentConfig:
    return _build(ExperimentConfig, doc, "config").validate()


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(doc)
