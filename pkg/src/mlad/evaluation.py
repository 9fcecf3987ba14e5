"""Metrics, noise sweeps and the ablation harness."""
from __future__ import annotations

import copy
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ExperimentConfig
from .errors import ValidationError


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    accuracy: float
    weighted_f1: float
    macro_f1: float
    per_class_f1: list
    confusion_matrix: list
    support: list
    auc: float | None = None
    macro_f1_zero_support: str = "excluded"

    def to_dict(self):
        return asdict(self)


def confusion_matrix(preds, labels, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def binary_auc(scores, labels):
    """Rank-statistic AUC with midranks for ties (positive class = 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(preds, scores, labels, num_classes) -> MetricReport:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValidationError("preds and labels differ in length")
    if scores is not None and len(scores) != len(labels):
        raise ValidationError("scores and labels differ in length")
    cm = confusion_matrix(preds, labels, num_classes)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm).astype(np.float64)
    f1 = np.zeros(num_classes)
    denom = support + predicted
    f1[denom > 0] = 2.0 * tp[denom > 0] / denom[denom > 0]
    present = support > 0
    n = labels.size
    report = MetricReport(
        accuracy=float(tp.sum() / n) if n else 0.0,
        weighted_f1=float(np.sum(f1 * support) / n) if n else 0.0,
        macro_f1=float(f1[present].mean()) if np.any(present) else 0.0,
        per_class_f1=f1.tolist(),
        confusion_matrix=cm.tolist(),
        support=support.tolist(),
    )
    if num_classes == 2 and scores is not None:
        s = np.asarray(scores, dtype=np.float64)
        report.auc = binary_auc(s[:, 1] if s.ndim == 2 else s, labels)
    return report


# ---------------------------------------------------------------------------
# shared-stage training
# ---------------------------------------------------------------------------

def _stage_keys(cfg: ExperimentConfig):
    """Cache keys per stage: a stage's result depends only on these config parts."""
    d = cfg.to_dict()
    base = {k: d[k] for k in ("data", "split", "model", "noise", "seed")}
    k1 = {**base, "phase1": d["phase1"], "rccr": d["ablation"]["rccr"]}
    k2 = {**k1, "qlearn": d["qlearn"], "de": d["ablation"]["de"]}
    k3 = {**k2, "ridge": d["sad"]["ridge"], "gate_eps": d["sad"]["gate_eps"]}
    k4 = {**k3, "sad": d["sad"], "ablation": d["ablation"]}
    return [json.dumps(k, sort_keys=True) for k in (k1, k2, k3, k4)]


class StageCache:
    """Reuses trained stage prefixes across variants whose configs agree on them.

    Every stage is deterministic given its config, so reuse is exact.
    """

    def __init__(self):
        self.models = {}

    def train(self, cfg: ExperimentConfig, train, log=None) -> pipeline.MladModel:
        keys = _stage_keys(cfg)
        model, start = None, 0
        for i in range(len(keys) - 1, -1, -1):
            if keys[i] in self.models:
                model = copy.deepcopy(self.models[keys[i]])
                model.config = cfg
                start = i + 1
                break
        if model is None:
            model = pipeline.new_model(cfg, train.dims, train.num_classes)
        for i in range(start, len(pipeline.STAGES)):
            pipeline.STAGE_FUNCS[pipeline.STAGES[i]](model, train, log)
            self.models[keys[i]] = copy.deepcopy(model)
        return model


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    variant: str
    kind: str
    sigma: float
    seed: int
    report: MetricReport
    extra: dict = field(default_factory=dict)

    def flat(self):
        r = self.report
        return {"variant": self.variant, "kind": self.kind, "sigma": self.sigma, "seed": self.seed,
                "accuracy": r.accuracy, "weighted_f1": r.weighted_f1, "macro_f1": r.macro_f1,
                "auc": "" if r.auc is None else r.auc}


def evaluate(model, test) -> tuple:
    pred = pipeline.predict_batch(model, test.features)
    return compute_metrics(pred.labels, pred.probs, test.labels, test.num_classes), pred


def run_grid(cfg: ExperimentConfig, variants, sigmas, kinds, seeds, dataset=None, log=None,
             cache: StageCache | None = None):
    """Train/evaluate every (variant, kind, sigma, seed) cell.

    Corruption of a cell depends only on (seed, kind, sigma), so every variant sees
    the same corrupted indices. With ``noise.apply_to == "test"`` one clean model
    per (variant, seed) serves all noise cells. Stage prefixes shared between
    variants are trained once per seed.
    """
    dataset = pipeline.source_dataset(cfg) if dataset is None else dataset
    rows = []
    for seed in seeds:
        seed_cache = cache if cache is not None else StageCache()
        for kind in kinds:
            for sigma in sigmas:
                for variant in variants:
                    vcfg = apply_variant(cfg, variant).replace(seed=seed, noise={"sigma": float(sigma), "kind": kind})
                    prep = pipeline.prepare(vcfg, dataset)
                    train_cfg = vcfg
                    if vcfg.noise.apply_to == "test":
                        train_cfg = vcfg.replace(noise={"sigma": 0.0, "kind": "gaussian"})
                    model = seed_cache.train(train_cfg, prep.train)
                    report, _ = evaluate(model, prep.test)
                    rows.append(SweepRow(variant_label(variant), kind, float(sigma), int(seed), report))
                    if log:
                        log(f"seed {seed} {kind} sigma {sigma} {variant_label(variant)}: acc {report.accuracy:.4f}")
    return rows


def apply_variant(cfg: ExperimentConfig, variant: dict) -> ExperimentConfig:
    """A variant is a partial dict of ablation toggles plus optional "reweight"."""
    variant = dict(variant)
    reweight = variant.pop("reweight", None)
    out = cfg.replace(ablation={**cfg.to_dict()["ablation"], **variant})
    if reweight is not None:
        out = out.replace(sad={"reweight": reweight})
    return out


def variant_label(variant: dict) -> str:
    variant = dict(variant)
    reweight = variant.pop("reweight", None)
    off = [k.upper() for k in ("de", "rccr", "cfmp", "cmr") if variant.get(k) is False]
    label = "full" if not off else "no-" + "-".join(off)
    return label if reweight in (None, "normal") else f"{label}+reweight-{reweight}"


def noise_sweep(cfg, sigmas, kinds, seeds, dataset=None, log=None, cache=None):
    return run_grid(cfg, [{}], sigmas, kinds, seeds, dataset, log, cache)


def ablation_run(cfg, toggles, sigmas, seeds, dataset=None, kinds=("gaussian",), log=None, cache=None):
    return run_grid(cfg, toggles, sigmas, kinds, seeds, dataset, log, cache)


def summarize(rows):
    """Mean and std of each metric per (variant, kind, sigma)."""
    groups = {}
    for r in rows:
        groups.setdefault((r.variant, r.kind, r.sigma), []).append(r)
    out = []
    for (variant, kind, sigma), rs in groups.items():
        entry = {"variant": variant, "kind": kind, "sigma": sigma, "n_seeds": len(rs)}
        for key in ("accuracy", "weighted_f1", "macro_f1"):
            v = np.array([getattr(r.report, key) for r in rs])
            entry[f"{key}_mean"] = float(v.mean())
            entry[f"{key}_std"] = float(v.std())
        out.append(entry)
    return out


def mean_accuracy(rows, variant, sigma, kind="gaussian"):
    v = [r.report.accuracy for r in rows if r.variant == variant and r.sigma == sigma and r.kind == kind]
    if not v:
        raise ValidationError(f"no rows for {variant} at sigma {sigma}")
    return float(np.mean(v))


def write_rows(rows, out_dir, stem):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flat = [r.flat() for r in rows]
    fields = ["variant", "kind", "sigma", "seed", "accuracy", "weighted_f1", "macro_f1", "auc"]
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(flat)
    doc = {"rows": [{**r.flat(), "report": r.report.to_dict()} for r in rows], "summary": summarize(rows)}
    (out / f"{stem}.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return out / f"{stem}.csv", out / f"{stem}.json"
