"""Command-line entry point: gen-data, train, eval, sweep, ablate.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
The thread count of the BLAS pool can be capped with ``MLAD_NUM_THREADS``.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import checkpoint, evaluation, pipeline
from .config import ExperimentConfig, load_config
from .data import SynthSpec, save_dataset, synth_generate
from .errors import MladError, NumericalError, ValidationError

THREADS_ENV = "MLAD_NUM_THREADS"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
DIAG_ATTENTION_SAMPLES = 8


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(out_dir=args.out)
    return cfg.validate()


def _announce(cfg: ExperimentConfig, out: Path):
    text = cfg.dumps()
    print("effective config:\n" + text, flush=True)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(text + "\n")


def _write_json(path: Path, doc):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    """Synthetic dataset from a SynthSpec document (bare, or under data.synth of a config)."""
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ValidationError("SynthSpec document must be a JSON object")
        doc = doc.get("data", {}).get("synth", {}) if "data" in doc else doc
    if args.seed is not None:
        doc = {**doc, "seed": args.seed}
    spec = SynthSpec.from_dict(doc).validate()
    out = Path(args.out or "data")
    print("effective spec:\n" + json.dumps(spec.to_dict(), indent=2, sort_keys=True), flush=True)
    with checkpoint.output_lock(out):
        path = save_dataset(synth_generate(spec), out)
        _write_json(out / "synth_spec.json", spec.to_dict())
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load(args)
    out = Path(cfg.out_dir)
    stage = args.stage or "all"
    if stage not in pipeline.STAGES + ("all",):
        raise ValidationError(f"unknown stage {stage!r}; choose from {pipeline.STAGES + ('all',)}")
    with checkpoint.output_lock(out):
        _announce(cfg, out)
        ckpt = out / "checkpoints"
        prep = pipeline.prepare(cfg)
        if (ckpt / checkpoint.MANIFEST).exists():
            model, _, doc = checkpoint.load_checkpoint(ckpt)
            if doc["config"] != cfg.to_dict():
                raise ValidationError(f"{ckpt} was written with a different config; use a fresh --out")
        else:
            model = pipeline.new_model(cfg, prep.train.dims, prep.train.num_classes)
        if stage == "all":
            todo = [s for s in pipeline.STAGES if not model.stages[s]]
        else:
            model.require(stage)
            todo = [stage]
        for s in todo:
            _log(f"stage {s}")
            pipeline.STAGE_FUNCS[s](model, prep.train, _log)
            checkpoint.save_checkpoint(model, ckpt, prep.normalizer, prep.train.dims)
        done = [s for s in pipeline.STAGES if model.stages[s]]
        if not todo:
            checkpoint.save_checkpoint(model, ckpt, prep.normalizer, prep.train.dims)
        _write_json(out / "reports" / "train_history.json",
                    {"stages": done, "exit_depths": model.table.depths.tolist() if model.table is not None else None,
                     "history": model.history})
    print(f"checkpoint {ckpt} stages complete: {done}")
    return EXIT_OK


def _diagnostics(model, pred, test, n_attention):
    attn = {}
    for i, maps in sorted(pred.attention.items()):
        attn[str(i)] = {f"{a}<-{b}": m.tolist() for (a, b), m in maps.items()}
    return {
        "exit_depths": pred.depths.tolist(),
        "tower_depth": model.towers[0].depth,
        "entropies": pred.entropies.tolist(),
        "gates": pred.gates.tolist(),
        "attention": attn,
        "attention_samples": n_attention,
        "latents": [z.tolist() for z in pred.latents],
        "rectified": [z.tolist() for z in pred.rectified],
        "labels": test.labels.tolist(),
        "class_exit_depths": model.table.depths.tolist(),
        "gmm_splits": [s.to_dict() for s in model.splits],
    }


def cmd_eval(args):
    cfg = _load(args)
    out = Path(cfg.out_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoints"
    model, normalizer, _ = checkpoint.load_checkpoint(ckpt)
    if not all(model.stages.values()):
        done = [s for s in pipeline.STAGES if model.stages[s]]
        raise ValidationError(f"incomplete checkpoint {ckpt} (completed: {done}); run train --stage all")
    with checkpoint.output_lock(out):
        _announce(cfg, out)
        prep = pipeline.prepare(cfg)
        test = prep.test if normalizer is None else normalizer.apply(prep.raw_test)
        n_attn = min(DIAG_ATTENTION_SAMPLES, test.n_samples)
        pred = pipeline.predict_batch(model, test.features, attention_for=range(n_attn))
        report = evaluation.compute_metrics(pred.labels, pred.probs, test.labels, test.num_classes)
        stem = f"eval_{cfg.noise.kind}_sigma{cfg.noise.sigma:g}"
        _write_json(out / "reports" / f"{stem}.json",
                    {"report": report.to_dict(), "noise": cfg.to_dict()["noise"], "checkpoint": str(ckpt),
                     "diagnostics": f"diagnostics/{stem}.json", "predictions": f"reports/{stem}_predictions.csv"})
        with open(out / "reports" / f"{stem}_predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "label", "pred"] + [f"p{c}" for c in range(test.num_classes)])
            for i, (y, p, pr) in enumerate(zip(test.labels, pred.labels, pred.probs)):
                w.writerow([i, int(y), int(p)] + [repr(float(v)) for v in pr])
        _write_json(out / "diagnostics" / f"{stem}.json", _diagnostics(model, pred, test, n_attn))
    print(f"accuracy {report.accuracy:.4f} weighted_f1 {report.weighted_f1:.4f} macro_f1 {report.macro_f1:.4f}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load(args)
    out = Path(cfg.out_dir)
    sw = cfg.sweep
    with checkpoint.output_lock(out):
        _announce(cfg, out)
        rows = evaluation.noise_sweep(cfg, sw.sigmas, sw.kinds, sw.seeds, log=_log)
        paths = evaluation.write_rows(rows, out / "reports", "sweep")
    print(f"{len(rows)} rows -> {paths[0]}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load(args)
    out = Path(cfg.out_dir)
    sw = cfg.sweep
    variants = [dict(v) for v in sw.variants] + [{"reweight": r} for r in sw.reweights]
    with checkpoint.output_lock(out):
        _announce(cfg, out)
        rows = evaluation.ablation_run(cfg, variants, sw.sigmas, sw.seeds, kinds=sw.kinds, log=_log)
        paths = evaluation.write_rows(rows, out / "reports", "ablation")
    print(f"{len(rows)} rows -> {paths[0]}")
    return EXIT_OK


VERBS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "ablate": cmd_ablate}


def build_parser():
    p = argparse.ArgumentParser(prog="mlad", description="Train and evaluate confusion-aware multimodal classifiers.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sp = sub.add_parser(verb)
        sp.add_argument("--config", help="JSON config (a SynthSpec document for gen-data)")
        sp.add_argument("--seed", type=int, help="override the root seed")
        sp.add_argument("--out", help="output directory")
        if verb == "train":
            sp.add_argument("--stage", default="all", help="phase1, qlearn, priors, phase2 or all")
        if verb == "eval":
            sp.add_argument("--checkpoint", help="checkpoint directory (default OUT/checkpoints)")
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"{THREADS_ENV} must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit(), np.errstate(over="ignore", under="ignore"):
            return VERBS[args.verb](args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MladError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
