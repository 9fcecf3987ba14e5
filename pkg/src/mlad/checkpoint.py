"""Checkpoint directories: a JSON manifest plus one binary matrix file per array."""
from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import pipeline
from .cad import ClassLatentTable
from .config import from_dict
from .data import Normalizer
from .errors import ValidationError
from .numerics import GaussianDiag, SymEig, mat_to_bytes, read_mat
from .sad import GmmSplit, ModalityPrior

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"


class LockError(OSError):
    pass


@contextmanager
def output_lock(out_dir):
    """Exclusive lock file so only one command writes to ``out_dir`` at a time."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out} is locked by another process ({lock}); remove the file if stale") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _vec(a):
    return np.asarray(a, dtype=np.float64).reshape(1, -1)


def collect_arrays(model: pipeline.MladModel, normalizer: Normalizer | None):
    """Name -> 2-D array for everything a completed stage produced."""
    arrays = {}
    if normalizer is not None:
        for m, (mu, sd) in enumerate(zip(normalizer.means, normalizer.stds)):
            arrays[f"normalizer/{m}/mean"] = _vec(mu)
            arrays[f"normalizer/{m}/std"] = _vec(sd)
    st = model.stages
    if st["phase1"]:
        for m, tower in enumerate(model.towers):
            for name, p in tower.named_params().items():
                arrays[f"towers/{m}/{name}"] = p.value
        for m, per_depth in enumerate(model.table.cache):
            for d, dists in enumerate(per_depth):
                for c, g in enumerate(dists):
                    arrays[f"table/{m}/depth{d + 1}/class{c}/mean"] = _vec(g.mean)
                    arrays[f"table/{m}/depth{d + 1}/class{c}/var"] = _vec(g.var)
    if st["qlearn"]:
        for name, p in model.policy.named_params().items():
            arrays[f"policy/{name}"] = p.value
    if st["priors"]:
        for m, pr in enumerate(model.priors):
            arrays[f"priors/{m}/mean"] = _vec(pr.mean)
            arrays[f"priors/{m}/cov"] = pr.cov
            arrays[f"priors/{m}/eigvecs"] = pr.eigvecs
            arrays[f"priors/{m}/eigvals"] = _vec(pr.eigvals)
            arrays[f"priors/{m}/reweight"] = _vec(pr.reweight)
    if st["phase2"]:
        for name, p in model.rectifier.named_params().items():
            arrays[f"rectifier/{name}"] = p.value
        for name, p in model.head.named_params().items():
            arrays[f"head/{name}"] = p.value
    return arrays


def check_chain(stages: dict):
    flags = [bool(stages.get(s, False)) for s in pipeline.STAGES]
    if any(later and not earlier for earlier, later in zip(flags, flags[1:])):
        raise ValidationError(f"stage flags do not form a prefix chain: {stages}")


def save_checkpoint(model: pipeline.MladModel, ckpt_dir, normalizer=None, dims=None):
    """Write arrays then the manifest (last, so a partial write is never mistaken for complete)."""
    check_chain(model.stages)
    root = Path(ckpt_dir)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in collect_arrays(model, normalizer).items():
        blob = mat_to_bytes(arr)
        path = root / f"{name}.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
        files[f"{name}.bin"] = {"shape": list(arr.shape), "sha256": hashlib.sha256(blob).hexdigest()}
    table = model.table
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": model.config.to_dict(),
        "stages": dict(model.stages),
        "architecture": {
            "dims": [t.in_dim for t in model.towers] if dims is None else list(dims),
            "num_classes": model.num_classes,
            "depth": model.towers[0].depth,
            "latent_dim": model.towers[0].latent_dim,
        },
        "seed": model.config.seed,
        "exit_depths": table.depths.tolist() if table is not None else None,
        "class_prior": table.class_prior.tolist() if table is not None else None,
        "gmm_splits": [s.to_dict() for s in model.splits] if model.stages["priors"] else [],
        "prior_support": [p.support_count for p in model.priors] if model.stages["priors"] else [],
        "history": model.history,
        "has_normalizer": normalizer is not None,
        "files": dict(sorted(files.items())),
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root / MANIFEST


def read_manifest(ckpt_dir):
    path = Path(ckpt_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"unsupported checkpoint schema {doc.get('schema_version')}")
    check_chain(doc["stages"])
    return doc


def _load_arrays(root: Path, files: dict):
    out = {}
    for rel, meta in files.items():
        path = root / rel
        blob = path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
            raise ValidationError(f"digest mismatch for {rel}")
        arr = read_mat(path)
        if list(arr.shape) != meta["shape"]:
            raise ValidationError(f"shape mismatch for {rel}")
        out[rel[:-4]] = arr
    return out


def load_checkpoint(ckpt_dir):
    """Rebuild the model (completed stages restored, the rest at their seeded init)."""
    root = Path(ckpt_dir)
    doc = read_manifest(root)
    cfg = from_dict(doc["config"])
    arch = doc["architecture"]
    arrays = _load_arrays(root, doc["files"])
    model = pipeline.new_model(cfg, arch["dims"], arch["num_classes"])
    model.history = doc.get("history", {})
    st = doc["stages"]
    M, C, D = len(arch["dims"]), arch["num_classes"], arch["depth"]
    normalizer = None
    if doc.get("has_normalizer"):
        normalizer = Normalizer([arrays[f"normalizer/{m}/mean"][0] for m in range(M)],
                                [arrays[f"normalizer/{m}/std"][0] for m in range(M)])
    if st["phase1"]:
        for m, tower in enumerate(model.towers):
            for name, p in tower.named_params().items():
                p.value[...] = arrays[f"towers/{m}/{name}"]
        cache = [[[GaussianDiag(arrays[f"table/{m}/depth{d}/class{c}/mean"][0],
                                arrays[f"table/{m}/depth{d}/class{c}/var"][0])
                   for c in range(C)] for d in range(1, D + 1)] for m in range(M)]
        model.table = ClassLatentTable.from_cache(cache, np.zeros(1, dtype=np.int64), C,
                                                  np.array(doc["exit_depths"], dtype=np.int64))
        model.table.class_prior = np.array(doc["class_prior"])
    if st["qlearn"]:
        for name, p in model.policy.named_params().items():
            p.value[...] = arrays[f"policy/{name}"]
    if st["priors"]:
        model.splits = [GmmSplit.from_dict(s) for s in doc["gmm_splits"]]
        model.priors = []
        for m in range(M):
            eig = SymEig(arrays[f"priors/{m}/eigvecs"], arrays[f"priors/{m}/eigvals"][0], 0)
            model.priors.append(ModalityPrior(arrays[f"priors/{m}/mean"][0], arrays[f"priors/{m}/cov"], eig,
                                              arrays[f"priors/{m}/reweight"][0], doc["prior_support"][m]))
    if st["phase2"]:
        for name, p in model.rectifier.named_params().items():
            p.value[...] = arrays[f"rectifier/{name}"]
        for name, p in model.head.named_params().items():
            p.value[...] = arrays[f"head/{name}"]
    model.stages = {s: bool(st[s]) for s in pipeline.STAGES}
    return model, normalizer, doc


def digests(ckpt_dir):
    return {k: v["sha256"] for k, v in read_manifest(ckpt_dir)["files"].items()}
