"""Acceptance suite: one test per criterion, each recording a PASS/FAIL verdict
that is printed in the terminal summary.

Directional criteria run on synthetic data with a desk-scale training profile
(lr 1e-3, 60 epochs, batch 32 for both training phases).
"""
import time

import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from mlad import cad, evaluation, pipeline, sad
from mlad.config import Phase1Config, from_dict
from mlad.data import NoiseSpec, inject_noise
from mlad.numerics import finite_diff_check, rng_stream, sym_eig

import oracles
from conftest import random_symmetric, record_verdict
from test_cad import _instance, jitter_biases, toy_batch, toy_towers
from test_sad import _batch_instance, random_instance

DESK = {"phase1": {"epochs": 60, "lr": 1e-3, "batch_size": 32},
        "sad": {"epochs": 60, "lr": 1e-3, "batch_size": 32}}
CONFUSABLE = {"confusion_pairs": [[0, 1, 0.6], [2, 3, 0.6]], "class_sep": 12.0, "within_std": 3.0,
              "samples_per_class": 150}
SEEDS = [0, 1, 2, 3, 4]


def verdict(number, name, ok, detail):
    record_verdict(number, name, ok, detail)
    print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# exactness ------------------------------------------------------------------------------

def test_c01_gradient_oracle():
    t0 = time.perf_counter()
    worst = {}

    errs = []
    for seed in range(3):
        towers, lat, x, draws = _instance(seed, M=2, C=3, dims=(3, 4))
        params = [p for t in towers for p in t.decoder.params() + t.transform.params()]

        def loss_cad():
            for p in params:
                p.zero_grad()
            return cad.loss_cad(towers, lat, x, draws, 0.1, True)[0].total
        errs.append(finite_diff_check(loss_cad, params, seed=seed))
    worst["L_CAD"] = max(errs)

    errs = []
    for seed in range(2):
        for depths in ("final", "all"):
            towers = toy_towers(seed=seed, jitter=True)
            feats, y = toy_batch(seed=seed)
            cfg = Phase1Config(alpha=0.1, cad_depths=depths)
            draws = cad.phase1_draws(rng_stream(seed, "acc"), y, 3, towers, 2)
            params = [p for t in towers for p in t.params()]

            def loss_p1():
                for p in params:
                    p.zero_grad()
                return cad.phase1_objective(towers, feats, y, 3, draws, cfg, True)[0]
            errs.append(finite_diff_check(loss_p1, params, max_coords=30, seed=seed))
    worst["phase1"] = max(errs)

    errs = []
    for seed in range(3):
        rect, priors, z, gates, head, y = _batch_instance(seed)
        opts = sad.RectifyOptions()
        params = rect.params() + head.params()

        def loss_tot():
            for p in params:
                p.zero_grad()
            return sad.total_loss(z, gates, y, priors, rect, head, opts)[0]
        errs.append(finite_diff_check(loss_tot, params, max_coords=30, seed=seed))
    worst["L_tot"] = max(errs)

    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and secs < 30
    verdict(1, "gradient oracle", ok,
            ", ".join(f"{k} max rel err {v:.2e}" for k, v in worst.items()) + f"; {secs:.1f}s")


def test_c02_equation_oracles():
    t0 = time.perf_counter()
    combos = [("normal", True), ("normal", False), ("negative", True), ("none", True)]
    rect_err = 0.0
    for i in range(100):
        reweight, rotate = combos[i % 4]
        rect, priors, z, h = random_instance(i, M=2 + i % 2)
        opts = sad.RectifyOptions(reweight=reweight, rotate_back=rotate)
        z_hat, _, _ = sad.rectify(z, h, priors, rect, opts)
        ref, _ = oracles.rectify_one([v.tolist() for v in z], h.tolist(),
                                     [w.value.tolist() for w in rect.wq], [w.value.tolist() for w in rect.wk],
                                     [w.value.tolist() for w in rect.wv], [p.eigvecs.tolist() for p in priors],
                                     [p.eigvals.tolist() for p in priors], opts.gate_eps, reweight, rotate)
        rect_err = max(rect_err, max(float(np.max(np.abs(a - np.array(b)))) for a, b in zip(z_hat, ref)))
    cad_err = 0.0
    for i in range(100):
        cross, dec = [(True, True), (True, False), (False, True)][i % 3]
        towers, lat, x, draws = _instance(i, M=1 + i % 2, C=2 + i % 2, dims=(3, 2)[:1 + i % 2])
        parts, _ = cad.loss_cad(towers, lat, x, draws, 0.1, cross, dec, need_grad=False)
        intra, crs = oracles.cad_loss(towers, lat, x, draws.eps, draws.noise, draws.sub, 0.1, cross, dec)
        cad_err = max(cad_err, abs(parts.intra - intra), abs(parts.cross - crs))
    secs = time.perf_counter() - t0
    ok = rect_err < 1e-10 and cad_err < 1e-10 and secs < 10
    verdict(2, "equation oracles", ok, f"rectify max err {rect_err:.1e}, loss_cad max err {cad_err:.1e}; {secs:.1f}s")


def test_c03_sym_eig():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    orth = recon = 0.0
    for i in range(100):
        n = 1 + (i * 31) % 32
        a = random_symmetric(rng, n, scale=10.0 ** rng.uniform(-2, 2))
        eig = sym_eig(a)
        u, lam = eig.eigvecs, eig.eigvals
        orth = max(orth, float(np.max(np.abs(u.T @ u - np.eye(n)))))
        recon = max(recon, float(np.max(np.abs(u @ np.diag(lam) @ u.T - a))))
    secs = time.perf_counter() - t0
    ok = orth < 1e-8 and recon < 1e-8 and secs < 5
    verdict(3, "sym_eig", ok, f"orthonormality {orth:.1e}, reconstruction {recon:.1e}; {secs:.1f}s")


def test_c04_gmm_threshold():
    t0 = time.perf_counter()
    r = np.random.default_rng(7)
    comp = np.repeat([0, 1], 500)
    h = np.where(comp == 0, 0.2, 1.1) + 0.05 * r.normal(size=1000)
    split = sad.fit_entropy_gmm(h)
    order = np.argsort(split.means)
    means = split.means[order]
    purity = float(np.mean((h >= split.threshold).astype(int) == comp))
    fixed = sad.GmmSplit(split.weights[order], means, split.stds[order], split.threshold, True, 0)
    d1, d2 = fixed.weighted_densities(split.threshold)
    gap = abs(d1 - d2)
    secs = time.perf_counter() - t0
    ok = abs(means[0] - 0.2) < 0.03 and abs(means[1] - 1.1) < 0.03 and purity >= 0.95 and gap < 1e-8 and secs < 5
    verdict(4, "GMM threshold", ok, f"means {means[0]:.4f}/{means[1]:.4f}, purity {purity:.3f}, "
                                    f"density gap {gap:.1e}; {secs:.2f}s")


# directions -----------------------------------------------------------------------------

@pytest.mark.slow
def test_c05_exit_depth_direction():
    t0 = time.perf_counter()
    linear, deep = 0, 3
    wins, depths = 0, []
    for seed in SEEDS:
        cfg = from_dict({**DESK, "seed": seed,
                         "data": {"synth": {"depth_profile": [1, 1, 1, 4], "samples_per_class": 100}}})
        prep = pipeline.prepare(cfg)
        model = pipeline.new_model(cfg, prep.train.dims, prep.train.num_classes)
        pipeline.train_phase1(model, prep.train)
        pipeline.train_qlearn(model, prep.train)
        d = model.table.depths
        depths.append(d[:, [linear, deep]].tolist())
        wins += bool(np.all(d[:, linear] <= d[:, deep]))
    secs = time.perf_counter() - t0
    ok = wins >= 4 and secs < 300
    verdict(5, "exit-depth direction", ok, f"{wins}/5 seeds; (linear, deep) depths per modality {depths}; {secs:.0f}s")


@pytest.mark.slow
def test_c06_rccr_separability():
    t0 = time.perf_counter()
    wins, scores = 0, []
    for seed in SEEDS:
        s = []
        for cross in (True, False):
            cfg = from_dict({**DESK, "seed": seed, "ablation": {"rccr": cross},
                             "data": {"synth": {"confusion_pairs": [[0, 1, 0.6], [2, 3, 0.6]],
                                                "samples_per_class": 100}}})
            prep = pipeline.prepare(cfg)
            model = pipeline.new_model(cfg, prep.train.dims, prep.train.num_classes)
            pipeline.train_phase1(model, prep.train)
            D = model.towers[0].depth
            s.append(float(np.mean([silhouette_score(cad.forward_to_depth(t, prep.test.features[m], D),
                                                     prep.test.labels) for m, t in enumerate(model.towers)])))
        scores.append((round(s[0], 4), round(s[1], 4)))
        wins += s[0] > s[1]
    secs = time.perf_counter() - t0
    ok = wins >= 4 and secs < 300
    verdict(6, "RCCR separability", ok, f"{wins}/5 seeds; silhouette (with, without) {scores}; {secs:.0f}s")


VARIANTS = [{}, {"de": False}, {"rccr": False}, {"cfmp": False}, {"cmr": False},
            {"reweight": "none"}, {"reweight": "negative"}]


@pytest.fixture(scope="module")
def grid():
    cfg = from_dict({**DESK, "data": {"synth": CONFUSABLE}, "noise": {"apply_to": "test"}})
    t0 = time.perf_counter()
    rows = evaluation.ablation_run(cfg, VARIANTS, [0.0, 5.0, 10.0], SEEDS)
    return rows, time.perf_counter() - t0


def _acc(rows, label, sigma):
    return evaluation.mean_accuracy(rows, label, sigma)


@pytest.mark.slow
def test_c07_ablation_direction(grid):
    rows, secs = grid
    full = _acc(rows, "full", 5.0)
    drops = {k: full - _acc(rows, k, 5.0) for k in ("no-DE", "no-RCCR", "no-CFMP", "no-CMR")}
    ok = all(v > 0 for v in drops.values()) and max(drops, key=drops.get) == "no-RCCR" and secs < 1800
    verdict(7, "ablation direction", ok, f"full {full:.4f} at sigma 5; drops "
            + ", ".join(f"{k} {v:+.4f}" for k, v in drops.items()) + f"; grid {secs:.0f}s")


@pytest.mark.slow
def test_c08_robustness_direction(grid):
    rows, secs = grid
    d_full = _acc(rows, "full", 0.0) - _acc(rows, "full", 10.0)
    d_cmr = _acc(rows, "no-CMR", 0.0) - _acc(rows, "no-CMR", 10.0)
    ok = d_full < d_cmr and secs < 1800
    verdict(8, "robustness direction", ok, f"drop sigma 0->10: full {d_full:.4f}, no-CMR {d_cmr:.4f}; grid {secs:.0f}s")


@pytest.mark.slow
def test_c09_gate_direction():
    cfg = from_dict({**DESK, "seed": 0, "data": {"synth": CONFUSABLE}})
    prep = pipeline.prepare(cfg)
    model = pipeline.train_all(cfg, prep.train)
    t0 = time.perf_counter()
    a, b = 0, 1
    clean = pipeline.encode(model, prep.test.features)
    spec = NoiseSpec(sigma=5.0, fraction=1.0, target_modalities=[a])
    noisy_raw = inject_noise(prep.raw_test, spec, 0)
    noisy = pipeline.encode(model, prep.normalizer.apply(noisy_raw).features)
    up = noisy.gates[:, a, b] > clean.gates[:, a, b]
    down = noisy.gates[:, b, a] < clean.gates[:, b, a]
    frac = float(np.mean(up & down))
    dh = float(np.mean(noisy.entropies[:, a] - clean.entropies[:, a]))
    secs = time.perf_counter() - t0
    ok = frac >= 0.9 and secs < 60
    verdict(9, "gate direction", ok, f"{frac:.3f} of corrupted samples move both gates the expected way "
                                     f"(A<-B up {up.mean():.3f}, B<-A down {down.mean():.3f}); "
                                     f"mean change in H(z^A) {dh:+.4f}; {secs:.1f}s")


@pytest.mark.slow
def test_c10_reweighting_order(grid):
    rows, secs = grid
    normal = _acc(rows, "full", 0.0)
    none = _acc(rows, "full+reweight-none", 0.0)
    neg = _acc(rows, "full+reweight-negative", 0.0)
    ok = normal >= none >= neg and secs < 1800
    verdict(10, "reweighting order", ok, f"normal {normal:.4f}, none {none:.4f}, negative {neg:.4f}; grid {secs:.0f}s")


@pytest.mark.slow
def test_c11_end_to_end():
    t0 = time.perf_counter()
    cfg = from_dict({"data": {"synth": {"samples_per_class": 100, "class_sep": 8.0}},
                     "model": {"depth": 3, "width": 64, "latent_dim": 32, "decoder_hidden": 64, "transform_hidden": 64},
                     "phase1": {"epochs": 30, "lr": 1e-3, "batch_size": 32},
                     "qlearn": {"epochs": 200},
                     "sad": {"epochs": 60, "lr": 3e-3, "batch_size": 32}})
    reports = []
    for _ in range(2):
        prep = pipeline.prepare(cfg)
        model = pipeline.train_all(cfg, prep.train)
        reports.append(evaluation.evaluate(model, prep.test)[0].to_dict())
    same = reports[0] == reports[1]
    secs = time.perf_counter() - t0
    ok = reports[0]["accuracy"] >= 0.99 and same and secs < 300
    verdict(11, "end-to-end sanity", ok, f"test accuracy {reports[0]['accuracy']:.4f}, "
                                         f"bit-exact rerun {same}; {secs:.0f}s")
