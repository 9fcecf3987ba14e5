import numpy as np
import pytest

from mlad import cad
from mlad.config import ModelConfig, Phase1Config, QLearnConfig
from mlad.data import MultimodalDataset, Normalizer, SynthSpec, synth_generate
from mlad.errors import ValidationError
from mlad.numerics import VAR_FLOOR, finite_diff_check, relu, rng_stream

import oracles

TOY = ModelConfig(depth=2, width=6, latent_dim=4, decoder_hidden=5, transform_hidden=7)


def toy_towers(dims=(3, 5), C=3, seed=0, cfg=TOY, jitter=False):
    towers = cad.build_towers(list(dims), C, cfg, seed)
    if jitter:
        jitter_biases(towers, seed)
    return towers


def jitter_biases(towers, seed):
    """Random nonzero biases keep gradient checks off the ReLU kink that zero
    biases create for samples whose previous layer is fully inactive."""
    r = np.random.default_rng(1000 + seed)
    for t in towers:
        for name, p in t.named_params().items():
            if name.endswith("/b"):
                p.value[...] = r.uniform(-0.5, 0.5, p.value.shape)


def toy_batch(dims=(3, 5), C=3, per_class=4, seed=0):
    r = np.random.default_rng(seed)
    y = np.repeat(np.arange(C), per_class)
    return [r.normal(size=(y.size, d)) for d in dims], y


# towers -----------------------------------------------------------------------

def test_depth_one_is_first_block_and_head():
    t = toy_towers()[0]
    x = np.random.default_rng(1).normal(size=(5, 3))
    ref = relu(x @ t.blocks[0].w.value + t.blocks[0].b.value) @ t.heads[0].w.value + t.heads[0].b.value
    assert np.array_equal(cad.forward_to_depth(t, x, 1), ref)


@pytest.mark.parametrize("d", [1, 2])
def test_latent_shape_and_determinism(d):
    t = toy_towers()[1]
    x = np.random.default_rng(2).normal(size=(7, 5))
    a, b = cad.forward_to_depth(t, x, d), cad.forward_to_depth(t, x, d)
    assert a.shape == (7, TOY.latent_dim)
    assert np.array_equal(a, b)


def test_depth_d_ignores_deeper_layers():
    t = toy_towers()[0]
    x = np.random.default_rng(3).normal(size=(4, 3))
    before = cad.forward_to_depth(t, x, 1)
    t.blocks[1].w.value += 5.0
    t.heads[1].b.value += 1.0
    assert np.array_equal(cad.forward_to_depth(t, x, 1), before)


def test_depth_out_of_range():
    with pytest.raises(ValidationError):
        cad.forward_to_depth(toy_towers()[0], np.zeros((1, 3)), 3)


def test_build_is_seeded():
    a, b = toy_towers(seed=4), toy_towers(seed=4)
    for ta, tb in zip(a, b):
        for (na, pa), (nb, pb) in zip(ta.named_params().items(), tb.named_params().items()):
            assert na == nb and np.array_equal(pa.value, pb.value)


# class distributions --------------------------------------------------------------

def test_identical_rows_hit_floor():
    g = cad.fit_class_distribution(np.array([[1.0, 2.0], [1.0, 2.0]]))
    assert np.array_equal(g.var, [VAR_FLOOR, VAR_FLOOR])


def test_hand_distribution():
    g = cad.fit_class_distribution(np.array([[0.0, 0.0], [2.0, 0.0]]))
    assert np.array_equal(g.mean, [1.0, 0.0])
    assert np.array_equal(g.var, [1.0, VAR_FLOOR])


def test_distribution_sampling():
    z = 3.0 + 2.0 * np.random.default_rng(0).normal(size=(1000, 5))
    g = cad.fit_class_distribution(z)
    assert np.all(np.abs(g.mean - 3.0) < 0.2)
    assert np.all(np.abs(g.var - 4.0) < 0.5)


def test_table_from_cache_priors_and_depths():
    towers = toy_towers()
    feats, y = toy_batch(per_class=5)
    ds = MultimodalDataset(["a", "b"], feats, y, 3)
    table = cad.ClassLatentTable.from_cache(cad.fit_depth_cache(towers, ds), y, 3)
    assert np.all(table.depths == 2)
    assert abs(table.class_prior.sum() - 1.0) < 1e-15
    assert table.class_log_likelihoods(0, np.zeros((2, 4))).shape == (2, 3)


# residuals --------------------------------------------------------------------------

def test_residual_alpha_zero():
    t = toy_towers()[0]
    r = np.random.default_rng(5)
    z, x = r.normal(size=(6, 4)), r.normal(size=(6, 3))
    res, _ = cad.compute_residual(x, z, t, 0.0, r.normal(size=(6, 3)))
    assert np.array_equal(res, x - t.decoder(z))


def test_residual_zero_for_perfect_decoder():
    t = toy_towers()[0]
    z = np.random.default_rng(6).normal(size=(6, 4))
    x = t.decoder(z)
    res, _ = cad.compute_residual(x, z, t, 0.0, np.ones_like(x))
    assert np.array_equal(res, np.zeros_like(x))


def test_residual_noise_scale():
    t = toy_towers(dims=(100, 5))[0]
    r = np.random.default_rng(7)
    z, x = r.normal(size=(100, 4)), 3.0 * r.normal(size=(100, 100))
    res, _ = cad.compute_residual(x, z, t, 1.0, r.normal(size=(100, 100)))
    q = x - t.decoder(z)
    assert abs((res - q).std() / q.std() - 1.0) < 0.1


# L_CAD -------------------------------------------------------------------------------

def _instance(seed, M=1, C=2, per_class=4, dims=(3,), k=4):
    cfg = ModelConfig(depth=1, width=5, latent_dim=k, decoder_hidden=4, transform_hidden=5)
    towers = cad.build_towers(list(dims), C, cfg, seed)
    jitter_biases(towers, seed)
    r = np.random.default_rng(seed)
    sizes = [per_class + (c % 2) for c in range(C)]
    lat = [[r.normal(size=(n, k)) for n in sizes] for _ in range(M)]
    x = [[r.normal(size=(n, d)) for n in sizes] for d in dims]
    draws = cad.draw_cad(rng_stream(seed, "t"), sizes, k, list(dims))
    return towers, lat, x, draws


@pytest.mark.parametrize("use_cross,residual_decoder", [(True, True), (True, False), (False, True)])
def test_loss_cad_matches_direct_sum(use_cross, residual_decoder):
    towers, lat, x, draws = _instance(0, dims=(3,))
    parts, _ = cad.loss_cad(towers, lat, x, draws, 0.1, use_cross, residual_decoder, need_grad=False)
    intra, cross = oracles.cad_loss(towers, lat, x, draws.eps, draws.noise, draws.sub, 0.1, use_cross,
                                    residual_decoder)
    assert abs(parts.intra - intra) < 1e-10
    assert abs(parts.cross - cross) < 1e-10


def test_single_class_has_no_cross_term():
    towers, lat, x, draws = _instance(1, C=1)
    parts, _ = cad.loss_cad(towers, lat, x, draws, 0.1, need_grad=False)
    assert parts.cross == 0.0
    assert parts.total == parts.intra


def test_lower_bound_reached():
    towers, lat, _, draws = _instance(2, C=2, dims=(3,))
    t = towers[0]
    x0 = np.array([[0.5, -1.0, 2.0]])
    for mlp in (t.decoder, t.transform):
        mlp.l2.w.value[...] = 0.0
        mlp.l2.b.value[...] = x0
    x = [[np.repeat(x0, lat[0][c].shape[0], axis=0) for c in range(2)]]
    parts, _ = cad.loss_cad(towers, lat, x, draws, 0.0, need_grad=False)
    assert parts.total == 0.0 and parts.intra >= 0.0 and parts.cross >= 0.0


def test_class_order_invariance():
    towers, lat, x, draws = _instance(3, M=2, C=3, dims=(3, 4))
    base, _ = cad.loss_cad(towers, lat, x, draws, 0.2, need_grad=False)
    perm = [2, 0, 1]
    pd = cad.CadDraws([[e[c] for c in perm] for e in draws.eps], [[n[c] for c in perm] for n in draws.noise],
                      [draws.sub[c] for c in perm])
    moved, _ = cad.loss_cad(towers, [[l[c] for c in perm] for l in lat], [[v[c] for c in perm] for v in x],
                            pd, 0.2, need_grad=False)
    assert abs(base.total - moved.total) < 1e-10 * max(1.0, base.total)


@pytest.mark.parametrize("use_cross", [True, False])
def test_loss_cad_gradients(use_cross):
    towers, lat, x, draws = _instance(4, M=2, C=3, dims=(3, 4))
    params = [p for t in towers for p in t.decoder.params() + t.transform.params()]

    def loss():
        for p in params:
            p.zero_grad()
        parts, _ = cad.loss_cad(towers, lat, x, draws, 0.1, use_cross)
        return parts.total
    assert finite_diff_check(loss, params) < 1e-4


@pytest.mark.parametrize("seed", [0, 1])
@pytest.mark.parametrize("cad_depths", ["final", "all"])
@pytest.mark.parametrize("use_cross", [True, False])
def test_phase1_objective_gradients(cad_depths, use_cross, seed):
    towers = toy_towers(seed=seed, jitter=True)
    feats, y = toy_batch(seed=seed)
    cfg = Phase1Config(alpha=0.1, cad_depths=cad_depths)
    draws = cad.phase1_draws(rng_stream(0, "t"), y, 3, towers, 2)
    params = [p for t in towers for p in t.params()]

    def loss():
        for p in params:
            p.zero_grad()
        return cad.phase1_objective(towers, feats, y, 3, draws, cfg, use_cross)[0]
    assert finite_diff_check(loss, params, max_coords=25) < 1e-4


def test_stratified_batches_cover_each_class():
    y = np.repeat(np.arange(3), [10, 7, 12])
    batches = cad.stratified_batches(y, 3, 8, rng_stream(0, "b"))
    assert np.array_equal(np.sort(np.concatenate(batches)), np.arange(y.size))
    for b in batches:
        assert np.all(np.bincount(y[b], minlength=3) >= 2)


# phase-1 training ---------------------------------------------------------------------

SMALL = ModelConfig(depth=3, width=32, latent_dim=16, decoder_hidden=32, transform_hidden=32)


@pytest.fixture(scope="module")
def separable():
    ds = synth_generate(SynthSpec(samples_per_class=40, dims=[8, 8], class_sep=8.0, seed=0))
    return Normalizer.fit(ds).apply(ds)


def _phase1(ds, seed=0, epochs=40):
    towers = cad.build_towers(ds.dims, ds.num_classes, SMALL, seed)
    cfg = Phase1Config(epochs=epochs, lr=3e-3, batch_size=16)
    return towers, cad.phase1_train(towers, ds, cfg, seed)


@pytest.fixture(scope="module")
def trained(separable):
    return _phase1(separable)


def test_phase1_final_aux_accuracy(separable, trained):
    towers, res = trained
    for m, t in enumerate(towers):
        lat = cad.forward_to_depth(t, separable.features[m], t.depth)
        acc = np.mean(np.argmax(t.aux[-1](lat), axis=1) == separable.labels)
        assert acc >= 0.99
    assert np.all(res.table.depths == SMALL.depth)


def test_phase1_loss_trend(trained):
    losses = trained[1].losses
    windows = [np.mean(losses[i:i + 5]) for i in range(0, len(losses), 5)]
    assert losses[-1] <= losses[0]
    assert all(b <= a for a, b in zip(windows, windows[1:]))


def test_phase1_deterministic(separable, trained):
    _, again = _phase1(separable)
    assert again.losses[-1] == trained[1].losses[-1]


# exit policy -------------------------------------------------------------------------------

def test_terminal_exit_target_is_one():
    pol = cad.ExitPolicy(1, 3, 4, lambda m: rng_stream(0, "q"))
    t = cad.bellman_targets(pol, 0, 2, np.array([cad.EXIT]), np.array([np.exp(-0.0)]), np.zeros((1, 4)),
                            0.9, 3, np.array([0.3]))
    assert t[0] == 1.0


def test_myopic_targets():
    pol = cad.ExitPolicy(1, 4, 4, lambda m: rng_stream(0, "q"))
    acts = np.array([cad.CONTINUE, cad.EXIT, cad.CONTINUE])
    r = np.array([0.0, 0.7, 0.0])
    t = cad.bellman_targets(pol, 0, 1, acts, r, np.ones((3, 4)), 0.0, 4, np.ones(3))
    assert np.array_equal(t, [0.0, 0.7, 0.0])


def test_continue_target_uses_next_head():
    pol = cad.ExitPolicy(1, 4, 4, lambda m: rng_stream(0, "q"))
    s2 = np.random.default_rng(0).normal(size=(2, 4))
    t = cad.bellman_targets(pol, 0, 1, np.array([cad.CONTINUE] * 2), np.zeros(2), s2, 0.9, 4, np.ones(2))
    assert np.allclose(t, 0.9 * pol.q_values(0, 2, s2).max(axis=1))
    last = cad.bellman_targets(pol, 0, 3, np.array([cad.CONTINUE]), np.zeros(1), s2[:1], 0.9, 4, np.array([0.5]))
    assert last[0] == 0.9 * 0.5


def _rigged_policy(tower, prefer):
    pol = cad.new_policy([tower], 0)
    for h in pol.heads[0]:
        h.w.value[...] = 0.0
        h.b.value[...] = [[0.0, 1.0]] if prefer == cad.EXIT else [[1.0, 0.0]]
    return pol


@pytest.mark.parametrize("prefer,expected", [(cad.EXIT, 1), (cad.CONTINUE, 2)])
def test_rigged_exit(prefer, expected):
    t = toy_towers()[0]
    x = np.random.default_rng(0).normal(size=3)
    d, z = cad.choose_exit(t, _rigged_policy(t, prefer), 0, x)
    assert d == expected
    assert np.array_equal(z, cad.forward_to_depth(t, x, d)[0])


def test_policy_heads_cover_layers_below_last():
    pol = cad.ExitPolicy(2, 5, 4, lambda m: rng_stream(0, "q", m))
    assert [len(h) for h in pol.heads] == [4, 4]


def test_qlearn_depths_in_range_and_seed_free_inference(separable, trained):
    towers, res = trained
    pol = cad.new_policy(towers, 0)
    q = cad.qlearn_train(towers, pol, separable, res.table, Phase1Config(), QLearnConfig(epochs=5), seed=0)
    assert np.all((q.depths >= 1) & (q.depths <= SMALL.depth))
    assert np.all((q.rewards > 0.0) & (q.rewards <= 1.0))
    x = separable.features[0][:10]
    d1, _ = cad.choose_exit_batch(towers[0], pol, 0, x)
    d2, _ = cad.choose_exit_batch(towers[0], pol, 0, x)
    assert np.array_equal(d1, d2)
    for c in range(separable.num_classes):
        assert res.table.dists[0][c] is res.table.cache[0][q.depths[0, c] - 1][c]
