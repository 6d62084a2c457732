import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfcr import autodiff as ad
from pfcr.recon import (
    NumericalError,
    ReconUnit,
    blockwise_plan,
    build_plan,
    compute_G,
    finest_units,
    level_units,
    pfcr_run,
    recon_loss,
    reconstruct_unit,
    trainable_set,
    unit_forward,
)
from pfcr.vit import (
    QuantTable,
    ViTConfig,
    attach_quantizers,
    capture_intermediates,
    init_model,
    mhsa_forward,
    mlp_forward,
    unit_inputs,
)
from oracles import central_diff, rel_err


def brute_force_G(L: int) -> int:
    """Largest admissible level: exact tiling when 2L is a power of two,
    otherwise the largest g whose next level still fits strictly inside 2L."""
    n = 2 * L
    for g in range(64):
        if 2**g == n:
            return g
    return max(g for g in range(64) if 2 ** (g + 1) < n)


def _digest(model, exclude: tuple[str, ...] = ()) -> str:
    h = hashlib.sha256()
    for k, t in sorted(model.all_leaves().items()):
        if not k.startswith(exclude):
            h.update(k.encode() + t.data.tobytes())
    return h.hexdigest()


def _images(cfg, n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, cfg.in_chans, cfg.image_size, cfg.image_size)).astype(
        np.float32
    )


@pytest.fixture
def pair(tiny_config):
    """FP model and a quantized copy with both modes on."""
    fp = init_model(tiny_config, seed=0)
    q = fp.clone()
    attach_quantizers(q, QuantTable(4, 4), _images(tiny_config, 8))
    q.weight_quant_enabled = q.act_quant_enabled = True
    return fp, q


def test_compute_G_examples():
    assert compute_G(12) == 3
    assert compute_G(8) == 4
    assert compute_G(1) == 1
    assert compute_G(6) == 2


@pytest.mark.parametrize("L", range(1, 65))
def test_compute_G_matches_brute_force(L):
    assert compute_G(L) == brute_force_G(L)


def test_compute_G_rejects_empty_model():
    with pytest.raises(ValueError):
        compute_G(0)


def test_plan_unit_counts():
    plan = build_plan(12, 3, 4e-5, 800)
    assert [len(lv.units) for lv in plan.levels] == [24, 12, 6, 3]
    assert [lv.iters for lv in plan.levels] == [800, 960, 1120, 1280]
    assert plan.level(2).lr == pytest.approx(2.4e-5)


def test_trailing_partial_group_skipped():
    units = build_plan(10, 3, 4e-5, 100).level(3).units
    assert [u.start for u in units] == [0, 8]  # finest units 16..19 sit out


def test_plan_rejects_too_coarse_level():
    with pytest.raises(ValueError):
        build_plan(6, 3, 4e-5, 100)


def test_finest_units_alternate():
    units = finest_units(12)
    assert len(units) == 24
    assert [u.kind for u in units[:4]] == ["attn", "mlp", "attn", "mlp"]


@pytest.mark.parametrize("level,start", [(1, 1), (2, 2), (-1, 0)])
def test_unit_invariants(level, start):
    with pytest.raises(ValueError):
        ReconUnit(level, start)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.data())
def test_tiling_invariant(L, data):
    g = data.draw(st.integers(0, compute_G(L)))
    units = level_units(L, g)
    covered = [i for u in units for i in u.finest]
    assert len(units) == (2 * L) // 2**g
    assert covered == list(range(2**g * ((2 * L) // 2**g)))


def test_level_one_is_attention_then_mlp(pair):
    _, q = pair
    x = ad.Tensor(np.random.default_rng(0).normal(size=(2, 4, 16)).astype(np.float32))
    for l in range(4):
        ref = mlp_forward(mhsa_forward(x, q, l), q, l)
        np.testing.assert_array_equal(unit_forward(ReconUnit(1, 2 * l), x, q).data, ref.data)


@pytest.mark.parametrize("g", [1, 2, 3])
def test_unit_equals_composition_of_children(pair, g):
    _, q = pair
    x = ad.Tensor(np.random.default_rng(g).normal(size=(3, 4, 16)).astype(np.float32))
    for unit in level_units(4, g):
        left, right = unit.children()
        composed = unit_forward(right, unit_forward(left, x, q), q)
        np.testing.assert_array_equal(unit_forward(unit, x, q).data, composed.data)


def test_coarsest_chain_reproduces_truncated_forward(tiny_config):
    m = init_model(ViTConfig(**{**tiny_config.to_dict(), "depth": 3}), seed=4)
    imgs = _images(m.config, 3)
    G = compute_G(3)
    x = capture_intermediates(imgs, m)[0]
    units = level_units(3, G)
    for u in units:
        x = unit_forward(u, x, m).data
    np.testing.assert_array_equal(x, unit_inputs(imgs, m, units[-1].stop))


def test_recon_loss_zero_for_identical_models(pair):
    fp, _ = pair
    x = np.random.default_rng(0).normal(size=(2, 4, 16)).astype(np.float32)
    assert float(recon_loss(ReconUnit(1, 0), x, x, fp, fp.clone()).data) == 0.0


def test_recon_loss_is_hand_computed_mse(pair):
    fp, q = pair
    rng = np.random.default_rng(1)
    x_q, x_fp = rng.normal(size=(2, 2, 4, 16)).astype(np.float32)
    u = ReconUnit(0, 1)
    a = unit_forward(u, x_q, q).data.astype(np.float64)
    b = unit_forward(u, x_fp, fp).data.astype(np.float64)
    got = float(recon_loss(u, x_q, x_fp, q, fp).data)
    assert got == pytest.approx(float(np.mean((a - b) ** 2)), rel=1e-5)


def test_recon_loss_end_to_end_gradients_match_finite_differences():
    cfg = ViTConfig(depth=1, embed_dim=8, heads=2, patch_size=4, image_size=8, num_classes=3, mlp_ratio=2)
    fp = init_model(cfg, seed=0, dtype=np.float64)
    q = fp.clone()
    rng = np.random.default_rng(0)
    for t in q.params.values():
        t.data = t.data + rng.normal(scale=0.05, size=t.shape)
    x = rng.normal(size=(2, cfg.num_tokens, cfg.embed_dim))
    unit = ReconUnit(1, 0)
    named = trainable_set(unit, q)
    for t in named.values():
        t.requires_grad = True
    with ad.Tape() as tape:
        loss = recon_loss(unit, x, x, q, fp)
    ad.backward(loss, tape)
    for name, t in named.items():
        fd = central_diff(lambda: float(recon_loss(unit, x, x, q, fp).data), t.data)
        assert rel_err(t.grad, fd) < 1e-4, name


def test_trainable_set_covers_unit_only(pair):
    _, q = pair
    names = set(trainable_set(ReconUnit(0, 3), q))
    assert names
    assert all(n.startswith(("blocks.1.ln2.", "blocks.1.mlp.")) for n in names)
    assert "blocks.1.mlp.fc1.w@scale" in names and "blocks.1.mlp.fc1_in@scale" in names


def test_trainable_set_skips_disabled_quantizers(pair):
    _, q = pair
    q.weight_quant_enabled = False
    names = trainable_set(ReconUnit(1, 0), q)
    assert "blocks.0.attn.q.w@scale" not in names
    assert "blocks.0.attn.probs@scale" in names


def _inputs(fp, q, unit, n=16, seed=0):
    imgs = _images(fp.config, n, seed)
    return capture_intermediates(imgs, q)[unit.start], capture_intermediates(imgs, fp)[unit.start]


def test_reconstruct_unit_touches_only_active_unit(pair):
    fp, q = pair
    unit = ReconUnit(1, 2)
    x_q, x_fp = _inputs(fp, q, unit)
    fp_before = _digest(fp)
    others_before = _digest(q, exclude=tuple(unit.prefixes()))
    active_before = _digest(q)
    losses = reconstruct_unit(unit, x_q, x_fp, 5, 1e-3, q, fp, batch_size=8)
    assert len(losses) == 5
    assert _digest(fp) == fp_before
    assert _digest(q, exclude=tuple(unit.prefixes())) == others_before
    assert _digest(q) != active_before


def test_reconstruct_unit_zero_lr_is_a_no_op(pair):
    fp, q = pair
    unit = ReconUnit(0, 0)
    x_q, x_fp = _inputs(fp, q, unit)
    before = _digest(q)
    losses = reconstruct_unit(unit, x_q, x_fp, 4, 0.0, q, fp, batch_size=16)
    assert _digest(q) == before
    assert len(set(losses)) == 1


def test_reconstruct_unit_nan_names_the_unit(pair):
    fp, q = pair
    unit = ReconUnit(1, 4)
    x_q, x_fp = _inputs(fp, q, unit)
    x_q = x_q.copy()
    x_q[:] = np.nan
    with pytest.raises(NumericalError, match="level 1 unit 2"):
        reconstruct_unit(unit, x_q, x_fp, 3, 1e-3, q, fp)


def test_reconstruct_unit_rejects_bad_input(pair):
    fp, q = pair
    x = np.zeros((4, 4, 16), np.float32)
    with pytest.raises(ValueError):
        reconstruct_unit(ReconUnit(0, 0), x, x[:2], 3, 1e-3, q, fp)
    with pytest.raises(ValueError):
        reconstruct_unit(ReconUnit(0, 0), x, x, 0, 1e-3, q, fp)


def test_loss_decreases_on_most_seeds(tiny_config):
    improved = 0
    for seed in range(10):
        fp = init_model(tiny_config, seed=seed)
        q = fp.clone()
        attach_quantizers(q, QuantTable(3, 3), _images(tiny_config, 8, seed))
        q.weight_quant_enabled = q.act_quant_enabled = True
        unit = ReconUnit(1, 2)
        x_q, x_fp = _inputs(fp, q, unit, n=32, seed=seed)
        losses = reconstruct_unit(unit, x_q, x_fp, 30, 1e-3, q, fp, batch_size=32, seed=seed)
        improved += losses[-1] <= losses[0]
    assert improved >= 9


def test_g0_plan_is_module_wise(pair):
    fp, q = pair
    curves = pfcr_run(q, fp, _images(fp.config, 8), build_plan(4, 0, 1e-3, 2), batch_size=8)
    assert [c.level for c in curves] == [0] * 8


def test_level_one_only_plan_is_blockwise(pair):
    fp, q = pair
    imgs = _images(fp.config, 8)
    a, b = q.clone(), q.clone()
    pfcr_run(a, fp, imgs, build_plan(4, 1, 1e-3, 3, levels=[1]), batch_size=8)
    pfcr_run(b, fp, imgs, blockwise_plan(4, lr=build_plan(4, 1, 1e-3, 3).level(1).lr, iters=4), batch_size=8)
    assert _digest(a) == _digest(b)


def test_coarser_levels_start_from_finer_results(pair):
    fp, q = pair
    imgs = _images(fp.config, 8)
    snapshots = {}
    full = q.clone()
    pfcr_run(full, fp, imgs, build_plan(4, 2, 1e-3, 2), batch_size=8, on_level_done=lambda g, m: snapshots.setdefault(g, m.clone()))
    # resuming level 2 from the level-1 snapshot lands on the same parameters
    resumed = snapshots[1].clone()
    pfcr_run(resumed, fp, imgs, build_plan(4, 2, 1e-3, 2, levels=[2]), batch_size=8)
    assert _digest(resumed) == _digest(full)
    assert _digest(snapshots[1]) != _digest(snapshots[0])


def test_fp_input_policy_feeds_fp_inputs(pair):
    fp, q = pair
    imgs = _images(fp.config, 8)
    a, b = q.clone(), q.clone()
    pfcr_run(a, fp, imgs, build_plan(4, 1, 1e-3, 2, "fp_input"), batch_size=8)
    pfcr_run(b, fp, imgs, build_plan(4, 1, 1e-3, 2), batch_size=8)
    assert _digest(a) != _digest(b)


def test_pfcr_run_is_deterministic(pair):
    fp, q = pair
    imgs = _images(fp.config, 8)
    a, b = q.clone(), q.clone()
    ca = pfcr_run(a, fp, imgs, build_plan(4, 2, 1e-3, 2), batch_size=4, seed=3)
    cb = pfcr_run(b, fp, imgs, build_plan(4, 2, 1e-3, 2), batch_size=4, seed=3)
    assert [c.losses for c in ca] == [c.losses for c in cb]
    assert _digest(a) == _digest(b)
