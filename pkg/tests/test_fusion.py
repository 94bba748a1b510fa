import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcav import pipeline as pl
from gcav.autodiff import Tape, Tensor, grad_check, grad_check_param, ops
from gcav.autoencoder import LayerAutoencoder
from gcav.cav import directional_derivatives, hard_score
from gcav.fusion import (FusionConfig, FusionModule, GlobalCav, RelaxationSchedule, decode_gcav,
                         fuse, fusion_consistency_loss, relaxed_tcav, soft_indicator, ste_indicator,
                         train_stage3, variance_loss)


def _z(b, L, d, seed=0):
    return np.random.default_rng(seed).normal(size=(b, L, d)).astype(np.float32)


# -- fusion block ----------------------------------------------------------------------

def test_fuse_shape():
    fm = FusionModule(3, 64)
    assert fuse(fm, _z(2, 3, 64)).shape == (2, 64)


def test_fuse_layer_count_mismatch():
    with pytest.raises(ValueError):
        fuse(FusionModule(3, 16), _z(2, 4, 16))


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        FusionModule(2, 10, heads=4)


def test_layer_order_matters():
    fm = FusionModule(3, 16, seed=1)
    z = _z(1, 3, 16)
    assert not np.allclose(fuse(fm, z), fuse(fm, z[:, ::-1].copy()))


def test_single_layer_pool_is_identity():
    fm = FusionModule(1, 8, heads=2, seed=2, unit_output=False)
    z = _z(3, 1, 8)
    x = ops.add(Tensor(z), fm.pos)
    x = fm.ln1(ops.add(x, fm.attention(x)))
    x = fm.ln2(ops.add(x, fm.ff2(ops.relu(fm.ff1(x)))))
    expected = fm.out(ops.reshape(x, (3, 8))).data
    np.testing.assert_allclose(fuse(fm, z), expected, atol=1e-6)


def test_unit_output():
    out = fuse(FusionModule(2, 8, heads=2), _z(4, 2, 8))
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-5)


def test_eval_is_deterministic_train_uses_dropout():
    fm = FusionModule(2, 8, heads=2, dropout=0.5)
    z = _z(2, 2, 8)
    assert np.array_equal(fuse(fm, z), fuse(fm, z))
    fm.train()
    a = fm(z, np.random.default_rng(0)).data
    assert not np.allclose(a, fuse(fm, z))


@pytest.mark.parametrize("seed", range(10))
def test_fusion_block_gradients(seed):
    fm = FusionModule(3, 8, heads=2, seed=seed)
    z = _z(2, 3, 8, seed)
    w = Tensor(np.random.default_rng(seed + 9).normal(size=(2, 8)))
    f = lambda t: ops.sum(ops.mul(fm(t), w))
    # small step keeps the stencil off the FFN ReLU kinks
    assert grad_check(f, Tensor(z), h=1e-5) <= 1e-3
    assert grad_check_param(lambda: f(Tensor(z)), fm.pos, h=1e-5) <= 1e-3
    assert grad_check_param(lambda: f(Tensor(z)), fm.wq.weight, h=1e-5) <= 1e-3


# -- decode --------------------------------------------------------------------------

def test_decode_gcav_per_layer():
    aes = {"L1": LayerAutoencoder("L1", 12, 8), "L2": LayerAutoencoder("L2", 20, 8)}
    g = GlobalCav("c0", 0, np.ones(8, np.float32))
    rec = decode_gcav(g, aes, ["L1", "L2"])
    assert [r.v.shape for r in rec.values()] == [(12,), (20,)]
    for r in rec.values():
        assert np.linalg.norm(r.v_unit) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(KeyError):
        decode_gcav(g, aes, ["L1", "L3"])


# -- relaxed scoring -----------------------------------------------------------------

@pytest.mark.parametrize("tau", [0.1, 1.0, 50.0])
def test_all_positive_scores_one(tau):
    grads = np.abs(np.random.default_rng(0).normal(size=(8, 5))) + 0.1
    v = np.ones(5, np.float32) / np.sqrt(5)
    assert relaxed_tcav(None, "L1", 0, None, v, tau, grads=grads).item() == 1.0


def test_soft_at_zero_is_half():
    assert soft_indicator(Tensor([0.0]), 7.0).data[0] == 0.5


def test_soft_close_to_hard_at_final_tau():
    g = np.random.default_rng(1)
    dots = g.choice([-1, 1], size=1000) * g.uniform(0.1, 2.0, size=1000)
    soft = soft_indicator(Tensor(dots), 50.0).data
    assert np.abs(soft - (dots > 0)).mean() <= 0.05


@given(st.integers(0, 100_000), st.floats(0.1, 100.0))
@settings(max_examples=60, deadline=None)
def test_ste_forward_equals_hard(seed, tau):
    g = np.random.default_rng(seed)
    n, d = int(g.integers(2, 40)), int(g.integers(1, 12))
    grads = g.normal(size=(n, d)).astype(np.float32)
    v = g.normal(size=d).astype(np.float32)
    v /= np.linalg.norm(v)
    hard = hard_score(directional_derivatives(grads, v))
    assert relaxed_tcav(None, "L", 0, None, v, tau, grads=grads).item() == hard


def test_ste_backward_is_sigmoid_slope():
    dots = Tensor([-0.3, 0.0, 0.8], requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ste_indicator(dots, 2.0))
    (g,) = tape.backward(y, [dots])
    s = 1 / (1 + np.exp(-2.0 * dots.data))
    np.testing.assert_allclose(g, 2.0 * s * (1 - s), rtol=1e-6)


def test_ste_rejects_bad_tau():
    with pytest.raises(ValueError):
        ste_indicator(Tensor([1.0]), 0.0)


def test_relaxed_tcav_empty_batch():
    with pytest.raises(ValueError):
        relaxed_tcav(None, "L", 0, None, np.ones(3), 1.0, grads=np.zeros((0, 3)))


def test_gradient_reaches_vector():
    grads = np.random.default_rng(2).normal(size=(16, 4))
    v = Tensor(np.full(4, 0.5), requires_grad=True)
    with Tape() as tape:
        s = relaxed_tcav(None, "L", 0, None, v, 1.0, grads=grads)
    (g,) = tape.backward(s, [v])
    assert np.abs(g).sum() > 0


# -- losses --------------------------------------------------------------------------

@pytest.mark.parametrize("rows,expected", [
    ([[0.4, 0.4, 0.4]], 0.0),
    ([[0.0, 1.0]], 0.25),
    ([[0.0, 1.0], [1.0, 1.0]], 0.125),
])
def test_variance_loss_hand_values(rows, expected):
    assert variance_loss(Tensor(rows)).item() == pytest.approx(expected, abs=1e-7)


@given(st.integers(0, 100_000))
@settings(max_examples=40, deadline=None)
def test_variance_loss_two_pass_oracle(seed):
    g = np.random.default_rng(seed)
    s = g.uniform(size=(int(g.integers(1, 9)), int(g.integers(2, 7))))
    oracle = 0.0
    for row in s:
        m = sum(row) / len(row)
        oracle += sum((x - m) ** 2 for x in row) / len(row)
    oracle /= len(s)
    assert variance_loss(Tensor(s)).item() == pytest.approx(oracle, abs=1e-6)


def test_variance_loss_needs_two_layers():
    with pytest.raises(ValueError):
        variance_loss(Tensor([[0.5]]))


@pytest.mark.parametrize("other,expected", [
    ([1.0, 2.0, 0.0], 0.0),
    ([-2.0, 1.0, 5.0], 1.0),
    ([-1.0, -2.0, 0.0], 2.0),
])
def test_fusion_consistency_hand_values(other, expected):
    v = Tensor([1.0, 2.0, 0.0])
    assert fusion_consistency_loss(v, Tensor(other)).item() == pytest.approx(expected, abs=1e-6)


def test_fusion_consistency_shape_mismatch():
    with pytest.raises(ValueError):
        fusion_consistency_loss(Tensor([1.0, 0.0]), Tensor([1.0, 0.0, 0.0]))


# -- schedule --------------------------------------------------------------------------

def test_schedule_endpoints_and_geometry():
    s = RelaxationSchedule(1.0, 50.0, 100)
    assert s.tau(0) == 1.0
    assert s.tau(100) == pytest.approx(50.0)
    assert s.tau(50) == pytest.approx(np.sqrt(50.0))
    assert s.tau(500) == pytest.approx(50.0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        RelaxationSchedule(5.0, 1.0)


# -- training on the small pipeline -----------------------------------------------------

def _stage3_inputs(ctx):
    cfg, store = ctx.cfg, ctx.store
    world, _, _ = pl.load_world(store)
    model = pl.load_model(store, cfg)
    aes = pl.load_autoencoders(store, cfg)
    head, aligned = pl.load_aligned(store)
    return cfg, world, model, aes, head, aligned


def test_stage3_freezes_earlier_stages(small_run):
    cfg, world, model, aes, head, aligned = _stage3_inputs(small_run)
    before = {l: ae.state_dict() for l, ae in aes.items()}
    head_before = head.state_dict()
    pl.fit_stage3(cfg, aligned, aes, small_run.grads(model, world), cfg.model.instrumented)
    for l, ae in aes.items():
        after = ae.state_dict()
        assert all(np.array_equal(before[l][k], after[k]) for k in after)
    assert all(np.array_equal(head_before[k], v) for k, v in head.state_dict().items())


def test_stage3_deterministic(small_run):
    cfg, world, model, aes, _, aligned = _stage3_inputs(small_run)
    grads = small_run.grads(model, world)
    a = pl.fit_stage3(cfg, aligned, aes, grads, cfg.model.instrumented).gcavs
    b = pl.fit_stage3(cfg, aligned, aes, grads, cfg.model.instrumented).gcavs
    assert all(np.array_equal(x.z_gcav, y.z_gcav) for x, y in zip(a, b))
    _, stored = pl.load_fusion(small_run.store, cfg)
    assert all(np.array_equal(x.z_gcav, y.z_gcav) for x, y in zip(a, stored))


def test_stage3_fusion_parameters_receive_gradient(small_run):
    cfg, world, model, aes, _, aligned = _stage3_inputs(small_run)
    res = train_stage3(aligned, aes, small_run.grads(model, world), cfg.model.instrumented,
                       FusionConfig(epochs=1, batch_size=8), seed=0)
    fresh = FusionModule(len(cfg.model.instrumented), cfg.stage1.d_embed, seed=0)
    moved = [not np.array_equal(p.data, q.data)
             for p, q in zip(res.module.parameters(), fresh.parameters())]
    assert all(moved)
    assert np.isfinite(res.losses).all()
