import numpy as np
import pytest

from vmcr import model as unet
from vmcr.autodiff import gradcheck
from vmcr.errors import ConfigError, ShapeError
from vmcr.losses import supervised_loss
from vmcr.model import UNetConfig


def test_invalid_config():
    with pytest.raises(ConfigError):
        UNetConfig(depth=0)
    with pytest.raises(ConfigError):
        UNetConfig(out_channels=3)


def test_param_count_matches_analytic_formula():
    cfg = UNetConfig(depth=3, base_channels=8, in_channels=3)
    pair = unet.build(cfg, seed=0)
    actual = sum(p.data.size for p in pair.student.values())

    # analytic count, written out layer by layer for the declared topology
    def dconv(cin, cout):
        return (cout * cin * 9 + cout) + (cout * cout * 9 + cout)

    expected = (dconv(3, 8) + dconv(8, 16) + dconv(16, 32)      # encoder
                + dconv(32, 64)                                  # bottleneck
                + dconv(64 + 32, 32) + dconv(32 + 16, 16)        # decoder
                + dconv(16 + 8, 8)
                + (2 * 8 * 1 + 2))                               # 1x1 head
    assert actual == expected == unet.param_count(cfg)


def test_same_seed_bit_identical():
    cfg = UNetConfig(depth=2, base_channels=4)
    p1 = unet.init_params(cfg, seed=42)
    p2 = unet.init_params(cfg, seed=42)
    for name in p1:
        assert np.array_equal(p1[name].data, p2[name].data)


def test_teacher_equals_student_at_init():
    pair = unet.build(UNetConfig(depth=2, base_channels=4), seed=1)
    for name in pair.student:
        assert np.array_equal(pair.student[name].data, pair.teacher[name].data)
        assert not pair.teacher[name].requires_grad


def test_forward_shape_contract():
    cfg = UNetConfig(depth=3, base_channels=4)
    pair = unet.build(cfg, seed=0)
    x = np.random.default_rng(0).random((1, 3, 32, 32)).astype(np.float32)
    out = unet.forward(pair.student, x, cfg)
    assert out.shape == (1, 2, 32, 32)


def test_indivisible_size_rejected():
    cfg = UNetConfig(depth=3, base_channels=4)
    pair = unet.build(cfg, seed=0)
    with pytest.raises(ShapeError):
        unet.forward(pair.student, np.zeros((1, 3, 36, 36), np.float32), cfg)


def test_teacher_forward_builds_no_graph():
    cfg = UNetConfig(depth=2, base_channels=4)
    pair = unet.build(cfg, seed=0)
    x = np.random.default_rng(1).random((1, 3, 16, 16)).astype(np.float32)
    out = unet.forward(pair.teacher, x, cfg, with_grad=False)
    assert not out.requires_grad and out._prev == ()
    assert all(p.grad is None for p in pair.teacher.values())


def test_forward_deterministic():
    cfg = UNetConfig(depth=2, base_channels=4)
    pair = unet.build(cfg, seed=3)
    x = np.random.default_rng(2).random((2, 3, 16, 16)).astype(np.float32)
    o1 = unet.forward(pair.student, x, cfg).data
    o2 = unet.forward(pair.student, x, cfg).data
    assert np.array_equal(o1, o2)


def test_batch_permutation_permutes_outputs():
    # no cross-sample interaction (no batch norm by design)
    cfg = UNetConfig(depth=2, base_channels=4)
    pair = unet.build(cfg, seed=5)
    x = np.random.default_rng(4).random((3, 3, 16, 16)).astype(np.float32)
    out = unet.forward(pair.student, x, cfg).data
    perm = [2, 0, 1]
    out_perm = unet.forward(pair.student, x[perm], cfg).data
    assert np.array_equal(out_perm, out[perm])


def test_end_to_end_gradcheck_16x16_depth2():
    rng = np.random.default_rng(8)
    cfg = UNetConfig(depth=2, base_channels=2)
    params = unet.init_params(cfg, seed=7, dtype=np.float64)
    for p in params.values():
        p.data += rng.standard_normal(p.data.shape) * 0.05
    x = rng.random((1, 3, 16, 16))
    y = (rng.random((1, 2, 16, 16)) < 0.2).astype(np.float64)
    names = list(params)

    def f(*ps):
        logits = unet.forward(dict(zip(names, ps)), x, cfg)
        return supervised_loss(logits, y, pos_weight=10.0)

    rep = gradcheck(f, [params[n] for n in names])
    assert rep.max_rel_error < 1e-4
