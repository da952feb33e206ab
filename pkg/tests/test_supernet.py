import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xbarnas import autodiff as ad
from xbarnas.autodiff import Tensor
from xbarnas.supernet import (NUM_SLOTS, OP1_KINDS, OP2_KINDS, ArchParams, MixedOp, Supernet,
                              SupernetConfig, layer_plan, mixed_forward, slot_kinds)

from oracles import grad_check, naive_avgpool, naive_conv2d


def small_net(seed=0, classes=10, width=4):
    return Supernet(SupernetConfig(in_channels=3, image_size=16, num_classes=classes, width=width, seed=seed))


def images(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 3, 16, 16))


def test_slot_layout():
    assert NUM_SLOTS == 9
    assert OP1_KINDS == ("Conv3x3", "Conv5x5")
    assert OP2_KINDS == ("AvgPool", "Conv3x3", "Conv5x5", "skip")
    assert [len(slot_kinds(s)) for s in range(9)] == [2, 2, 4, 2, 4, 2, 4, 2, 4]


def test_arch_params_start_uniform():
    arch = ArchParams()
    for s, p in enumerate(arch.probabilities_np()):
        np.testing.assert_allclose(p, 1 / len(slot_kinds(s)))
    with pytest.raises(ValueError):
        ArchParams([np.zeros(2)] * 8)


def test_logits_shape_and_finite():
    out = small_net()(images(2)).data
    assert out.shape == (2, 10)
    assert np.isfinite(out).all()


def test_zero_weights_give_equal_logits():
    net = small_net()
    for name, t in net.params.items():
        if not name.endswith(".gamma"):
            t.data[...] = 0.0
    logits = net(images(3), training=True).data
    np.testing.assert_allclose(logits, logits[:, :1].repeat(10, axis=1), atol=0)


def test_too_small_input_names_minimum():
    net = small_net()
    with pytest.raises(ValueError, match="16x16"):
        net(np.zeros((1, 3, 8, 8)))
    with pytest.raises(ValueError):
        SupernetConfig(image_size=8)


def _op2(rng, c=3):
    return MixedOp(slot=2, kinds=OP2_KINDS, weights={
        "Conv3x3": Tensor(rng.standard_normal((c, c, 3, 3))),
        "Conv5x5": Tensor(rng.standard_normal((c, c, 5, 5)))})


def test_one_hot_skip_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 6, 6))
    p = ad.softmax(Tensor([-1e3, -1e3, -1e3, 0.0]))
    np.testing.assert_array_equal(mixed_forward(_op2(rng), Tensor(x), [0, 0, 0, 1.0]).data, x)
    np.testing.assert_allclose(mixed_forward(_op2(rng), Tensor(x), p).data, x, atol=1e-300)


def test_skip_avgpool_mix_on_constant():
    out = mixed_forward(_op2(np.random.default_rng(1)), Tensor(np.full((1, 3, 5, 5), 0.7)), [0.5, 0, 0, 0.5])
    np.testing.assert_allclose(out.data, 0.7, atol=1e-15)


def test_op1_mixture_matches_hand_composition():
    rng = np.random.default_rng(2)
    w3, w5 = rng.standard_normal((3, 3, 3, 3)), rng.standard_normal((3, 3, 5, 5))
    op = MixedOp(slot=1, kinds=OP1_KINDS, weights={"Conv3x3": Tensor(w3), "Conv5x5": Tensor(w5)})
    x = rng.standard_normal((1, 3, 6, 6))
    expect = 0.3 * naive_conv2d(x, w3, 1, 1) + 0.7 * naive_conv2d(x, w5, 1, 2)
    np.testing.assert_allclose(mixed_forward(op, Tensor(x), Tensor([0.3, 0.7])).data, expect, atol=1e-12)


def test_op2_mixture_matches_hand_composition():
    rng = np.random.default_rng(3)
    op = _op2(rng)
    x = rng.standard_normal((2, 3, 5, 5))
    p = np.array([0.1, 0.2, 0.3, 0.4])
    expect = (p[0] * naive_avgpool(x, 3, 1, 1) + p[1] * naive_conv2d(x, op.weights["Conv3x3"].data, 1, 1)
              + p[2] * naive_conv2d(x, op.weights["Conv5x5"].data, 1, 2) + p[3] * x)
    np.testing.assert_allclose(mixed_forward(op, Tensor(x), Tensor(p)).data, expect, atol=1e-12)


def test_mixed_forward_rejects_wrong_length():
    with pytest.raises(ValueError):
        mixed_forward(_op2(np.random.default_rng(0)), Tensor(np.zeros((1, 3, 4, 4))), [0.5, 0.5])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, NUM_SLOTS - 1), st.floats(-30, 30))
def test_alpha_shift_invariance(slot, shift):
    net = small_net(width=2)
    x = images(1)
    base = net(x).data
    net.arch.alphas[slot].data = np.random.default_rng(slot).standard_normal(len(slot_kinds(slot)))
    before = net(x).data
    p0 = net.arch.probabilities_np()[slot]
    net.arch.alphas[slot].data = net.arch.alphas[slot].data + shift
    np.testing.assert_allclose(net.arch.probabilities_np()[slot], p0, atol=1e-12)
    np.testing.assert_allclose(net(x).data, before, rtol=1e-9, atol=1e-12)
    assert base.shape == before.shape


def test_alpha_gradients_match_finite_differences():
    net = small_net(seed=4)
    for a in net.arch.alphas:
        a.data = np.random.default_rng(5).standard_normal(a.shape) * 0.5
    x, y = images(2, 1), np.array([3, 7])
    with ad.frozen(net.params.values()):
        worst, n = grad_check(lambda: net.loss(x, y), net.arch.alphas, 4)
    assert n == 26
    assert worst < 1e-5


def test_parameter_gradients_match_finite_differences():
    net = small_net(seed=6)
    x, y = images(2, 2), np.array([1, 4])
    params = list(net.params.values())
    worst, n = grad_check(lambda: net.loss(x, y, training=True), params + net.arch.alphas, 2,
                          np.random.default_rng(7))
    assert n > 2 * len(params)
    assert worst < 1e-4


def test_every_slot_gets_alpha_gradient():
    net = small_net(seed=8)
    ad.backward(net.loss(images(4, 3), np.array([0, 1, 2, 3])))
    live = sum(np.any(a.grad != 0) for a in net.arch.alphas)
    assert live >= 8


def test_input_gradient_leaves_state_alone():
    net = small_net(seed=9)
    before = net.weights_checksum()
    stats = [s.running_mean.copy() for s in net.bn.values()]
    loss, g = net.input_gradient(images(2), np.array([0, 1]))
    assert g.shape == (2, 3, 16, 16) and np.isfinite(loss)
    assert net.weights_checksum() == before
    assert all(np.array_equal(a, s.running_mean) for a, s in zip(stats, net.bn.values()))
    assert all(p.grad is None for p in net.params.values())


def test_subnet_gates_drop_constituents():
    net = small_net()
    net.gates = [(1.0, 0.0)] + [(0.0, 1.0) if len(slot_kinds(s)) == 2 else (0.0, 0.0, 0.0, 1.0)
                                for s in range(1, 9)]
    names = set(net.crossbar_weights())
    assert "stem.Conv3x3" in names and "stem.Conv5x5" not in names
    assert "R-I.op2.Conv3x3" not in names and "fc.weight" in names
    assert len(net.layer_info()) == 1 + 4 + 3 + 1


def test_layer_plan_shapes():
    cfg = SupernetConfig(in_channels=3, image_size=16, num_classes=2, width=8)
    plan = {l["name"]: l for l in layer_plan(cfg, [slot_kinds(s) for s in range(9)])}
    assert plan["stem.Conv5x5"]["shape"] == (8, 3, 5, 5)
    assert plan["R-IV.op2.Conv3x3"]["shape"] == (64, 64, 3, 3)
    assert plan["R-IV.op2.Conv3x3"]["reads"] == 4
    assert plan["D1.conv"]["shape"] == (16, 8, 3, 3)
    assert plan["fc.weight"]["shape"] == (2, 64)


def test_state_round_trip_and_determinism():
    a, b = small_net(seed=3), small_net(seed=3)
    assert a.weights_checksum() == b.weights_checksum()
    c = small_net(seed=4)
    c.load_state_arrays(a.state_arrays())
    x = images(2)
    assert a(x).data.tobytes() == c(x).data.tobytes()
