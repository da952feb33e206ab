import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xbarnas import autodiff as ad
from xbarnas.autodiff import Tensor
from xbarnas.crossbar import CrossbarSpec
from xbarnas.hw_cost import (AreaTable, CostModelConfig, HardwareReport, build_area_table, edap_report,
                             expected_cost, lambda_scale, op_area, regularized_loss, report_from_layers,
                             subnet_cost)
from xbarnas.supernet import NUM_SLOTS, ArchParams, SupernetConfig, slot_kinds

from oracles import grad_check

COST = CostModelConfig()
CFG16 = SupernetConfig(in_channels=3, image_size=16, num_classes=2, width=16)


def test_skip_and_avgpool_are_free():
    spec = CrossbarSpec(size=64)
    assert op_area("skip", 16, 16, spec, COST) == 0.0
    assert op_area("AvgPool", 16, 16, spec, COST) == 0.0
    with pytest.raises(ValueError):
        op_area("Conv7x7", 16, 16, spec, COST)


def test_conv_area_by_tiling():
    table = build_area_table(CFG16, CrossbarSpec(size=64), COST)
    a = COST.area(64)
    assert table.lookup(1, "Conv3x3") == pytest.approx(3 * a)   # 144 x 16
    assert table.lookup(1, "Conv5x5") == pytest.approx(7 * a)   # 400 x 16
    assert table.lookup(2, "skip") == 0.0


@pytest.mark.parametrize("n", [32, 64, 128])
def test_conv5_never_cheaper(n):
    table = build_area_table(SupernetConfig(image_size=16, width=8), CrossbarSpec(size=n), COST)
    for s in range(NUM_SLOTS):
        assert table.lookup(s, "Conv5x5") >= table.lookup(s, "Conv3x3") > 0


def one_slot_table(phi_for_slot0):
    phi = [np.zeros(len(slot_kinds(s))) for s in range(NUM_SLOTS)]
    phi[0] = np.asarray(phi_for_slot0, float)
    return AreaTable(64, phi)


def test_expected_cost_weighted_mean():
    arch = ArchParams([np.log([0.25, 0.75])] + [np.zeros(len(slot_kinds(s))) for s in range(1, 9)])
    assert expected_cost(arch, one_slot_table([4.0, 8.0])).item() == pytest.approx(7.0, rel=1e-12)


def test_skip_one_hot_contributes_nothing():
    table = build_area_table(CFG16, CrossbarSpec(size=64), COST)
    vals = [np.zeros(2) if len(slot_kinds(s)) == 2 else np.array([-800.0, -800.0, -800.0, 0.0])
            for s in range(NUM_SLOTS)]
    op1_only = sum(table.phi[s].mean() for s in range(NUM_SLOTS) if len(slot_kinds(s)) == 2)
    assert expected_cost(ArchParams(vals), table).item() == pytest.approx(op1_only, rel=1e-12)


def test_expected_cost_gradient():
    rng = np.random.default_rng(0)
    arch = ArchParams([rng.standard_normal(len(slot_kinds(s))) for s in range(NUM_SLOTS)])
    table = build_area_table(CFG16, CrossbarSpec(size=32), COST)
    worst, n = grad_check(lambda: expected_cost(arch, table), arch.alphas, 4)
    assert n == 26 and worst < 1e-6


@settings(deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.lists(st.floats(0, 10), min_size=4, max_size=4))
def test_slot_contribution_is_convex_combination(alpha, phi):
    vals = [np.zeros(len(slot_kinds(s))) for s in range(NUM_SLOTS)]
    vals[2] = np.array(alpha)
    table = AreaTable(64, [np.zeros(len(slot_kinds(s))) for s in range(NUM_SLOTS)])
    table.phi[2] = np.array(phi)
    e = expected_cost(ArchParams(vals), table).item()
    assert min(phi) - 1e-12 <= e <= max(phi) + 1e-12


def test_regularized_loss_cases():
    ce = Tensor(2.3)
    assert regularized_loss(ce, Tensor(7.0), 0.0) is ce
    assert regularized_loss(ce, Tensor(7.0), 1.0).item() == pytest.approx(9.3)
    with pytest.raises(ValueError):
        regularized_loss(ce, Tensor(7.0), -0.1)


def test_regularized_gradient_is_linear():
    rng = np.random.default_rng(1)
    arch = ArchParams([rng.standard_normal(len(slot_kinds(s))) for s in range(NUM_SLOTS)])
    table = build_area_table(CFG16, CrossbarSpec(size=64), COST)
    target = [rng.standard_normal(a.shape) for a in arch.alphas]

    def ce():
        return ad.tsum(ad.stack_scalars([ad.tsum(ad.softmax(a) * Tensor(t)) for a, t in zip(arch.alphas, target)]))

    def grads(fn):
        for a in arch.alphas:
            a.grad = None
        ad.backward(fn())
        return [a.grad.copy() for a in arch.alphas]

    lam = 0.37
    g_ce, g_phi = grads(ce), grads(lambda: expected_cost(arch, table))
    g_tot = grads(lambda: regularized_loss(ce(), expected_cost(arch, table), lam))
    for a, b, c in zip(g_tot, g_ce, g_phi):
        np.testing.assert_allclose(a, b + lam * c, rtol=0, atol=1e-12)


def test_larger_lambda_step_lowers_expected_area():
    rng = np.random.default_rng(2)
    table = build_area_table(CFG16, CrossbarSpec(size=64), COST)
    init = [rng.standard_normal(len(slot_kinds(s))) * 0.3 for s in range(NUM_SLOTS)]
    target = [rng.standard_normal(len(v)) for v in init]
    after = []
    for lam in (0.0, 1e-2, 1e-1, 1.0, 10.0):
        arch = ArchParams(init)
        ce = ad.tsum(ad.stack_scalars([ad.tsum(ad.softmax(a) * Tensor(t)) for a, t in zip(arch.alphas, target)]))
        ad.backward(regularized_loss(ce, expected_cost(arch, table), lam))
        stepped = ArchParams([a.data - 1e-3 * a.grad for a in arch.alphas])
        after.append(expected_cost(stepped, table).item())
    assert all(b <= a for a, b in zip(after, after[1:]))


def test_lambda_scale_normalises_to_chance_loss():
    table = build_area_table(CFG16, CrossbarSpec(size=64), COST)
    arch = ArchParams()
    assert expected_cost(arch, table).item() * lambda_scale(table, 2) == pytest.approx(np.log(2))


# -- EDAP -------------------------------------------------------------------

def test_two_layer_spreadsheet():
    cost = CostModelConfig(tile_area_mm2={64: 0.01}, tile_energy_mJ={64: 2e-8}, tile_latency_ms={64: 1e-4},
                           periphery_area_factor=1.0, periphery_energy_factor=1.0, periphery_latency_factor=1.0)
    layers = [
        {"name": "c1", "shape": (16, 8, 3, 3), "reads": 64, "kind": "Conv3x3", "block": "R-I"},   # 72x16 -> 2 tiles
        {"name": "fc", "shape": (10, 100), "reads": 1, "kind": "FC", "block": None},              # 100x10 -> 2 tiles
    ]
    rep = report_from_layers(layers, CrossbarSpec(size=64), cost)
    area = 2 * 0.01 + 2 * 0.01
    energy = 2 * 64 * 2e-8 + 2 * 1 * 2e-8
    delay = 64 * 1e-4 + 1 * 1e-4
    assert [l.tiles for l in rep.layers] == [2, 2]
    assert rep.area_mm2 == pytest.approx(area)
    assert rep.energy_mJ == pytest.approx(energy)
    assert rep.delay_ms == pytest.approx(delay)
    assert rep.edap == pytest.approx(area * energy * delay)
    assert rep.block_edap["R-I"] == pytest.approx(0.02 * 2 * 64 * 2e-8 * 64 * 1e-4)
    assert rep.avg_underutilization_pct == pytest.approx(np.mean([100 * (1 - 72 * 16 / 8192),
                                                                  100 * (1 - 1000 / 8192)]))


def full_retained():
    return [slot_kinds(s) for s in range(NUM_SLOTS)]


def test_doubling_constants_multiplies_edap_by_eight():
    a = edap_report(full_retained(), CFG16, CrossbarSpec(size=64), COST)
    b = edap_report(full_retained(), CFG16, CrossbarSpec(size=64), COST.scaled(2.0))
    assert b.edap == pytest.approx(8 * a.edap, rel=1e-12)


def test_extra_conv_raises_edap():
    small = [("Conv3x3",)] + [("Conv3x3",) if len(slot_kinds(s)) == 2 else ("skip",) for s in range(1, 9)]
    bigger = [list(k) for k in small]
    bigger[4] = ["Conv3x3", "skip"]
    spec = CrossbarSpec(size=64)
    assert edap_report(bigger, CFG16, spec, COST).edap > edap_report(small, CFG16, spec, COST).edap
    assert subnet_cost(bigger, build_area_table(CFG16, spec, COST)) > subnet_cost(
        small, build_area_table(CFG16, spec, COST))


def test_report_fields_and_round_trip():
    rep = edap_report(full_retained(), CFG16, CrossbarSpec(size=32), COST)
    text = rep.to_text()
    for key in ("area_mm2=", "energy_mJ=", "delay_ms=", "edap=", "avg_underutilization_pct=",
                "block_edap.R-I=", "block_edap.R-IV=", "[layers]"):
        assert key in text
    back = HardwareReport.from_text(text)
    assert back == rep
    assert back.to_text() == text
    assert sum(rep.block_edap.values()) <= rep.edap
    assert rep.edap == pytest.approx(rep.area_mm2 * rep.energy_mJ * rep.delay_ms, rel=1e-12)


def test_cost_config_validation():
    with pytest.raises(ValueError):
        CostModelConfig(tile_area_mm2={64: 0.0})
    with pytest.raises(ValueError):
        CostModelConfig(periphery_energy_factor=-1.0)
    with pytest.raises(ValueError):
        COST.area(256)
