"""Crossbar area lookup, expected-area regulariser, and an analytical EDAP estimate.

The EDAP model is a deliberately simple stand-in for a circuit-level
simulator.  Per layer, with T tiles and R serialized reads (one per output
position):

    area   = T * A_tile
    energy = T * R * E_tile
    delay  = R * L_tile        (tiles of one layer read in parallel)

Network totals sum over layers; EDAP = energy * delay * area (mJ * ms * mm^2).
Per-tile constants are placeholders: compare ratios, not absolute values.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .crossbar import CrossbarSpec, mean_underutilization, reshape_and_tile, underutilization
from .supernet import (BLOCK_NAMES, KERNEL, NUM_SLOTS, ArchParams, SupernetConfig,
                       layer_plan, slot_channels, slot_kinds)


def _int_keys(d: Mapping) -> Dict[int, float]:
    return {int(k): float(v) for k, v in d.items()}


@dataclass
class CostModelConfig:
    # per-tile crossbar constants by array size n
    tile_area_mm2: Dict[int, float] = field(default_factory=lambda: {32: 0.0025, 64: 0.0075, 128: 0.026})
    tile_energy_mJ: Dict[int, float] = field(default_factory=lambda: {32: 4e-9, 64: 1.2e-8, 128: 4e-8})
    tile_latency_ms: Dict[int, float] = field(default_factory=lambda: {32: 6e-5, 64: 1e-4, 128: 1.8e-4})
    # ADC/DAC and other periphery as multipliers on the array constants
    periphery_area_factor: float = 1.5
    periphery_energy_factor: float = 2.0
    periphery_latency_factor: float = 1.2
    avgpool_area_mm2: float = 0.0

    def __post_init__(self):
        self.tile_area_mm2 = _int_keys(self.tile_area_mm2)
        self.tile_energy_mJ = _int_keys(self.tile_energy_mJ)
        self.tile_latency_ms = _int_keys(self.tile_latency_ms)
        for table in (self.tile_area_mm2, self.tile_energy_mJ, self.tile_latency_ms):
            if any(v <= 0 for v in table.values()):
                raise ValueError("per-tile cost constants must be positive")
        if min(self.periphery_area_factor, self.periphery_energy_factor,
               self.periphery_latency_factor) <= 0:
            raise ValueError("periphery factors must be positive")
        if self.avgpool_area_mm2 < 0:
            raise ValueError("avgpool_area_mm2 must be >= 0")

    def _lookup(self, table: Dict[int, float], n: int, what: str) -> float:
        if n not in table:
            raise ValueError(f"no {what} constant for {n}x{n} crossbars (have {sorted(table)})")
        return table[n]

    def area(self, n: int) -> float:
        return self._lookup(self.tile_area_mm2, n, "area") * self.periphery_area_factor

    def energy(self, n: int) -> float:
        return self._lookup(self.tile_energy_mJ, n, "energy") * self.periphery_energy_factor

    def latency(self, n: int) -> float:
        return self._lookup(self.tile_latency_ms, n, "latency") * self.periphery_latency_factor

    def scaled(self, factor: float) -> "CostModelConfig":
        """Copy with every per-tile constant multiplied by ``factor``."""
        d = asdict(self)
        for key in ("tile_area_mm2", "tile_energy_mJ", "tile_latency_ms"):
            d[key] = {k: v * factor for k, v in d[key].items()}
        return CostModelConfig(**d)


# ---------------------------------------------------------------------------
# area lookup and expected cost
# ---------------------------------------------------------------------------

@dataclass
class AreaTable:
    """phi[slot][j]: area of constituent j of a slot on n x n crossbars."""

    crossbar_size: int
    phi: List[np.ndarray]

    def lookup(self, slot: int, kind: str) -> float:
        return float(self.phi[slot][slot_kinds(slot).index(kind)])


def op_area(kind: str, c_in: int, c_out: int, spec: CrossbarSpec, cost: CostModelConfig) -> float:
    if kind == "skip":
        return 0.0
    if kind == "AvgPool":
        return cost.avgpool_area_mm2
    if kind not in KERNEL:
        raise ValueError(f"unknown operation kind {kind!r}")
    k = KERNEL[kind]
    return reshape_and_tile((c_out, c_in, k, k), spec).tile_count * cost.area(spec.size)


def build_area_table(config: SupernetConfig, spec: CrossbarSpec, cost: CostModelConfig) -> AreaTable:
    phi = []
    for slot in range(NUM_SLOTS):
        c_in, c_out = slot_channels(config, slot)
        phi.append(np.array([op_area(k, c_in, c_out, spec, cost) for k in slot_kinds(slot)]))
    return AreaTable(crossbar_size=spec.size, phi=phi)


def expected_cost(arch: ArchParams, table: AreaTable) -> Tensor:
    """Differentiable sum over slots of sum_j p_j * phi_j."""
    total = None
    for a, phi in zip(arch.alphas, table.phi):
        term = ad.tsum(ad.softmax(a) * Tensor(phi))
        total = term if total is None else total + term
    return total


def subnet_cost(retained: Sequence[Sequence[str]], table: AreaTable) -> float:
    """Area of the retained constituents (coefficient 1 each)."""
    return float(sum(table.lookup(s, k) for s in range(NUM_SLOTS) for k in retained[s]))


def uniform_cost(table: AreaTable) -> float:
    return float(sum(phi.mean() for phi in table.phi))


def regularized_loss(ce_loss: Tensor, exp_cost: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return ce_loss
    return ce_loss + exp_cost * float(lam)


def lambda_scale(table: AreaTable, num_classes: int) -> float:
    """Factor that puts lambda=1 at parity between chance-level CE and the uniform-mix area."""
    u = uniform_cost(table)
    return math.log(num_classes) / u if u > 0 else 0.0


# ---------------------------------------------------------------------------
# EDAP report
# ---------------------------------------------------------------------------

@dataclass
class LayerCost:
    name: str
    kind: str
    block: Optional[str]
    rows: int
    cols: int
    tiles: int
    reads: int
    underutilization_pct: float
    area_mm2: float
    energy_mJ: float
    delay_ms: float


@dataclass
class HardwareReport:
    crossbar_size: int
    layers: List[LayerCost]
    area_mm2: float
    energy_mJ: float
    delay_ms: float
    edap: float
    avg_underutilization_pct: float
    block_edap: Dict[str, float]

    def to_text(self) -> str:
        lines = [
            f"crossbar_size={self.crossbar_size}",
            f"area_mm2={self.area_mm2!r}",
            f"energy_mJ={self.energy_mJ!r}",
            f"delay_ms={self.delay_ms!r}",
            f"edap={self.edap!r}",
            f"avg_underutilization_pct={self.avg_underutilization_pct!r}",
        ]
        lines += [f"block_edap.{b}={self.block_edap[b]!r}" for b in BLOCK_NAMES]
        lines.append("[layers]")
        cols = ["name", "kind", "block", "rows", "cols", "tiles", "reads",
                "underutilization_pct", "area_mm2", "energy_mJ", "delay_ms"]
        lines.append(",".join(cols))
        for lc in self.layers:
            row = asdict(lc)
            row["block"] = row["block"] or "-"
            lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "HardwareReport":
        head, _, table = text.partition("[layers]\n")
        kv = dict(line.split("=", 1) for line in head.strip().splitlines())
        rows = table.strip().splitlines()
        cols = rows[0].split(",")
        layers = []
        for r in rows[1:]:
            d = dict(zip(cols, r.split(",")))
            layers.append(LayerCost(
                name=d["name"], kind=d["kind"], block=None if d["block"] == "-" else d["block"],
                rows=int(d["rows"]), cols=int(d["cols"]), tiles=int(d["tiles"]), reads=int(d["reads"]),
                underutilization_pct=float(d["underutilization_pct"]), area_mm2=float(d["area_mm2"]),
                energy_mJ=float(d["energy_mJ"]), delay_ms=float(d["delay_ms"])))
        return cls(
            crossbar_size=int(kv["crossbar_size"]), layers=layers,
            area_mm2=float(kv["area_mm2"]), energy_mJ=float(kv["energy_mJ"]),
            delay_ms=float(kv["delay_ms"]), edap=float(kv["edap"]),
            avg_underutilization_pct=float(kv["avg_underutilization_pct"]),
            block_edap={b: float(kv[f"block_edap.{b}"]) for b in BLOCK_NAMES})


def layer_costs(layers: Sequence[dict], spec: CrossbarSpec, cost: CostModelConfig) -> List[LayerCost]:
    n = spec.size
    out = []
    for layer in layers:
        m = reshape_and_tile(layer["shape"], spec, name=layer["name"])
        t, r = m.tile_count, int(layer["reads"])
        out.append(LayerCost(
            name=layer["name"], kind=layer["kind"], block=layer["block"], rows=m.rows, cols=m.cols,
            tiles=t, reads=r, underutilization_pct=underutilization(m),
            area_mm2=t * cost.area(n), energy_mJ=t * r * cost.energy(n), delay_ms=r * cost.latency(n)))
    return out


def report_from_layers(layers: Sequence[dict], spec: CrossbarSpec, cost: CostModelConfig) -> HardwareReport:
    lcs = layer_costs(layers, spec, cost)
    area = sum(l.area_mm2 for l in lcs)
    energy = sum(l.energy_mJ for l in lcs)
    delay = sum(l.delay_ms for l in lcs)
    blocks = {}
    for b in BLOCK_NAMES:
        mine = [l for l in lcs if l.block == b]
        blocks[b] = (sum(l.area_mm2 for l in mine) * sum(l.energy_mJ for l in mine)
                     * sum(l.delay_ms for l in mine))
    mappings = [reshape_and_tile(l["shape"], spec) for l in layers]
    return HardwareReport(crossbar_size=spec.size, layers=lcs, area_mm2=area, energy_mJ=energy,
                          delay_ms=delay, edap=energy * delay * area,
                          avg_underutilization_pct=mean_underutilization(mappings), block_edap=blocks)


def edap_report(subnet, config: SupernetConfig, spec: CrossbarSpec,
                cost: CostModelConfig) -> HardwareReport:
    """Hardware report for a derived subnet (a SubnetDescriptor or per-slot retained lists)."""
    retained = subnet.retained if hasattr(subnet, "retained") else subnet
    return report_from_layers(layer_plan(config, retained), spec, cost)
