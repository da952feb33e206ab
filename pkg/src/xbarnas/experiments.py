"""Desk-scale experiment protocols shared by scripts/ and the acceptance tests."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import nas
from .adversarial import AttackConfig
from .crossbar import CrossbarSpec
from .data import Dataset, carve_validation, gen_synthetic
from .hw_cost import CostModelConfig, build_area_table, edap_report, lambda_scale, subnet_cost
from .supernet import Supernet, SupernetConfig

log = logging.getLogger(__name__)


@dataclass
class DeskProtocol:
    """Synthetic 2-class 16x16 task with a width-8 supernet."""

    classes: int = 2
    per_class: int = 116
    test_per_class: int = 100
    size: int = 16
    margin: float = 0.05
    noise: float = 0.1
    validation_size: int = 32
    width: int = 8
    train: nas.TrainConfig = field(default_factory=lambda: nas.TrainConfig(
        epochs=20, batch_size=64, phase2_batch_size=32, finetune_epochs=10, finetune_batch_size=50,
        validation_size=32, lr_weights=3e-3, lr_arch=0.05))
    spec: CrossbarSpec = field(default_factory=CrossbarSpec)
    multi_specs: Tuple[CrossbarSpec, ...] = (CrossbarSpec(size=32), CrossbarSpec(size=64),
                                             CrossbarSpec(size=128))
    attack: AttackConfig = field(default_factory=AttackConfig)
    cost: CostModelConfig = field(default_factory=CostModelConfig)

    def dataset(self, seed: int) -> Dataset:
        ds = gen_synthetic(self.classes, self.per_class, self.size, seed=seed, margin=self.margin,
                           noise=self.noise, test_per_class=self.test_per_class)
        return carve_validation(ds, self.validation_size, seed)

    def net_config(self, seed: int) -> SupernetConfig:
        return SupernetConfig(in_channels=3, image_size=self.size, num_classes=self.classes,
                              width=self.width, seed=seed)

    def train_config(self, seed: int, **kw) -> nas.TrainConfig:
        return dataclasses.replace(self.train, seed=seed, **kw)


@dataclass
class SearchOutcome:
    seed: int
    variant: str
    lam: float
    net: Supernet
    descriptor: nas.SubnetDescriptor
    derived_area: float
    edap: float
    seconds: float


def run_search(proto: DeskProtocol, seed: int, variant: str = "Xbar", lam: float = 0.0,
               epochs: Optional[int] = None, ds: Optional[Dataset] = None) -> SearchOutcome:
    """Search on the desk task; ``lam`` is in normalised units (see hw_cost.lambda_scale).

    A positive ``lam`` turns the plain Xbar variant into Xbar_Ar.
    """
    t0 = time.time()
    if lam > 0 and variant == "Xbar":
        variant = "Xbar_Ar"
    ds = ds or proto.dataset(seed)
    net = Supernet(proto.net_config(seed))
    specs = list(proto.multi_specs) if variant == "MultiXbar" else [proto.spec]
    tables = [build_area_table(net.config, s, proto.cost) for s in specs]
    raw_lam = lam * lambda_scale(tables[0], proto.classes) if lam > 0 else 0.0
    cfg = proto.train_config(seed, variant=variant, lam=raw_lam)
    state = nas.new_search_state(net, cfg)
    nas.search(state, ds.train, ds.validation, specs, proto.attack, cfg, tables, raw_lam, epochs=epochs)
    d = nas.derive_subnet(net.arch, cfg.threshold, provenance={"variant": variant, "seed": seed, "lambda": lam})
    main_table = build_area_table(net.config, proto.spec, proto.cost)
    rep = edap_report(d, net.config, proto.spec, proto.cost)
    return SearchOutcome(seed, variant, lam, net, d, subnet_cost(d.retained, main_table), rep.edap,
                         time.time() - t0)


def run_finetune(proto: DeskProtocol, outcome: SearchOutcome, variant: str = "Xbar",
                 epochs: Optional[int] = None, ds: Optional[Dataset] = None) -> Supernet:
    ds = ds or proto.dataset(outcome.seed)
    sub = outcome.net.as_subnet(outcome.descriptor)
    cfg = proto.train_config(outcome.seed, variant=variant)
    specs = list(proto.multi_specs) if variant == "MultiXbar" else [proto.spec]
    nas.finetune(sub, ds.train, specs, proto.attack, cfg.finetune_epochs if epochs is None else epochs, cfg)
    return sub


def robustness(proto: DeskProtocol, net: Supernet, ds: Dataset, seed: int,
               steps: Sequence[int] = (2, 20)) -> Dict[str, float]:
    """Clean and PGD-n accuracy on the noisy crossbar (one fixed profile)."""
    x, y = ds.test
    out = {"clean": nas.evaluate(net, x, y, proto.spec, seed=seed)}
    for n in steps:
        out[f"pgd{n}"] = nas.evaluate(net, x, y, proto.spec, attack=proto.attack.with_steps(n), seed=seed)
    return out


def sigma_sweep(proto: DeskProtocol, net: Supernet, ds: Dataset, seed: int,
                sigmas: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5),
                attack_steps: Optional[int] = None) -> List[Dict[str, float]]:
    """Accuracy at fixed weights while only the device variation changes."""
    x, y = ds.test
    rows = []
    for s in sigmas:
        spec = proto.spec.with_sigma(s)
        row = {"sigma_over_mu": s, "clean_acc": nas.evaluate(net, x, y, spec, seed=seed)}
        if attack_steps:
            row[f"pgd{attack_steps}_acc"] = nas.evaluate(net, x, y, spec, attack=proto.attack.with_steps(attack_steps),
                                                         seed=seed)
        rows.append(row)
    return rows
