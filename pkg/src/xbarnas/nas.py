"""Crossbar-aware supernet search, subnet derivation, fine-tuning and evaluation.

One search epoch:

* Phase 1: a single Adam step on the weights with one clean training batch.
* Phase 2: crossbar noise is injected into the (frozen) weights and alpha is
  trained on PGD-7/PGD-20 validation batches (fair coin per batch), with an
  optional expected-area penalty.  ``MultiXbar`` brackets every alpha update
  with apply/restore of one noise profile per crossbar size.

Randomness is keyed: every (phase, epoch, purpose) draws from its own
``SeedSequence`` so runs are reproducible and variants consume identical
streams.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import blob
from .adversarial import AttackConfig, pgd_attack
from .crossbar import CrossbarSpec, NoiseProfile, apply_noise, map_layers, restore, sample_noise
from .hw_cost import AreaTable, expected_cost, regularized_loss
from .supernet import NUM_SLOTS, ArchParams, Supernet, slot_kinds

log = logging.getLogger(__name__)

VARIANTS = ("Xbar", "Xbar_Ar", "MultiXbar")

# stream keys
_PHASE1, _PHASE2, _PHASE2_ORDER, _FINETUNE, _FINETUNE_ORDER, _EVAL, _NOISE = range(1, 8)


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def noise_seed(seed: int, phase: int, epoch: int, size: int) -> int:
    return int(np.random.SeedSequence([int(seed), _NOISE, phase, epoch, size]).generate_state(1)[0])


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 1000
    phase2_batch_size: Optional[int] = None
    finetune_epochs: int = 40
    finetune_batch_size: int = 128
    validation_size: int = 5000
    lr_weights: float = 1e-3
    lr_arch: float = 3e-4
    lr_finetune: Optional[float] = None
    betas: Tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    variant: str = "Xbar"
    lam: float = 0.0
    lam_normalized: bool = False
    threshold: float = 0.2
    attack_steps: Tuple[int, int] = (7, 20)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.attack_steps = tuple(self.attack_steps)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.variant != "Xbar_Ar" and self.lam != 0:
            raise ValueError("an area penalty (lam > 0) is only meaningful for Xbar_Ar")
        if min(self.batch_size, self.finetune_batch_size, self.validation_size) < 1:
            raise ValueError("batch and validation sizes must be >= 1")
        if not 0 <= self.threshold < 1:
            raise ValueError("threshold must lie in [0, 1)")

    @property
    def arch_batch_size(self) -> int:
        return self.phase2_batch_size or self.batch_size


# ---------------------------------------------------------------------------
# subnet descriptor
# ---------------------------------------------------------------------------

@dataclass
class SubnetDescriptor:
    retained: List[Tuple[str, ...]]
    threshold: float = 0.2
    fallback_slots: Tuple[int, ...] = ()
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.retained) != NUM_SLOTS:
            raise ValueError(f"need {NUM_SLOTS} slots, got {len(self.retained)}")
        canon = []
        for s, kinds in enumerate(self.retained):
            allowed = slot_kinds(s)
            bad = [k for k in kinds if k not in allowed]
            if bad:
                raise ValueError(f"slot {s}: {bad} not among {allowed}")
            if not kinds:
                raise ValueError(f"slot {s} retains nothing")
            canon.append(tuple(k for k in allowed if k in kinds))
        self.retained = canon
        self.fallback_slots = tuple(self.fallback_slots)

    def gates(self) -> List[Tuple[float, ...]]:
        return [tuple(1.0 if k in self.retained[s] else 0.0 for k in slot_kinds(s))
                for s in range(NUM_SLOTS)]

    def to_string(self) -> str:
        return " → ".join(",".join(kinds) for kinds in self.retained)

    @classmethod
    def from_string(cls, text: str, **kw) -> "SubnetDescriptor":
        slots = [s for s in text.replace("->", "→").split("→")]
        retained = [tuple(k.strip() for k in s.split(",") if k.strip()) for s in slots]
        return cls(retained=retained, **kw)

    def to_text(self) -> str:
        lines = [f"architecture={self.to_string()}",
                 f"threshold={self.threshold!r}",
                 "fallback_slots=" + ",".join(map(str, self.fallback_slots))]
        lines += [f"provenance.{k}={self.provenance[k]}" for k in sorted(self.provenance)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SubnetDescriptor":
        kv = dict(line.split("=", 1) for line in text.strip().splitlines() if "=" in line)
        fb = tuple(int(v) for v in kv.get("fallback_slots", "").split(",") if v)
        prov = {k[len("provenance."):]: v for k, v in kv.items() if k.startswith("provenance.")}
        return cls.from_string(kv["architecture"], threshold=float(kv["threshold"]),
                               fallback_slots=fb, provenance=prov)


def derive_subnet(arch: ArchParams, th: float = 0.2, provenance: Optional[dict] = None) -> SubnetDescriptor:
    """Keep every constituent with p_j > th; empty slots fall back to the argmax."""
    retained, fallback = [], []
    for s, p in enumerate(arch.probabilities_np()):
        kinds = slot_kinds(s)
        keep = tuple(k for k, pj in zip(kinds, p) if pj > th)
        if not keep:
            keep = (kinds[int(np.argmax(p))],)
            fallback.append(s)
        retained.append(keep)
    return SubnetDescriptor(retained=retained, threshold=th, fallback_slots=tuple(fallback),
                            provenance=dict(provenance or {}))


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------

def phase1_step(net: Supernet, x: np.ndarray, y: np.ndarray, opt: ad.Adam) -> float:
    """One clean Adam step on the weights; alpha is frozen."""
    if len(x) == 0:
        raise ValueError("phase1_step needs a non-empty batch")
    opt.zero_grad()
    with ad.frozen(net.arch.alphas):
        loss = net.loss(x, y, training=True)
        ad.backward(loss)
    opt.step()
    return loss.item()


def _profiles(net: Supernet, specs: Sequence[CrossbarSpec], seed: int, phase: int,
              epoch: int) -> List[NoiseProfile]:
    weights = net.crossbar_weights()
    return [sample_noise(map_layers(weights, spec), spec, noise_seed(seed, phase, epoch, spec.size))
            for spec in specs]


def _arch_update(net: Supernet, x_adv, y, arch_opt: ad.Adam, lam: float,
                 table: Optional[AreaTable]) -> float:
    arch_opt.zero_grad()
    loss = net.loss(x_adv, y, training=False)
    if lam > 0:
        loss = regularized_loss(loss, expected_cost(net.arch, table), lam)
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"phase-2 loss became {loss.item()}")
    ad.backward(loss)
    arch_opt.step()
    return loss.item()


def phase2_epoch(net: Supernet, val_x: np.ndarray, val_y: np.ndarray, specs: Sequence[CrossbarSpec],
                 attack: AttackConfig, arch_opt: ad.Adam, epoch: int, cfg: TrainConfig,
                 tables: Optional[Sequence[AreaTable]] = None, lam: Optional[float] = None) -> float:
    """Train alpha for one pass over the validation set on noisy, frozen weights."""
    lam = cfg.lam if lam is None else lam
    if lam > 0 and not tables:
        raise ValueError("an area table per crossbar spec is required when lam > 0")
    tables = list(tables) if tables else [None] * len(specs)
    multi = cfg.variant == "MultiXbar"
    if not multi:
        specs, tables = list(specs)[:1], tables[:1]
    if not specs:
        raise ValueError("at least one crossbar spec is required")

    rng = keyed_rng(cfg.seed, _PHASE2, epoch)
    order = keyed_rng(cfg.seed, _PHASE2_ORDER, epoch).permutation(len(val_x))
    profiles = _profiles(net, specs, cfg.seed, _PHASE2, epoch)
    weights = net.crossbar_weights()
    bs = cfg.arch_batch_size
    losses = []

    with ad.frozen(net.params.values()):
        if not multi:
            apply_noise(weights, profiles[0])
        try:
            for start in range(0, len(order), bs):
                idx = order[start:start + bs]
                xb, yb = val_x[idx], val_y[idx]
                steps = cfg.attack_steps[int(rng.integers(2))]
                if multi:
                    x_adv = None
                    for i, prof in enumerate(profiles):
                        apply_noise(weights, prof)
                        try:
                            if x_adv is None:
                                x_adv = pgd_attack(net, xb, yb, attack.with_steps(steps), rng).x_adv
                            losses.append(_arch_update(net, x_adv, yb, arch_opt, lam, tables[i]))
                        finally:
                            restore(weights, prof)
                else:
                    x_adv = pgd_attack(net, xb, yb, attack.with_steps(steps), rng).x_adv
                    losses.append(_arch_update(net, x_adv, yb, arch_opt, lam, tables[0]))
        finally:
            if not multi:
                restore(weights, profiles[0])
    return float(np.mean(losses))


@dataclass
class EpochRecord:
    epoch: int
    phase1_loss: float
    phase2_loss: float
    alpha_unchanged_phase1: bool
    weights_unchanged_phase2: bool
    alphas: List[np.ndarray]


@dataclass
class SearchState:
    net: Supernet
    weight_opt: ad.Adam
    arch_opt: ad.Adam
    epochs_done: int = 0
    history: List[EpochRecord] = field(default_factory=list)


def new_search_state(net: Supernet, cfg: TrainConfig) -> SearchState:
    weight_opt = ad.Adam(list(net.params.values()), lr=cfg.lr_weights, betas=cfg.betas)
    arch_opt = ad.Adam(net.arch.alphas, lr=cfg.lr_arch, betas=cfg.betas)
    return SearchState(net=net, weight_opt=weight_opt, arch_opt=arch_opt)


def search(state: SearchState, train: Tuple[np.ndarray, np.ndarray], val: Tuple[np.ndarray, np.ndarray],
           specs: Sequence[CrossbarSpec], attack: AttackConfig, cfg: TrainConfig,
           tables: Optional[Sequence[AreaTable]] = None, lam: Optional[float] = None,
           epochs: Optional[int] = None) -> SearchState:
    """Run the two-phase search loop, checking phase separation every epoch."""
    net = state.net
    tx, ty = train
    vx, vy = val
    target = cfg.epochs if epochs is None else state.epochs_done + epochs
    while state.epochs_done < target:
        epoch = state.epochs_done
        rng = keyed_rng(cfg.seed, _PHASE1, epoch)
        idx = rng.choice(len(tx), size=min(cfg.batch_size, len(tx)), replace=False)
        a0 = net.arch.checksum()
        l1 = phase1_step(net, tx[idx], ty[idx], state.weight_opt)
        a_ok = net.arch.checksum() == a0
        w0 = net.weights_checksum()
        l2 = phase2_epoch(net, vx, vy, specs, attack, state.arch_opt, epoch, cfg, tables, lam)
        w_ok = net.weights_checksum() == w0
        if not (a_ok and w_ok):
            raise RuntimeError(f"epoch {epoch}: phase separation violated "
                               f"(alpha kept: {a_ok}, weights kept: {w_ok})")
        state.history.append(EpochRecord(epoch, l1, l2, a_ok, w_ok, net.arch.values()))
        state.epochs_done += 1
        log.info("epoch %d phase1 %.4f phase2 %.4f", epoch, l1, l2)
    return state


# ---------------------------------------------------------------------------
# fine-tuning and evaluation
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    epoch_losses: List[float]
    updates: int


def finetune(subnet: Supernet, train: Tuple[np.ndarray, np.ndarray], specs: Sequence[CrossbarSpec],
             attack: AttackConfig, epochs: int, cfg: TrainConfig) -> FinetuneResult:
    """Noise-aware adversarial training of a derived subnet.

    Each batch is the clean images plus PGD examples made against the noisy
    model; gradients taken at the noisy weights update the clean ones.  With
    several specs each batch gets one update per spec (same adversarial batch).
    """
    if subnet.gates is None:
        raise ValueError("finetune expects a derived subnet (call Supernet.as_subnet)")
    specs = list(specs) if cfg.variant == "MultiXbar" else list(specs)[:1]
    x, y = train
    params = list(subnet.weight_params().values())
    opt = ad.Adam(params, lr=cfg.lr_finetune or cfg.lr_weights, betas=cfg.betas)
    weights = subnet.crossbar_weights()
    losses, updates = [], 0
    for epoch in range(epochs):
        rng = keyed_rng(cfg.seed, _FINETUNE, epoch)
        order = keyed_rng(cfg.seed, _FINETUNE_ORDER, epoch).permutation(len(x))
        profiles = _profiles(subnet, specs, cfg.seed, _FINETUNE, epoch)
        ep = []
        for start in range(0, len(order), cfg.finetune_batch_size):
            idx = order[start:start + cfg.finetune_batch_size]
            xb, yb = x[idx], y[idx]
            steps = cfg.attack_steps[int(rng.integers(2))]
            x_adv = None
            for prof in profiles:
                apply_noise(weights, prof)
                try:
                    if x_adv is None:
                        x_adv = pgd_attack(subnet, xb, yb, attack.with_steps(steps), rng).x_adv
                    opt.zero_grad()
                    with ad.frozen(subnet.arch.alphas):
                        loss = subnet.loss(np.concatenate([xb, x_adv]), np.concatenate([yb, yb]),
                                           training=True)
                        ad.backward(loss)
                finally:
                    restore(weights, prof)
                opt.step()
                updates += 1
                ep.append(loss.item())
        losses.append(float(np.mean(ep)))
        log.info("finetune epoch %d loss %.4f", epoch, losses[-1])
    return FinetuneResult(losses, updates)


def evaluate(net: Supernet, x: np.ndarray, y: np.ndarray, spec: Optional[CrossbarSpec] = None,
             profile: Optional[NoiseProfile] = None, attack: Optional[AttackConfig] = None,
             seed: int = 0, batch_size: int = 256) -> float:
    """Top-1 accuracy (percent) on crossbars with a fixed noise profile.

    Without ``spec``/``profile`` the weights are used noise-free.  With
    ``attack`` the inputs are PGD examples crafted against the noisy model.
    """
    if profile is None and spec is not None:
        profile = sample_noise(map_layers(net.crossbar_weights(), spec), spec,
                               noise_seed(seed, _EVAL, 0, spec.size))
    weights = net.crossbar_weights()
    if profile is not None:
        apply_noise(weights, profile)
    try:
        rng = keyed_rng(seed, _EVAL, 0 if attack is None else attack.steps)
        correct = 0
        for start in range(0, len(x), batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            if attack is not None:
                xb = pgd_attack(net, xb, yb, attack, rng).x_adv
            correct += int((net.predict(xb, batch_size) == yb).sum())
    finally:
        if profile is not None:
            restore(weights, profile)
    return 100.0 * correct / len(x)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"XBCK"
CKPT_VERSION = 1


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def save_checkpoint(path, net: Supernet, config: dict, *, seed: int, epochs_done: int = 0,
                    optimizers: Optional[Dict[str, ad.Adam]] = None,
                    descriptor: Optional[SubnetDescriptor] = None, extra: Optional[dict] = None) -> None:
    arrays = {k: v for k, v in net.state_arrays().items()}
    opt_t = {}
    for name, opt in (optimizers or {}).items():
        opt_t[name] = opt.t
        for k, v in opt.state_arrays().items():
            arrays[f"opt/{name}/{k}"] = v
    header = {
        "kind": "subnet" if descriptor is not None else "supernet",
        "config_hash": config_hash(config),
        "supernet_config": asdict(net.config),
        "descriptor": descriptor.to_text() if descriptor is not None else None,
        "rng_state": {"scheme": "keyed-seedsequence", "seed": int(seed), "epochs_done": int(epochs_done)},
        "optimizer_steps": opt_t,
        "extra": extra or {},
    }
    blob.write(path, CKPT_MAGIC, CKPT_VERSION, header, arrays)


@dataclass
class Checkpoint:
    header: dict
    arrays: Dict[str, np.ndarray]

    @property
    def descriptor(self) -> Optional[SubnetDescriptor]:
        d = self.header.get("descriptor")
        return SubnetDescriptor.from_text(d) if d else None

    def build_net(self) -> Supernet:
        from .supernet import SupernetConfig
        net = Supernet(SupernetConfig(**self.header["supernet_config"]))
        net.load_state_arrays(self.arrays)
        if self.descriptor is not None:
            net.gates = self.descriptor.gates()
        return net

    def optimizer_arrays(self, name: str) -> Dict[str, np.ndarray]:
        pre = f"opt/{name}/"
        return {k[len(pre):]: v for k, v in self.arrays.items() if k.startswith(pre)}


def load_checkpoint(path) -> Checkpoint:
    header, arrays = blob.read(path, CKPT_MAGIC, (CKPT_VERSION,))
    return Checkpoint(header, arrays)


def baseline_descriptor() -> SubnetDescriptor:
    """Fixed plain CNN on the same skeleton: Conv3x3 in every slot, no search."""
    return SubnetDescriptor(retained=[("Conv3x3",)] * NUM_SLOTS, threshold=0.0,
                            provenance={"variant": "baseline"})
