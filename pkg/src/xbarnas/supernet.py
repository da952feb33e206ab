"""Searchable residual network with nine softmax-mixed operation slots.

Layout (w = base width)::

    stem  Op-1  3 -> w          + BN + ReLU
    R-I   Op-1, Op-2  at w      then D: Conv3x3/2 w -> 2w + BN
    R-II  Op-1, Op-2  at 2w     then D: 2w -> 4w
    R-III Op-1, Op-2  at 4w     then D: 4w -> 8w
    R-IV  Op-1, Op-2  at 8w
    AvgPool 3x3/2 -> flatten -> FC

Residual block: ``relu(x + BN2(Op2(relu(BN1(Op1(x))))))``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

OP1_KINDS = ("Conv3x3", "Conv5x5")
OP2_KINDS = ("AvgPool", "Conv3x3", "Conv5x5", "skip")
KERNEL = {"Conv3x3": 3, "Conv5x5": 5}
NUM_SLOTS = 9
BLOCK_NAMES = ("R-I", "R-II", "R-III", "R-IV")
MIN_INPUT_SIZE = 16


def slot_kinds(slot: int) -> Tuple[str, ...]:
    if not 0 <= slot < NUM_SLOTS:
        raise IndexError(f"slot {slot} out of range")
    return OP1_KINDS if slot == 0 or slot % 2 == 1 else OP2_KINDS


def slot_block(slot: int) -> Optional[int]:
    """Residual block index of a slot, or None for the stem."""
    return None if slot == 0 else (slot - 1) // 2


@dataclass
class SupernetConfig:
    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10
    width: int = 16
    seed: int = 0
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self):
        if self.width < 1 or self.in_channels < 1:
            raise ValueError("channel widths must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.image_size < MIN_INPUT_SIZE:
            raise ValueError(f"image_size must be >= {MIN_INPUT_SIZE}, got {self.image_size}")
        if self.input_std <= 0:
            raise ValueError("input_std must be positive")

    @property
    def block_widths(self) -> Tuple[int, int, int, int]:
        w = self.width
        return (w, 2 * w, 4 * w, 8 * w)

    def block_spatial(self) -> Tuple[int, int, int, int]:
        sizes, s = [], self.image_size
        for _ in range(4):
            sizes.append(s)
            s = (s - 1) // 2 + 1
        return tuple(sizes)


class ArchParams:
    """Architecture logits alpha, one vector per slot (2 entries for Op-1, 4 for Op-2)."""

    def __init__(self, values: Optional[Sequence[Sequence[float]]] = None):
        if values is None:
            values = [np.zeros(len(slot_kinds(s))) for s in range(NUM_SLOTS)]
        if len(values) != NUM_SLOTS:
            raise ValueError(f"expected {NUM_SLOTS} slots, got {len(values)}")
        self.alphas: List[Tensor] = []
        for s, v in enumerate(values):
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (len(slot_kinds(s)),):
                raise ValueError(f"slot {s} needs {len(slot_kinds(s))} entries, got {v.shape}")
            self.alphas.append(Tensor(v.copy(), requires_grad=True, name=f"alpha{s}"))

    def probabilities(self) -> List[Tensor]:
        return [ad.softmax(a) for a in self.alphas]

    def probabilities_np(self) -> List[np.ndarray]:
        return [ad._softmax_np(a.data) for a in self.alphas]

    def values(self) -> List[np.ndarray]:
        return [a.data.copy() for a in self.alphas]

    def checksum(self) -> bytes:
        return b"".join(a.data.tobytes() for a in self.alphas)


@dataclass
class MixedOp:
    slot: int
    kinds: Tuple[str, ...]
    weights: Dict[str, Tensor] = field(default_factory=dict)

    def constituent(self, kind: str, x: Tensor) -> Tensor:
        if kind == "skip":
            return x
        if kind == "AvgPool":
            return ad.avgpool2d(x, kernel=3, stride=1, padding=1)
        k = KERNEL[kind]
        return ad.conv2d(x, self.weights[kind], stride=1, padding=k // 2)


def mixed_forward(op: MixedOp, x: Tensor, p) -> Tensor:
    """Sum of constituent outputs weighted by ``p`` (a Tensor or plain floats).

    Constituents whose weight is a plain zero are not evaluated.
    """
    if len(p) != len(op.kinds):
        raise ValueError(f"slot {op.slot}: {len(op.kinds)} constituents, {len(p)} coefficients")
    out = None
    for j, kind in enumerate(op.kinds):
        if isinstance(p, Tensor):
            coef = p[j]
        else:
            coef = float(p[j])
            if coef == 0.0:
                continue
        y = op.constituent(kind, x)
        if y.shape != x.shape and op.slot != 0:
            raise RuntimeError(f"slot {op.slot}: {kind} changed shape {x.shape} -> {y.shape}")
        term = y if (not isinstance(coef, Tensor) and coef == 1.0) else y * coef
        out = term if out is None else out + term
    if out is None:
        raise RuntimeError(f"slot {op.slot}: no constituent retained")
    return out


def slot_prefix(slot: int) -> str:
    if slot == 0:
        return "stem"
    return f"{BLOCK_NAMES[slot_block(slot)]}.op{1 if slot % 2 == 1 else 2}"


def slot_channels(config: SupernetConfig, slot: int) -> Tuple[int, int]:
    """(in, out) channels of the convolutions in a slot."""
    block = slot_block(slot)
    widths = config.block_widths
    c_out = widths[0] if block is None else widths[block]
    return (config.in_channels if slot == 0 else c_out), c_out


def layer_plan(config: SupernetConfig, active: Sequence[Sequence[str]]) -> List[dict]:
    """Crossbar-mapped layers of a network: name, weight shape, output positions, block.

    ``active[slot]`` lists the constituents computed in each slot.  Downsample
    convs and the classifier are always present and belong to no block.
    """
    spatial = config.block_spatial()
    info = []
    for slot in range(NUM_SLOTS):
        block = slot_block(slot)
        side = spatial[0] if block is None else spatial[block]
        c_in, c_out = slot_channels(config, slot)
        for kind in active[slot]:
            if kind not in slot_kinds(slot):
                raise ValueError(f"{kind!r} is not a constituent of slot {slot}")
            if kind in KERNEL:
                k = KERNEL[kind]
                info.append({"name": f"{slot_prefix(slot)}.{kind}", "shape": (c_out, c_in, k, k),
                             "reads": side * side, "slot": slot, "kind": kind,
                             "block": None if block is None else BLOCK_NAMES[block]})
    widths = config.block_widths
    for b in range(3):
        side = spatial[b + 1]
        info.append({"name": f"D{b + 1}.conv", "shape": (widths[b + 1], widths[b], 3, 3),
                     "reads": side * side, "slot": None, "kind": "Downsample", "block": None})
    final = (spatial[3] - 1) // 2 + 1
    info.append({"name": "fc.weight", "shape": (config.num_classes, widths[3] * final * final),
                 "reads": 1, "slot": None, "kind": "FC", "block": None})
    return info


def _kaiming(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Supernet:
    """The over-parameterised network; with ``gates`` set it runs as a derived subnet."""

    def __init__(self, config: SupernetConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.params: Dict[str, Tensor] = {}
        self.bn: Dict[str, ad.BatchNormState] = {}
        self.ops: List[MixedOp] = []
        self.arch = ArchParams()
        self.gates: Optional[List[Tuple[float, ...]]] = None

        widths = config.block_widths
        for slot in range(NUM_SLOTS):
            kinds = slot_kinds(slot)
            c_in, c_out = slot_channels(config, slot)
            op = MixedOp(slot=slot, kinds=kinds)
            for kind in kinds:
                if kind in KERNEL:
                    k = KERNEL[kind]
                    name = f"{slot_prefix(slot)}.{kind}"
                    t = Tensor(_kaiming(rng, (c_out, c_in, k, k)), requires_grad=True, name=name)
                    self.params[name] = t
                    op.weights[kind] = t
            self.ops.append(op)
            self._add_bn(f"{slot_prefix(slot)}.bn", c_out)

        for b in range(3):
            name = f"D{b + 1}.conv"
            self.params[name] = Tensor(_kaiming(rng, (widths[b + 1], widths[b], 3, 3)),
                                       requires_grad=True, name=name)
            self._add_bn(f"D{b + 1}.bn", widths[b + 1])

        feat = widths[3] * self._final_spatial() ** 2
        self.params["fc.weight"] = Tensor(rng.standard_normal((config.num_classes, feat)) * np.sqrt(1.0 / feat),
                                          requires_grad=True, name="fc.weight")
        self.params["fc.bias"] = Tensor(np.zeros(config.num_classes), requires_grad=True, name="fc.bias")

    # -- construction helpers ----------------------------------------------
    def _add_bn(self, name: str, c: int) -> None:
        self.params[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True, name=f"{name}.gamma")
        self.params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True, name=f"{name}.beta")
        self.bn[name] = ad.BatchNormState(c)

    def _final_spatial(self) -> int:
        return (self.config.block_spatial()[3] - 1) // 2 + 1

    # -- parameter views ---------------------------------------------------
    def active_kinds(self, slot: int) -> Tuple[str, ...]:
        kinds = slot_kinds(slot)
        if self.gates is None:
            return kinds
        return tuple(k for k, g in zip(kinds, self.gates[slot]) if g)

    def _inactive_names(self) -> set:
        out = set()
        for slot, op in enumerate(self.ops):
            active = self.active_kinds(slot)
            for kind, t in op.weights.items():
                if kind not in active:
                    out.add(t.name)
        return out

    def weight_params(self) -> Dict[str, Tensor]:
        """Trainable weights in use (dropped subnet constituents excluded)."""
        skip = self._inactive_names()
        return {k: v for k, v in self.params.items() if k not in skip}

    def crossbar_weights(self) -> Dict[str, Tensor]:
        """Weights that live on crossbars: every active conv kernel and the FC matrix."""
        return {k: v for k, v in self.weight_params().items()
                if v.ndim == 4 or k == "fc.weight"}

    def layer_info(self) -> List[dict]:
        return layer_plan(self.config, [self.active_kinds(s) for s in range(NUM_SLOTS)])

    def weights_checksum(self) -> bytes:
        return b"".join(self.params[k].data.tobytes() for k in sorted(self.params))

    # -- forward -----------------------------------------------------------
    def _coefficients(self):
        if self.gates is not None:
            return self.gates
        return self.arch.probabilities()

    def forward(self, x, training: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected input [N, {cfg.in_channels}, H, W], got {x.shape}")
        if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            if min(x.shape[2:]) < MIN_INPUT_SIZE:
                raise ValueError(f"input spatial size must be >= {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}, "
                                 f"got {x.shape[2]}x{x.shape[3]}")
            raise ValueError(f"network built for {cfg.image_size}x{cfg.image_size} inputs, got "
                             f"{x.shape[2]}x{x.shape[3]}")
        coeffs = self._coefficients()
        p = self.params

        h = (x - cfg.input_mean) / cfg.input_std
        h = mixed_forward(self.ops[0], h, coeffs[0])
        h = ad.relu(self._bn("stem.bn", h, training))
        for b, block in enumerate(BLOCK_NAMES):
            s1, s2 = 1 + 2 * b, 2 + 2 * b
            t = mixed_forward(self.ops[s1], h, coeffs[s1])
            t = ad.relu(self._bn(f"{block}.op1.bn", t, training))
            t = mixed_forward(self.ops[s2], t, coeffs[s2])
            t = self._bn(f"{block}.op2.bn", t, training)
            h = ad.relu(h + t)
            if b < 3:
                h = ad.conv2d(h, p[f"D{b + 1}.conv"], stride=2, padding=1)
                h = self._bn(f"D{b + 1}.bn", h, training)
        h = ad.avgpool2d(h, kernel=3, stride=2, padding=1)
        h = h.reshape(h.shape[0], -1)
        return ad.linear(h, p["fc.weight"], p["fc.bias"])

    def _bn(self, name: str, x: Tensor, training: bool) -> Tensor:
        return ad.batchnorm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                            self.bn[name], training)

    __call__ = forward

    def loss(self, x, y, training: bool = False) -> Tensor:
        return ad.cross_entropy(self.forward(x, training), y)

    def input_gradient(self, x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
        """Cross-entropy and its gradient w.r.t. the input; parameters and BN stats untouched."""
        xt = Tensor(x, requires_grad=True)
        with ad.frozen(list(self.params.values()) + self.arch.alphas):
            loss = ad.cross_entropy(self.forward(xt, training=False), y)
            ad.backward(loss)
        return loss.item(), xt.grad

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.forward(x[i:i + batch_size], training=False).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    # -- subnets -----------------------------------------------------------
    def as_subnet(self, descriptor) -> "Supernet":
        """Copy of this network running the descriptor's retained constituents with weight 1."""
        sub = copy.deepcopy(self)
        sub.gates = descriptor.gates()
        return sub

    # -- state -------------------------------------------------------------
    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        for k, st in self.bn.items():
            out[f"bn/{k}/mean"] = st.running_mean
            out[f"bn/{k}/var"] = st.running_var
        for i, a in enumerate(self.arch.alphas):
            out[f"alpha/{i}"] = a.data
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            src = arrays[f"param/{k}"]
            if src.shape != v.shape:
                raise ValueError(f"checkpoint shape mismatch for {k}: {src.shape} vs {v.shape}")
            v.data = np.array(src, dtype=np.float64)
        for k, st in self.bn.items():
            st.running_mean = np.array(arrays[f"bn/{k}/mean"])
            st.running_var = np.array(arrays[f"bn/{k}/var"])
        for i, a in enumerate(self.arch.alphas):
            a.data = np.array(arrays[f"alpha/{i}"])
