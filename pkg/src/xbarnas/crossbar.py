"""Mapping layer weights onto n x n memristive crossbars and injecting device variation.

A conv weight [O, C, k, k] is unrolled to a [C*k*k, O] matrix (one input
activation per row, one output channel per column), zero-padded up to
multiples of n and cut into n x n tiles.  Weight magnitudes are programmed as
conductances in [G_MIN, G_MAX] on 2**bits uniform levels; the sign stays in
the digital domain.  Device variation perturbs the programmed conductance and
the change is mapped back to an additive weight perturbation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from . import blob

NOISE_MODELS = ("multiplicative", "additive-per-level")


@dataclass(frozen=True)
class CrossbarSpec:
    size: int = 64
    r_min: float = 100e3
    r_max: float = 1e6
    weight_bits: int = 8
    sigma_over_mu: float = 0.35
    noise_model: str = "multiplicative"

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"crossbar size must be >= 2, got {self.size}")
        if not 0 < self.r_min < self.r_max:
            raise ValueError(f"need 0 < r_min < r_max, got {self.r_min}, {self.r_max}")
        if self.weight_bits < 1:
            raise ValueError("weight_bits must be >= 1")
        if self.sigma_over_mu < 0:
            raise ValueError(f"sigma_over_mu must be >= 0, got {self.sigma_over_mu}")
        if self.noise_model not in NOISE_MODELS:
            raise ValueError(f"noise_model must be one of {NOISE_MODELS}")

    @property
    def g_min(self) -> float:
        return 1.0 / self.r_max

    @property
    def g_max(self) -> float:
        return 1.0 / self.r_min

    @property
    def levels(self) -> int:
        return 2 ** self.weight_bits

    def with_sigma(self, sigma: float) -> "CrossbarSpec":
        d = asdict(self)
        d["sigma_over_mu"] = sigma
        return CrossbarSpec(**d)


@dataclass(frozen=True)
class LayerMapping:
    name: str
    weight_shape: tuple
    rows: int
    cols: int
    n: int

    @property
    def r_pad(self) -> int:
        return (self.n - self.rows % self.n) % self.n

    @property
    def c_pad(self) -> int:
        return (self.n - self.cols % self.n) % self.n

    @property
    def padded_shape(self) -> tuple:
        return self.rows + self.r_pad, self.cols + self.c_pad

    @property
    def grid(self) -> tuple:
        return math.ceil(self.rows / self.n), math.ceil(self.cols / self.n)

    @property
    def tile_count(self) -> int:
        tr, tc = self.grid
        return tr * tc

    def occupancy(self) -> np.ndarray:
        """Boolean [tiles_r, tiles_c, n, n]: True where a real weight sits."""
        mask = np.zeros(self.padded_shape, dtype=bool)
        mask[:self.rows, :self.cols] = True
        return to_tiles(mask, self.n)


def weight_matrix(w: np.ndarray) -> np.ndarray:
    """2-D crossbar view of a conv [O, C, k, k] or dense [O, F] weight."""
    w = np.asarray(w)
    if w.ndim == 4:
        return w.reshape(w.shape[0], -1).T
    if w.ndim == 2:
        return w.T
    raise ValueError(f"cannot map a weight of rank {w.ndim}")


def matrix_to_weight(mat: np.ndarray, shape: tuple) -> np.ndarray:
    if len(shape) == 4:
        return np.ascontiguousarray(mat.T).reshape(shape)
    return np.ascontiguousarray(mat.T)


def logical_dims(shape: Sequence[int]) -> tuple:
    if len(shape) == 4:
        o, c, kh, kw = shape
        return c * kh * kw, o
    if len(shape) == 2:
        return shape[1], shape[0]
    raise ValueError(f"cannot map a weight of rank {len(shape)}")


def reshape_and_tile(weight, spec: Union[CrossbarSpec, int], name: str = "") -> LayerMapping:
    """Tiling plan for a weight (array, Tensor or shape tuple) on n x n arrays."""
    n = spec.size if isinstance(spec, CrossbarSpec) else int(spec)
    if isinstance(weight, (tuple, list)):
        shape = tuple(int(s) for s in weight)
    else:
        shape = tuple(getattr(weight, "shape"))
    if any(s < 1 for s in shape):
        raise ValueError(f"weight dims must be >= 1, got {shape}")
    rows, cols = logical_dims(shape)
    return LayerMapping(name=name, weight_shape=shape, rows=rows, cols=cols, n=n)


def to_tiles(mat: np.ndarray, n: int) -> np.ndarray:
    """Zero-pad a 2-D matrix to multiples of n and split into [tr, tc, n, n]."""
    r, c = mat.shape
    pr, pc = (n - r % n) % n, (n - c % n) % n
    padded = np.pad(mat, ((0, pr), (0, pc)))
    tr, tc = padded.shape[0] // n, padded.shape[1] // n
    return padded.reshape(tr, n, tc, n).transpose(0, 2, 1, 3)


def from_tiles(tiles: np.ndarray, rows: int, cols: int) -> np.ndarray:
    tr, tc, n, _ = tiles.shape
    return tiles.transpose(0, 2, 1, 3).reshape(tr * n, tc * n)[:rows, :cols]


def weights_to_conductance(w, w_max_abs: float, spec: CrossbarSpec) -> np.ndarray:
    """Quantised conductance for |w| on a linear scale from G_MIN to G_MAX."""
    if w_max_abs <= 0:
        raise ValueError("w_max_abs must be positive")
    mag = np.abs(np.asarray(w, dtype=np.float64))
    if np.any(mag > w_max_abs * (1 + 1e-12)):
        raise ValueError("|w| exceeds w_max_abs; pass the layer's maximum magnitude")
    steps = spec.levels - 1
    level = np.floor(np.minimum(mag / w_max_abs, 1.0) * steps + 0.5)
    return spec.g_min + level / steps * (spec.g_max - spec.g_min)


def conductance_to_weight(g, w_max_abs: float, spec: CrossbarSpec) -> np.ndarray:
    return (np.asarray(g) - spec.g_min) / (spec.g_max - spec.g_min) * w_max_abs


def perturb_conductance(g: np.ndarray, deviation: np.ndarray, spec: CrossbarSpec) -> np.ndarray:
    """Apply a sampled deviation to programmed conductances, clamped to the device range."""
    if spec.noise_model == "multiplicative":
        noisy = g * (1.0 + deviation)
    else:
        # deviation already in siemens, independent of the programmed level
        noisy = g + deviation
    return np.clip(noisy, spec.g_min, spec.g_max)


def column_current(v, g) -> np.ndarray:
    """Per-column currents I_j = sum_i G_ij * V_i of one crossbar tile."""
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or v.shape != (g.shape[0],):
        raise ValueError(f"need len(V) == rows of G; got V {v.shape}, G {g.shape}")
    return v @ g


def underutilization(mapping: LayerMapping) -> float:
    """Percent of padded crossbar capacity holding zero-padding."""
    useful_r, useful_c = mapping.rows, mapping.cols
    rp, cp = mapping.r_pad, mapping.c_pad
    num = useful_r * cp + useful_c * rp + rp * cp
    return num / ((useful_r + rp) * (useful_c + cp)) * 100.0


def mean_underutilization(mappings: Iterable[LayerMapping]) -> float:
    """Mean over the layers that actually need padding; 0 when none do."""
    vals = [underutilization(m) for m in mappings if m.r_pad or m.c_pad]
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------------------
# noise profiles
# ---------------------------------------------------------------------------

@dataclass
class NoiseProfile:
    """Per-device deviations for a set of layers, stored in each weight's own layout.

    ``deviations[name]`` is relative (multiplicative model) or in siemens
    (additive model).  Padding cells never enter the stored arrays.
    """

    spec: CrossbarSpec
    seed: int
    mappings: Dict[str, LayerMapping]
    deviations: Dict[str, np.ndarray]
    _clean: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)

    @property
    def is_identity(self) -> bool:
        return all(not np.any(d) for d in self.deviations.values())

    def perturbation(self, name: str, w: np.ndarray) -> np.ndarray:
        """Additive weight change for the current clean weight ``w``."""
        dev = self.deviations[name]
        if dev.shape != w.shape:
            raise ValueError(f"profile for {name!r} has shape {dev.shape}, weight is {w.shape}")
        wmax = float(np.abs(w).max())
        if wmax == 0.0:
            return np.zeros_like(w)
        g = weights_to_conductance(w, wmax, self.spec)
        g_noisy = perturb_conductance(g, dev, self.spec)
        return np.sign(w) * (g_noisy - g) / (self.spec.g_max - self.spec.g_min) * wmax

    def noisy(self, name: str, w: np.ndarray) -> np.ndarray:
        return w + self.perturbation(name, w)

    def to_bytes(self) -> bytes:
        header = {
            "spec": asdict(self.spec),
            "seed": int(self.seed),
            "layers": [{"name": k, "shape": list(m.weight_shape)} for k, m in self.mappings.items()],
        }
        return blob.dumps(_PROFILE_MAGIC, 1, header, self.deviations)

    @classmethod
    def from_bytes(cls, data: bytes) -> "NoiseProfile":
        header, arrays = blob.loads(data, _PROFILE_MAGIC, (1,))
        spec = CrossbarSpec(**header["spec"])
        mappings = {}
        for layer in header["layers"]:
            m = reshape_and_tile(tuple(layer["shape"]), spec, name=layer["name"])
            mappings[layer["name"]] = m
            if arrays[layer["name"]].shape != m.weight_shape:
                raise blob.BlobFormatError(f"layer {layer['name']!r}: stored shape mismatch")
        return cls(spec=spec, seed=header["seed"], mappings=mappings,
                   deviations={k: arrays[k] for k in mappings})

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "NoiseProfile":
        return cls.from_bytes(Path(path).read_bytes())


_PROFILE_MAGIC = b"XBNP"


def sample_noise(mappings: Union[LayerMapping, Sequence[LayerMapping], Mapping[str, LayerMapping]],
                 spec: CrossbarSpec, seed: int) -> NoiseProfile:
    """Draw one Gaussian deviation per crossbar device, padded cells included.

    Draws are made over each layer's full padded tile grid so the realised
    profile depends on the crossbar size; padding draws are then discarded.
    """
    if spec.sigma_over_mu < 0:
        raise ValueError("sigma_over_mu must be >= 0")
    if isinstance(mappings, LayerMapping):
        mappings = [mappings]
    if isinstance(mappings, Mapping):
        mappings = list(mappings.values())
    rng = np.random.default_rng(seed)
    sigma = spec.sigma_over_mu
    if spec.noise_model == "additive-per-level":
        sigma = sigma * 0.5 * (spec.g_min + spec.g_max)
    out_maps, devs = {}, {}
    for i, m in enumerate(mappings):
        key = m.name or f"layer{i}"
        if key in out_maps:
            raise ValueError(f"duplicate layer name {key!r}")
        if m.n != spec.size:
            raise ValueError(f"mapping {key!r} was tiled for n={m.n}, spec has n={spec.size}")
        z = rng.standard_normal(m.padded_shape)
        dev_mat = sigma * z[:m.rows, :m.cols] if sigma > 0 else np.zeros((m.rows, m.cols))
        out_maps[key] = m
        devs[key] = matrix_to_weight(dev_mat, m.weight_shape)
    return NoiseProfile(spec=spec, seed=seed, mappings=out_maps, deviations=devs)


def apply_noise(weights: Mapping[str, "object"], profile: NoiseProfile):
    """Replace each mapped weight's data with its noisy value, caching the clean copy.

    ``weights`` maps layer name to a Tensor (anything with a ``.data`` array).
    """
    if profile._clean is not None:
        raise RuntimeError("profile already applied; call restore() first")
    missing = set(profile.mappings) - set(weights)
    if missing:
        raise ValueError(f"weights missing for layers {sorted(missing)}")
    for name in profile.mappings:
        if weights[name].data.shape != profile.deviations[name].shape:
            raise ValueError(f"shape mismatch for layer {name!r}")
    clean = {}
    for name in profile.mappings:
        t = weights[name]
        clean[name] = t.data.copy()
        t.data = profile.noisy(name, clean[name])
    profile._clean = clean
    return weights


def restore(weights: Mapping[str, "object"], profile: NoiseProfile):
    """Put back the exact clean arrays cached by ``apply_noise``."""
    if profile._clean is None:
        raise RuntimeError("profile is not applied")
    for name, arr in profile._clean.items():
        weights[name].data = arr
    profile._clean = None
    return weights


def map_layers(weights: Mapping[str, "object"], spec: CrossbarSpec) -> List[LayerMapping]:
    return [reshape_and_tile(w.shape if hasattr(w, "shape") else w, spec, name=name)
            for name, w in weights.items()]
