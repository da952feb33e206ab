"""White-box L-infinity PGD against any model exposing input gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 7
    step_size: float = 2 / 255
    epsilon: float = 8 / 255
    random_init: bool = True
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")

    def with_steps(self, steps: int) -> "AttackConfig":
        return AttackConfig(steps, self.step_size, self.epsilon, self.random_init, self.lo, self.hi)


@dataclass
class AdvBatch:
    x_adv: np.ndarray
    x: np.ndarray
    y_true: np.ndarray


def _edge(x: np.ndarray, d: float) -> np.ndarray:
    """x + d, pulled towards x by ulps until |edge - x| <= |d| holds in floating point."""
    e = x + d
    for _ in range(4):
        over = np.abs(e - x) > abs(d)
        if not over.any():
            break
        e = np.where(over, np.nextafter(e, x), e)
    return e


def pgd_attack(model, x: np.ndarray, y_true: np.ndarray, cfg: AttackConfig,
               rng: np.random.Generator) -> AdvBatch:
    """Iterated signed-gradient ascent on the cross-entropy, projected onto the eps-ball.

    ``model.input_gradient(x, y)`` must return ``(loss, dloss/dx)`` without
    touching parameters or normalisation statistics.  With ``cfg.epsilon == 0``
    the attack only clips ``x`` into the valid range.
    """
    grad_fn = getattr(model, "input_gradient", None)
    if not callable(grad_fn):
        raise TypeError(f"{type(model).__name__} does not expose input_gradient(x, y)")
    x = np.asarray(x, dtype=np.float64)
    y_true = np.asarray(y_true)
    eps = cfg.epsilon
    # eps-box intersected with [lo, hi]; an out-of-range x collapses it onto clip(x)
    xc = np.clip(x, cfg.lo, cfg.hi)
    lower = np.minimum(np.maximum(_edge(x, -eps), cfg.lo), xc)
    upper = np.maximum(np.minimum(_edge(x, eps), cfg.hi), xc)

    if cfg.random_init and eps > 0:
        x_adv = x + rng.uniform(-eps, eps, size=x.shape)
    else:
        x_adv = x.copy()
    x_adv = np.clip(x_adv, lower, upper)

    if eps > 0:
        for _ in range(cfg.steps):
            _, g = grad_fn(x_adv, y_true)
            x_adv = np.clip(x_adv + cfg.step_size * np.sign(g), lower, upper)
    return AdvBatch(x_adv=x_adv, x=x, y_true=y_true)
