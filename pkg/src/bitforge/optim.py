"""AdamW with bias correction and decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamWHyper", "OptimizerState", "optimizer_step", "clip_grad_norm", "NonFiniteGradError"]


class NonFiniteGradError(FloatingPointError):
    def __init__(self, step: int, name: str | None = None):
        self.step = step
        where = f" in {name}" if name else ""
        super().__init__(f"non-finite gradient{where} at step {step}; update rejected")


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 8e-6
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class OptimizerState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0


def optimizer_step(params: list[Tensor], grads: list[np.ndarray | None],
                   state: OptimizerState, hyper: AdamWHyper) -> None:
    """One in-place AdamW update; moments are keyed by parameter position."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteGradError(state.step + 1, p.name)
    state.step += 1
    t = state.step
    b1, b2 = hyper.betas
    bc1 = 1 - b1 ** t
    bc2 = 1 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(i)
        v = state.v.get(i)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[i], state.v[i] = m, v
        if hyper.weight_decay:
            p.data *= 1 - hyper.lr * hyper.weight_decay
        p.data -= hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)


def clip_grad_norm(grads: list[np.ndarray | None], max_norm: float) -> tuple[list, float]:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads if g is not None)))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        grads = [None if g is None else g * s for g in grads]
    return grads, total
