"""Per-layer asymmetric clipping search, run once before QAT."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Model, forward
from .quant import QuantConfig, fake_quant
from .tensor import Tensor

__all__ = [
    "ClipBounds", "CalibCache", "capture_activations", "apply_clip",
    "search_clip_bounds", "clip_objective", "clip_init_model",
    "DEFAULT_ROW_CAP", "DEFAULT_GRID_STEPS", "DEFAULT_SHRINK",
]

DEFAULT_ROW_CAP = 256
DEFAULT_GRID_STEPS = 32
DEFAULT_SHRINK = 0.5


@dataclass(frozen=True)
class ClipBounds:
    alpha: float
    beta: float
    layer_id: str = ""

    def __post_init__(self):
        if not (self.alpha < 0 < self.beta):
            raise ValueError(f"clip bounds need alpha < 0 < beta, got ({self.alpha}, {self.beta})")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta}


@dataclass
class CalibCache:
    features: dict[str, np.ndarray] = field(default_factory=dict)
    source: str = ""

    @property
    def sample_count(self) -> int:
        return max((x.shape[0] for x in self.features.values()), default=0)

    def __getitem__(self, layer_id: str) -> np.ndarray:
        try:
            return self.features[layer_id]
        except KeyError:
            raise KeyError(f"no cached activations for layer {layer_id!r}") from None


def _stride_subsample(rows: np.ndarray, cap: int) -> np.ndarray:
    n = rows.shape[0]
    if n <= cap:
        return rows
    idx = (np.arange(cap) * n) // cap
    return rows[idx]


def capture_activations(model: Model, calib_batches, layer_ids=None,
                        row_cap: int = DEFAULT_ROW_CAP, source: str = "") -> CalibCache:
    """Cache the input rows of each requested linear layer over ``calib_batches``."""
    names = list(model.quant_layer_names() if layer_ids is None else layer_ids)
    unknown = [n for n in names if n not in model.params]
    if unknown:
        raise KeyError(f"unknown layer id(s): {', '.join(unknown)}")
    store: dict[str, list] = {n: [] for n in names}
    for batch in calib_batches:
        forward(model, batch, capture=store)
    cache = CalibCache(source=source)
    for n, chunks in store.items():
        if not chunks:
            raise ValueError("no calibration batches were given")
        cache.features[n] = _stride_subsample(np.concatenate(chunks, axis=0), row_cap)
    return cache


def apply_clip(w, bounds: ClipBounds) -> Tensor:
    arr = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if not (bounds.alpha < 0 < bounds.beta):
        raise ValueError("clip bounds need alpha < 0 < beta")
    return Tensor(np.clip(arr, bounds.alpha, bounds.beta))


def clip_objective(w: np.ndarray, gram: np.ndarray, config: QuantConfig, alpha: float, beta: float) -> float:
    """||Q(clip(w)) X^T - w X^T||_F^2 evaluated through the Gram matrix X^T X."""
    err = fake_quant(np.clip(w, alpha, beta), config) - w
    return float(((err @ gram) * err).sum())


def search_clip_bounds(w, X, config: QuantConfig, grid_steps: int = DEFAULT_GRID_STEPS,
                       shrink: float = DEFAULT_SHRINK, mode: str = "joint", layer_id: str = ""):
    """Grid search for (alpha, beta) minimizing the quantized-output error.

    Candidates are ``beta_i = max(w) (1 - i shrink / n)`` and
    ``alpha_j = min(w) (1 - j shrink / n)`` for ``i, j`` in ``0..n``.  ``mode``
    is ``"joint"`` (full product) or ``"coord"`` (beta with alpha at min(w),
    then alpha).  Ties keep the less aggressive clip.  Returns
    ``(ClipBounds, objective)``.
    """
    w = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != w.shape[-1]:
        raise ValueError(f"activation shape {X.shape} does not match weight input dim {w.shape[-1]}")
    if grid_steps < 2:
        raise ValueError("grid_steps must be >= 2")
    lo, hi = float(w.min()), float(w.max())
    if not (lo < 0 < hi):
        raise ValueError(f"layer {layer_id!r} weights do not straddle zero ({lo}, {hi})")
    gram = X.T @ X
    betas = [hi * (1 - i * shrink / grid_steps) for i in range(grid_steps + 1)]
    alphas = [lo * (1 - j * shrink / grid_steps) for j in range(grid_steps + 1)]

    best = (lo, hi, clip_objective(w, gram, config, lo, hi))

    def consider(a, b):
        nonlocal best
        obj = clip_objective(w, gram, config, a, b)
        if obj < best[2]:
            best = (a, b, obj)

    if mode == "joint":
        for b in betas:
            for a in alphas:
                consider(a, b)
    elif mode == "coord":
        for b in betas:
            consider(lo, b)
        b_star = best[1]
        for a in alphas:
            consider(a, b_star)
    else:
        raise ValueError(f"unknown search mode {mode!r}")
    return ClipBounds(best[0], best[1], layer_id), best[2]


def clip_init_model(model: Model, cache: CalibCache, config: QuantConfig,
                    grid_steps: int = DEFAULT_GRID_STEPS, mode: str = "joint",
                    force: bool = False) -> dict[str, ClipBounds]:
    """Search and apply bounds for every quantized layer, in place.

    Bounds are remembered on ``model.clip_bounds``; a layer that already has
    bounds is left alone unless ``force`` is set, so clipping happens once.
    """
    out: dict[str, ClipBounds] = {}
    for name in model.quant_layer_names():
        if name in model.clip_bounds and not force:
            out[name] = model.clip_bounds[name]
            continue
        X = cache[name]
        bounds, _ = search_clip_bounds(model.params[name], X, config, grid_steps, mode=mode, layer_id=name)
        p = model.params[name]
        p.data = apply_clip(p, bounds).data
        model.clip_bounds[name] = bounds
        out[name] = bounds
    return out
