"""Group-wise weight quantizers: NF and INT formats, asymmetric and symmetric.

Groups run along the last (input) axis of a weight.  Each group owns its
scale parameters; a short trailing group is allowed and scaled on its own.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from statistics import NormalDist

import numpy as np

from .tensor import Tensor, custom_op

__all__ = [
    "QuantFormat", "QuantConfig", "Codebook", "QuantizedTensor", "ConfigError",
    "build_nf_codebook", "quantize_group_nf_asym", "quantize_group_int_asym",
    "quantize_group_sym", "quantize_tensor", "dequantize", "fake_quant",
    "fake_quant_ste", "quant_error_report", "default_format",
]


class ConfigError(ValueError):
    pass


class QuantFormat(str, enum.Enum):
    NF_ASYM = "NF_ASYM"
    NF_SYM = "NF_SYM"
    INT_ASYM = "INT_ASYM"
    INT_SYM = "INT_SYM"

    @property
    def is_nf(self) -> bool:
        return self in (QuantFormat.NF_ASYM, QuantFormat.NF_SYM)

    @property
    def is_asym(self) -> bool:
        return self in (QuantFormat.NF_ASYM, QuantFormat.INT_ASYM)


def default_format(bits: int) -> QuantFormat:
    """INT at 2 bits, NF above."""
    return QuantFormat.INT_ASYM if bits == 2 else QuantFormat.NF_ASYM


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 2
    format: QuantFormat = QuantFormat.INT_ASYM
    group_size: int = 128

    def __post_init__(self):
        object.__setattr__(self, "format", QuantFormat(self.format))
        if self.bits not in (2, 3, 4):
            raise ConfigError(f"bits must be 2, 3 or 4, got {self.bits}")
        if self.bits == 2 and self.format.is_nf:
            raise ConfigError("2-bit quantization uses an INT format")
        if self.group_size <= 0:
            raise ConfigError(f"group_size must be positive, got {self.group_size}")

    def to_dict(self) -> dict:
        return {"bits": self.bits, "format": self.format.value, "group_size": self.group_size}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        return cls(bits=int(d["bits"]), format=QuantFormat(d["format"]),
                   group_size=int(d.get("group_size", 128)))


@dataclass(frozen=True)
class Codebook:
    levels: np.ndarray
    kind: str  # "NF" or "INT"

    @property
    def zero_index(self) -> int:
        return int(np.flatnonzero(self.levels == 0.0)[0])


# Outermost quantile probability, as used by the NF4 construction of QLoRA.
NF_OFFSET = 0.5 * ((1 - 1 / (2 * 15)) + (1 - 1 / (2 * 16)))


@lru_cache(maxsize=None)
def _nf_levels(bits: int) -> tuple[float, ...]:
    nd = NormalDist()
    n_neg = 2 ** (bits - 1)
    n_pos = n_neg - 1

    def side(n):
        probs = np.linspace(NF_OFFSET, 0.5, n + 1)[:-1]
        q = np.array([nd.inv_cdf(p) for p in probs])
        return q / q[0]

    levels = np.concatenate([-side(n_neg), [0.0], side(n_pos)])
    levels.sort()
    return tuple(float(v) for v in levels)


def build_nf_codebook(bits: int) -> Codebook:
    """Normal-quantile codebook: 2^(b-1) negative levels, zero, 2^(b-1)-1 positive."""
    if bits not in (3, 4):
        raise ConfigError(f"NF codebooks exist for 3 or 4 bits, got {bits}")
    return Codebook(np.array(_nf_levels(bits)), "NF")


def int_codebook(bits: int) -> Codebook:
    return Codebook(np.arange(2 ** bits, dtype=np.float64), "INT")


def _nearest(x: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Index of the nearest level; exact ties go to the smaller-magnitude level."""
    hi = np.clip(np.searchsorted(levels, x), 1, len(levels) - 1)
    lo = hi - 1
    dlo = np.abs(x - levels[lo])
    dhi = np.abs(levels[hi] - x)
    pick_hi = (dhi < dlo) | ((dhi == dlo) & (np.abs(levels[hi]) < np.abs(levels[lo])))
    return np.where(pick_hi, hi, lo)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# ---------------------------------------------------------------- group kernels
# Each kernel works on a 2-D array of shape (n_groups, group_len) so whole
# matrices are handled in one call; the public single-group functions wrap it.

def _nf_asym_rows(w: np.ndarray, levels: np.ndarray):
    zi = int(np.flatnonzero(levels == 0.0)[0])
    pos = w > 0
    s_pos = np.where(pos, w, 0.0).max(axis=1)
    s_neg = -np.where(pos, 0.0, w).min(axis=1)
    s_pos = np.where(s_pos > 0, s_pos, 1.0)
    s_neg = np.where(s_neg > 0, s_neg, 1.0)
    x_pos = np.where(pos, w / s_pos[:, None], 0.0)
    x_neg = np.where(pos, 0.0, w / s_neg[:, None])
    codes_pos = zi + _nearest(x_pos, levels[zi:])
    codes_neg = _nearest(x_neg, levels[: zi + 1])
    codes = np.where(pos, codes_pos, codes_neg)
    return codes.astype(np.uint8), np.stack([s_pos, s_neg], axis=1)


def _nf_sym_rows(w: np.ndarray, levels: np.ndarray):
    s = np.abs(w).max(axis=1)
    s = np.where(s > 0, s, 1.0)
    codes = _nearest(w / s[:, None], levels)
    return codes.astype(np.uint8), s[:, None]


def _int_asym_rows(w: np.ndarray, bits: int):
    qmax = 2 ** bits - 1
    z = w.min(axis=1)
    span = w.max(axis=1) - z
    s = np.where(span > 0, span / qmax, 1.0)
    codes = np.clip(_round_half_away((w - z[:, None]) / s[:, None]), 0, qmax)
    return codes.astype(np.uint8), np.stack([s, z], axis=1)


def _int_sym_rows(w: np.ndarray, bits: int):
    q = 2 ** (bits - 1) - 1
    s = np.abs(w).max(axis=1) / q
    s = np.where(s > 0, s, 1.0)
    signed = np.clip(_round_half_away(w / s[:, None]), -q, q)
    return (signed + q).astype(np.uint8), s[:, None]


def _dequant_rows(codes: np.ndarray, params: np.ndarray, config: QuantConfig) -> np.ndarray:
    fmt = config.format
    c = codes.astype(np.int64)
    if fmt is QuantFormat.NF_ASYM:
        levels = build_nf_codebook(config.bits).levels
        lv = levels[c]
        return np.where(lv > 0, lv * params[:, 0:1], lv * params[:, 1:2])
    if fmt is QuantFormat.NF_SYM:
        return build_nf_codebook(config.bits).levels[c] * params[:, 0:1]
    if fmt is QuantFormat.INT_ASYM:
        return c * params[:, 0:1] + params[:, 1:2]
    q = 2 ** (config.bits - 1) - 1
    return (c - q) * params[:, 0:1]


def _quant_rows(w: np.ndarray, config: QuantConfig):
    fmt = config.format
    if fmt is QuantFormat.NF_ASYM:
        return _nf_asym_rows(w, build_nf_codebook(config.bits).levels)
    if fmt is QuantFormat.NF_SYM:
        return _nf_sym_rows(w, build_nf_codebook(config.bits).levels)
    if fmt is QuantFormat.INT_ASYM:
        return _int_asym_rows(w, config.bits)
    return _int_sym_rows(w, config.bits)


def _as_group(w_group) -> np.ndarray:
    g = np.asarray(w_group, dtype=np.float64).reshape(-1)
    if g.size == 0:
        raise ValueError("cannot quantize an empty group")
    return g[None, :]


def quantize_group_nf_asym(w_group, codebook: Codebook):
    """Return ``(codes, s_pos, s_neg)`` for one group.

    Positive weights use the non-negative half of the codebook scaled by
    ``s_pos``; weights <= 0 use the non-positive half scaled by ``s_neg``.
    """
    codes, p = _nf_asym_rows(_as_group(w_group), codebook.levels)
    return codes[0], float(p[0, 0]), float(p[0, 1])


def quantize_group_int_asym(w_group, bits: int):
    """Return ``(codes, s, z)`` with ``z`` the group minimum."""
    codes, p = _int_asym_rows(_as_group(w_group), bits)
    return codes[0], float(p[0, 0]), float(p[0, 1])


def quantize_group_sym(w_group, codebook_or_bits, format):
    """Single-scale symmetric quantization of one group; returns ``(codes, s)``.

    For INT_SYM the stored code is the signed code offset by 2^(b-1) - 1.
    """
    fmt = QuantFormat(format)
    g = _as_group(w_group)
    if fmt is QuantFormat.NF_SYM:
        cb = codebook_or_bits if isinstance(codebook_or_bits, Codebook) else build_nf_codebook(codebook_or_bits)
        codes, p = _nf_sym_rows(g, cb.levels)
    elif fmt is QuantFormat.INT_SYM:
        codes, p = _int_sym_rows(g, int(codebook_or_bits))
    else:
        raise ConfigError(f"{fmt.value} is not a symmetric format")
    return codes[0], float(p[0, 0])


# ---------------------------------------------------------------- tensors

@dataclass
class QuantizedTensor:
    """Per-element codes (one byte each) plus per-group parameters.

    ``group_params`` has one row per group in row-major (row, group) order:
    NF_ASYM ``(s_pos, s_neg)``, INT_ASYM ``(s, z)``, symmetric formats ``(s,)``.
    """

    codes: np.ndarray
    group_params: np.ndarray
    config: QuantConfig
    shape: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    @property
    def n_groups(self) -> int:
        return self.group_params.shape[0]


def _layout(shape: tuple[int, ...], group_size: int):
    cols = shape[-1] if shape else 1
    rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
    n_full, rem = divmod(cols, group_size)
    return rows, cols, n_full, rem


def _split(w2: np.ndarray, g: int, n_full: int, rem: int):
    rows = w2.shape[0]
    full = w2[:, : n_full * g].reshape(rows * n_full, g)
    tail = w2[:, n_full * g:] if rem else None
    return full, tail


def _merge_params(p_full, p_tail, rows, n_full, rem):
    # interleave so group order is row-major over (row, group)
    k = (p_full if p_full is not None else p_tail).shape[1]
    per_row = n_full + (1 if rem else 0)
    out = np.empty((rows, per_row, k))
    if n_full:
        out[:, :n_full] = p_full.reshape(rows, n_full, k)
    if rem:
        out[:, n_full] = p_tail
    return out.reshape(rows * per_row, k)


def quantize_tensor(w, config: QuantConfig) -> QuantizedTensor:
    arr = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if arr.size == 0:
        raise ConfigError("cannot quantize an empty tensor")
    shape = tuple(arr.shape)
    rows, cols, n_full, rem = _layout(shape, config.group_size)
    w2 = arr.reshape(rows, cols)
    full, tail = _split(w2, config.group_size, n_full, rem)
    codes = np.empty((rows, cols), dtype=np.uint8)
    p_full = p_tail = None
    if n_full:
        c, p_full = _quant_rows(full, config)
        codes[:, : n_full * config.group_size] = c.reshape(rows, -1)
    if rem:
        c, p_tail = _quant_rows(tail, config)
        codes[:, n_full * config.group_size:] = c
    params = _merge_params(p_full, p_tail, rows, n_full, rem)
    return QuantizedTensor(codes.reshape(shape), params, config, shape)


def dequantize(q: QuantizedTensor) -> Tensor:
    cfg = q.config
    if q.codes.size and int(q.codes.max()) >= 2 ** cfg.bits:
        raise ValueError(f"corrupt codes: value {int(q.codes.max())} >= 2^{cfg.bits}")
    rows, cols, n_full, rem = _layout(q.shape, cfg.group_size)
    per_row = n_full + (1 if rem else 0)
    if q.group_params.shape[0] != rows * per_row:
        raise ValueError(f"expected {rows * per_row} groups, found {q.group_params.shape[0]}")
    params = q.group_params.reshape(rows, per_row, -1)
    c2 = q.codes.reshape(rows, cols)
    out = np.empty((rows, cols))
    g = cfg.group_size
    if n_full:
        c_full = c2[:, : n_full * g].reshape(rows * n_full, g)
        p_full = params[:, :n_full].reshape(rows * n_full, -1)
        out[:, : n_full * g] = _dequant_rows(c_full, p_full, cfg).reshape(rows, -1)
    if rem:
        out[:, n_full * g:] = _dequant_rows(c2[:, n_full * g:], params[:, n_full], cfg)
    return Tensor(out.reshape(q.shape))


def fake_quant(w, config: QuantConfig) -> np.ndarray:
    """dequantize(quantize(w)) as a plain array."""
    return dequantize(quantize_tensor(w, config)).data


def fake_quant_ste(w: Tensor, config: QuantConfig) -> Tensor:
    """Quantize-dequantize in the forward pass, identity in the backward pass."""
    return custom_op("fake_quant_ste", (w,), fake_quant(w, config), lambda g: (g,))


def quant_error_report(w, config: QuantConfig) -> dict:
    arr = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    q = quantize_tensor(arr, config)
    err = dequantize(q).data - arr
    rows, cols, n_full, rem = _layout(arr.shape, config.group_size)
    e2 = err.reshape(rows, cols) ** 2
    g = config.group_size
    per_group, sizes = [], []
    for r in range(rows):
        for j in range(n_full + (1 if rem else 0)):
            seg = e2[r, j * g:(j + 1) * g]
            per_group.append(float(seg.mean()))
            sizes.append(seg.size)
    return {
        "mse": float(e2.mean()),
        "max_abs_error": float(np.abs(err).max()),
        "per_group_mse": per_group,
        "group_sizes": sizes,
        "format": config.format.value,
        "bits": config.bits,
        "group_size": g,
    }
