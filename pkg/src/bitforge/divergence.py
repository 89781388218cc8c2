"""Token-level distillation objectives and teacher-confidence diagnostics.

All objectives average over the masked (response) positions of a batch with a
flat per-token mean.  Teacher logits are constants; gradients reach only the
student logits.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset, iter_batches
from .model import logits_fn
from .tensor import Tensor

__all__ = [
    "Kind", "DivergenceSpec", "TokenDistBatch", "forward_kl", "reverse_kl",
    "jsd", "cakld", "divergence", "estimate_gamma", "confidence_report",
    "per_token_ce_report", "TokenReport",
]


class Kind(str, enum.Enum):
    FKL = "fkl"
    RKL = "rkl"
    JSD = "jsd"
    CAKLD = "cakld"


@dataclass(frozen=True)
class DivergenceSpec:
    kind: Kind = Kind.CAKLD
    gamma: float | None = None  # CAKLD only; None means estimate from data

    def __post_init__(self):
        kind = self.kind.value if isinstance(self.kind, Kind) else str(self.kind).lower()
        object.__setattr__(self, "kind", Kind(kind))
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


@dataclass
class TokenDistBatch:
    teacher_logits: np.ndarray
    student_logits: Tensor
    loss_mask: np.ndarray

    def __post_init__(self):
        if isinstance(self.teacher_logits, Tensor):
            self.teacher_logits = self.teacher_logits.data
        if not isinstance(self.student_logits, Tensor):
            self.student_logits = Tensor(self.student_logits)
        self.loss_mask = np.asarray(self.loss_mask, dtype=np.float64)
        if self.teacher_logits.shape != self.student_logits.shape:
            raise ValueError(f"teacher {self.teacher_logits.shape} vs student {self.student_logits.shape}")
        if self.loss_mask.shape != self.teacher_logits.shape[:-1]:
            raise ValueError(f"mask shape {self.loss_mask.shape} does not match logits")
        if self.loss_mask.sum() <= 0:
            raise ValueError("loss mask selects no tokens")


def _masked_mean(per_pos: Tensor, mask: np.ndarray) -> Tensor:
    return T.mul(T.sum(T.mul(per_pos, mask)), 1.0 / mask.sum())


def forward_kl(batch: TokenDistBatch) -> Tensor:
    """KL(teacher || student), mode covering."""
    lt = T._log_softmax_np(batch.teacher_logits)
    pt = np.exp(lt)
    ls = T.log_softmax(batch.student_logits)
    per = T.sum(T.mul(pt, T.sub(lt, ls)), axis=-1)
    return _masked_mean(per, batch.loss_mask)


def reverse_kl(batch: TokenDistBatch) -> Tensor:
    """KL(student || teacher), mode seeking."""
    lt = T._log_softmax_np(batch.teacher_logits)
    ls = T.log_softmax(batch.student_logits)
    ps = T.exp(ls)
    per = T.sum(T.mul(ps, T.sub(ls, lt)), axis=-1)
    return _masked_mean(per, batch.loss_mask)


def jsd(batch: TokenDistBatch) -> Tensor:
    """Jensen-Shannon divergence with equal weights."""
    lt = T._log_softmax_np(batch.teacher_logits)
    pt = np.exp(lt)
    ls = T.log_softmax(batch.student_logits)
    ps = T.exp(ls)
    lm = T.log(T.mul(T.add(ps, pt), 0.5))
    term_t = T.sum(T.mul(pt, T.sub(lt, lm)), axis=-1)
    term_s = T.sum(T.mul(ps, T.sub(ls, lm)), axis=-1)
    per = T.mul(T.add(term_t, term_s), 0.5)
    return _masked_mean(per, batch.loss_mask)


def cakld(batch: TokenDistBatch, gamma: float) -> Tensor:
    """gamma * reverse KL + (1 - gamma) * forward KL."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return T.add(T.mul(reverse_kl(batch), gamma), T.mul(forward_kl(batch), 1.0 - gamma))


def divergence(batch: TokenDistBatch, spec: DivergenceSpec) -> Tensor:
    if spec.kind is Kind.FKL:
        return forward_kl(batch)
    if spec.kind is Kind.RKL:
        return reverse_kl(batch)
    if spec.kind is Kind.JSD:
        return jsd(batch)
    if spec.gamma is None:
        raise ValueError("CAKLD needs gamma; run estimate_gamma first")
    return cakld(batch, spec.gamma)


# ---------------------------------------------------------------- diagnostics

def _token_logprobs(teacher, dataset: Dataset, n_batches: int | None, batch_size: int) -> list[np.ndarray]:
    """Teacher log-probability of each realized response token, per sequence."""
    fn = logits_fn(teacher)
    max_len = getattr(getattr(teacher, "config", None), "max_seq_len", None)
    out = []
    for inputs, targets, mask in iter_batches(dataset, batch_size, n_batches, max_len):
        ls = T._log_softmax_np(fn(inputs))
        picked = np.take_along_axis(ls, targets[..., None], axis=-1)[..., 0]
        for row, m in zip(picked, mask):
            out.append(row[m > 0])
    return out


def estimate_gamma(teacher, dataset: Dataset, n_batches: int = 10, batch_size: int = 8) -> float:
    """Mean teacher probability of the realized response tokens.

    Uses the first ``n_batches`` batches in record order; no parameters change.
    """
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    if len(dataset) == 0:
        raise ValueError("cannot estimate gamma on an empty dataset")
    seqs = _token_logprobs(teacher, dataset, n_batches, batch_size)
    probs = np.exp(np.concatenate(seqs))
    return float(min(max(probs.mean(), 0.0), 1.0))


@dataclass
class TokenReport:
    """Per-token values for each sequence plus summary statistics."""

    values: list[np.ndarray]
    metric: str

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate(self.values) if self.values else np.zeros(0)

    def summary(self) -> dict:
        f = self.flat
        return {
            "metric": self.metric,
            "n_sequences": len(self.values),
            "n_tokens": int(f.size),
            "mean": float(f.mean()) if f.size else math.nan,
            "variance": float(f.var()) if f.size else math.nan,
            "min": float(f.min()) if f.size else math.nan,
            "max": float(f.max()) if f.size else math.nan,
        }

    def rows(self):
        """(seq_id, position, value) triples for CSV emission."""
        for sid, vals in enumerate(self.values):
            for pos, v in enumerate(vals):
                yield sid, pos, float(v)


def confidence_report(teacher, dataset: Dataset, n_batches: int | None = None, batch_size: int = 8) -> TokenReport:
    seqs = _token_logprobs(teacher, dataset, n_batches, batch_size)
    return TokenReport([np.exp(s) for s in seqs], "probability")


def per_token_ce_report(teacher, dataset: Dataset, n_batches: int | None = None, batch_size: int = 8) -> TokenReport:
    seqs = _token_logprobs(teacher, dataset, n_batches, batch_size)
    return TokenReport([-s for s in seqs], "ce")
