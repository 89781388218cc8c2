"""Prompt/response records and their conversion into masked LM batches."""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Source", "Record", "Dataset", "mix_datasets", "to_batch", "iter_batches"]


class Source(str, enum.Enum):
    GROUND_TRUTH = "y_g"
    TEACHER_GEN = "y_p"
    STUDENT_GEN = "y_q"


@dataclass
class Record:
    prompt: np.ndarray
    response: np.ndarray
    source: Source = Source.GROUND_TRUTH

    def __post_init__(self):
        self.prompt = np.asarray(self.prompt, dtype=np.int64).reshape(-1)
        self.response = np.asarray(self.response, dtype=np.int64).reshape(-1)
        self.source = Source(self.source)
        if self.response.size == 0:
            raise ValueError("response must be non-empty")


@dataclass
class Dataset:
    records: list[Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def source_counts(self) -> dict[str, int]:
        return dict(Counter(r.source.value for r in self.records))

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(self.records + other.records)


def mix_datasets(parts, seed: int = 0) -> Dataset:
    """Concatenate ``(dataset, weight)`` parts with record counts in ratio to the weights.

    Takes the largest counts that keep the ratio without repeating a record:
    each part contributes ``floor(k * weight)`` records for the largest ``k``
    its size allows.  Records are drawn from a seeded shuffle of each part and
    the result is shuffled again.
    """
    parts = [(d, float(w)) for d, w in parts]
    if not parts:
        raise ValueError("nothing to mix")
    if any(w <= 0 for _, w in parts):
        raise ValueError("mixing weights must be positive")
    if any(len(d) == 0 for d, _ in parts):
        raise ValueError("cannot mix an empty dataset")
    k = min(len(d) / w for d, w in parts)
    rng = np.random.default_rng(seed)
    records: list[Record] = []
    for d, w in parts:
        take = max(1, int(np.floor(k * w + 1e-9)))
        idx = rng.permutation(len(d))[:take]
        records.extend(d.records[i] for i in idx)
    order = rng.permutation(len(records))
    return Dataset([records[i] for i in order])


def to_batch(records: list[Record], max_len: int | None = None):
    """Pack records into ``(inputs, targets, mask)``.

    ``targets[t]`` is the token after ``inputs[t]``; ``mask`` is 1 exactly where
    that target is a response token.  Sequences longer than ``max_len`` inputs
    are cut from the left of the prompt first, keeping at least one prompt token.
    """
    if not records:
        raise ValueError("empty batch")
    seqs, starts = [], []
    for r in records:
        p, y = r.prompt, r.response
        if max_len is not None and len(p) + len(y) - 1 > max_len:
            keep_p = max(1, max_len + 1 - len(y))
            p = p[-keep_p:]
            y = y[: max_len + 1 - len(p)]
        seqs.append(np.concatenate([p, y]))
        starts.append(len(p))
    L = max(len(s) for s in seqs) - 1
    inputs = np.zeros((len(seqs), L), dtype=np.int64)
    targets = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for i, (s, st) in enumerate(zip(seqs, starts)):
        n = len(s) - 1
        inputs[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        mask[i, max(st - 1, 0):n] = 1.0
    return inputs, targets, mask


def iter_batches(dataset: Dataset, batch_size: int, n_batches: int | None = None, max_len: int | None = None):
    """Consecutive batches in record order."""
    recs = dataset.records
    count = 0
    for i in range(0, len(recs), batch_size):
        if n_batches is not None and count >= n_batches:
            return
        yield to_batch(recs[i:i + batch_size], max_len)
        count += 1
