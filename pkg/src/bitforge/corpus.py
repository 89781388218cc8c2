"""Synthetic instruction/response corpus for desk-scale runs.

Mixes free-form descriptive sentences (many plausible continuations) with
counting and spelling tasks (nearly deterministic), so a small teacher ends
up confident on some tokens and unsure on others.
"""
from __future__ import annotations

import numpy as np

from .data import Dataset, Record, Source
from .model import encode

__all__ = ["make_pairs", "corpus_text", "pairs_to_dataset", "prompts_of", "NEWLINE"]

NEWLINE = 10

NOUNS = ["cat", "dog", "bird", "tree", "river", "house", "lamp", "boat", "stone", "cloud",
         "horse", "garden", "road", "book", "window", "apple"]
ADJS = ["red", "small", "old", "quiet", "bright", "green", "cold", "tall", "soft", "dark", "warm"]
VERBS = ["sits", "rests", "waits", "stands", "sleeps", "hides", "shines", "leans"]
PREPS = ["near", "under", "beside", "behind", "above"]
NUMBERS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"]


def _describe(rng):
    n, n2 = rng.choice(NOUNS, 2, replace=False)
    a, a2 = rng.choice(ADJS, 2, replace=False)
    v, p = rng.choice(VERBS), rng.choice(PREPS)
    return f"describe the {n}.", f"the {n} is {a} and {a2}. it {v} {p} the {n2}."


def _count(rng):
    start = int(rng.integers(0, 6))
    stop = start + int(rng.integers(2, 5))
    return f"count from {NUMBERS[start]} to {NUMBERS[stop]}.", " ".join(NUMBERS[start:stop + 1]) + "."


def _spell(rng):
    w = str(rng.choice(NOUNS))
    return f"spell {w}.", "-".join(w) + "."


def _where(rng):
    n, n2 = rng.choice(NOUNS, 2, replace=False)
    p = rng.choice(PREPS)
    return f"where is the {n}?", f"the {n} is {p} the {n2}."


_TASKS = [_describe, _count, _spell, _where]


def make_pairs(n: int, seed: int = 0) -> list[tuple[str, str]]:
    rng = np.random.default_rng(seed)
    return [_TASKS[int(rng.integers(len(_TASKS)))](rng) for _ in range(n)]


def corpus_text(pairs) -> str:
    return "".join(f"{p}\n{r}\n" for p, r in pairs)


def pairs_to_dataset(pairs, source: Source = Source.GROUND_TRUTH) -> Dataset:
    return Dataset([Record(encode(p + "\n"), encode(r + "\n"), source) for p, r in pairs])


def prompts_of(dataset: Dataset) -> list[np.ndarray]:
    return [r.prompt for r in dataset.records]
