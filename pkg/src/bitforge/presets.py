"""Desk-scale defaults shared by the CLI and the end-to-end checks."""
from __future__ import annotations

import numpy as np

from .corpus import corpus_text, make_pairs, pairs_to_dataset
from .model import Model, ModelConfig, build_model, encode
from .qat import pretrain

# Teacher pretraining: ~1 minute on one CPU core.
PRETRAIN = {"steps": 600, "batch_size": 4, "seq_len": 128, "lr": 3e-3}
# QAT at desk scale needs a far larger step than the 8e-6 used for billion-parameter models.
QAT_LR = 1e-4
QAT_STEPS = 200
QAT_BATCH = 8

TRAIN_PAIRS = 3000
EVAL_PAIRS = 300
EVAL_TOKENS = 8000
QAT_PAIRS = 512
CORPUS_SEED = 0
EVAL_SEED = 999
QAT_SEED = 5


def train_stream(seed: int = CORPUS_SEED) -> np.ndarray:
    return encode(corpus_text(make_pairs(TRAIN_PAIRS, seed)))


def eval_stream() -> np.ndarray:
    return encode(corpus_text(make_pairs(EVAL_PAIRS, EVAL_SEED)))[:EVAL_TOKENS]


def qat_dataset(n: int = QAT_PAIRS, seed: int = QAT_SEED):
    return pairs_to_dataset(make_pairs(n, seed))


def calib_batches(stream: np.ndarray, seed: int = 0, n_batches: int = 1, batch_size: int = 4,
                  seq_len: int = 128) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_batches):
        starts = rng.integers(0, stream.size - seq_len - 1, size=batch_size)
        out.append(np.stack([stream[s:s + seq_len] for s in starts]))
    return out


def desk_teacher(seed: int = 0, stream: np.ndarray | None = None, **overrides) -> Model:
    """Build and pretrain the default tiny teacher for ``seed``."""
    cfg = ModelConfig(seed=seed)
    model = build_model(cfg)
    opts = {**PRETRAIN, **overrides}
    pretrain(model, train_stream() if stream is None else stream, seed=seed, **opts)
    return model
