"""Quantization-aware self-distillation loop and its data pipelines."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .clip import CalibCache, ClipBounds, capture_activations, clip_init_model
from .data import Dataset, Record, Source, mix_datasets, to_batch
from .divergence import DivergenceSpec, Kind, TokenDistBatch, divergence, estimate_gamma
from .model import Model, forward, perplexity, sample_batch
from .optim import AdamWHyper, OptimizerState, clip_grad_norm, optimizer_step
from .quant import QuantConfig, QuantizedTensor, quantize_tensor
from .tensor import Graph

__all__ = [
    "TrainConfig", "QATResult", "TrainingAborted", "pretrain", "generate_dataset",
    "qat_train", "evaluate_pipeline", "final_quantize", "smoothed",
]

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, history: list[dict]):
        super().__init__(msg)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 8e-6
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    steps: int = 300
    batch_size: int = 8
    quant: QuantConfig | None = field(default_factory=QuantConfig)
    divergence: DivergenceSpec = field(default_factory=DivergenceSpec)
    data_source: Source = Source.GROUND_TRUTH
    temperature: float = 0.7
    max_new: int = 64
    seed: int = 0
    eval_interval: int = 0
    clip: bool = True
    clip_grid_steps: int = 32
    clip_mode: str = "joint"
    calib_row_cap: int = 256
    gamma_batches: int = 10
    grad_clip: float = 1.0
    ce_weight: float = 0.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "data_source", Source(self.data_source))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.clip and self.quant is None:
            raise ValueError("clipping needs a quantization config")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "steps": self.steps,
            "batch_size": self.batch_size,
            "quant": None if self.quant is None else self.quant.to_dict(),
            "objective": self.divergence.kind.value,
            "gamma": self.divergence.gamma,
            "data_source": self.data_source.value,
            "temperature": self.temperature,
            "max_new": self.max_new,
            "seed": self.seed,
            "eval_interval": self.eval_interval,
            "clip": self.clip,
            "clip_grid_steps": self.clip_grid_steps,
            "clip_mode": self.clip_mode,
            "calib_row_cap": self.calib_row_cap,
            "gamma_batches": self.gamma_batches,
            "grad_clip": self.grad_clip,
            "ce_weight": self.ce_weight,
        }


@dataclass
class QATResult:
    quantized: dict[str, QuantizedTensor]
    student: Model
    history: list[dict]
    gamma: float | None = None
    clip_bounds: dict[str, ClipBounds] = field(default_factory=dict)
    evals: list[tuple[int, float]] = field(default_factory=list)
    start_ppl: float | None = None
    end_ppl: float | None = None
    timings: dict[str, float] = field(default_factory=dict)
    dataset: Dataset | None = None

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def smoothed(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.array([v.mean()])
    return np.convolve(v, np.ones(window) / window, mode="valid")


def pretrain(model: Model, stream: np.ndarray, steps: int = 400, batch_size: int = 8,
             seq_len: int = 128, lr: float = 3e-3, seed: int = 0, warmup: int = 30,
             log_every: int = 0) -> list[float]:
    """Next-token cross-entropy on random windows of ``stream``.

    Linear warmup, then cosine decay to a tenth of ``lr``.
    """
    stream = np.asarray(stream, dtype=np.int64)
    seq_len = min(seq_len, model.config.max_seq_len)
    if stream.size < seq_len + 2:
        raise ValueError("corpus is shorter than one training window")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    state = OptimizerState()
    losses = []
    for step in range(steps):
        if step < warmup:
            cur = lr * (step + 1) / warmup
        else:
            frac = (step - warmup) / max(1, steps - warmup)
            cur = lr * (0.1 + 0.45 * (1 + math.cos(math.pi * frac)))
        hyper = AdamWHyper(lr=cur, weight_decay=0.0)
        starts = rng.integers(0, stream.size - seq_len - 1, size=batch_size)
        win = np.stack([stream[s:s + seq_len + 1] for s in starts])
        model.zero_grad()
        with Graph() as g:
            loss = T.cross_entropy(forward(model, win[:, :-1]), win[:, 1:])
            g.backward(loss)
        grads, _ = clip_grad_norm([p.grad for p in params], 1.0)
        optimizer_step(params, grads, state, hyper)
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d loss %.4f", step + 1, loss.item())
    model.zero_grad()
    return losses


def generate_dataset(generator, prompts, temperature: float = 0.7, max_new: int = 64, seed: int | None = 0,
                     source: Source = Source.TEACHER_GEN, quant: QuantConfig | None = None,
                     stop_token: int | None = 10) -> tuple[Dataset, int]:
    """Sample one response per prompt; returns ``(dataset, skipped)``.

    Prompts of equal length are sampled together.  Records with an empty
    response are dropped and counted.
    """
    prompts = [np.asarray(p, dtype=np.int64).reshape(-1) for p in prompts]
    if not prompts:
        raise ValueError("no prompts given")
    max_len = generator.config.max_seq_len
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    responses: dict[int, np.ndarray] = {}
    rng = np.random.default_rng(seed)
    for n, idx in sorted(by_len.items()):
        budget = min(max_new, max_len - n + 1)
        if budget <= 0:
            for i in idx:
                responses[i] = np.zeros(0, dtype=np.int64)
            continue
        sub_seed = None if temperature == 0 else int(rng.integers(2**31))
        outs = sample_batch(generator, np.stack([prompts[i] for i in idx]), temperature, budget,
                            sub_seed, quant=quant, stop_token=stop_token)
        for i, o in zip(idx, outs):
            responses[i] = o
    records, skipped = [], 0
    for i, p in enumerate(prompts):
        if responses[i].size == 0:
            skipped += 1
            continue
        records.append(Record(p, responses[i], source))
    if skipped:
        log.warning("generate_dataset skipped %d empty responses", skipped)
    return Dataset(records), skipped


def final_quantize(model: Model, config: QuantConfig) -> dict[str, QuantizedTensor]:
    return {n: quantize_tensor(model.params[n], config) for n in model.quant_layer_names()}


def _eval_ppl(model, eval_tokens, quant, stride):
    if eval_tokens is None:
        return None
    return perplexity(model, eval_tokens, stride=stride, quant=quant)


def qat_train(teacher: Model, dataset: Dataset, config: TrainConfig, calib=None,
              eval_tokens=None, eval_stride: int | None = None, mix=None) -> QATResult:
    """Self-distillation QAT.

    1. student := copy of teacher; clip every quantized layer once (optional).
    2. build the response set for ``config.data_source`` from the dataset prompts.
    3. estimate gamma for CAKLD when not given.
    4. for each step: student forward with fake-quantized weights, teacher
       forward without a graph, divergence on response tokens, backward into the
       full-precision student weights, AdamW update.
    5. quantize the final weights.

    ``calib`` is a :class:`CalibCache` or an iterable of token batches.
    ``mix`` is an optional list of ``(dataset, weight)`` blended in after step 2,
    with the built response set at weight 1 (see :func:`mix_datasets`).
    """
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    student = teacher.copy()
    student.clip_bounds = dict(teacher.clip_bounds)
    bounds: dict[str, ClipBounds] = {}
    if config.clip:
        if calib is None:
            raise ValueError("clipping is enabled but no calibration data was given")
        cache = calib if isinstance(calib, CalibCache) else capture_activations(
            student, calib, row_cap=config.calib_row_cap)
        bounds = clip_init_model(student, cache, config.quant, config.clip_grid_steps, config.clip_mode)
    timings["quant_init"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    data = _materialize(dataset, config, teacher, student)
    if mix:
        data = mix_datasets([(data, 1.0), *mix], seed=config.seed)
    timings["data_gen"] = time.perf_counter() - t0
    if len(data) == 0:
        raise ValueError("training dataset is empty")

    spec = config.divergence
    gamma = spec.gamma
    if spec.kind is Kind.CAKLD and gamma is None:
        gamma = estimate_gamma(teacher, data, config.gamma_batches, config.batch_size)
        spec = replace(spec, gamma=gamma)

    result = QATResult({}, student, [], gamma, bounds, timings=timings, dataset=data)
    result.start_ppl = _eval_ppl(student, eval_tokens, config.quant, eval_stride)
    if result.start_ppl is not None:
        result.evals.append((0, result.start_ppl))

    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    params = student.parameters()
    state = OptimizerState()
    hyper = AdamWHyper(config.learning_rate, tuple(config.betas), 1e-8, config.weight_decay)
    max_len = student.config.max_seq_len
    n = len(data)
    for step in range(1, config.steps + 1):
        idx = rng.choice(n, size=config.batch_size, replace=n < config.batch_size)
        inputs, targets, mask = to_batch([data.records[i] for i in idx], max_len)
        t_logits = forward(teacher, inputs).data
        student.zero_grad()
        with Graph() as g:
            s_logits = forward(student, inputs, quant=config.quant)
            loss = divergence(TokenDistBatch(t_logits, s_logits, mask), spec)
            if config.ce_weight:
                loss = T.add(loss, T.mul(T.cross_entropy(s_logits, targets, mask), config.ce_weight))
            value = loss.item()
            if not math.isfinite(value):
                result.history.append({"step": step, "loss": value, "grad_norm": math.nan, "clipped": False})
                raise TrainingAborted(f"non-finite loss at step {step}", result.history)
            g.backward(loss)
        grads, norm = clip_grad_norm([p.grad for p in params], config.grad_clip)
        clipped = config.grad_clip > 0 and norm > config.grad_clip
        if clipped:
            log.debug("step %d: grad norm %.3g clipped to %.3g", step, norm, config.grad_clip)
        optimizer_step(params, grads, state, hyper)
        result.history.append({"step": step, "loss": value, "grad_norm": norm, "clipped": clipped})
        if config.eval_interval and step % config.eval_interval == 0 and step != config.steps:
            result.evals.append((step, _eval_ppl(student, eval_tokens, config.quant, eval_stride)))
    student.zero_grad()
    timings["qat"] = time.perf_counter() - t0

    if config.quant is not None:
        result.quantized = final_quantize(student, config.quant)
    result.end_ppl = _eval_ppl(student, eval_tokens, config.quant, eval_stride)
    if result.end_ppl is not None:
        result.evals.append((config.steps, result.end_ppl))
    timings["total"] = sum(timings.values())
    return result


def _materialize(dataset: Dataset, config: TrainConfig, teacher: Model, student: Model) -> Dataset:
    """Responses for the configured data source, reusing the dataset prompts."""
    src = config.data_source
    if src is Source.GROUND_TRUTH or all(r.source is src for r in dataset.records):
        return dataset
    prompts = [r.prompt for r in dataset.records]
    if src is Source.TEACHER_GEN:
        data, _ = generate_dataset(teacher, prompts, config.temperature, config.max_new,
                                   config.seed, Source.TEACHER_GEN)
    else:
        data, _ = generate_dataset(student, prompts, config.temperature, config.max_new,
                                   config.seed, Source.STUDENT_GEN, quant=config.quant)
    return data


def evaluate_pipeline(teacher: Model, variants, dataset: Dataset, eval_tokens, calib=None,
                      eval_stride: int | None = None) -> list[dict]:
    """Start/end perplexity for each variant against a shared teacher and eval set."""
    rows = []
    for i, cfg in enumerate(variants):
        t0 = time.perf_counter()
        res = qat_train(teacher, dataset, cfg, calib=calib if cfg.clip else None,
                        eval_tokens=eval_tokens, eval_stride=eval_stride)
        rows.append({
            "variant": cfg.name or f"variant{i}",
            "start_ppl": res.start_ppl,
            "end_ppl": res.end_ppl,
            "wall_clock": time.perf_counter() - t0,
            "gamma": res.gamma,
            "timings": dict(res.timings),
            "result": res,
        })
    return rows
