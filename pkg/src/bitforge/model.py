"""Tiny decoder-only transformer used as both teacher and quantized student."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .quant import ConfigError, QuantConfig, fake_quant_ste
from .tensor import Tensor

__all__ = [
    "ModelConfig", "Model", "build_model", "forward", "quantized_forward",
    "sample", "sample_batch", "perplexity", "param_count", "logits_fn",
    "encode", "decode",
]

MASK_VALUE = -1e30
INIT_STD = 0.02


def encode(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def decode(ids) -> str:
    return bytes(int(i) for i in ids if 0 <= int(i) < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 128
    ff_mult: int = 2
    seed: int = 0
    quantize_head: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len", "ff_mult"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def d_ff(self) -> int:
        return self.d_model * self.ff_mult

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    clip_bounds: dict = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def quant_layer_names(self) -> list[str]:
        names = [n for n in self.params if ".attn.w" in n or ".mlp.w" in n]
        if self.config.quantize_head:
            names.append("head")
        return names

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def param_count(cfg: ModelConfig) -> int:
    d, V, S, ff = cfg.d_model, cfg.vocab_size, cfg.max_seq_len, cfg.d_ff
    per_layer = 4 * d + 4 * d * d + 2 * d * ff
    return V * d + S * d + cfg.n_layers * per_layer + 2 * d + V * d


def build_model(config: ModelConfig, seed: int | None = None) -> Model:
    """Normal(0, 0.02) init; residual output projections scaled by 1/sqrt(2 n_layers)."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d, ff = config.d_model, config.d_ff
    resid_std = INIT_STD / math.sqrt(2 * config.n_layers)
    p: dict[str, Tensor] = {}

    def add(name, arr):
        p[name] = Tensor(arr, requires_grad=True, name=name)

    add("tok_emb", rng.normal(0, INIT_STD, (config.vocab_size, d)))
    add("pos_emb", rng.normal(0, INIT_STD, (config.max_seq_len, d)))
    for i in range(config.n_layers):
        b = f"blocks.{i}"
        add(f"{b}.ln1.w", np.ones(d))
        add(f"{b}.ln1.b", np.zeros(d))
        for w in ("wq", "wk", "wv"):
            add(f"{b}.attn.{w}", rng.normal(0, INIT_STD, (d, d)))
        add(f"{b}.attn.wo", rng.normal(0, resid_std, (d, d)))
        add(f"{b}.ln2.w", np.ones(d))
        add(f"{b}.ln2.b", np.zeros(d))
        add(f"{b}.mlp.w1", rng.normal(0, INIT_STD, (ff, d)))
        add(f"{b}.mlp.w2", rng.normal(0, resid_std, (d, ff)))
    add("ln_f.w", np.ones(d))
    add("ln_f.b", np.zeros(d))
    add("head", rng.normal(0, INIT_STD, (config.vocab_size, d)))
    return Model(config, p)


def _check_tokens(model: Model, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[0] == 0 or tokens.shape[1] == 0:
        raise ValueError(f"expected a non-empty B x L token matrix, got shape {tokens.shape}")
    if tokens.shape[1] > model.config.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {model.config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab_size:
        raise ValueError(f"token id out of range [0, {model.config.vocab_size})")
    return tokens


def forward(model: Model, tokens, quant: QuantConfig | None = None, capture: dict | None = None) -> Tensor:
    """Causal forward pass returning logits of shape B x L x V.

    ``quant`` routes every quantizable weight through :func:`fake_quant_ste`.
    ``capture`` maps layer names to lists that receive the layer's input rows.
    """
    tokens = _check_tokens(model, tokens)
    cfg = model.config
    P = model.params
    B, L = tokens.shape
    H, d = cfg.n_heads, cfg.d_model
    dh = d // H
    qnames = set(model.quant_layer_names()) if quant is not None else set()

    def linear(x, name):
        if capture is not None and name in capture:
            capture[name].append(x.data.reshape(-1, x.shape[-1]).copy())
        w = P[name]
        if name in qnames:
            w = fake_quant_ste(w, quant)
        x2 = T.reshape(x, (-1, x.shape[-1]))
        y = T.matmul(x2, T.transpose(w))
        return T.reshape(y, x.shape[:-1] + (w.shape[0],))

    mask = np.triu(np.full((L, L), MASK_VALUE), k=1)
    scale = 1.0 / math.sqrt(dh)

    def heads(x):
        return T.transpose(T.reshape(x, (B, L, H, dh)), (0, 2, 1, 3))

    x = T.add(T.embedding(P["tok_emb"], tokens), T.embedding(P["pos_emb"], np.arange(L)))
    for i in range(cfg.n_layers):
        b = f"blocks.{i}"
        h = T.layer_norm(x, P[f"{b}.ln1.w"], P[f"{b}.ln1.b"])
        q = heads(linear(h, f"{b}.attn.wq"))
        k = heads(linear(h, f"{b}.attn.wk"))
        v = heads(linear(h, f"{b}.attn.wv"))
        att = T.softmax(T.add(T.mul(T.matmul(q, T.transpose(k)), scale), mask))
        y = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
        x = T.add(x, linear(y, f"{b}.attn.wo"))
        h = T.layer_norm(x, P[f"{b}.ln2.w"], P[f"{b}.ln2.b"])
        x = T.add(x, linear(T.gelu(linear(h, f"{b}.mlp.w1")), f"{b}.mlp.w2"))
    x = T.layer_norm(x, P["ln_f.w"], P["ln_f.b"])
    return linear(x, "head")


def quantized_forward(model: Model, tokens, config: QuantConfig | None) -> Tensor:
    """Forward with fake-quantized linear weights; ``config=None`` disables quantization."""
    return forward(model, tokens, quant=config)


def logits_fn(model, quant: QuantConfig | None = None):
    """Turn a Model (or an existing callable) into ``tokens -> logits ndarray``."""
    if isinstance(model, Model):
        return lambda toks: forward(model, toks, quant=quant).data
    if callable(model):
        return model
    raise TypeError(f"cannot get logits from {type(model).__name__}")


def _draw(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """One token per row of ``logits`` (B x V)."""
    if temperature == 0:
        return logits.argmax(axis=-1)
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(logits.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=-1)
    return np.minimum(idx, logits.shape[-1] - 1)


def sample_batch(model, prompts, temperature: float, max_new: int, seed: int | None = 0,
                 quant: QuantConfig | None = None, stop_token: int | None = None) -> list[np.ndarray]:
    """Continue a batch of equal-length prompts; returns only the new tokens per row.

    A row stops after emitting ``stop_token`` (which is kept).
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    ctx = np.asarray(prompts, dtype=np.int64)
    if ctx.ndim != 2 or ctx.shape[1] == 0:
        raise ValueError("prompts must be a non-empty B x L array")
    rng = np.random.default_rng(seed)
    fn = logits_fn(model, quant)
    max_len = model.config.max_seq_len if isinstance(model, Model) else None
    done = np.zeros(len(ctx), dtype=bool)
    new = [[] for _ in range(len(ctx))]
    for _ in range(max_new):
        window = ctx if max_len is None else ctx[:, -max_len:]
        nxt = _draw(fn(window)[:, -1, :], temperature, rng)
        for r, t in enumerate(nxt):
            if not done[r]:
                new[r].append(int(t))
                done[r] = stop_token is not None and t == stop_token
        if done.all():
            break
        ctx = np.concatenate([ctx, nxt[:, None]], axis=1)
    return [np.array(n, dtype=np.int64) for n in new]


def sample(model, prompt, temperature: float = 0.7, max_new: int = 32, seed: int | None = 0,
           quant: QuantConfig | None = None, stop_token: int | None = None) -> np.ndarray:
    """Prompt followed by up to ``max_new`` sampled tokens; temperature 0 is greedy."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    if prompt.size == 0:
        raise ValueError("prompt must be non-empty")
    out = sample_batch(model, prompt[None, :], temperature, max_new, seed, quant, stop_token)[0]
    return np.concatenate([prompt, out])


def _windows(tokens: np.ndarray, stride: int) -> list[np.ndarray]:
    wins = [tokens[i:i + stride] for i in range(0, len(tokens), stride)]
    return [w for w in wins if len(w) >= 2]


def perplexity(model, eval_tokens, stride: int | None = None, batch_size: int = 8,
               quant: QuantConfig | None = None) -> float:
    """exp(mean next-token NLL) over non-overlapping windows of ``stride`` tokens."""
    toks = np.asarray(eval_tokens, dtype=np.int64).reshape(-1)
    if toks.size < 2:
        raise ValueError("perplexity needs at least two evaluation tokens")
    if stride is None:
        stride = model.config.max_seq_len
    fn = logits_fn(model, quant)
    wins = _windows(toks, stride)
    by_len: dict[int, list[np.ndarray]] = {}
    for w in wins:
        by_len.setdefault(len(w), []).append(w)
    total, count = 0.0, 0
    for n, group in sorted(by_len.items()):
        for i in range(0, len(group), batch_size):
            batch = np.stack(group[i:i + batch_size])
            ls = T._log_softmax_np(fn(batch[:, :-1]))
            picked = np.take_along_axis(ls, batch[:, 1:, None], axis=-1)
            total -= float(picked.sum())
            count += picked.size
    nll = total / count
    return math.exp(nll) if nll < 700 else math.inf
