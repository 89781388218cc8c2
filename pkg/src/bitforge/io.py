"""Binary checkpoints and JSONL datasets.

Checkpoint layout (all integers little-endian)::

    b"BDCK" | u32 version | u32 metadata_len | metadata (canonical UTF-8 JSON) | payloads

``metadata["tensors"]`` lists every payload in file order with its name,
dtype (``"f64"`` or ``"u8"``), shape and byte length.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clip import ClipBounds
from .data import Dataset, Record
from .model import Model, ModelConfig
from .quant import QuantConfig, QuantizedTensor, dequantize
from .tensor import Tensor

__all__ = [
    "MAGIC", "VERSION", "CheckpointError", "DatasetFormatError", "QuantizedModel",
    "canonical_json", "save_checkpoint", "load_checkpoint", "save_dataset", "load_dataset",
]

MAGIC = b"BDCK"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_DTYPES = {"f64": np.dtype("<f8"), "u8": np.dtype("u1")}


class CheckpointError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


@dataclass
class QuantizedModel:
    """Full-precision parameters plus quantized linear layers."""

    config: ModelConfig
    fp_params: dict[str, np.ndarray]
    quantized: dict[str, QuantizedTensor]
    clip_bounds: dict[str, ClipBounds] = field(default_factory=dict)
    order: list[str] = field(default_factory=list)

    @classmethod
    def from_model(cls, model: Model, quantized: dict[str, QuantizedTensor]) -> "QuantizedModel":
        fp = {k: v.data.copy() for k, v in model.params.items() if k not in quantized}
        return cls(model.config, fp, dict(quantized), dict(model.clip_bounds), list(model.params))

    def to_model(self) -> Model:
        """A plain Model whose quantized layers hold their dequantized values."""
        names = self.order or list(self.fp_params) + list(self.quantized)
        params = {}
        for n in names:
            arr = dequantize(self.quantized[n]).data if n in self.quantized else self.fp_params[n]
            params[n] = Tensor(arr, requires_grad=True, name=n)
        return Model(self.config, params, dict(self.clip_bounds))


def _entry(name, arr, dtype):
    return {"name": name, "dtype": dtype, "shape": list(arr.shape), "nbytes": int(arr.size * _DTYPES[dtype].itemsize)}


def save_checkpoint(path, obj, metadata: dict | None = None) -> None:
    """Write a Model, a QuantizedModel, or ``None`` (config only) to ``path``."""
    meta: dict = {"packed": False, "extra": metadata or {}}
    payloads: list[np.ndarray] = []
    entries: list[dict] = []

    def put(name, arr, dtype):
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
        entries.append(_entry(name, arr, dtype))
        payloads.append(arr)

    if isinstance(obj, Model):
        meta["kind"] = "model"
        meta["model_config"] = obj.config.to_dict()
        meta["clip_bounds"] = {k: v.to_dict() for k, v in sorted(obj.clip_bounds.items())}
        for name, p in obj.params.items():
            put(name, p.data, "f64")
    elif isinstance(obj, QuantizedModel):
        meta["kind"] = "quantized"
        meta["model_config"] = obj.config.to_dict()
        meta["clip_bounds"] = {k: v.to_dict() for k, v in sorted(obj.clip_bounds.items())}
        meta["quant"] = {}
        for name in obj.order or list(obj.fp_params) + list(obj.quantized):
            if name in obj.quantized:
                q = obj.quantized[name]
                meta["quant"][name] = {"config": q.config.to_dict(), "shape": list(q.shape)}
                put(f"{name}.codes", q.codes, "u8")
                put(f"{name}.group_params", q.group_params, "f64")
            else:
                put(name, obj.fp_params[name], "f64")
        meta["order"] = list(obj.order)
    elif obj is None:
        meta["kind"] = "config"
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    meta["tensors"] = entries
    blob = canonical_json(meta).encode("utf-8")
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, len(blob)))
            f.write(blob)
            for arr in payloads:
                f.write(arr.tobytes())
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path):
    """Return ``(obj, metadata)``; ``obj`` is a Model, QuantizedModel or None."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (this build reads {VERSION})")
    start = _HEADER.size
    if start + mlen > len(raw):
        raise CheckpointError(f"{path}: metadata truncated ({mlen} bytes declared)")
    try:
        meta = json.loads(raw[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: metadata is not valid JSON: {e}") from e
    entries = meta.get("tensors")
    if not isinstance(entries, list):
        raise CheckpointError(f"{path}: metadata has no tensor table")
    offset = start + mlen
    for e in entries:
        dt = _DTYPES.get(e.get("dtype"))
        if dt is None:
            raise CheckpointError(f"{path}: tensor {e.get('name')!r} has unknown dtype {e.get('dtype')!r}")
        if int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize != e["nbytes"]:
            raise CheckpointError(f"{path}: tensor {e['name']!r} byte length disagrees with its shape")
        if offset + e["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: truncated, tensor {e['name']!r} is missing or incomplete")
        offset += e["nbytes"]
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} unexpected trailing bytes")

    arrays: dict[str, np.ndarray] = {}
    offset = start + mlen
    for e in entries:
        dt = _DTYPES[e["dtype"]]
        arr = np.frombuffer(raw, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=offset)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
        offset += e["nbytes"]

    kind = meta.get("kind")
    bounds = {k: ClipBounds(v["alpha"], v["beta"], k) for k, v in meta.get("clip_bounds", {}).items()}
    if kind == "config":
        return None, meta
    cfg = ModelConfig.from_dict(meta["model_config"])
    if kind == "model":
        params = {n: Tensor(a, requires_grad=True, name=n) for n, a in arrays.items()}
        return Model(cfg, params, bounds), meta
    if kind == "quantized":
        quantized, fp = {}, {}
        for name, q in meta["quant"].items():
            quantized[name] = QuantizedTensor(arrays[f"{name}.codes"], arrays[f"{name}.group_params"],
                                              QuantConfig.from_dict(q["config"]), tuple(q["shape"]))
        qpayloads = {f"{n}.{s}" for n in quantized for s in ("codes", "group_params")}
        for e in entries:
            if e["name"] not in qpayloads:
                fp[e["name"]] = arrays[e["name"]]
        return QuantizedModel(cfg, fp, quantized, bounds, list(meta.get("order", []))), meta
    raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")


def save_dataset(path, dataset: Dataset) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in dataset.records:
            f.write(canonical_json({"prompt": r.prompt.tolist(), "response": r.response.tolist(),
                                    "source": r.source.value}) + "\n")


def load_dataset(path) -> Dataset:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(Record(d["prompt"], d["response"], d.get("source", "y_g")))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetFormatError(f"{path}:{lineno}: malformed dataset record ({e})") from e
    return Dataset(records)
