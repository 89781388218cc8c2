"""Command line entry point: ``bitforge <command> ...``.

Every command writes a ``*.manifest.json`` beside its main output and exits
non-zero unless all declared outputs were written.  Settings resolve as
flag > config file > built-in default.  ``BITFORGE_SEED`` supplies the seed
when ``--seed`` is absent.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import plots, presets
from .clip import capture_activations, clip_objective, search_clip_bounds
from .corpus import corpus_text, make_pairs, pairs_to_dataset
from .data import Source
from .divergence import DivergenceSpec, Kind, confidence_report, per_token_ce_report
from .io import QuantizedModel, canonical_json, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .mixture import OptimizationError, fit_gaussian_demo
from .model import Model, ModelConfig, build_model, encode, perplexity
from .qat import TrainConfig, TrainingAborted, evaluate_pipeline, generate_dataset, pretrain, qat_train
from .quant import QuantConfig, QuantFormat, default_format, quant_error_report, quantize_tensor

log = logging.getLogger("bitforge")

EXIT_USAGE = 2
EXIT_ABORTED = 3


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("BITFORGE_SEED")
    return int(env) if env else 0


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path} is not valid JSON: {e}") from None


def _pick(flag, cfg: dict, key: str, default):
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _require(cfg: dict, *keys):
    for k in keys:
        if k not in cfg:
            raise CliError(f"missing config key {k!r}")


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None


def _load_model(path) -> tuple[Model, dict]:
    try:
        obj, meta = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None
    if isinstance(obj, QuantizedModel):
        return obj.to_model(), meta
    if isinstance(obj, Model):
        return obj, meta
    raise CliError(f"{path} holds no model parameters")


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix else p


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _finish(manifest_path, command, config, inputs, outputs, seed, timings, status="ok") -> int:
    outputs = [str(o) for o in outputs]
    manifest = {
        "command": command,
        "config": config,
        "inputs": [str(i) for i in inputs],
        "outputs": outputs,
        "seed": seed,
        "timings": {k: round(v, 4) for k, v in timings.items()},
        "status": status,
    }
    _write_json(manifest_path, manifest)
    missing = [o for o in outputs if not Path(o).is_file() or Path(o).stat().st_size == 0]
    if missing:
        log.error("missing outputs: %s", ", ".join(missing))
        return 1
    return 0


def _calib_from_text(path, seed: int, model: Model):
    stream = encode(_read_text(path))
    seq = min(128, model.config.max_seq_len, stream.size - 2)
    if seq < 2:
        raise CliError(f"calibration file {path} is too short")
    return presets.calib_batches(stream, seed=seed, seq_len=seq)


def _quant_config(bits, fmt, group_size) -> QuantConfig:
    bits = int(bits)
    fmt = QuantFormat(fmt.upper()) if fmt else default_format(bits)
    return QuantConfig(bits, fmt, int(group_size))


# ---------------------------------------------------------------- commands

def cmd_corpus(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed(args)
    train_pairs = make_pairs(args.n, seed)
    qat_pairs = make_pairs(args.qat_n, seed + presets.QAT_SEED)
    files = {
        "train.txt": corpus_text(train_pairs),
        "eval.txt": corpus_text(make_pairs(args.eval_n, seed + presets.EVAL_SEED)),
        "prompts.txt": "".join(p + "\n" for p, _ in qat_pairs),
    }
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
    save_dataset(out / "ground_truth.jsonl", pairs_to_dataset(qat_pairs))
    outputs = [out / n for n in files] + [out / "ground_truth.jsonl"]
    cfg = {"n": args.n, "eval_n": args.eval_n, "qat_n": args.qat_n}
    return _finish(out / "corpus.manifest.json", "corpus", cfg, [], outputs, seed, {})


def cmd_pretrain(args) -> int:
    cfg = _read_json(args.config)
    if args.out is not None:
        cfg["out"] = args.out
    _require(cfg, "corpus", "out")
    seed = _seed(args) if args.seed is not None or "seed" not in cfg else int(cfg["seed"])
    mcfg = ModelConfig.from_dict({**cfg.get("model", {}), "seed": seed})
    opts = {k: _pick(getattr(args, k, None), cfg, k, presets.PRETRAIN[k]) for k in presets.PRETRAIN}
    stream = encode(_read_text(cfg["corpus"]))
    model = build_model(mcfg)
    resolved = {"corpus": cfg["corpus"], "out": cfg["out"], "model": mcfg.to_dict(), **opts}
    extra = {}
    if cfg.get("eval_corpus"):
        ev = encode(_read_text(cfg["eval_corpus"]))
        extra["random_init_ppl"] = perplexity(model, ev)
    t0 = time.perf_counter()
    losses = pretrain(model, stream, seed=seed, **opts)
    t_train = time.perf_counter() - t0
    if cfg.get("eval_corpus"):
        extra["teacher_ppl"] = perplexity(model, ev)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    # the output path stays out of the file so identical runs hash identically
    save_checkpoint(out, model, {"command": "pretrain", "config": {k: v for k, v in resolved.items() if k != "out"}})
    stem = _stem(out)
    loss_csv, loss_png = f"{stem}.loss.csv", f"{stem}.loss.png"
    _write_csv(loss_csv, ["step", "loss"], [(i + 1, l) for i, l in enumerate(losses)])
    outputs = [out, loss_csv]
    if not args.no_plot:
        plots.loss_curve(losses, loss_png, title="teacher pretraining")
        outputs.append(loss_png)
    resolved.update(extra)
    inputs = [cfg["corpus"]] + ([args.config] if args.config else [])
    return _finish(f"{stem}.manifest.json", "pretrain", resolved, inputs, outputs, seed, {"pretrain": t_train})


def cmd_gen_data(args) -> int:
    teacher, _ = _load_model(args.teacher)
    seed = _seed(args)
    lines = [l for l in _read_text(args.prompts).splitlines() if l.strip()]
    if not lines:
        raise CliError(f"no prompts in {args.prompts}")
    prompts = [encode(l + "\n") for l in lines]
    t0 = time.perf_counter()
    ds, skipped = generate_dataset(teacher, prompts, args.temperature, args.max_new,
                                   None if args.temperature == 0 else seed, Source(args.source))
    timings = {"data_gen": time.perf_counter() - t0}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, ds)
    outputs = [out]
    stem = _stem(out)
    if args.report:
        for report in (per_token_ce_report(teacher, ds), confidence_report(teacher, ds)):
            tag = report.metric
            _write_csv(f"{stem}.{tag}.csv", ["seq_id", "position", tag], report.rows())
            _write_json(f"{stem}.{tag}.json", report.summary())
            outputs += [f"{stem}.{tag}.csv", f"{stem}.{tag}.json"]
            if not args.no_plot:
                plots.token_histogram(report.flat, f"{stem}.{tag}.png",
                                      "per-token CE (nats)" if tag == "ce" else "teacher probability")
                outputs.append(f"{stem}.{tag}.png")
    cfg = {"temperature": args.temperature, "max_new": args.max_new, "source": args.source,
           "records": len(ds), "skipped": skipped}
    return _finish(f"{stem}.manifest.json", "gen-data", cfg, [args.teacher, args.prompts], outputs, seed, timings)


def cmd_quantize(args) -> int:
    model, _ = _load_model(args.checkpoint)
    seed = _seed(args)
    qcfg = _quant_config(args.bits, args.format, args.group_size)
    if args.clip and not args.calib:
        raise CliError("--clip needs --calib")
    t0 = time.perf_counter()
    cache = None
    if args.calib:
        cache = capture_activations(model, _calib_from_text(args.calib, seed, model))
    layers = []
    for name in model.quant_layer_names():
        w = model.params[name].data
        row = {"layer": name}
        if cache is not None:
            gram = cache[name].T @ cache[name]
            row["objective_noclip"] = clip_objective(w, gram, qcfg, float(w.min()), float(w.max()))
        if args.clip:
            bounds, obj = search_clip_bounds(w, cache[name], qcfg, args.grid_steps, layer_id=name)
            model.params[name].data = np.clip(w, bounds.alpha, bounds.beta)
            model.clip_bounds[name] = bounds
            row.update(objective_clip=obj, alpha=bounds.alpha, beta=bounds.beta)
        rep = quant_error_report(model.params[name], qcfg)
        row.update(mse=rep["mse"], max_abs_error=rep["max_abs_error"])
        layers.append(row)
    quantized = {n: quantize_tensor(model.params[n], qcfg) for n in model.quant_layer_names()}
    timings = {"quant_init": time.perf_counter() - t0}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    qm = QuantizedModel.from_model(model, quantized)
    save_checkpoint(out, qm, {"command": "quantize", "quant": qcfg.to_dict(), "clip": args.clip})
    stem = _stem(out)
    cols = ["layer", "mse", "max_abs_error", "objective_noclip", "objective_clip", "alpha", "beta"]
    _write_csv(f"{stem}.report.csv", cols, [[r.get(c, "") for c in cols] for r in layers])
    summary = {"quant": qcfg.to_dict(), "clip": args.clip, "layers": layers}
    if args.eval:
        summary["perplexity"] = perplexity(qm.to_model(), encode(_read_text(args.eval)))
    _write_json(f"{stem}.report.json", summary)
    outputs = [out, f"{stem}.report.csv", f"{stem}.report.json"]
    cfg = {**qcfg.to_dict(), "clip": args.clip, "grid_steps": args.grid_steps}
    inputs = [args.checkpoint] + ([args.calib] if args.calib else [])
    return _finish(f"{stem}.manifest.json", "quantize", cfg, inputs, outputs, seed, timings)


_TRAIN_KEYS = {
    "lr": ("learning_rate", 8e-6),
    "steps": ("steps", 300),
    "batch_size": ("batch_size", 8),
    "objective": ("objective", "cakld"),
    "gamma": ("gamma", None),
    "bits": ("bits", 2),
    "format": ("format", None),
    "group_size": ("group_size", 128),
    "clip": ("clip", True),
    "data_source": ("data_source", "y_g"),
    "temperature": ("temperature", 0.7),
    "eval_interval": ("eval_interval", 0),
    "ce_weight": ("ce_weight", 0.0),
    "weight_decay": ("weight_decay", 0.0),
    "grid_steps": ("clip_grid_steps", 32),
}


# compare runs several QATs back to back, so it defaults to the faster desk preset.
_COMPARE_DEFAULTS = {"learning_rate": presets.QAT_LR, "steps": presets.QAT_STEPS, "batch_size": presets.QAT_BATCH}


def _train_config(args, seed: int, defaults: dict | None = None) -> TrainConfig:
    file_cfg = _read_json(args.config)
    defaults = defaults or {}
    v = {key: _pick(getattr(args, flag, None), file_cfg, key, defaults.get(key, default))
         for flag, (key, default) in _TRAIN_KEYS.items()}
    return TrainConfig(
        learning_rate=float(v["learning_rate"]),
        weight_decay=float(v["weight_decay"]),
        steps=int(v["steps"]),
        batch_size=int(v["batch_size"]),
        quant=_quant_config(v["bits"], v["format"], v["group_size"]),
        divergence=DivergenceSpec(Kind(str(v["objective"]).lower()), v["gamma"]),
        data_source=Source(v["data_source"]),
        temperature=float(v["temperature"]),
        seed=seed,
        eval_interval=int(v["eval_interval"]),
        clip=bool(v["clip"]),
        clip_grid_steps=int(v["clip_grid_steps"]),
        ce_weight=float(v["ce_weight"]),
    )


def _mix_specs(args) -> list[tuple[str, float]]:
    """``--mix PATH:WEIGHT`` flags, else the config's ``mix`` list of [path, weight]."""
    if args.mix:
        out = []
        for item in args.mix:
            path, sep, w = item.rpartition(":")
            if not sep or not path:
                raise CliError(f"--mix expects PATH:WEIGHT, got {item!r}")
            try:
                out.append((path, float(w)))
            except ValueError:
                raise CliError(f"--mix weight is not a number in {item!r}") from None
        return out
    raw = _read_json(args.config).get("mix", [])
    try:
        return [(str(path), float(w)) for path, w in raw]
    except (TypeError, ValueError):
        raise CliError("config key 'mix' must be a list of [path, weight] pairs") from None


def cmd_train(args) -> int:
    teacher, _ = _load_model(args.teacher)
    seed = _seed(args)
    cfg = _train_config(args, seed)
    dataset = load_dataset(args.dataset)
    calib_path = args.calib or _read_json(args.config).get("calib")
    if cfg.clip and not calib_path:
        raise CliError("clipping is enabled; pass --calib or use --no-clip")
    calib = _calib_from_text(calib_path, seed, teacher) if cfg.clip else None
    eval_tokens = encode(_read_text(args.eval)) if args.eval else None
    mix_specs = _mix_specs(args)
    mix = [(load_dataset(path), w) for path, w in mix_specs]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stem = _stem(out)
    loss_csv = f"{stem}.loss.csv"
    resolved = cfg.to_dict()
    resolved["mix"] = [[path, w] for path, w in mix_specs]
    inputs = [args.teacher, args.dataset] + [p for p in (calib_path, args.eval, args.config) if p]
    inputs += [path for path, _ in mix_specs]
    try:
        res = qat_train(teacher, dataset, cfg, calib=calib, eval_tokens=eval_tokens, mix=mix)
    except TrainingAborted as e:
        _write_csv(loss_csv, ["step", "loss", "grad_norm", "clipped"],
                   [(h["step"], h["loss"], h["grad_norm"], int(h["clipped"])) for h in e.history])
        log.error("%s", e)
        _finish(f"{stem}.manifest.json", "train", resolved, inputs, [loss_csv], seed, {}, status="aborted")
        return EXIT_ABORTED
    resolved["gamma"] = res.gamma
    resolved["start_ppl"] = res.start_ppl
    resolved["end_ppl"] = res.end_ppl
    resolved["source_counts"] = res.dataset.source_counts()
    qm = QuantizedModel.from_model(res.student, res.quantized)
    save_checkpoint(out, qm, {"command": "train", "config": resolved})
    _write_csv(loss_csv, ["step", "loss", "grad_norm", "clipped"],
               [(h["step"], h["loss"], h["grad_norm"], int(h["clipped"])) for h in res.history])
    outputs = [out, loss_csv]
    if res.evals:
        _write_csv(f"{stem}.eval.csv", ["step", "ppl"], res.evals)
        outputs.append(f"{stem}.eval.csv")
    if not args.no_plot:
        plots.loss_curve(res.losses, f"{stem}.loss.png", title=f"QAT ({cfg.divergence.kind.value})")
        outputs.append(f"{stem}.loss.png")
    return _finish(f"{stem}.manifest.json", "train", resolved, inputs, outputs, seed, res.timings)


EVAL_SCHEMA = ("checkpoint", "kind", "perplexity", "n_tokens", "stride", "vocab_size")


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint)
    tokens = encode(_read_text(args.corpus))
    stride = args.stride or model.config.max_seq_len
    ppl = perplexity(model, tokens, stride=stride)
    summary = {"checkpoint": str(args.checkpoint), "kind": meta.get("kind"), "perplexity": ppl,
               "n_tokens": int(tokens.size), "stride": stride, "vocab_size": model.config.vocab_size}
    print(canonical_json(summary))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_json(out, summary)
        return _finish(f"{_stem(out)}.manifest.json", "eval", {"stride": stride},
                       [args.checkpoint, args.corpus], [out], _seed(args), {})
    return 0


DEMO_MIXTURE = ([0.5, 0.5], [-2.0, 2.0], [0.5, 0.5])


def cmd_demo_mixture(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mixture = (args.weights or DEMO_MIXTURE[0], args.means or DEMO_MIXTURE[1], args.sigmas or DEMO_MIXTURE[2])
    kinds = ["fkl", "rkl", "cakld", "jsd"] if args.objective == "all" else [args.objective]
    finals, outputs = {}, []
    t0 = time.perf_counter()
    for k in kinds:
        spec = DivergenceSpec(Kind(k), args.gamma if k == "cakld" else None)
        try:
            res = fit_gaussian_demo(mixture, spec, init=(args.mu0, args.sigma0), steps=args.steps)
        except OptimizationError as e:
            raise CliError(f"{k}: {e} (last state mu={e.last_state[0]}, sigma={e.last_state[1]})") from None
        path = out / f"mixture_{k}.csv"
        _write_csv(path, ["step", "mu", "sigma", "divergence"], res.rows())
        outputs.append(path)
        finals[k] = {"mu": res.mu, "sigma": res.sigma, "divergence": res.divergence}
    _write_json(out / "mixture_finals.json", finals)
    outputs.append(out / "mixture_finals.json")
    if not args.no_plot:
        plots.mixture_fits(mixture, {k: (v["mu"], v["sigma"]) for k, v in finals.items()}, out / "mixture.png")
        outputs.append(out / "mixture.png")
    cfg = {"gamma": args.gamma, "objectives": kinds, "steps": args.steps,
           "mixture": {"weights": mixture[0], "means": mixture[1], "sigmas": mixture[2]},
           "init": [args.mu0, args.sigma0]}
    return _finish(out / "mixture.manifest.json", "demo-mixture", cfg, [], outputs, _seed(args),
                   {"total": time.perf_counter() - t0})


def cmd_compare(args) -> int:
    teacher, _ = _load_model(args.teacher)
    seed = _seed(args)
    base = _train_config(args, seed, _COMPARE_DEFAULTS)
    dataset = load_dataset(args.dataset)
    calib = _calib_from_text(args.calib, seed, teacher)
    eval_tokens = encode(_read_text(args.eval))
    bits = base.quant.bits
    asym, sym = (QuantFormat.INT_ASYM, QuantFormat.INT_SYM) if bits == 2 else (QuantFormat.NF_ASYM, QuantFormat.NF_SYM)
    variants = []
    for fmt in (sym, asym):
        for clip in (False, True):
            q = QuantConfig(bits, fmt, base.quant.group_size)
            name = f"{fmt.value}{'+clip' if clip else ''}"
            variants.append(TrainConfig(**{**_fields(base), "quant": q, "clip": clip, "name": name}))
    rows = evaluate_pipeline(teacher, variants, dataset, eval_tokens, calib)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "compare.csv", ["variant", "start_ppl", "end_ppl", "wall_clock"],
               [(r["variant"], r["start_ppl"], r["end_ppl"], r["wall_clock"]) for r in rows])
    table = [{k: v for k, v in r.items() if k != "result"} for r in rows]
    _write_json(out / "compare.json", table)
    outputs = [out / "compare.csv", out / "compare.json"]
    if not args.no_plot:
        plots.start_end_bars(rows, out / "compare.png")
        outputs.append(out / "compare.png")
    timings = {}
    for r in rows:
        for phase in ("data_gen", "quant_init", "qat"):
            timings[phase] = timings.get(phase, 0.0) + r["timings"].get(phase, 0.0)
    timings["total"] = sum(timings.values())
    cfg = base.to_dict()
    cfg["variants"] = [{"name": r["variant"], "timings": r["timings"]} for r in rows]
    return _finish(out / "compare.manifest.json", "compare", cfg,
                   [args.teacher, args.dataset, args.calib, args.eval], outputs, seed, timings)


def _fields(cfg: TrainConfig) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


# ---------------------------------------------------------------- parser

def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with training settings")
    p.add_argument("--objective", choices=[k.value for k in Kind])
    p.add_argument("--gamma", type=float, help="fixed CAKLD coefficient (default: estimated)")
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--bits", type=int, choices=[2, 3, 4])
    p.add_argument("--format", choices=[f.value for f in QuantFormat])
    p.add_argument("--group-size", dest="group_size", type=int)
    p.add_argument("--clip", dest="clip", action="store_true", default=None)
    p.add_argument("--no-clip", dest="clip", action="store_false")
    p.add_argument("--data-source", dest="data_source", choices=[s.value for s in Source])
    p.add_argument("--temperature", type=float)
    p.add_argument("--eval-interval", dest="eval_interval", type=int)
    p.add_argument("--ce-weight", dest="ce_weight", type=float)
    p.add_argument("--grid-steps", dest="grid_steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bitforge", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--no-plot", action="store_true", help="skip PNG figures")

    p = sub.add_parser("corpus", help="write the synthetic desk corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=presets.TRAIN_PAIRS)
    p.add_argument("--eval-n", dest="eval_n", type=int, default=presets.EVAL_PAIRS)
    p.add_argument("--qat-n", dest="qat_n", type=int, default=presets.QAT_PAIRS)
    common(p)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("pretrain", help="train the full-precision teacher")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--lr", type=float)
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gen-data", help="sample responses from the teacher")
    p.add_argument("teacher")
    p.add_argument("prompts")
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--max-new", dest="max_new", type=int, default=64)
    p.add_argument("--source", choices=[s.value for s in Source], default=Source.TEACHER_GEN.value)
    p.add_argument("--report", action="store_true", help="also write per-token CE and confidence reports")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("quantize", help="clip (optional) and round-to-nearest quantize a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--bits", type=int, choices=[2, 3, 4], default=2)
    p.add_argument("--format", choices=[f.value for f in QuantFormat])
    p.add_argument("--group-size", dest="group_size", type=int, default=128)
    p.add_argument("--clip", dest="clip", action="store_true", default=True)
    p.add_argument("--no-clip", dest="clip", action="store_false")
    p.add_argument("--calib")
    p.add_argument("--grid-steps", dest="grid_steps", type=int, default=32)
    p.add_argument("--eval", help="corpus for a perplexity figure in the report")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("train", help="quantization-aware self-distillation")
    p.add_argument("teacher")
    p.add_argument("dataset")
    p.add_argument("--calib")
    p.add_argument("--eval")
    p.add_argument("--out", required=True)
    p.add_argument("--mix", action="append", metavar="PATH:WEIGHT",
                   help="blend another dataset in at WEIGHT relative to DATASET (repeatable)")
    _add_train_flags(p)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a full or quantized checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--stride", type=int)
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("demo-mixture", help="fit a Gaussian to a two-mode mixture")
    p.add_argument("--objective", choices=["all"] + [k.value for k in Kind], default="all")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--mu0", type=float, default=0.5)
    p.add_argument("--sigma0", type=float, default=1.0)
    p.add_argument("--weights", type=float, nargs="+")
    p.add_argument("--means", type=float, nargs="+")
    p.add_argument("--sigmas", type=float, nargs="+")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_demo_mixture)

    p = sub.add_parser("compare", help="start/end perplexity for asym/sym x clip/no-clip")
    p.add_argument("teacher")
    p.add_argument("dataset")
    p.add_argument("--calib", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    common(p)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"bitforge {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as e:
        print(f"bitforge {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
