from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from bitforge.cli import main
from bitforge.divergence import per_token_ce_report
from bitforge.io import load_checkpoint, load_dataset, save_checkpoint
from bitforge.model import ModelConfig, build_model

GOLDEN = Path(__file__).parent / "golden"
TINY_MODEL = {"d_model": 32, "n_layers": 1, "n_heads": 2, "max_seq_len": 64}


def sha(p):
    return hashlib.sha256(Path(p).read_bytes()).hexdigest()


def manifest(p):
    return json.loads(Path(p).read_text())


def rows(p):
    with open(p, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with a small corpus and a briefly trained teacher."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["corpus", "--out", str(d / "data"), "--n", "300", "--eval-n", "30", "--qat-n", "24"]) == 0
    cfg = {"corpus": str(d / "data/train.txt"), "eval_corpus": str(d / "data/eval.txt"),
           "out": str(d / "teacher.bdck"), "model": TINY_MODEL, "steps": 60, "seq_len": 64}
    (d / "pre.json").write_text(json.dumps(cfg))
    assert main(["pretrain", str(d / "pre.json"), "--seed", "0"]) == 0
    return d


def common(ws):
    return {"teacher": str(ws / "teacher.bdck"), "data": str(ws / "data/ground_truth.jsonl"),
            "calib": str(ws / "data/train.txt"), "eval": str(ws / "data/eval.txt")}


class TestPretrain:
    def test_manifest_and_learning(self, ws):
        m = manifest(ws / "teacher.manifest.json")
        assert m["command"] == "pretrain" and m["seed"] == 0 and m["status"] == "ok"
        assert m["config"]["teacher_ppl"] < 0.8 * m["config"]["random_init_ppl"]
        assert "pretrain" in m["timings"]
        for out in m["outputs"]:
            assert Path(out).is_file()

    def test_rerun_identical_hash(self, ws):
        assert main(["pretrain", str(ws / "pre.json"), "--seed", "0", "--out", str(ws / "again.bdck"),
                     "--no-plot"]) == 0
        assert sha(ws / "again.bdck") == sha(ws / "teacher.bdck")

    def test_missing_key(self, ws, tmp_path, capsys):
        (tmp_path / "bad.json").write_text(json.dumps({"out": str(tmp_path / "x.bdck")}))
        assert main(["pretrain", str(tmp_path / "bad.json")]) != 0
        assert "'corpus'" in capsys.readouterr().err

    def test_missing_corpus(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"corpus": str(tmp_path / "nope.txt"), "out": str(tmp_path / "x")}))
        assert main(["pretrain", str(tmp_path / "c.json")]) != 0
        assert "nope.txt" in capsys.readouterr().err

    def test_env_seed_fallback(self, ws, monkeypatch):
        monkeypatch.setenv("BITFORGE_SEED", "7")
        cfg = json.loads((ws / "pre.json").read_text())
        cfg.update(steps=2, out=str(ws / "env.bdck"))
        (ws / "env.json").write_text(json.dumps(cfg))
        assert main(["pretrain", str(ws / "env.json"), "--no-plot"]) == 0
        m = manifest(ws / "env.manifest.json")
        assert m["seed"] == 7 and m["config"]["model"]["seed"] == 7


class TestGenData:
    def test_defaults_and_report(self, ws):
        c = common(ws)
        prompts = ws / "data/prompts.txt"
        before = sha(prompts)
        out = ws / "yp.jsonl"
        assert main(["gen-data", c["teacher"], str(prompts), "--out", str(out), "--max-new", "16", "--report"]) == 0
        m = manifest(ws / "yp.manifest.json")
        assert m["config"]["temperature"] == 0.7
        assert "data_gen" in m["timings"]
        ds = load_dataset(out)
        assert m["config"]["records"] == len(ds) == 24 - m["config"]["skipped"]
        teacher, _ = load_checkpoint(c["teacher"])
        expected = per_token_ce_report(teacher, ds).flat
        got = np.array([float(r[2]) for r in rows(ws / "yp.ce.csv")[1:]])
        np.testing.assert_allclose(got, expected, rtol=1e-12)
        assert rows(ws / "yp.ce.csv")[0] == ["seq_id", "position", "ce"]
        assert sha(prompts) == before

    def test_greedy_reproducible_without_seed(self, ws):
        c = common(ws)
        for name in ("g1", "g2"):
            assert main(["gen-data", c["teacher"], str(ws / "data/prompts.txt"), "--out", str(ws / f"{name}.jsonl"),
                         "--temperature", "0", "--max-new", "8", "--no-plot"]) == 0
        assert sha(ws / "g1.jsonl") == sha(ws / "g2.jsonl")


class TestQuantize:
    @pytest.mark.parametrize("bits,fmt", [(2, "INT_ASYM"), (3, "NF_ASYM")])
    def test_default_format_and_objectives(self, ws, bits, fmt):
        c = common(ws)
        out = ws / f"q{bits}.bdck"
        assert main(["quantize", c["teacher"], "--bits", str(bits), "--calib", c["calib"], "--out", str(out)]) == 0
        rep = json.loads((ws / f"q{bits}.report.json").read_text())
        assert rep["quant"] == {"bits": bits, "format": fmt, "group_size": 128}
        for layer in rep["layers"]:
            assert layer["objective_clip"] <= layer["objective_noclip"]
        q, meta = load_checkpoint(out)
        assert meta["kind"] == "quantized" and set(q.clip_bounds) == set(q.quantized)
        assert "quant_init" in manifest(ws / f"q{bits}.manifest.json")["timings"]

    def test_no_clip_still_reports_objective(self, ws):
        c = common(ws)
        assert main(["quantize", c["teacher"], "--no-clip", "--calib", c["calib"], "--out", str(ws / "nc.bdck")]) == 0
        header, *body = rows(ws / "nc.report.csv")
        assert "objective_noclip" in header and all(r[header.index("objective_noclip")] for r in body)

    def test_clip_without_calib(self, ws):
        assert main(["quantize", common(ws)["teacher"], "--out", str(ws / "x.bdck")]) != 0


class TestTrain:
    def test_default_lr_and_gamma(self, ws):
        c = common(ws)
        out = ws / "student.bdck"
        assert main(["train", c["teacher"], c["data"], "--calib", c["calib"], "--steps", "3", "--batch-size", "4",
                     "--out", str(out), "--no-plot"]) == 0
        m = manifest(ws / "student.manifest.json")
        assert m["config"]["learning_rate"] == 8e-6
        assert m["config"]["objective"] == "cakld" and m["config"]["gamma_batches"] == 10
        assert 0 < m["config"]["gamma"] < 1
        assert set(m["timings"]) >= {"data_gen", "quant_init", "qat", "total"}
        assert rows(ws / "student.loss.csv")[0] == ["step", "loss", "grad_norm", "clipped"]
        assert len(rows(ws / "student.loss.csv")) == 4

    @pytest.mark.parametrize("obj", ["fkl", "rkl", "jsd"])
    def test_objectives(self, ws, obj):
        c = common(ws)
        assert main(["train", c["teacher"], c["data"], "--no-clip", "--objective", obj, "--steps", "1",
                     "--batch-size", "2", "--out", str(ws / f"s_{obj}.bdck"), "--no-plot"]) == 0
        m = manifest(ws / f"s_{obj}.manifest.json")
        assert m["config"]["objective"] == obj and m["config"]["gamma"] is None

    def test_flag_beats_file_beats_default(self, ws):
        c = common(ws)
        (ws / "t.json").write_text(json.dumps({"learning_rate": 1e-3, "steps": 2, "batch_size": 2, "clip": False}))
        base = ["train", c["teacher"], c["data"], "--config", str(ws / "t.json"), "--no-plot"]
        assert main(base + ["--out", str(ws / "f1.bdck")]) == 0
        assert main(base + ["--lr", "2e-3", "--out", str(ws / "f2.bdck")]) == 0
        assert manifest(ws / "f1.manifest.json")["config"]["learning_rate"] == 1e-3
        assert manifest(ws / "f2.manifest.json")["config"]["learning_rate"] == 2e-3
        assert manifest(ws / "f1.manifest.json")["config"]["steps"] == 2

    def test_mix_ratio_and_bad_spec(self, ws, capsys):
        c = common(ws)
        from bitforge.data import Dataset, Record, Source
        from bitforge.io import save_dataset
        extra = Dataset([Record([104, 105], [33, 10], Source.TEACHER_GEN)] * 40)
        save_dataset(ws / "extra.jsonl", extra)
        n_gt = len(load_dataset(c["data"]))
        assert main(["train", c["teacher"], c["data"], "--no-clip", "--objective", "fkl", "--steps", "1",
                     "--batch-size", "2", "--mix", f"{ws / 'extra.jsonl'}:0.5",
                     "--out", str(ws / "mixed.bdck"), "--no-plot"]) == 0
        m = manifest(ws / "mixed.manifest.json")
        assert m["config"]["source_counts"] == {"y_g": n_gt, "y_p": n_gt // 2}
        assert m["config"]["mix"] == [[str(ws / "extra.jsonl"), 0.5]]
        assert main(["train", c["teacher"], c["data"], "--no-clip", "--mix", "nocolon",
                     "--out", str(ws / "bad.bdck"), "--no-plot"]) == 2
        assert "PATH:WEIGHT" in capsys.readouterr().err

    def test_nan_abort(self, ws):
        c = common(ws)
        teacher, _ = load_checkpoint(c["teacher"])
        teacher.params["head"].data[3, 3] = np.nan
        save_checkpoint(ws / "nan.bdck", teacher)
        code = main(["train", str(ws / "nan.bdck"), c["data"], "--no-clip", "--objective", "fkl", "--steps", "3",
                     "--out", str(ws / "nan_run.bdck"), "--no-plot"])
        assert code != 0
        assert not (ws / "nan_run.bdck").exists()
        hist = rows(ws / "nan_run.loss.csv")
        assert len(hist) == 2 and hist[1][1] == "nan"
        assert manifest(ws / "nan_run.manifest.json")["status"] == "aborted"


class TestEval:
    def test_uniform_model(self, tmp_path, capsys):
        m = build_model(ModelConfig(**TINY_MODEL))
        m.params["head"].data[:] = 0
        save_checkpoint(tmp_path / "u.bdck", m)
        (tmp_path / "c.txt").write_text("abc def\n" * 50)
        assert main(["eval", str(tmp_path / "u.bdck"), str(tmp_path / "c.txt")]) == 0
        out = json.loads(capsys.readouterr().out)
        assert abs(out["perplexity"] - 512) / 512 < 1e-3

    def test_both_kinds_and_golden_schema(self, ws):
        golden = json.loads((GOLDEN / "eval_summary.json").read_text())
        c = common(ws)
        assert main(["quantize", c["teacher"], "--no-clip", "--out", str(ws / "e.bdck"), "--no-plot"]) == 0
        for ckpt, kind in ((c["teacher"], "model"), (str(ws / "e.bdck"), "quantized")):
            out = ws / f"eval_{kind}.json"
            assert main(["eval", ckpt, c["eval"], "--out", str(out)]) == 0
            summary = json.loads(out.read_text())
            assert {k: type(v).__name__ for k, v in summary.items()} == golden
            assert summary["kind"] == kind


class TestDemo:
    def test_csv_schema_and_ordering(self, tmp_path):
        assert main(["demo-mixture", "--out", str(tmp_path), "--gamma", "0.9", "--mu0", "1.5"]) == 0
        finals = {}
        for k in ("fkl", "rkl", "cakld", "jsd"):
            header, *body = rows(tmp_path / f"mixture_{k}.csv")
            assert header == ["step", "mu", "sigma", "divergence"]
            finals[k] = abs(float(body[-1][1]))
        assert finals["fkl"] < finals["cakld"] < finals["rkl"]
        assert (tmp_path / "mixture.png").stat().st_size > 0

    def test_gamma_zero_equals_fkl(self, tmp_path):
        assert main(["demo-mixture", "--out", str(tmp_path / "a"), "--objective", "cakld", "--gamma", "0",
                     "--steps", "300", "--no-plot"]) == 0
        assert main(["demo-mixture", "--out", str(tmp_path / "b"), "--objective", "fkl", "--steps", "300",
                     "--no-plot"]) == 0
        assert (tmp_path / "a/mixture_cakld.csv").read_bytes() == (tmp_path / "b/mixture_fkl.csv").read_bytes()


def test_compare(ws):
    c = common(ws)
    out = ws / "cmp"
    assert main(["compare", c["teacher"], c["data"], "--calib", c["calib"], "--eval", c["eval"], "--steps", "2",
                 "--batch-size", "2", "--out", str(out)]) == 0
    header, *body = rows(out / "compare.csv")
    assert header == ["variant", "start_ppl", "end_ppl", "wall_clock"]
    assert [r[0] for r in body] == ["INT_SYM", "INT_SYM+clip", "INT_ASYM", "INT_ASYM+clip"]
    m = manifest(out / "compare.manifest.json")
    assert set(m["timings"]) == {"data_gen", "quant_init", "qat", "total"}
    assert m["config"]["learning_rate"] == 1e-4 and len(m["config"]["variants"]) == 4


def test_default_config_pretrain(tmp_path):
    """The shipped pretrain config trains a useful teacher in under ten minutes."""
    import time

    cfg = json.loads((Path(__file__).parents[1] / "configs/pretrain.json").read_text())
    assert main(["corpus", "--out", str(tmp_path / "data")]) == 0
    for key in ("corpus", "eval_corpus", "out"):
        cfg[key] = str(tmp_path / cfg[key])
    (tmp_path / "runs").mkdir()
    (tmp_path / "pre.json").write_text(json.dumps(cfg))
    t0 = time.perf_counter()
    assert main(["pretrain", str(tmp_path / "pre.json"), "--no-plot"]) == 0
    assert time.perf_counter() - t0 < 600
    m = manifest(tmp_path / "runs/teacher.manifest.json")
    assert m["config"]["teacher_ppl"] < 0.8 * m["config"]["random_init_ppl"]
