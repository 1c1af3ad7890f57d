import io
import json
import sys

import numpy as np
import pytest

from earlyproto import dataio
from earlyproto.cli import main
from earlyproto.metrics import PUBLISHED, AccuracyCurve, write_metrics_csv
from earlyproto.model import forward_full, init_params, load_checkpoint, read_embeddings_csv

SMALL_GEN = ["--k-classes", "4", "--t-segments", "5", "--d-enc", "6", "--n-train", "24",
             "--n-val", "12", "--ambiguity-depth", "2", "--noise-sigma", "1.0"]
SMALL_MODEL = ["--d", "8", "--n-blocks", "1", "--n-heads", "2", "--predictor-hidden", "8", "--batch-size", "8"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out-dir", str(d), *SMALL_GEN]) == 0
    assert main(["train", "--train-file", str(d / "train.evpf"), "--val-file", str(d / "val.evpf"),
                 "--checkpoint", str(d / "m.evpc"), "--report", str(d / "r.jsonl"),
                 "--epochs", "2", *SMALL_MODEL]) == 0
    return d


def test_gen_files_and_counts(workdir, capsys):
    tr = dataio.read_feature_file(workdir / "train.evpf")
    va = dataio.read_feature_file(workdir / "val.evpf")
    assert (len(tr), len(va), tr.k_classes, tr.d_enc) == (24, 12, 4, 6)


def test_gen_byte_identical(tmp_path):
    for sub in ("a", "b"):
        assert main(["gen", "--out-dir", str(tmp_path / sub), *SMALL_GEN, "--seed", "4"]) == 0
    for name in ("train.evpf", "val.evpf"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_odd_k(tmp_path, capsys):
    assert main(["gen", "--out-dir", str(tmp_path), "--k-classes", "5"]) == 2
    assert "k_classes" in capsys.readouterr().err


def test_gen_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--out-dir", str(blocker / "sub"), *SMALL_GEN]) != 0


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"n_train": 10, "n_val": 6, "k_classes": 4, "d_enc": 3}}))
    assert main(["gen", "--config", str(cfg), "--out-dir", str(tmp_path), "--n-val", "2"]) == 0
    assert len(dataio.read_feature_file(tmp_path / "train.evpf")) == 10
    assert len(dataio.read_feature_file(tmp_path / "val.evpf")) == 2


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"width": 3}}))
    assert main(["gen", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2


# -------------------------------------------------------------------- train

def test_train_report_lines(workdir):
    lines = (workdir / "r.jsonl").read_text().splitlines()
    assert len(lines) == 2 and all("auc" in json.loads(l) for l in lines)


def test_train_null_run_keeps_init(workdir, tmp_path):
    ck = tmp_path / "z.evpc"
    assert main(["train", "--train-file", str(workdir / "train.evpf"), "--checkpoint", str(ck),
                 "--report", str(tmp_path / "z.jsonl"), "--epochs", "1", "--lr", "0", *SMALL_MODEL]) == 0
    got = load_checkpoint(ck)
    ref = init_params(got.config)
    assert all(np.array_equal(ref[n].data, got[n].data) for n in ref.names())


@pytest.mark.parametrize("reg", ["none", "prototypes", "pred_next", "pred_final"])
def test_train_reg_modes(workdir, tmp_path, reg):
    rep = tmp_path / "r.jsonl"
    assert main(["train", "--train-file", str(workdir / "train.evpf"), "--val-file", str(workdir / "val.evpf"),
                 "--checkpoint", str(tmp_path / "m.evpc"), "--report", str(rep),
                 "--epochs", "1", "--reg", reg, "--loss", "dynamic_soft", *SMALL_MODEL]) == 0
    assert np.isfinite(json.loads(rep.read_text().splitlines()[-1])["auc"])


def test_train_bad_config(workdir, tmp_path):
    assert main(["train", "--train-file", str(workdir / "train.evpf"), "--checkpoint", str(tmp_path / "m"),
                 "--report", str(tmp_path / "r"), "--d", "9", "--n-heads", "2"]) == 2


# --------------------------------------------------------------------- eval

def test_eval_deterministic(workdir, tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"m{i}.csv"
        assert main(["eval", "--checkpoint", str(workdir / "m.evpc"), "--data", str(workdir / "val.evpf"),
                     "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert outs[0].decode().splitlines()[0] == "rho,top1"


def test_eval_curve_from_csv(tmp_path, capsys):
    src = tmp_path / "ssv2.csv"
    write_metrics_csv(AccuracyCurve(*PUBLISHED["ssv2"][:2]), src)
    assert main(["eval", "--curve-from-csv", str(src)]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last.startswith("auc,") and abs(float(last[4:]) - 43.00) <= 0.01


def test_eval_missing_checkpoint(workdir, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data", str(workdir / "val.evpf")]) == 2


def test_eval_mismatch_names_field(workdir, tmp_path, capsys):
    other = tmp_path / "o.evpf"
    rng = np.random.default_rng(0)
    dataio.write_feature_file(dataio.Dataset(
        [dataio.SegmentFeatureSequence(rng.normal(size=(5, 7)), 0)], 4, 7), other)
    assert main(["eval", "--checkpoint", str(workdir / "m.evpc"), "--data", str(other)]) == 2
    assert "d_enc" in capsys.readouterr().err


# ------------------------------------------------------------------- stream

def _parse(out):
    return [l.split(",") for l in out.strip().splitlines()]


def test_stream_matches_batched(workdir, capsys):
    capsys.readouterr()
    assert main(["stream", "--checkpoint", str(workdir / "m.evpc"), "--data", str(workdir / "val.evpf"),
                 "--index", "3"]) == 0
    rows = _parse(capsys.readouterr().out)
    sample = dataio.read_feature_file(workdir / "val.evpf")[3]
    assert len(rows) == sample.T
    logits = forward_full(load_checkpoint(workdir / "m.evpc"), sample.features).logits.data
    probs = np.exp(logits - logits.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    for t, (ti, rho, k, p) in enumerate(rows, 1):
        assert int(ti) == t and float(rho) == pytest.approx(t / sample.T, abs=1e-15)
        assert int(k) == int(np.argmax(probs[t - 1]))
        assert abs(float(p) - probs[t - 1].max()) <= 1e-9 * probs[t - 1].max()


def _stdin(monkeypatch, rows):
    monkeypatch.setattr(sys, "stdin", io.StringIO("\n".join(" ".join(str(float(v)) for v in r) for r in rows) + "\n"))


def test_stream_stdin_capacity(workdir, monkeypatch, capsys):
    t_max = load_checkpoint(workdir / "m.evpc").config.t_max
    _stdin(monkeypatch, np.zeros((t_max + 1, 6)))
    assert main(["stream", "--checkpoint", str(workdir / "m.evpc")]) == 3
    assert len(_parse(capsys.readouterr().out)) == t_max


def test_stream_width_mismatch(workdir, monkeypatch):
    _stdin(monkeypatch, np.zeros((2, 5)))
    assert main(["stream", "--checkpoint", str(workdir / "m.evpc")]) == 2


# ------------------------------------------------------------------- export

def test_export_embeddings(workdir, tmp_path):
    out = tmp_path / "e.csv"
    assert main(["export-embeddings", "--checkpoint", str(workdir / "m.evpc"),
                 "--data", str(workdir / "val.evpf"), "--out", str(out)]) == 0
    rows = read_embeddings_csv(out)
    kinds = [r[0] for r in rows]
    assert kinds.count("prototype") == 4 and kinds.count("final_feature") == 12
