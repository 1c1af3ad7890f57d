"""Command line: gen, train, eval, stream, export-embeddings.

Settings resolve as built-in defaults < JSON ``--config`` file < flags. The
JSON file has optional sections ``model``, ``train``, ``loss``, ``synth`` and
``paths`` whose keys are the dataclass field names.

Exit codes: 0 ok, 2 configuration / validation / I/O, 3 numeric or capacity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dataio, metrics
from .diffcore import ConfigError, NumericError, ShapeError
from .losses import REG_MODES, TEMPORAL_MODES, LossConfig
from .model import (
    CapacityError, CheckpointError, IncrementalState, ModelConfig, export_embeddings, forward_step,
    init_params, load_checkpoint, save_checkpoint,
)
from .trainer import TrainConfig, fit

log = logging.getLogger("earlyproto")


class UsageError(Exception):
    """Validation failure reported with exit code 2."""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    synth: dataio.SynthSpec = field(default_factory=dataio.SynthSpec)
    paths: dict = field(default_factory=dict)
    explicit: set = field(default_factory=set)  # "section.field" set by file or flag


# flag dest -> (section, field)
_FLAG_MAP = {
    "k_classes": ("synth", "k_classes"), "t_segments": ("synth", "t_segments"),
    "d_enc": ("synth", "d_enc"), "noise_sigma": ("synth", "noise_sigma"),
    "ambiguity_depth": ("synth", "ambiguity_depth"), "n_train": ("synth", "n_train"),
    "n_val": ("synth", "n_val"), "seed": ("synth", "seed"),
    "d": ("model", "d"), "n_blocks": ("model", "n_blocks"), "n_heads": ("model", "n_heads"),
    "t_max": ("model", "t_max"), "predictor_hidden": ("model", "predictor_hidden"),
    "model_seed": ("model", "seed"),
    "epochs": ("train", "epochs"), "e_star": ("train", "e_star"), "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"), "weight_decay": ("train", "weight_decay"), "grad_clip": ("train", "grad_clip"),
    "train_seed": ("train", "seed"), "eval_every": ("train", "eval_every"),
    "loss": ("loss", "mode_temporal"), "reg": ("loss", "reg_mode"), "alpha": ("loss", "alpha"),
    "label_smoothing": ("loss", "epsilon_smooth"), "proto_loss": ("loss", "proto_loss"),
}


def _update(obj, values, section):
    known = {f.name for f in fields(obj)}
    bad = set(values) - known
    if bad:
        raise UsageError(f"unknown {section} keys in config: {sorted(bad)}")
    if "betas" in values:
        values = {**values, "betas": tuple(values["betas"])}
    return replace(obj, **values)


def resolve(args) -> RunConfig:
    rc = RunConfig()
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
    sections = {s: dict(file_cfg.get(s, {})) for s in ("model", "train", "loss", "synth")}
    paths = dict(file_cfg.get("paths", {}))
    for dest, (sec, name) in _FLAG_MAP.items():
        v = getattr(args, dest, None)
        if v is not None:
            sections[sec][name] = v
    for key in ("train_file", "val_file", "out_dir", "checkpoint", "report", "data", "out"):
        v = getattr(args, key, None)
        if v is not None:
            paths[key] = v
    rc.model = _update(rc.model, sections["model"], "model")
    rc.loss = _update(rc.loss, sections["loss"], "loss")
    tr = dict(sections["train"])
    tr.setdefault("e_star", rc.train.e_star)
    rc.train = _update(rc.train, {**tr, "loss": rc.loss}, "train")
    rc.loss = rc.train.loss
    rc.synth = _update(rc.synth, sections["synth"], "synth")
    rc.paths = paths
    rc.explicit = {f"{sec}.{k}" for sec, vals in sections.items() for k in vals}
    return rc


def _need(rc, key):
    if key not in rc.paths:
        raise UsageError(f"missing required path --{key.replace('_', '-')}")
    return Path(rc.paths[key])


def _existing(rc, key):
    p = _need(rc, key)
    if not p.exists():
        raise UsageError(f"{key} not found: {p}")
    return p


# ----------------------------------------------------------------- commands


def cmd_gen(args):
    rc = resolve(args)
    out_dir = Path(rc.paths.get("out_dir", "."))
    train_path = Path(rc.paths.get("train_file", out_dir / "train.evpf"))
    val_path = Path(rc.paths.get("val_file", out_dir / "val.evpf"))
    train, val = dataio.gen_synthetic(rc.synth)
    for p in (train_path, val_path):
        p.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_feature_file(train, train_path)
    dataio.write_feature_file(val, val_path)
    s = rc.synth
    print(f"train: {len(train)} records -> {train_path}")
    print(f"val: {len(val)} records -> {val_path}")
    print(f"k_classes={s.k_classes} t_segments={s.t_segments} d_enc={s.d_enc} "
          f"noise_sigma={s.noise_sigma} ambiguity_depth={s.ambiguity_depth} seed={s.seed}")
    return 0


def cmd_train(args):
    rc = resolve(args)
    train = dataio.read_feature_file(_existing(rc, "train_file"))
    val = dataio.read_feature_file(_existing(rc, "val_file")) if "val_file" in rc.paths else None
    ckpt = _need(rc, "checkpoint")
    report = Path(rc.paths.get("report", ckpt.with_suffix(".jsonl")))
    T = max(s.T for s in train)
    model_cfg = replace(rc.model, d_enc=train.d_enc, k_classes=train.k_classes,
                        t_max=rc.model.t_max if "model.t_max" in rc.explicit else T)
    model_cfg.validate()
    rc.train.validate()
    params = init_params(model_cfg)
    params, rep = fit(params, train, val, rc.train, checkpoint_path=ckpt, report_path=report)
    if val is None:
        save_checkpoint(params, ckpt)
    last = rep.epochs[-1]
    print(f"trained {len(rep.epochs)} epochs; l_tot={last['l_tot']:.6f}"
          + (f" best_auc={rep.best_auc:.6f} (epoch {rep.best_epoch})" if rep.best_auc is not None else ""))
    print(f"checkpoint -> {ckpt}; report -> {report}")
    return 0


def _check_compat(params, ds):
    cfg = params.config
    if ds.d_enc != cfg.d_enc:
        raise UsageError(f"mismatched field d_enc: checkpoint {cfg.d_enc}, data {ds.d_enc}")
    if ds.k_classes != cfg.k_classes:
        raise UsageError(f"mismatched field k_classes: checkpoint {cfg.k_classes}, data {ds.k_classes}")
    T = max(s.T for s in ds)
    if T > cfg.t_max:
        raise UsageError(f"mismatched field t_max: checkpoint {cfg.t_max}, data has T={T}")


def _load(rc):
    try:
        return load_checkpoint(_existing(rc, "checkpoint"))
    except CheckpointError as e:
        raise UsageError(str(e)) from e


def cmd_eval(args):
    rc = resolve(args)
    if args.curve_from_csv:
        curve = metrics.read_curve_csv(args.curve_from_csv)
    else:
        params = _load(rc)
        ds = dataio.read_feature_file(_existing(rc, "data"))
        _check_compat(params, ds)
        curve = metrics.eval_curve(params, ds)
    out = rc.paths.get("out")
    if out:
        metrics.write_metrics_csv(curve, out)
        print(f"auc={metrics.auc(curve):.6f} -> {out}")
    else:
        metrics.write_metrics_csv(curve, sys.stdout)
    return 0


def _stdin_segments():
    for line in sys.stdin:
        line = line.strip()
        if line:
            yield np.array([float(v) for v in line.replace(",", " ").split()])


def cmd_stream(args):
    rc = resolve(args)
    params = _load(rc)
    cfg = params.config
    if "data" in rc.paths:
        ds = dataio.read_feature_file(_existing(rc, "data"))
        if ds.d_enc != cfg.d_enc:
            raise UsageError(f"segment width {ds.d_enc} != d_enc {cfg.d_enc}")
        if not 0 <= args.index < len(ds):
            raise UsageError(f"--index {args.index} outside [0, {len(ds)})")
        segments, total = iter(ds[args.index].features), ds[args.index].T
    else:
        segments, total = _stdin_segments(), args.total_segments or cfg.t_max
    state = IncrementalState()
    for seg in segments:
        if seg.shape != (cfg.d_enc,):
            raise UsageError(f"segment width {seg.shape[-1] if seg.ndim else 0} != d_enc {cfg.d_enc}")
        probs, state = forward_step(params, state, seg)
        k = int(np.argmax(probs))
        print(f"{state.t},{format(state.t / total, '.17g')},{k},{format(float(probs[k]), '.17g')}", flush=True)
    return 0


def cmd_export(args):
    rc = resolve(args)
    params = _load(rc)
    ds = dataio.read_feature_file(_existing(rc, "data"))
    _check_compat(params, ds)
    out = _need(rc, "out")
    rows = export_embeddings(params, ds, out)
    print(f"{len(rows)} rows -> {out}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser():
    ap = argparse.ArgumentParser(prog="earlyproto", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")

    g = sub.add_parser("gen", help="write synthetic EVPF train/val files")
    common(g)
    g.add_argument("--out-dir")
    g.add_argument("--train-file")
    g.add_argument("--val-file")
    for name, typ in [("k-classes", int), ("t-segments", int), ("d-enc", int), ("noise-sigma", float),
                      ("ambiguity-depth", int), ("n-train", int), ("n-val", int), ("seed", int)]:
        g.add_argument(f"--{name}", type=typ)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="fit a model and write checkpoint + JSONL report")
    common(t)
    t.add_argument("--train-file")
    t.add_argument("--val-file")
    t.add_argument("--checkpoint")
    t.add_argument("--report")
    for name, typ in [("d", int), ("n-blocks", int), ("n-heads", int), ("t-max", int),
                      ("predictor-hidden", int), ("model-seed", int), ("epochs", int), ("e-star", int),
                      ("batch-size", int), ("lr", float), ("weight-decay", float), ("grad-clip", float),
                      ("train-seed", int), ("eval-every", int), ("alpha", float), ("label-smoothing", float)]:
        t.add_argument(f"--{name}", type=typ)
    t.add_argument("--loss", choices=TEMPORAL_MODES)
    t.add_argument("--reg", choices=REG_MODES)
    t.add_argument("--no-proto-loss", dest="proto_loss", action="store_const", const=False)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy per observation ratio and AUC as CSV")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--out")
    e.add_argument("--curve-from-csv", help="skip the model; read rho,top1 rows and report AUC")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("stream", help="online per-segment predictions")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--data", help="EVPF file; omit to read one segment vector per stdin line")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--total-segments", type=int, help="T used for rho when reading stdin")
    s.set_defaults(func=cmd_stream)

    x = sub.add_parser("export-embeddings", help="prototype and z(T) vectors as CSV")
    common(x)
    x.add_argument("--checkpoint")
    x.add_argument("--data")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ShapeError, dataio.ParseError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2
    except (NumericError, CapacityError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
