"""Command-line entry point: ``mapctr <command> ...``.

Commands: preprocess, synth, train, pretrain, finetune, eval, bench.  Run
configs are JSON documents with the sections ``data``, ``model``, ``train``,
``pretrain``, ``finetune`` and a top-level ``seed``; see :data:`DEFAULTS`.

Exit codes: 0 on success, 1 for runtime failures, 2 for usage or config
errors.  Failures print one line ``error <code>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .backbones import BackboneConfig
from .evalbench.metrics import MetricError, report
from .evalbench.synth import SynthSpec, bayes_scores, generate_synth, planted_spec
from .featurespace import DataError, Dataset, read_csv
from .pretext import PretextConfig, PretextError
from .training import (
    CheckpointError,
    ConfigMismatch,
    TrainConfig,
    TrainingError,
    finetune,
    load_checkpoint,
    model_from_checkpoint,
    pretrain,
    save_checkpoint,
    train_scratch,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "data": {"path": None, "schema": None, "min_count": 2},
    "model": {"operator": "mlp", "members": [], "d": 16, "width": 256, "depth": 3,
              "cross_depth": None, "dropout": 0.0},
    "train": {"epochs": 10, "lr": 1e-3, "lr_schedule": "constant", "weight_decay": 0.01,
              "patience": 2, "batch_size": 1024, "eval_every": None},
    "pretrain": {"task": "rfd", "gamma": 0.3, "strategy": "field-frequency", "k": 25, "alpha": 0.5,
                 "epochs": 10, "lr": 1e-3, "weight_decay": 0.05, "batch_size": 1024},
    "finetune": {"epochs": 4, "lr": 1e-3, "lr_schedule": "cosine", "weight_decay": 0.01,
                 "patience": 2, "batch_size": 1024, "eval_every": None,
                 "update_embedding": True, "update_fi": True},
    "seed": 0,
}


class UsageError(Exception):
    """Bad flags or config; exit code 2."""

    code = "usage"


class ConfigError(UsageError):
    code = "config"


def resolve_config(doc: dict | None) -> dict:
    """Merge ``doc`` over :data:`DEFAULTS`, rejecting unknown sections and keys."""
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    out = copy.deepcopy(DEFAULTS)
    for key, value in doc.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config section {key!r}")
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError("seed must be an integer")
            out["seed"] = value
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"config section {key!r} must be an object")
        for k, v in value.items():
            if k not in DEFAULTS[key]:
                raise ConfigError(f"unknown config key {key}.{k}")
            out[key][k] = v
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return resolve_config({})
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return resolve_config(doc)


def backbone_config(cfg: dict) -> BackboneConfig:
    m = cfg["model"]
    try:
        return BackboneConfig(operator=m["operator"], members=list(m["members"]), d=m["d"],
                              mlp_width=m["width"], mlp_depth=m["depth"],
                              cross_depth=m["cross_depth"], dropout=m["dropout"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def train_config(cfg: dict, section: str) -> TrainConfig:
    s = cfg[section]
    try:
        if section == "pretrain":
            return TrainConfig(batch_size=s["batch_size"], lr=s["lr"], lr_schedule="cosine",
                               weight_decay=s["weight_decay"], max_epochs=s["epochs"],
                               seed=cfg["seed"])
        extra = {}
        if section == "finetune":
            extra = {"update_embedding": bool(s["update_embedding"]), "update_fi": bool(s["update_fi"])}
        return TrainConfig(batch_size=s["batch_size"], lr=s["lr"], lr_schedule=s["lr_schedule"],
                           weight_decay=s["weight_decay"], max_epochs=s["epochs"],
                           patience=s["patience"], seed=cfg["seed"], eval_every=s["eval_every"],
                           **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def pretext_config(cfg: dict) -> PretextConfig:
    s = cfg["pretrain"]
    try:
        return PretextConfig(task=s["task"], gamma=s["gamma"], strategy=s["strategy"], k=s["k"],
                             alpha=s["alpha"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"pretrain: {exc}") from exc


def load_dataset(path: str | None, cfg: dict | None = None) -> Dataset:
    path = path or (cfg or {}).get("data", {}).get("path")
    if not path:
        raise UsageError("no dataset given (use --data or data.path)")
    return Dataset.load(path)


def emit(doc: dict, out=None) -> None:
    (out or sys.stdout).write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _evaluations(model_ckpt, ds: Dataset) -> dict:
    model = model_from_checkpoint(model_ckpt)
    out = {}
    for split in ("val", "test"):
        x, y = ds.subset(split)
        if len(y):
            try:
                out[split] = report(model.predict(x), y, split).to_dict()
            except MetricError:
                pass
    return out


# ---------------------------------------------------------------- commands

def cmd_preprocess(args) -> dict:
    ds = read_csv(args.input, args.schema, args.min_count)
    ds.save(args.out)
    return {
        "command": "preprocess", "F": ds.fmap.num_fields, "M": ds.fmap.global_size,
        "rows": len(ds), "train": int(len(ds.rows("train"))), "val": int(len(ds.rows("val"))),
        "test": int(len(ds.rows("test"))), "fields": ds.fmap.field_names,
        "min_count": args.min_count, "out": str(args.out),
    }


def read_synth_spec(path: str) -> SynthSpec:
    """A SynthSpec document, or ``{"planted": {...}}`` for :func:`planted_spec` keyword arguments."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read synthetic spec {path}: {exc}") from exc
    try:
        if isinstance(doc, dict) and set(doc) == {"planted"}:
            return planted_spec(**doc["planted"])
        return SynthSpec.from_json(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic spec: {exc}") from exc


def cmd_synth(args) -> dict:
    spec = read_synth_spec(args.spec)
    ds, bayes = generate_synth(spec)
    ds.save(args.out)
    return {"command": "synth", "F": ds.fmap.num_fields, "M": ds.fmap.global_size, "rows": len(ds),
            "positive_rate": float(ds.y.mean()), "bayes_test_auc": bayes, "out": str(args.out)}


def cmd_train(args) -> dict:
    cfg = load_config(args.config)
    ds = load_dataset(args.data, cfg)
    bb, tcfg = backbone_config(cfg), train_config(cfg, "train")
    ckpt, history = train_scratch(ds, bb, tcfg)
    ckpt.config["run"] = cfg
    save_checkpoint(ckpt, args.out)
    return {"command": "train", "stage": ckpt.stage, "history": history,
            "metrics": _evaluations(ckpt, ds), "config": cfg, "out": str(args.out)}


def cmd_pretrain(args) -> dict:
    cfg = load_config(args.config)
    if args.task:
        cfg["pretrain"]["task"] = args.task
    ds = load_dataset(args.data, cfg)
    ckpt, history = pretrain(ds, backbone_config(cfg), pretext_config(cfg), train_config(cfg, "pretrain"))
    ckpt.config["run"] = cfg
    save_checkpoint(ckpt, args.out)
    return {"command": "pretrain", "stage": ckpt.stage, "loss_history": history, "config": cfg,
            "out": str(args.out)}


def cmd_finetune(args) -> dict:
    cfg = load_config(args.config)
    ds = load_dataset(args.data, cfg)
    source = load_checkpoint(args.from_ckpt, expect_fmap=ds.fmap)
    ckpt, history = finetune(source, ds, train_config(cfg, "finetune"), backbone_config(cfg))
    ckpt.config["run"] = cfg
    save_checkpoint(ckpt, args.out)
    return {"command": "finetune", "stage": ckpt.stage, "history": history,
            "metrics": _evaluations(ckpt, ds), "config": cfg, "from": str(args.from_ckpt),
            "out": str(args.out)}


def cmd_eval(args) -> dict:
    ds = load_dataset(args.data)
    rows = ds.rows(args.split)
    if len(rows) == 0:
        raise TrainingError(f"the {args.split} split is empty")
    y = ds.y[rows]
    if args.spec:
        preds = bayes_scores(read_synth_spec(args.spec), ds, rows)
    else:
        model = model_from_checkpoint(load_checkpoint(args.ckpt, expect_fmap=ds.fmap))
        preds = model.predict(ds.x[rows])
    return report(preds, y, args.split).to_dict()


def cmd_bench(args) -> dict:
    from .evalbench.bench import bench

    cfg = load_config(args.config)
    ds = load_dataset(args.data, cfg)
    p = cfg["pretrain"]
    task = args.task or p["task"]
    if task == "joint":
        raise ConfigError("bench supports the mfp, mfp-full and rfd tasks")
    rep = bench(task, backbone_config(cfg), ds.fmap.global_size, B=p["batch_size"], K=p["k"],
                epochs=args.epochs, warmup=args.warmup, gamma=p["gamma"], ds=ds, seed=cfg["seed"])
    return {"command": "bench", **rep.to_dict(), "config": cfg}


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mapctr", description="Self-supervised pretraining for multi-field CTR data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", help="CSV + schema -> binary dataset")
    s.add_argument("--input", required=True)
    s.add_argument("--schema", required=True)
    s.add_argument("--min-count", type=int, default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_preprocess)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    for name, fn, helptext in (("train", cmd_train, "supervised training from scratch"),
                               ("pretrain", cmd_pretrain, "self-supervised pretraining")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config")
        s.add_argument("--data")
        s.add_argument("--out", required=True)
        if name == "pretrain":
            s.add_argument("--task", choices=("mfp", "mfp-full", "rfd", "joint"))
        s.set_defaults(fn=fn)

    s = sub.add_parser("finetune", help="click training warm-started from a pretrained checkpoint")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--from", dest="from_ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("eval", help="AUC and LogLoss of a checkpoint (or the generator's own scorer)")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--spec", help="score with the true logit of this synthetic spec")
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("bench", help="pretraining epoch time and parameter count")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--task", choices=("mfp", "mfp-full", "rfd"))
    s.add_argument("--epochs", type=int, default=3)
    s.add_argument("--warmup", type=int, default=1)
    s.set_defaults(fn=cmd_bench)
    return p


def _threads() -> int:
    raw = os.environ.get("MAP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"MAP_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("MAP_THREADS must be >= 1")
    return n


def _fail(code: str, message: str, status: int) -> int:
    message = " ".join(str(message).split())
    sys.stderr.write(f"error {code}: {message}\n")
    return status


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        with threadpool_limits(limits=_threads()):
            result = args.fn(args)
    except UsageError as exc:
        return _fail(exc.code, exc, EXIT_USAGE)
    except (ConfigMismatch, PretextError) as exc:
        return _fail("config", exc, EXIT_USAGE)
    except DataError as exc:
        return _fail("data", exc, EXIT_RUNTIME)
    except CheckpointError as exc:
        return _fail("checkpoint", exc, EXIT_RUNTIME)
    except (TrainingError, MetricError) as exc:
        return _fail("runtime", exc, EXIT_RUNTIME)
    except (OSError, ValueError, FloatingPointError) as exc:
        return _fail("runtime", exc, EXIT_RUNTIME)
    emit(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
