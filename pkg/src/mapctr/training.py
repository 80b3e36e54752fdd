"""Scratch, pretraining and finetuning loops plus checkpoint persistence."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .backbones import BackboneConfig, CTRModel
from .corruption import batch_rng
from .evalbench.metrics import auc, logloss
from .featurespace import Dataset, FeatureMap
from .pretext import PretextConfig, PretrainModel

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MAPCKPT1"
CKPT_VERSION = 1
STAGES = ("pretrained", "finetuned", "scratch")
STREAM_SHUFFLE, STREAM_CTR_DROPOUT = 7, 8


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 1024
    lr: float = 1e-3
    lr_schedule: str = "constant"
    weight_decay: float = 0.01
    max_epochs: int = 10
    patience: int = 2
    seed: int = 0
    update_embedding: bool = True
    update_fi: bool = True
    # validate every n iterations instead of once per epoch
    eval_every: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass(eq=False)
class Checkpoint:
    stage: str
    fmap: FeatureMap
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    @property
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(**self.config["backbone"])


def snapshot(params: dict[str, tc.Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.astype(np.float32, copy=True) for k, p in params.items()}


def restore(params: dict[str, tc.Tensor], tensors: dict[str, np.ndarray], strict=True) -> None:
    for name, p in params.items():
        if name not in tensors:
            if strict:
                raise CheckpointError(f"checkpoint lacks tensor {name!r}")
            continue
        arr = tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)


# ---------------------------------------------------------------- persistence

def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    directory, payload, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    body = b"".join(payload)
    header = {
        "version": ckpt.version,
        "stage": ckpt.stage,
        "config": ckpt.config,
        "fmap_hash": ckpt.fmap.digest(),
        "fmap": ckpt.fmap.to_json(),
        "tensors": directory,
        "payload_sha256": hashlib.sha256(body).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<Q", len(head)) + head + body


def checkpoint_from_bytes(blob: bytes, expect_fmap: FeatureMap | None = None) -> Checkpoint:
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError("not a MAPCKPT1 checkpoint")
    try:
        (hlen,) = struct.unpack_from("<Q", blob, 8)
        if 16 + hlen > len(blob):
            raise CheckpointError("checkpoint header is truncated")
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    body = blob[16 + hlen:]
    total = sum(t["nbytes"] for t in header["tensors"])
    if len(body) != total:
        raise CheckpointError(f"checkpoint payload has {len(body)} bytes, expected {total}")
    if hashlib.sha256(body).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("checkpoint payload checksum mismatch")
    fmap = FeatureMap.from_json(header["fmap"])
    if fmap.digest() != header["fmap_hash"]:
        raise CheckpointError("checkpoint feature map does not match its recorded hash")
    if expect_fmap is not None and expect_fmap.digest() != header["fmap_hash"]:
        raise CheckpointError("checkpoint was built for a different feature map")
    tensors = {}
    for t in header["tensors"]:
        arr = np.frombuffer(body, "<f4", t["nbytes"] // 4, t["offset"])
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    if header["stage"] not in STAGES:
        raise CheckpointError(f"unknown checkpoint stage {header['stage']!r}")
    return Checkpoint(header["stage"], fmap, tensors, header["config"], header["version"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path, expect_fmap: FeatureMap | None = None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(blob, expect_fmap)


# ---------------------------------------------------------------- loops

class EarlyStopper:
    """Tracks the best validation AUC; signals a stop after ``patience`` non-improving evaluations."""

    def __init__(self, patience: int = 2):
        self.patience = patience
        self.best = -np.inf
        self.best_at = -1
        self.bad = 0
        self.count = 0

    def update(self, value: float) -> bool:
        self.count += 1
        if value > self.best:
            self.best, self.best_at, self.bad = value, self.count, 0
        else:
            self.bad += 1
        return self.bad >= self.patience


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _require(rows: np.ndarray, name: str) -> None:
    if len(rows) == 0:
        raise TrainingError(f"the {name} split is empty")


def evaluate(model: CTRModel, ds: Dataset, split: str) -> dict:
    x, y = ds.subset(split)
    _require(y, split)
    p = model.predict(x)
    return {"auc": auc(p, y), "logloss": logloss(p, y), "n": int(len(y)), "split": split}


def _fit_ctr(model: CTRModel, ds: Dataset, cfg: TrainConfig, trainable: dict[str, tc.Tensor]):
    """Click training with per-epoch (or per-iteration) validation and best-AUC selection."""
    train_rows, val_rows = ds.rows("train"), ds.rows("val")
    _require(train_rows, "train")
    _require(val_rows, "val")
    x_train, y_train = ds.x[train_rows], ds.y[train_rows]
    steps_per_epoch = -(-len(train_rows) // cfg.batch_size)
    total = max(1, steps_per_epoch * cfg.max_epochs)
    opt = tc.Adam(trainable, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay, cfg.lr_schedule, total)
    all_params = model.parameters()
    stopper = EarlyStopper(cfg.patience)
    best = snapshot(all_params)
    history = []
    step = 0
    stop = False

    def validate(epoch, train_loss):
        nonlocal best
        metrics = evaluate(model, ds, "val")
        history.append({"epoch": epoch, "step": step, "train_loss": train_loss,
                        "val_auc": metrics["auc"], "val_logloss": metrics["logloss"]})
        improved = metrics["auc"] > stopper.best
        halt = stopper.update(metrics["auc"])
        if improved:
            best = snapshot(all_params)
        log.info("epoch %d step %d loss %.5f val_auc %.5f", epoch, step, train_loss, metrics["auc"])
        return halt

    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        order_rng = batch_rng(cfg.seed, epoch, 0, STREAM_SHUFFLE)
        for b, idx in enumerate(batches(len(train_rows), cfg.batch_size, order_rng)):
            drop_rng = batch_rng(cfg.seed, epoch, b, STREAM_CTR_DROPOUT)
            pred = model(x_train[idx], training=True, rng=drop_rng)
            loss = tc.bce_loss(pred, y_train[idx])
            tc.backward(loss)
            opt.step()
            step += 1
            losses.append(float(loss.data))
            if cfg.eval_every and step % cfg.eval_every == 0:
                if validate(epoch, float(np.mean(losses))):
                    stop = True
                    break
        if stop:
            break
        if not cfg.eval_every and validate(epoch, float(np.mean(losses)) if losses else float("nan")):
            break
    restore(all_params, best)
    return history


def _set_trainable(params: dict[str, tc.Tensor], flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag


def train_scratch(ds: Dataset, backbone: BackboneConfig, cfg: TrainConfig):
    """Supervised training from random initialization; returns ``(checkpoint, history)``."""
    model = CTRModel(ds.fmap, backbone, np.random.default_rng([cfg.seed, 1]))
    history = _fit_ctr(model, ds, cfg, model.parameters())
    ckpt = Checkpoint("scratch", ds.fmap, snapshot(model.parameters()),
                      {"backbone": backbone.to_dict(), "train": cfg.to_dict()})
    return ckpt, history


def pretrain(ds: Dataset, backbone: BackboneConfig, pretext: PretextConfig, cfg: TrainConfig,
             epochs: int | None = None, timings: list | None = None):
    """Run the pretext task for a fixed number of epochs with cosine lr decay.

    Returns ``(checkpoint, loss_history)`` where the history holds the mean
    pretext loss of each epoch.  ``timings``, when given, receives the wall
    time of every epoch.
    """
    epochs = cfg.max_epochs if epochs is None else epochs
    rng = np.random.default_rng([cfg.seed, 1])
    model = PretrainModel(
        CTRModel(ds.fmap, backbone, rng).backbone, pretext, np.random.default_rng([cfg.seed, 2])
    )
    rows = ds.rows("train")
    _require(rows, "train")
    x = ds.x[rows]
    steps = -(-len(rows) // cfg.batch_size)
    opt = tc.Adam(model.parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay,
                  "cosine", max(1, steps * epochs))
    history = []
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        losses = []
        order_rng = batch_rng(cfg.seed, epoch, 0, STREAM_SHUFFLE)
        for b, idx in enumerate(batches(len(rows), cfg.batch_size, order_rng)):
            loss = model.loss(x[idx], lambda s, b=b: batch_rng(cfg.seed, epoch, b, s))
            tc.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        if timings is not None:
            timings.append(time.perf_counter() - start)
        history.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.5f", epoch, history[-1])
    config = {"backbone": backbone.to_dict(), "pretext": pretext.to_dict(), "train": cfg.to_dict(),
              "pretrain_epochs": epochs}
    return Checkpoint("pretrained", ds.fmap, snapshot(model.parameters()), config), history


def _check_backbone(ckpt: Checkpoint, backbone: BackboneConfig | None) -> BackboneConfig:
    stored = ckpt.config.get("backbone")
    if stored is None:
        raise ConfigMismatch("checkpoint carries no backbone config")
    if backbone is not None:
        current = backbone.to_dict()
        for key in sorted(set(stored) | set(current)):
            if stored.get(key) != current.get(key):
                raise ConfigMismatch(
                    f"backbone field {key!r} differs: checkpoint {stored.get(key)!r}, config {current.get(key)!r}"
                )
    return BackboneConfig(**stored)


def finetune(ckpt: Checkpoint, ds: Dataset, cfg: TrainConfig, backbone: BackboneConfig | None = None):
    """Warm-start embedding and interaction layers from ``ckpt``; the click head starts fresh."""
    if ckpt.fmap.digest() != ds.fmap.digest():
        raise CheckpointError("checkpoint was built for a different feature map")
    bcfg = _check_backbone(ckpt, backbone)
    model = CTRModel(ds.fmap, bcfg, np.random.default_rng([cfg.seed, 1]))
    restore(model.backbone.parameters(), ckpt.tensors)
    emb = model.backbone.embedding_parameters()
    fi = model.backbone.interaction_parameters()
    _set_trainable(emb, cfg.update_embedding)
    _set_trainable(fi, cfg.update_fi)
    trainable = dict(model.head.parameters())
    if cfg.update_embedding:
        trainable.update(emb)
    if cfg.update_fi:
        trainable.update(fi)
    history = _fit_ctr(model, ds, cfg, trainable)
    config = {"backbone": bcfg.to_dict(), "train": cfg.to_dict(), "pretrained_from": ckpt.config}
    return Checkpoint("finetuned", ds.fmap, snapshot(model.parameters()), config), history


def model_from_checkpoint(ckpt: Checkpoint) -> CTRModel:
    if ckpt.stage == "pretrained":
        raise CheckpointError("a pretrained checkpoint has no click head; finetune it first")
    model = CTRModel(ckpt.fmap, ckpt.backbone_config, np.random.default_rng(0))
    restore(model.parameters(), ckpt.tensors)
    return model
