"""Pretraining efficiency benchmark: parameter counts above the embedding layer and epoch time."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..backbones import BackboneConfig, CTRModel
from ..pretext import PretextConfig, PretrainModel
from ..training import TrainConfig, pretrain
from .synth import SynthSpec, generate_synth


@dataclass
class BenchReport:
    task: str
    backbone: str
    params_above_embedding: int
    epoch_seconds: float
    epoch_times: list[float]
    M: int
    B: int
    K: int
    F: int
    rows: int

    def to_dict(self) -> dict:
        return asdict(self)


def count_parameters(model: PretrainModel) -> int:
    """Learnable parameters excluding the embedding layer (feature embeddings and FM linear weights)."""
    skip = set(model.backbone.embedding_parameters())
    return int(sum(p.data.size for name, p in model.parameters().items() if name not in skip))


def bench_dataset(M: int, num_fields: int = 6, rows: int = 4096, seed: int = 0):
    """Synthetic data whose global feature space has (about) ``M`` features."""
    card = max(2, M // num_fields - 1)
    spec = SynthSpec(num_fields=num_fields, cardinality=card, rows=rows, seed=seed)
    ds, _ = generate_synth(spec)
    return ds


def bench(task: str, backbone: BackboneConfig, M: int, B: int = 1024, K: int = 25,
          epochs: int = 3, warmup: int = 1, gamma: float = 0.3, num_fields: int = 6,
          rows: int | None = None, ds=None, seed: int = 0) -> BenchReport:
    """Median wall time of ``epochs`` pretraining epochs after ``warmup`` discarded ones.

    The epoch time covers corruption, noise sampling, forward, backward and the
    optimizer step.  Sampler construction happens once, before the first epoch.
    """
    if ds is None:
        ds = bench_dataset(M, num_fields, rows or 2 * B, seed)
    pcfg = PretextConfig(task=task, gamma=gamma, k=K)
    tcfg = TrainConfig(batch_size=B, seed=seed, weight_decay=0.05)
    times: list[float] = []
    pretrain(ds, backbone, pcfg, tcfg, epochs=warmup + epochs, timings=times)
    probe = PretrainModel(CTRModel(ds.fmap, backbone, np.random.default_rng(0)).backbone, pcfg,
                          np.random.default_rng(1))
    name = backbone.operator if backbone.operator != "assembled" else "+".join(backbone.members)
    return BenchReport(task, name, count_parameters(probe), float(np.median(times[warmup:])),
                       times, ds.fmap.global_size, B, K, ds.fmap.num_fields, int(len(ds.rows("train"))))
