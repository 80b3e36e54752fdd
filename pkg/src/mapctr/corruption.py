"""Feature corruption: masking for MFP and replacement for RFD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featurespace import FeatureMap, FrequencySampler

STRATEGIES = ("field-frequency", "field-uniform", "global-frequency", "global-uniform")


def corrupt_count(gamma: float, num_fields: int) -> int:
    """Fields corrupted per instance: ``max(1, round_half_up(gamma * F))``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"corrupt ratio must lie in (0, 1), got {gamma}")
    return max(1, int(np.floor(gamma * num_fields + 0.5)))


@dataclass
class CorruptionPlan:
    mode: str
    positions: np.ndarray  # N x m field indices, sorted per row
    originals: np.ndarray  # N x m global indices before corruption
    corrupted: np.ndarray  # N x F corrupted batch
    labels: np.ndarray | None = None  # N x F replaced-or-not, replace mode only

    @property
    def m(self) -> int:
        return self.positions.shape[1]


def batch_rng(seed: int, epoch: int, batch: int, stream: int = 0) -> np.random.Generator:
    """Random stream keyed by (seed, epoch, batch index, purpose)."""
    return np.random.default_rng([seed, epoch, batch, stream])


def _choose_fields(rng, n: int, candidates: np.ndarray, m: int) -> np.ndarray:
    """m distinct fields per row, uniformly from ``candidates``."""
    keys = rng.random((n, len(candidates)))
    pick = np.argsort(keys, axis=1, kind="stable")[:, :m]
    return np.sort(candidates[pick], axis=1)


def corrupt_mask(batch, fmap: FeatureMap, gamma: float, rng: np.random.Generator) -> CorruptionPlan:
    x = np.asarray(batch, dtype=np.int64)
    n, F = x.shape
    m = corrupt_count(gamma, F)
    pos = _choose_fields(rng, n, np.arange(F), m)
    rows = np.arange(n)[:, None]
    originals = x[rows, pos]
    xc = x.copy()
    xc[rows, pos] = fmap.mask_index
    return CorruptionPlan("mask", pos, originals, xc)


class Replacer:
    """Replacement sampler for one strategy, built once per feature map."""

    def __init__(self, fmap: FeatureMap, strategy: str = "field-frequency"):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown replacement strategy {strategy!r}")
        self.fmap = fmap
        self.strategy = strategy
        scope, law = strategy.split("-")
        uniform = law == "uniform"
        self.field_scoped = scope == "field"
        if self.field_scoped:
            self.sampler = FrequencySampler.for_fields(fmap, uniform=uniform)
        else:
            self.sampler = FrequencySampler.for_global(fmap, uniform=uniform)
        if fmap.global_size < 2:
            raise ValueError("feature map has nothing to replace with")
        eligible = np.flatnonzero(fmap.cardinalities > 1)
        self.eligible = eligible if self.field_scoped else np.arange(fmap.num_fields)
        if len(self.eligible) == 0:
            raise ValueError("every field has cardinality 1; nothing can be corrupted")

    def draw(self, fields: np.ndarray, originals: np.ndarray, rng) -> np.ndarray:
        seg = fields if self.field_scoped else np.zeros_like(fields)
        return self.sampler.draw(seg, rng, exclude=originals)


def corrupt_replace(batch, fmap: FeatureMap, gamma: float, strategy="field-frequency",
                    rng: np.random.Generator | None = None) -> CorruptionPlan:
    """Replace m fields per row with draws that always differ from the original.

    ``strategy`` may be a strategy name or a prebuilt :class:`Replacer`.
    """
    replacer = strategy if isinstance(strategy, Replacer) else Replacer(fmap, strategy)
    x = np.asarray(batch, dtype=np.int64)
    n, F = x.shape
    m = min(corrupt_count(gamma, F), len(replacer.eligible))
    pos = _choose_fields(rng, n, replacer.eligible, m)
    rows = np.arange(n)[:, None]
    originals = x[rows, pos]
    repl = replacer.draw(pos.reshape(-1), originals.reshape(-1), rng).reshape(n, m)
    xc = x.copy()
    xc[rows, pos] = repl
    labels = (xc != x).astype(np.uint8)
    return CorruptionPlan("replace", pos, originals, xc, labels)
