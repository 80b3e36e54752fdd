"""Synthetic multi-field click data with planted pairwise interactions.

Each field's categories follow a Zipf popularity profile.  Rows additionally
carry a latent cluster: with probability ``affinity`` a field's value is drawn
from the categories assigned to the row's cluster, otherwise from the whole
field.  A rule fires when the categories of its two fields form one of its
listed feature pairs; the label is
``Bernoulli(sigmoid((base + sum of fired boosts) / temperature))``.

Local index 0 of every field is the ``<Unknown>`` slot and never generated,
so a field of cardinality ``C`` occupies ``C + 1`` global indices.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..featurespace import SPLIT_TRAIN, Dataset, FeatureMap, split_of_rows
from .metrics import auc


@dataclass
class Rule:
    fields: tuple[int, int]
    # (left, right) local category pairs (1..C) that fire the rule
    pairs: list[tuple[int, int]]
    boost: float

    def __post_init__(self):
        self.fields = tuple(int(f) for f in self.fields)
        self.pairs = [(int(a), int(b)) for a, b in self.pairs]

    def table(self, cardinality: int) -> np.ndarray:
        t = np.zeros((cardinality + 1, cardinality + 1), dtype=bool)
        if self.pairs:
            a, b = np.array(self.pairs).T
            t[a, b] = True
        return t


@dataclass
class SynthSpec:
    num_fields: int = 20
    cardinality: int = 50
    rows: int = 200_000
    rules: list[Rule] = field(default_factory=list)
    base_logit: float = 0.0
    temperature: float = 1.0
    zipf: float = 1.1
    clusters: int = 1
    affinity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.rules = [r if isinstance(r, Rule) else Rule(**r) for r in self.rules]
        if self.num_fields < 1 or self.cardinality < 1 or self.rows < 1:
            raise ValueError("fields, cardinality and rows must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.affinity <= 1.0 or self.clusters < 1:
            raise ValueError("affinity must lie in [0, 1] and clusters >= 1")
        for r in self.rules:
            a, b = r.fields
            if not (0 <= a < self.num_fields and 0 <= b < self.num_fields) or a == b:
                raise ValueError(f"rule references invalid field pair {r.fields}")
            for v in (v for pair in r.pairs for v in pair):
                if not 1 <= v <= self.cardinality:
                    raise ValueError(f"rule references category {v} outside 1..{self.cardinality}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "SynthSpec":
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def latent_structure(spec: SynthSpec):
    """Per-field Zipf popularity and cluster assignment, fixed by the seed.

    Returns ``(popularity, cluster)``, both ``F x C`` over local indices 1..C.
    """
    rng = np.random.default_rng([spec.seed, 0xC1])
    F, C = spec.num_fields, spec.cardinality
    base = 1.0 / np.arange(1, C + 1) ** spec.zipf
    pop = np.stack([rng.permutation(base) for _ in range(F)])
    pop /= pop.sum(axis=1, keepdims=True)
    cluster = np.stack([rng.permutation(np.arange(C) % spec.clusters) for _ in range(F)])
    return pop, cluster


def planted_spec(num_fields=20, cardinality=50, rows=200_000, num_rules=10, boost=0.5,
                 clusters=10, affinity=0.85, base_logit=-2.0, temperature=1.0, zipf=1.1,
                 seed=0) -> SynthSpec:
    """Spec with ``num_rules`` "match" rules on random field pairs.

    A rule fires when both fields hold categories of the same latent cluster,
    the pairwise structure that co-occurrence statistics reveal.  The defaults
    pair a weak click signal with strong co-occurrence, the regime where
    self-supervised pretraining on the same rows has something to add.
    """
    spec = SynthSpec(num_fields, cardinality, rows, [], base_logit, temperature, zipf,
                     clusters, affinity, seed)
    _, cluster = latent_structure(spec)
    rng = np.random.default_rng([seed, 0xB0])
    rules = []
    for _ in range(num_rules):
        a, b = (int(v) for v in rng.choice(num_fields, size=2, replace=False))
        same = cluster[a][:, None] == cluster[b][None, :]
        left, right = np.nonzero(same)
        pairs = list(zip((left + 1).tolist(), (right + 1).tolist()))
        rules.append(Rule((a, b), pairs, boost * rng.uniform(0.5, 1.5)))
    spec.rules = rules
    return spec


def true_logit(spec: SynthSpec, x_local: np.ndarray) -> np.ndarray:
    """Generator logit for rows given as local category indices (``N x F``)."""
    z = np.full(len(x_local), spec.base_logit, dtype=np.float64)
    for r in spec.rules:
        a, b = r.fields
        z += r.boost * r.table(spec.cardinality)[x_local[:, a], x_local[:, b]]
    return z / spec.temperature


def generate_synth(spec: SynthSpec) -> tuple[Dataset, float]:
    """Sample the dataset; returns it with the Bayes AUC of the true logit on the test split."""
    F, C, n = spec.num_fields, spec.cardinality, spec.rows
    pop, cluster = latent_structure(spec)
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    row_cluster = rng.integers(spec.clusters, size=n)
    use_cluster = rng.random((n, F)) < spec.affinity
    x_local = np.empty((n, F), dtype=np.int64)
    for f in range(F):
        cdf = np.cumsum(pop[f])
        x_local[:, f] = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
        for c in range(spec.clusters):
            sel = np.flatnonzero(use_cluster[:, f] & (row_cluster == c))
            members = np.flatnonzero(cluster[f] == c)
            if sel.size == 0 or members.size == 0:
                continue
            ccdf = np.cumsum(pop[f, members])
            pick = np.searchsorted(ccdf, rng.random(sel.size) * ccdf[-1], side="right")
            x_local[sel, f] = members[np.minimum(pick, members.size - 1)]
    x_local = np.minimum(x_local, C - 1) + 1
    logit = true_logit(spec, x_local)
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.uint8)

    split = split_of_rows(n)
    cards = np.full(F, C + 1, dtype=np.int64)
    offsets = np.arange(F, dtype=np.int64) * (C + 1)
    x = x_local + offsets[None, :]
    freq = np.bincount(x[split == SPLIT_TRAIN].ravel(), minlength=F * (C + 1))
    fmap = FeatureMap(offsets, cards, freq, field_names=[f"field{f}" for f in range(F)])
    ds = Dataset(fmap, x, y, split)
    test = split == 2
    try:
        bayes = auc(logit[test], y[test])
    except ValueError:
        bayes = float("nan")
    return ds, bayes


def bayes_scores(spec: SynthSpec, ds: Dataset, rows: np.ndarray) -> np.ndarray:
    """Click probabilities from the generator's own logit for global-index rows."""
    local = ds.x[rows].astype(np.int64) - ds.fmap.offsets[None, :]
    return 1.0 / (1.0 + np.exp(-true_logit(spec, local)))
