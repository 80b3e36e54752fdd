"""Embedding layer, feature-interaction operators and the CTR prediction head.

A backbone maps an ``N x F`` index batch to a compact representation ``q``
(``N x h``).  Pretext heads and the click head both consume ``q``, so any
operator here can be pretrained.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .featurespace import FeatureMap
from .tensorcore import Tensor

OPERATORS = ("mlp", "crossnet", "fm")


@dataclass
class BackboneConfig:
    operator: str = "mlp"
    # members of an assembled model, e.g. ["mlp", "crossnet"]; empty for single operators
    members: list[str] = field(default_factory=list)
    d: int = 16
    mlp_width: int = 256
    mlp_depth: int = 3
    cross_depth: int | None = None
    dropout: float = 0.0

    def __post_init__(self):
        self.members = list(self.members)
        if self.operator == "assembled":
            if len(self.members) < 2:
                raise ValueError("an assembled backbone needs at least two members")
            bad = [m for m in self.members if m not in OPERATORS]
        else:
            bad = [] if self.operator in OPERATORS else [self.operator]
        if bad:
            raise ValueError(f"unknown interaction operator(s) {bad}")
        if self.d < 1 or self.mlp_width < 1 or self.mlp_depth < 0:
            raise ValueError("embedding size, width and depth must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def member_list(self) -> list[str]:
        return list(self.members) if self.operator == "assembled" else [self.operator]

    @property
    def effective_cross_depth(self) -> int:
        # assembled with an MLP: the cross network gets as many layers as the MLP
        if self.cross_depth is not None:
            return self.cross_depth
        return self.mlp_depth

    def to_dict(self) -> dict:
        return asdict(self)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    def __init__(self, rng, fan_in: int, fan_out: int, name: str, zero: bool = False):
        w = np.zeros((fan_in, fan_out)) if zero else glorot(rng, fan_in, fan_out)
        self.weight = tc.parameter(w, f"{name}.weight")
        self.bias = tc.parameter(np.zeros(fan_out), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return tc.matmul(x, self.weight) + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class EmbeddingTable:
    """``(M + 1) x d`` table; the last row is the shared mask token."""

    def __init__(self, rng, num_rows: int, d: int, name: str = "embedding.table", std: float = 0.01):
        self.weight = tc.parameter(rng.normal(0.0, std, size=(num_rows, d)), name, sparse=True)

    def __call__(self, indices) -> Tensor:
        return tc.gather(self.weight, indices)


class MLP:
    def __init__(self, rng, fan_in: int, width: int, depth: int, dropout: float, name: str):
        self.layers = []
        dim = fan_in
        for i in range(depth):
            self.layers.append(Linear(rng, dim, width, f"{name}.{i}"))
            dim = width
        self.out_dim = dim
        self.dropout = dropout

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        for layer in self.layers:
            x = tc.dropout(tc.relu(layer(x)), self.dropout, rng, training)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class CrossNet:
    """x_{l+1} = x_0 * (x_l W_l + b_l) + x_l with full ``D x D`` weights."""

    def __init__(self, rng, dim: int, depth: int, name: str):
        self.layers = [Linear(rng, dim, dim, f"{name}.{i}") for i in range(depth)]
        self.out_dim = dim

    def __call__(self, x0: Tensor, training: bool = False, rng=None) -> Tensor:
        x = x0
        for layer in self.layers:
            x = x0 * layer(x) + x
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


def fm_second_order(emb: Tensor) -> Tensor:
    """0.5 * sum_dim[(sum_f v_f)^2 - sum_f v_f^2] per instance, shape ``N x 1``."""
    s = tc.reduce_sum(emb, axis=1)
    sq = tc.reduce_sum(emb * emb, axis=1)
    return tc.scale(tc.reduce_sum(s * s - sq, axis=1, keepdims=True), 0.5)


class FM:
    """Factorization machine emitting its scalar (first + second order) as a 1-dim vector."""

    def __init__(self, rng, num_rows: int, name: str):
        self.linear = tc.parameter(np.zeros((num_rows, 1)), f"{name}.linear", sparse=True)
        self.out_dim = 1

    def __call__(self, emb: Tensor, indices) -> Tensor:
        first = tc.reduce_sum(tc.gather(self.linear, indices), axis=1)
        return fm_second_order(emb) + first


class Backbone:
    """Embedding layer plus feature-interaction layer."""

    def __init__(self, fmap: FeatureMap, config: BackboneConfig, rng: np.random.Generator):
        self.fmap = fmap
        self.config = config
        F, d = fmap.num_fields, config.d
        rows = fmap.global_size + 1
        self.embedding = EmbeddingTable(rng, rows, d)
        self.members = []
        for i, op in enumerate(config.member_list):
            name = f"fi.{i}.{op}"
            if op == "mlp":
                mod = MLP(rng, F * d, config.mlp_width, config.mlp_depth, config.dropout, name)
            elif op == "crossnet":
                mod = CrossNet(rng, F * d, config.effective_cross_depth, name)
            else:
                mod = FM(rng, rows, name)
            self.members.append((op, mod))

    @property
    def q_dim(self) -> int:
        return sum(mod.out_dim for _, mod in self.members)

    def embed(self, x) -> Tensor:
        return self.embedding(x)

    def represent(self, x, training: bool = False, rng=None) -> Tensor:
        x = np.asarray(x, dtype=np.int64)
        N, F = x.shape
        if F != self.fmap.num_fields:
            raise tc.ShapeError(f"batch has {F} fields, feature map has {self.fmap.num_fields}")
        emb = self.embed(x)
        flat = tc.reshape(emb, (N, F * self.config.d))
        outs = []
        for op, mod in self.members:
            if op == "fm":
                outs.append(mod(emb, x))
            else:
                outs.append(mod(flat, training=training, rng=rng))
        return outs[0] if len(outs) == 1 else tc.concat(outs, axis=1)

    def embedding_parameters(self) -> dict[str, Tensor]:
        params = {self.embedding.weight.name: self.embedding.weight}
        for op, mod in self.members:
            if op == "fm":
                params[mod.linear.name] = mod.linear
        return params

    def interaction_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for op, mod in self.members if op != "fm" for p in mod.parameters()}

    def parameters(self) -> dict[str, Tensor]:
        return {**self.embedding_parameters(), **self.interaction_parameters()}


class CTRHead:
    """Single linear layer plus sigmoid on top of ``q``."""

    def __init__(self, rng, q_dim: int, name: str = "head.ctr"):
        self.linear = Linear(rng, q_dim, 1, name)

    def __call__(self, q: Tensor) -> Tensor:
        return predict_ctr(q, self.linear)

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.linear.parameters()}


def predict_ctr(q: Tensor, head: Linear) -> Tensor:
    if q.shape[1] != head.weight.shape[0]:
        raise tc.ShapeError(f"head expects q of width {head.weight.shape[0]}, got {q.shape}")
    logit = tc.reshape(head(q), (q.shape[0],))
    return tc.clamp(tc.sigmoid(logit), tc.PRED_EPS, 1.0 - tc.PRED_EPS)


class CTRModel:
    """Backbone with the click head; the unit trained from scratch or finetuned."""

    def __init__(self, fmap: FeatureMap, config: BackboneConfig, rng: np.random.Generator):
        self.backbone = Backbone(fmap, config, rng)
        self.head = CTRHead(rng, self.backbone.q_dim)

    def __call__(self, x, training: bool = False, rng=None) -> Tensor:
        return self.head(self.backbone.represent(x, training, rng))

    def parameters(self) -> dict[str, Tensor]:
        return {**self.backbone.parameters(), **self.head.parameters()}

    def predict(self, x, batch_size: int = 8192) -> np.ndarray:
        out = []
        with tc.no_grad():
            for s in range(0, len(x), batch_size):
                out.append(self(x[s:s + batch_size]).data.astype(np.float64))
        return np.concatenate(out) if out else np.zeros(0)
