"""Pretext heads and losses: masked feature prediction and replaced feature detection."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensorcore as tc
from .backbones import Backbone, Linear
from .corruption import STRATEGIES, CorruptionPlan, Replacer, corrupt_mask, corrupt_replace
from .featurespace import FeatureMap, FrequencySampler
from .tensorcore import Tensor

TASKS = ("mfp", "mfp-full", "rfd", "joint")
MAX_SOFTMAX_FEATURES = 1_000_000

# rng stream ids within one (seed, epoch, batch)
STREAM_MASK, STREAM_REPLACE, STREAM_NOISE, STREAM_DROPOUT = 1, 2, 3, 4


class PretextError(ValueError):
    pass


@dataclass
class PretextConfig:
    task: str = "rfd"
    gamma: float = 0.3
    strategy: str = "field-frequency"
    k: int = 25
    alpha: float = 0.5
    hidden: int = 32

    def __post_init__(self):
        if self.task not in TASKS:
            raise PretextError(f"unknown pretext task {self.task!r}")
        if self.strategy not in STRATEGIES:
            raise PretextError(f"unknown replacement strategy {self.strategy!r}")
        if not 0.0 < self.gamma < 1.0:
            raise PretextError("gamma must lie in (0, 1)")
        if self.k < 1:
            raise PretextError("k must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise PretextError("alpha must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


class MfpHead:
    """Field-wise feature predictor over the global feature space.

    Field ``f`` has its own hidden layer ``hidden_f(q) = relu(q W_f + b_f)``;
    all fields share the output table ``O`` (``M x hidden``) so the logit of
    feature ``j`` is ``O_j . hidden_f(q)``.
    """

    def __init__(self, rng, q_dim: int, fmap: FeatureMap, hidden: int = 32,
                 mode: str = "nce", k: int = 25, name: str = "head.mfp"):
        if mode not in ("nce", "full"):
            raise PretextError(f"unknown MFP mode {mode!r}")
        M = fmap.global_size
        if mode == "nce" and k >= M:
            raise PretextError(f"K={k} noise features needs K < M={M}")
        if mode == "full" and M > MAX_SOFTMAX_FEATURES:
            raise PretextError(f"full softmax over M={M} exceeds the {MAX_SOFTMAX_FEATURES} cap")
        self.mode, self.k, self.hidden = mode, k, hidden
        self.fmap = fmap
        self.fields = [Linear(rng, q_dim, hidden, f"{name}.field{f}") for f in range(fmap.num_fields)]
        self.output = tc.parameter(rng.normal(0.0, 0.05, size=(M, hidden)), f"{name}.output", sparse=True)

    def parameters(self) -> dict[str, Tensor]:
        params = {p.name: p for layer in self.fields for p in layer.parameters()}
        params[self.output.name] = self.output
        return params

    def hidden_states(self, qc: Tensor, plan: CorruptionPlan):
        """Hidden vectors of every masked (instance, field) pair, grouped by field.

        Returns ``(H, targets, weights)`` where ``weights`` carries the
        ``1 / (|I_i| * N)`` normalization of each pair.
        """
        n = qc.shape[0]
        parts, targets, weights = [], [], []
        per_row = np.full(n, plan.m, dtype=np.float64)
        for f, layer in enumerate(self.fields):
            rows, cols = np.nonzero(plan.positions == f)
            if rows.size == 0:
                continue
            parts.append(tc.relu(layer(tc.gather(qc, rows, unique=True))))
            targets.append(plan.originals[rows, cols])
            weights.append(1.0 / (per_row[rows] * n))
        H = parts[0] if len(parts) == 1 else tc.concat(parts, axis=0)
        t = np.concatenate(targets)
        if np.any(t >= self.fmap.mask_index):
            raise PretextError("MFP target cannot be the mask token")
        return H, t, np.concatenate(weights)


class RfdHead:
    """Two-layer perceptron mapping ``q`` to one replaced-or-not logit per field."""

    def __init__(self, rng, q_dim: int, num_fields: int, hidden: int = 32, name: str = "head.rfd"):
        self.l1 = Linear(rng, q_dim, hidden, f"{name}.0")
        self.l2 = Linear(rng, hidden, num_fields, f"{name}.1")

    def __call__(self, qc: Tensor) -> Tensor:
        p = tc.sigmoid(self.l2(tc.relu(self.l1(qc))))
        return tc.clamp(p, tc.PRED_EPS, 1.0 - tc.PRED_EPS)

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.l1.parameters() + self.l2.parameters()}


def softmax_xent(H: Tensor, O: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """``sum_i w_i * (logsumexp_j(O_j . H_i) - O_t_i . H_i)`` over all rows of ``O``.

    Logits are processed in column blocks and recomputed during backward, so
    memory stays bounded for large ``O``.
    """
    h, o = H.data, O.data
    n, M = h.shape[0], o.shape[0]
    block = max(1024, 4_000_000 // max(n, 1))
    rmax = np.full(n, -np.inf, dtype=np.float64)
    rsum = np.zeros(n, dtype=np.float64)
    for s in range(0, M, block):
        z = h @ o[s:s + block].T
        zmax = z.max(axis=1).astype(np.float64)
        new = np.maximum(rmax, zmax)
        rsum = rsum * np.exp(rmax - new) + np.exp(z - new[:, None].astype(z.dtype)).sum(axis=1)
        rmax = new
    lse = rmax + np.log(rsum)
    z_t = np.einsum("nh,nh->n", h.astype(np.float64), o[targets].astype(np.float64))
    val = float(np.sum(weights * (lse - z_t)))

    def bw(g):
        coef = (float(g) * weights).astype(h.dtype)
        dh = np.zeros_like(h)
        do = np.zeros_like(o)
        lse_c = lse.astype(h.dtype)[:, None]
        rows = np.arange(n)
        for s in range(0, M, block):
            ob = o[s:s + block]
            p = np.exp(h @ ob.T - lse_c)
            hit = (targets >= s) & (targets < s + len(ob))
            p[rows[hit], targets[hit] - s] -= 1.0
            p *= coef[:, None]
            if H.requires_grad:
                dh += p @ ob
            if O.requires_grad:
                do[s:s + len(ob)] = p.T @ h
        tc._accum(H, dh)
        tc._accum(O, do)

    return tc._result(np.asarray(val, dtype=h.dtype), (H, O), bw)


def mfp_softmax_loss(qc: Tensor, plan: CorruptionPlan, head: MfpHead) -> Tensor:
    if plan.mode != "mask":
        raise PretextError("MFP needs a mask-mode corruption plan")
    H, t, w = head.hidden_states(qc, plan)
    return softmax_xent(H, head.output, t, w)


def nce_terms(H: Tensor, O: Tensor, targets: np.ndarray, noise: np.ndarray, weights) -> Tensor:
    """``-sum_i w_i [log s(z_t) + sum_k log(1 - s(z_k))]`` scoring only K+1 rows per pair."""
    cand = np.concatenate([targets[:, None], noise], axis=1)
    z = tc.score_rows(O, cand, H)
    sign = np.ones(cand.shape, dtype=z.data.dtype)
    sign[:, 1:] = -1.0
    ls = tc.log_sigmoid(z * sign)
    return tc.reduce_sum(ls * (-np.asarray(weights, dtype=z.data.dtype))[:, None])


def mfp_nce_loss(qc: Tensor, plan: CorruptionPlan, head: MfpHead, sampler: FrequencySampler,
                 rng: np.random.Generator) -> Tensor:
    if plan.mode != "mask":
        raise PretextError("MFP needs a mask-mode corruption plan")
    M = head.fmap.global_size
    if head.k >= M:
        raise PretextError(f"K={head.k} noise features needs K < M={M}")
    H, t, w = head.hidden_states(qc, plan)
    n = len(t)
    noise = sampler.draw(np.zeros(n * head.k, dtype=np.int64), rng,
                         exclude=np.repeat(t, head.k)).reshape(n, head.k)
    return nce_terms(H, head.output, t, noise, w)


def rfd_loss(qc: Tensor, plan: CorruptionPlan, head: RfdHead) -> Tensor:
    if plan.mode != "replace":
        raise PretextError("RFD needs a replace-mode corruption plan")
    return tc.bce_loss(head(qc), plan.labels)


class PretrainModel:
    """Backbone plus the pretext head(s) for one task."""

    def __init__(self, backbone: Backbone, config: PretextConfig, rng: np.random.Generator):
        self.backbone = backbone
        self.config = config
        fmap = backbone.fmap
        self.mfp = None
        self.rfd = None
        if config.task in ("mfp", "joint"):
            self.mfp = MfpHead(rng, backbone.q_dim, fmap, config.hidden, "nce", config.k)
            self.noise = FrequencySampler.for_global(fmap)
        elif config.task == "mfp-full":
            self.mfp = MfpHead(rng, backbone.q_dim, fmap, config.hidden, "full", config.k)
        if config.task in ("rfd", "joint"):
            self.rfd = RfdHead(rng, backbone.q_dim, fmap.num_fields, config.hidden)
            self.replacer = Replacer(fmap, config.strategy)

    def head_parameters(self) -> dict[str, Tensor]:
        out = {}
        for head in (self.mfp, self.rfd):
            if head is not None:
                out.update(head.parameters())
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {**self.backbone.parameters(), **self.head_parameters()}

    def mask_path(self, x, rngs: Callable[[int], np.random.Generator], training=True) -> Tensor:
        plan = corrupt_mask(x, self.backbone.fmap, self.config.gamma, rngs(STREAM_MASK))
        qc = self.backbone.represent(plan.corrupted, training, rngs(STREAM_DROPOUT))
        if self.mfp.mode == "full":
            return mfp_softmax_loss(qc, plan, self.mfp)
        return mfp_nce_loss(qc, plan, self.mfp, self.noise, rngs(STREAM_NOISE))

    def replace_path(self, x, rngs: Callable[[int], np.random.Generator], training=True) -> Tensor:
        plan = corrupt_replace(x, self.backbone.fmap, self.config.gamma, self.replacer,
                               rngs(STREAM_REPLACE))
        qc = self.backbone.represent(plan.corrupted, training, rngs(STREAM_DROPOUT + 10))
        return rfd_loss(qc, plan, self.rfd)

    def loss(self, x, rngs: Callable[[int], np.random.Generator], training=True) -> Tensor:
        task = self.config.task
        if task in ("mfp", "mfp-full"):
            return self.mask_path(x, rngs, training)
        if task == "rfd":
            return self.replace_path(x, rngs, training)
        return joint_loss(self, x, self.config.alpha, rngs, training)


def joint_loss(model: PretrainModel, x, alpha: float, rngs, training=True) -> Tensor:
    """alpha * MFP(NCE) + (1 - alpha) * RFD, each on its own corruption of ``x``.

    Both paths share the backbone, so gradients from the two forward passes
    accumulate into the same embedding and interaction parameters.
    """
    if not 0.0 <= alpha <= 1.0:
        raise PretextError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        return model.replace_path(x, rngs, training)
    if alpha == 1.0:
        return model.mask_path(x, rngs, training)
    mfp = model.mask_path(x, rngs, training)
    rfd = model.replace_path(x, rngs, training)
    return tc.scale(mfp, alpha) + tc.scale(rfd, 1.0 - alpha)
