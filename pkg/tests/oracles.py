"""Independent reference implementations and the randomized gradient-check suite.

The scalar-loop oracles here deliberately avoid the package's vectorized code
paths so they can catch indexing and normalization mistakes.
"""

from __future__ import annotations

import math

import numpy as np

from mapctr import tensorcore as tc
from mapctr.backbones import Backbone, BackboneConfig, CTRHead, fm_second_order
from mapctr.corruption import batch_rng, corrupt_mask, corrupt_replace
from mapctr.featurespace import FeatureMap
from mapctr.pretext import (
    MfpHead,
    PretextConfig,
    PretrainModel,
    RfdHead,
    mfp_nce_loss,
    mfp_softmax_loss,
    nce_terms,
    rfd_loss,
    softmax_xent,
)

# ---------------------------------------------------------------- scalar oracles


def bce_oracle(preds, labels, eps=1e-7) -> float:
    total = 0.0
    for p, y in zip(preds, labels):
        p = min(max(float(p), eps), 1.0 - eps)
        total += -(y * math.log(p) + (1 - y) * math.log(1.0 - p))
    return total / len(preds)


def log_sigmoid_oracle(z: float) -> float:
    if z >= 0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


def softmax_xent_oracle(logits_rows, targets, weights) -> float:
    """sum_i w_i * (-log softmax(logits_i)[t_i]) with explicit loops."""
    total = 0.0
    for z, t, w in zip(logits_rows, targets, weights):
        zmax = max(z)
        lse = zmax + math.log(sum(math.exp(v - zmax) for v in z))
        total += w * (lse - z[t])
    return total


def nce_oracle(target_logits, noise_logits, weights) -> float:
    total = 0.0
    for zt, zn, w in zip(target_logits, noise_logits, weights):
        term = log_sigmoid_oracle(zt)
        for z in zn:
            term += log_sigmoid_oracle(-z)
        total += -w * term
    return total


def pairwise_auc_oracle(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else (0.5 if p == n else 0.0)
    return wins / (len(pos) * len(neg))


# ---------------------------------------------------------------- gradient suite


def _weighted_sum(out: tc.Tensor, r: np.ndarray) -> tc.Tensor:
    return tc.reduce_sum(tc.mul(out, tc.Tensor(r)))


def _param(rng, shape, lo=None, sparse=False, name="p"):
    data = rng.normal(0.0, 1.0, size=shape)
    if lo is not None:
        # keep values away from kinks and singularities
        data = np.sign(data) * (np.abs(data) + lo)
    return tc.parameter(data, name, sparse=sparse)


def _shape(rng, ndim=2, lo=1, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def case_add(rng):
    s = _shape(rng)
    a, b = _param(rng, s), _param(rng, (1, s[1]))  # broadcast over rows
    r = rng.normal(size=s)
    return lambda: _weighted_sum(tc.add(a, b), r), [a, b]


def case_sub(rng):
    s = _shape(rng)
    a, b = _param(rng, s), _param(rng, (s[1],))
    r = rng.normal(size=s)
    return lambda: _weighted_sum(tc.sub(a, b), r), [a, b]


def case_mul(rng):
    s = _shape(rng)
    a, b = _param(rng, s), _param(rng, (s[0], 1))
    r = rng.normal(size=s)
    return lambda: _weighted_sum(tc.mul(a, b), r), [a, b]


def case_scale(rng):
    s = _shape(rng)
    a = _param(rng, s)
    c = float(rng.normal())
    r = rng.normal(size=s)
    return lambda: _weighted_sum(tc.scale(a, c), r), [a]


def case_relu(rng):
    s = _shape(rng)
    a = _param(rng, s, lo=0.05)
    r = rng.normal(size=s)
    return lambda: _weighted_sum(tc.relu(a), r), [a]


def case_sigmoid(rng):
    s = _shape(rng)
    a = _param(rng, s)
    r = rng.normal(size=s)
    return lambda: _weighted_sum(tc.sigmoid(a), r), [a]


def case_log_sigmoid(rng):
    s = _shape(rng)
    a = _param(rng, s)
    r = rng.normal(size=s)
    return lambda: _weighted_sum(tc.log_sigmoid(a), r), [a]


def case_clamp(rng):
    s = _shape(rng)
    a = _param(rng, s, lo=0.05)
    r = rng.normal(size=s)
    # bounds sit halfway between sampled values' magnitudes so no value is near them
    return lambda: _weighted_sum(tc.clamp(a, -0.6, 0.6), r), [a]


def case_log(rng):
    s = _shape(rng)
    a = tc.parameter(rng.uniform(0.5, 2.0, size=s), "a")
    r = rng.normal(size=s)
    return lambda: _weighted_sum(tc.log(a), r), [a]


def case_dropout(rng):
    s = _shape(rng)
    a = _param(rng, s)
    r = rng.normal(size=s)
    seed = int(rng.integers(1 << 30))
    return lambda: _weighted_sum(tc.dropout(a, 0.3, np.random.default_rng(seed), True), r), [a]


def case_matmul(rng):
    m, k, n = _shape(rng, 3)
    a, b = _param(rng, (m, k)), _param(rng, (k, n))
    r = rng.normal(size=(m, n))
    return lambda: _weighted_sum(tc.matmul(a, b), r), [a, b]


def case_rowdot(rng):
    n, k, h = _shape(rng, 3)
    a, b = _param(rng, (n, k, h)), _param(rng, (n, h))
    r = rng.normal(size=(n, k))
    return lambda: _weighted_sum(tc.rowdot(a, b), r), [a, b]


def case_score_rows(rng):
    n, k, h = _shape(rng, 3)
    rows = int(rng.integers(2, 6))
    sparse = bool(rng.integers(2))
    table = _param(rng, (rows, h), sparse=sparse)
    hid = _param(rng, (n, h))
    idx = rng.integers(0, rows, size=(n, k))  # repeats are likely
    r = rng.normal(size=(n, k))
    return lambda: _weighted_sum(tc.score_rows(table, idx, hid), r), [table, hid]


def case_reshape(rng):
    a, b = _shape(rng, 2)
    x = _param(rng, (a, b))
    r = rng.normal(size=(b, a))
    return lambda: _weighted_sum(tc.reshape(x, (b, a)), r), [x]


def case_concat(rng):
    n = int(rng.integers(1, 5))
    parts = [_param(rng, (n, int(rng.integers(1, 4)))) for _ in range(int(rng.integers(2, 4)))]
    width = sum(p.shape[1] for p in parts)
    r = rng.normal(size=(n, width))
    return lambda: _weighted_sum(tc.concat(parts, axis=1), r), parts


def case_gather_repeated(rng):
    rows, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    sparse = bool(rng.integers(2))
    table = _param(rng, (rows, d), sparse=sparse)
    idx = rng.integers(0, rows, size=_shape(rng, 2, 2, 4))
    idx.flat[0] = idx.flat[-1]  # at least one repeated index
    r = rng.normal(size=idx.shape + (d,))
    return lambda: _weighted_sum(tc.gather(table, idx), r), [table]


def case_gather_unique(rng):
    rows, d = int(rng.integers(3, 8)), int(rng.integers(1, 4))
    table = _param(rng, (rows, d))
    idx = rng.permutation(rows)[: int(rng.integers(1, rows + 1))]
    r = rng.normal(size=(len(idx), d))
    return lambda: _weighted_sum(tc.gather(table, idx, unique=True), r), [table]


def case_reduce_sum(rng):
    s = _shape(rng, 3)
    x = _param(rng, s)
    axis = int(rng.integers(3))
    r = rng.normal(size=tuple(v for i, v in enumerate(s) if i != axis))
    return lambda: _weighted_sum(tc.reduce_sum(x, axis=axis), r), [x]


def case_reduce_mean(rng):
    s = _shape(rng, 2)
    x = _param(rng, s)
    r = rng.normal(size=(s[0], 1))
    return lambda: _weighted_sum(tc.reduce_mean(x, axis=1, keepdims=True), r), [x]


def case_bce(rng):
    n = int(rng.integers(1, 10))
    p = tc.parameter(rng.uniform(0.05, 0.95, size=n), "p")
    y = rng.integers(0, 2, size=n)
    return lambda: tc.bce_loss(p, y), [p]


def case_softmax_xent(rng):
    n, m, h = int(rng.integers(1, 5)), int(rng.integers(2, 7)), int(rng.integers(1, 4))
    H, O = _param(rng, (n, h)), _param(rng, (m, h))
    t = rng.integers(0, m, size=n)
    w = rng.uniform(0.1, 1.0, size=n)
    return lambda: softmax_xent(H, O, t, w), [H, O]


def case_nce_terms(rng):
    n, m, h, k = int(rng.integers(1, 5)), int(rng.integers(3, 8)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    H, O = _param(rng, (n, h)), _param(rng, (m, h), sparse=True)
    t = rng.integers(0, m, size=n)
    noise = rng.integers(0, m, size=(n, k))
    w = rng.uniform(0.1, 1.0, size=n)
    return lambda: nce_terms(H, O, t, noise, w), [H, O]


def case_fm_second_order(rng):
    n, f, d = _shape(rng, 3)
    e = _param(rng, (n, f, d))
    r = rng.normal(size=(n, 1))
    return lambda: _weighted_sum(fm_second_order(e), r), [e]


def case_linear_bce(rng):
    n, k = int(rng.integers(2, 8)), int(rng.integers(1, 5))
    x = tc.Tensor(rng.normal(size=(n, k)))
    w, b = _param(rng, (k, 1)), _param(rng, (1,))
    y = rng.integers(0, 2, size=n)
    return lambda: tc.bce_loss(tc.sigmoid(tc.reshape(tc.matmul(x, w) + b, (n,))), y), [w, b]


OP_CASES = {
    "add": case_add, "sub": case_sub, "mul": case_mul, "scale": case_scale, "relu": case_relu,
    "sigmoid": case_sigmoid, "log_sigmoid": case_log_sigmoid, "clamp": case_clamp, "log": case_log,
    "dropout": case_dropout, "matmul": case_matmul, "rowdot": case_rowdot,
    "score_rows": case_score_rows, "reshape": case_reshape, "concat": case_concat,
    "gather_repeated": case_gather_repeated, "gather_unique": case_gather_unique,
    "reduce_sum": case_reduce_sum, "reduce_mean": case_reduce_mean, "bce_loss": case_bce,
    "softmax_xent": case_softmax_xent, "nce_terms": case_nce_terms,
    "fm_second_order": case_fm_second_order, "linear_bce": case_linear_bce,
}


# compositions: backbone + head on a tiny random feature map


def _tiny(rng):
    F = int(rng.integers(2, 4))
    cards = rng.integers(2, 4, size=F)
    freq = rng.integers(1, 5, size=int(cards.sum()))
    fmap = FeatureMap.from_cardinalities(cards, freq)
    n = int(rng.integers(2, 5))
    x = np.stack([rng.integers(fmap.offsets[f], fmap.offsets[f] + cards[f], size=n) for f in range(F)], 1)
    return fmap, x


def _randomize(params, rng, std=0.5):
    # O(1) activations keep gradients far above finite-difference round-off;
    # weight matrices are scaled by fan-in so deep stacks neither vanish nor explode
    for p in params:
        scale = std / np.sqrt(p.shape[0]) if p.data.ndim == 2 and not p.sparse else std
        z = rng.normal(0.0, 1.0, size=p.shape)
        # bounded away from zero so no coordinate's gradient vanishes by accident
        p.data = np.sign(z) * (np.abs(z) + 0.2) * scale


def _backbone(rng, operator, members=()):
    fmap, x = _tiny(rng)
    cfg = BackboneConfig(operator=operator, members=list(members), d=2, mlp_width=3, mlp_depth=2,
                         cross_depth=2)
    bb = Backbone(fmap, cfg, rng)
    return fmap, x, bb


def _ctr_case(operator, members=()):
    def build(rng):
        fmap, x, bb = _backbone(rng, operator, members)
        head = CTRHead(rng, bb.q_dim)
        params = list(bb.parameters().values()) + list(head.parameters().values())
        _randomize(params, rng, std=0.5)
        y = rng.integers(0, 2, size=len(x))
        return lambda: tc.bce_loss(head(bb.represent(x)), y), params

    return build


def _pretext_case(task):
    def build(rng):
        fmap, x, bb = _backbone(rng, "mlp")
        k = min(2, fmap.global_size - 1)
        cfg = PretextConfig(task=task, gamma=0.4, k=k, hidden=3, alpha=0.3)
        model = PretrainModel(bb, cfg, rng)
        params = list(model.parameters().values())
        _randomize(params, rng)
        seed = int(rng.integers(1 << 30))
        return lambda: model.loss(x, lambda s: batch_rng(seed, 0, 0, s)), params

    return build


def _direct_head_case(kind):
    """Heads on a free q tensor (no backbone) to isolate their own gradients."""

    def build(rng):
        fmap, x = _tiny(rng)
        q_dim = int(rng.integers(1, 4))
        q = _param(rng, (len(x), q_dim), name="q")
        seed = int(rng.integers(1 << 30))
        if kind == "rfd":
            head = RfdHead(rng, q_dim, fmap.num_fields, hidden=3)
            params = [q] + list(head.parameters().values())
            _randomize(params, rng)
            plan = corrupt_replace(x, fmap, 0.4, "field-frequency", np.random.default_rng(seed))
            return lambda: rfd_loss(q, plan, head), params
        mode = "full" if kind == "mfp-full" else "nce"
        head = MfpHead(rng, q_dim, fmap, hidden=3, mode=mode, k=min(2, fmap.global_size - 1))
        params = [q] + list(head.parameters().values())
        _randomize(params, rng)
        plan = corrupt_mask(x, fmap, 0.4, np.random.default_rng(seed))
        if mode == "full":
            return lambda: mfp_softmax_loss(q, plan, head), params
        from mapctr.featurespace import FrequencySampler

        sampler = FrequencySampler.for_global(fmap)
        return lambda: mfp_nce_loss(q, plan, head, sampler, np.random.default_rng(seed + 1)), params

    return build


COMPOSITION_CASES = {
    "mlp+ctr": _ctr_case("mlp"),
    "crossnet+ctr": _ctr_case("crossnet"),
    "fm+ctr": _ctr_case("fm"),
    "mlp,fm+ctr": _ctr_case("assembled", ("mlp", "fm")),
    "mlp,crossnet+ctr": _ctr_case("assembled", ("mlp", "crossnet")),
    "crossnet,fm+ctr": _ctr_case("assembled", ("crossnet", "fm")),
    "rfd-head": _direct_head_case("rfd"),
    "mfp-nce-head": _direct_head_case("mfp"),
    "mfp-full-head": _direct_head_case("mfp-full"),
    "mlp+rfd": _pretext_case("rfd"),
    "mlp+mfp-nce": _pretext_case("mfp"),
    "mlp+mfp-full": _pretext_case("mfp-full"),
    "mlp+joint": _pretext_case("joint"),
}

ALL_CASES = {**OP_CASES, **COMPOSITION_CASES}


def gradcheck_case(name: str, seed: int) -> float:
    """Max relative gradient error of one randomized instance, in 64-bit."""
    rng = np.random.default_rng([seed, _stable(name)])
    with tc.precision(np.float64):
        f, params = ALL_CASES[name](rng)
        return tc.gradcheck(f, params, eps=1e-5)


def _stable(name: str) -> int:
    return sum((i + 1) * ord(c) for i, c in enumerate(name))
