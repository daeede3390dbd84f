"""Self-verification: finite-difference gradient checks, equivalence against
the naive-loop oracles, and metric cross-checks.

Everything runs in float64.  Gradient-check inputs are resampled until they
sit away from non-smooth points (ReLU kinks, top-k ties, hinge boundaries);
the margin threshold is far above the finite-difference step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import VerificationError
from .head import (
    AttributeMatrix,
    ModelConfig,
    biam_backward,
    biam_forward_cached,
    classify_backward,
    classify_regions_cached,
    init_params,
    zero_grads,
)
from .metrics import f1_at_k, mean_average_precision
from .naive import (
    naive_biam_forward,
    naive_classify,
    naive_f1_at_k,
    naive_map,
)
from .tensor import (
    BatchNormState,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    grad_check,
    matmul,
    pointwise,
    relu,
    sigmoid,
    softmax_rows,
    topk_mean_pool,
)
from .train import LabelSet, ranking_loss

TINY_CONFIG = ModelConfig(h=3, w=3, d_r=8, d_g=16, d_a=4, heads=2, topk=3, seed=0)
TINY_CLASSES = 5
SMOOTH_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.value < self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: max err {self.value:.3e} (< {self.threshold:.0e})"


# ---------------------------------------------------------------------------
# per-op gradient checks
# ---------------------------------------------------------------------------

def _weighted(rule, out, weight):
    """Scalar objective sum(out * weight) and its input gradients."""
    return float((out * weight).sum()), rule(weight)


def check_matmul(rng) -> float:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    w = rng.normal(size=(3, 5))

    def fn(a_, b_):
        out, rule = matmul(a_, b_)
        return _weighted(rule, out, w)

    return grad_check(fn, [a, b])


def check_conv2d(rng, k: int) -> float:
    x = rng.normal(size=(4, 5, 3))
    kernel = rng.normal(size=(k, k, 3, 2))
    bias = rng.normal(size=2)
    w = rng.normal(size=(4, 5, 2))

    def fn(x_, k_, b_):
        out, rule = conv2d(x_, k_, b_)
        return _weighted(rule, out, w)

    return grad_check(fn, [x, kernel, bias])


def check_softmax(rng) -> float:
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(4, 6))

    def fn(x_):
        out, rule = softmax_rows(x_)
        return _weighted(rule, out, w)

    return grad_check(fn, [x])


def check_relu(rng) -> float:
    x = rng.normal(size=(5, 5))
    x[np.abs(x) < 0.1] += 0.2  # keep clear of the kink
    w = rng.normal(size=(5, 5))

    def fn(x_):
        out, rule = relu(x_)
        return _weighted(rule, out, w)

    return grad_check(fn, [x])


def check_sigmoid(rng) -> float:
    x = rng.normal(size=(5, 5))
    w = rng.normal(size=(5, 5))

    def fn(x_):
        out, rule = sigmoid(x_)
        return _weighted(rule, out, w)

    return grad_check(fn, [x])


def check_channel_mul(rng) -> float:
    a = rng.normal(size=(3, 3, 4))
    b = rng.normal(size=4)
    w = rng.normal(size=(3, 3, 4))

    def fn(a_, b_):
        out, rule = pointwise("mul", a_, b_)
        return _weighted(rule, out, w)

    return grad_check(fn, [a, b])


def check_batchnorm(rng, mode: str) -> float:
    x = rng.normal(size=(2, 3, 3, 4))
    gamma = rng.uniform(0.5, 1.5, size=4)
    beta = rng.normal(size=4)
    w = rng.normal(size=(2, 3, 3, 4))
    running_mean = rng.normal(scale=0.2, size=4)
    running_var = rng.uniform(0.5, 1.5, size=4)

    def fn(x_, g_, b_):
        state = BatchNormState(g_, b_, running_mean.copy(), running_var.copy())
        out, rule = batchnorm2d(x_, state, mode, update_running=False)
        return _weighted(rule, out, w)

    return grad_check(fn, [x, gamma, beta])


def check_gap(rng) -> float:
    x = rng.normal(size=(4, 3, 5))
    w = rng.normal(size=5)

    def fn(x_):
        out, rule = global_avg_pool(x_)
        return _weighted(rule, out, w)

    return grad_check(fn, [x])


def check_topk(rng) -> float:
    while True:
        x = rng.normal(size=(4, 4))
        gaps = np.diff(np.sort(x.ravel()))
        if gaps.min() > SMOOTH_MARGIN:
            break

    def fn(x_):
        val, rule = topk_mean_pool(x_, 5)
        return float(val), rule(1.0)

    return grad_check(fn, [x])


def check_ranking_loss(rng) -> float:
    labels = LabelSet.of({0, 2}, 6)
    while True:
        s = rng.normal(scale=2.0, size=6)
        margins = [
            abs(s[n] - s[p] + 1.0)
            for p in labels.positives
            for n in range(6)
            if n not in labels.positives
        ]
        if min(margins) > SMOOTH_MARGIN:
            break

    def fn(s_):
        loss, ds = ranking_loss(s_, labels, "mean-pairs")
        return loss, (ds,)

    return grad_check(fn, [s])


# ---------------------------------------------------------------------------
# end-to-end gradient check
# ---------------------------------------------------------------------------

def _smoothness_margin(cache, maps, k: int, labels: LabelSet) -> float:
    """Distance of the forward pass from every non-smooth point."""
    margin = np.inf
    for pre in (
        cache.fronts_in[0][1].saved[0],
        cache.rcbs[0].r_cr_relu.saved[0],
        cache.scb_fronts[0].r_g_relu.saved[0],
    ):
        margin = min(margin, float(np.abs(pre).min()))
    n_classes = maps.maps.shape[2]
    size = maps.maps.shape[0] * maps.maps.shape[1]
    if k < size:
        for c in range(n_classes):
            vals = np.sort(maps.maps[:, :, c].ravel())[::-1]
            margin = min(margin, float(vals[k - 1] - vals[k]))
    s = maps.scores
    for p in labels.positives:
        for n in range(n_classes):
            if n not in labels.positives:
                margin = min(margin, abs(float(s[n] - s[p] + 1.0)))
    return margin


def sample_smooth_case(
    cfg: ModelConfig = TINY_CONFIG,
    n_classes: int = TINY_CLASSES,
    seed: int = 0,
    max_tries: int = 200,
):
    """Random params/inputs/labels whose objective is locally smooth."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        params = init_params(cfg, rng, dtype=np.float64)
        x_r = rng.normal(size=(cfg.h, cfg.w, cfg.d_r))
        x_g = rng.normal(size=cfg.d_g)
        rows = rng.normal(size=(n_classes, cfg.d_a))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        attrs = AttributeMatrix(
            [f"c{idx}" for idx in range(n_classes)], rows
        )
        n_pos = int(rng.integers(1, n_classes))
        labels = LabelSet.of(rng.choice(n_classes, size=n_pos, replace=False), n_classes)
        e_f, cache = biam_forward_cached(x_r, x_g, params, "train", update_running=False)
        maps, _ = classify_regions_cached(e_f, params.w_a, attrs, cfg.topk)
        if _smoothness_margin(cache, maps, cfg.topk, labels) > SMOOTH_MARGIN:
            return params, x_r, x_g, attrs, labels
    raise VerificationError("could not sample a smooth gradient-check case")


def check_end_to_end(cfg: ModelConfig = TINY_CONFIG, seed: int = 0, eps: float = 1e-5) -> float:
    """Finite-difference check of d(sum of scores + ranking loss)/d(everything)."""
    params, x_r, x_g, attrs, labels = sample_smooth_case(cfg, seed=seed)
    names = [n for n, _ in params.named_parameters()]

    def fn(*arrays):
        p = params.copy()
        for name, arr in zip(names, arrays[:-2]):
            p.set_tensor(name, arr)
        xr, xg = arrays[-2], arrays[-1]
        e_f, cache = biam_forward_cached(xr, xg, p, "train", update_running=False)
        maps, ccache = classify_regions_cached(
            e_f, p.w_a, attrs, cfg.topk, cfg.topk_aggregate
        )
        loss, ds_rank = ranking_loss(maps.scores, labels, "mean-pairs")
        value = float(maps.scores.sum()) + loss
        ds = np.ones_like(maps.scores) + ds_rank
        de_f, dw_a = classify_backward(ccache, ds)
        grads = zero_grads(p)
        grads["w_a"] += dw_a
        dx_r, dx_g = biam_backward(cache, de_f, p, grads)
        return value, tuple(grads[n] for n in names) + (dx_r, dx_g)

    inputs = [arr.copy() for _, arr in params.named_parameters()] + [x_r, x_g]
    return grad_check(fn, inputs, eps=eps)


# ---------------------------------------------------------------------------
# oracle equivalence
# ---------------------------------------------------------------------------

def _randomized_params(cfg: ModelConfig, rng):
    """float64 params with non-trivial batch-norm state."""
    params = init_params(cfg, rng, dtype=np.float64)
    for bn in (params.bn_in, params.bn_g):
        bn.gamma = rng.uniform(0.5, 1.5, size=cfg.d_r)
        bn.beta = rng.normal(scale=0.1, size=cfg.d_r)
        bn.running_mean = rng.normal(scale=0.1, size=cfg.d_r)
        bn.running_var = rng.uniform(0.5, 1.5, size=cfg.d_r)
    return params


def oracle_equivalence_error(
    cfg: ModelConfig = TINY_CONFIG, n_classes: int = TINY_CLASSES, seeds: int = 10
) -> float:
    """Max elementwise |fast - naive| over forward and classification."""
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        params = _randomized_params(cfg, rng)
        x_r = rng.normal(size=(cfg.h, cfg.w, cfg.d_r))
        x_g = rng.normal(size=cfg.d_g)
        rows = rng.normal(size=(n_classes, cfg.d_a))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        attrs = AttributeMatrix([f"c{idx}" for idx in range(n_classes)], rows)
        for mode in ("eval", "train"):
            e_f, _ = biam_forward_cached(
                x_r, x_g, params, mode, update_running=False
            )
            _, _, _, e_f_naive = naive_biam_forward(x_r, x_g, params, mode)
            worst = max(worst, float(np.abs(e_f - e_f_naive).max()))
            maps, _ = classify_regions_cached(
                e_f, params.w_a, attrs, cfg.topk, cfg.topk_aggregate
            )
            m_naive, s_naive = naive_classify(
                e_f_naive, params.w_a, attrs.rows, cfg.topk, cfg.topk_aggregate
            )
            worst = max(worst, float(np.abs(maps.maps - m_naive).max()))
            worst = max(worst, float(np.abs(maps.scores - s_naive).max()))
    return worst


# ---------------------------------------------------------------------------
# metric oracles
# ---------------------------------------------------------------------------

def metric_oracle_error(trials: int = 200, seed: int = 0) -> float:
    """Max |fast - naive| for mAP and F1@K over random small instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 7))
        c = int(rng.integers(1, 4))
        scores = rng.normal(size=(n, c))
        labels = [
            LabelSet.of(np.flatnonzero(rng.random(c) < 0.5), c) for _ in range(n)
        ]
        sets = [set(ls.positives) for ls in labels]
        if any(len(s) for s in sets):
            per_class, map_value = mean_average_precision(scores, labels)
            naive_per, naive_mean = naive_map(scores, sets)
            assert set(per_class) == set(naive_per)
            for cls, ap in per_class.items():
                worst = max(worst, abs(ap - naive_per[cls]))
            worst = max(worst, abs(map_value - naive_mean))
        k = int(rng.integers(1, c + 1))
        fast = f1_at_k(scores, labels, k)
        ref = naive_f1_at_k(scores, sets, k)
        worst = max(worst, max(abs(a - b) for a, b in zip(fast, ref)))
    return worst


# ---------------------------------------------------------------------------
# suite entry point
# ---------------------------------------------------------------------------

def run_all(fast: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(0)
    results = [
        CheckResult("grad matmul", check_matmul(rng), 1e-9),
        CheckResult("grad conv2d k=1", check_conv2d(rng, 1), 1e-7),
        CheckResult("grad conv2d k=3", check_conv2d(rng, 3), 1e-7),
        CheckResult("grad softmax_rows", check_softmax(rng), 1e-7),
        CheckResult("grad relu", check_relu(rng), 1e-7),
        CheckResult("grad sigmoid", check_sigmoid(rng), 1e-7),
        CheckResult("grad channel mul", check_channel_mul(rng), 1e-9),
        CheckResult("grad batchnorm train", check_batchnorm(rng, "train"), 1e-6),
        CheckResult("grad batchnorm eval", check_batchnorm(rng, "eval"), 1e-7),
        CheckResult("grad global_avg_pool", check_gap(rng), 1e-9),
        CheckResult("grad topk_mean_pool", check_topk(rng), 1e-9),
        CheckResult("grad ranking_loss", check_ranking_loss(rng), 1e-7),
        CheckResult("grad end-to-end objective", check_end_to_end(), 1e-5),
        CheckResult(
            "oracle equivalence (naive loops)",
            oracle_equivalence_error(seeds=3 if fast else 10),
            1e-6,
        ),
        CheckResult(
            "metric oracles", metric_oracle_error(trials=50 if fast else 200), 1e-12
        ),
    ]
    return results
