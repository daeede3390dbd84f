"""Bi-level attention head: feature enrichment plus region-level classification.

The head enriches precomputed region features with two complementary blocks,
then scores every region against per-class attribute embeddings:

  x_r --3x3 conv, ReLU, BN--> h_r
  RCB: multi-head self-attention over the h*w regions   -> e_r
  SCB: sigmoid channel gating by the global scene vector -> e_g
  fuse: 1x1 conv over [e_r ; e_g]                         -> e_f
  classify: m = e_f @ w_a @ A^T per region, s = top-k pool per class

All forwards build `BackwardRule` chains from :mod:`biam.tensor`;
`biam_backward` / `classify_backward` compose them into parameter gradients.

Checkpoint layout (little-endian throughout):
  magic b"BIAM", version u16, then 9 u32 config fields
  (h, w, d_r, d_g, d_a, heads, topk, seed, aggregate code 0=mean/1=sum),
  then every tensor of `BiamParams.named_tensors()` in declaration order as
  rank u8, extents u32 each, float32 values.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .tensor import (
    BackwardRule,
    BatchNormState,
    DEFAULT_DTYPE,
    batchnorm2d,
    conv2d,
    debug_enabled,
    global_avg_pool,
    pointwise,
    relu,
    sigmoid,
    softmax_rows,
    topk_mean_pool,
)

CHECKPOINT_MAGIC = b"BIAM"
CHECKPOINT_VERSION = 1
_AGGREGATE_CODES = {"mean": 0, "sum": 1}


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and hyperparameters of the head."""

    h: int
    w: int
    d_r: int
    d_g: int
    d_a: int
    heads: int
    topk: int
    seed: int = 0
    topk_aggregate: str = "mean"

    def __post_init__(self):
        for name in ("h", "w", "d_r", "d_g", "d_a", "heads", "topk"):
            if getattr(self, name) < 1:
                raise ConfigError(f"config field {name} must be positive")
        if self.d_r % self.heads != 0:
            raise ConfigError(
                f"head count {self.heads} must divide d_r={self.d_r} exactly"
            )
        if self.topk > self.h * self.w:
            raise ConfigError(
                f"topk={self.topk} exceeds region count {self.h * self.w}"
            )
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.topk_aggregate not in _AGGREGATE_CODES:
            raise ConfigError(
                f"topk_aggregate must be 'mean' or 'sum', got {self.topk_aggregate!r}"
            )

    @property
    def d_head(self) -> int:
        return self.d_r // self.heads

    @property
    def regions(self) -> int:
        return self.h * self.w


@dataclass
class ConvParams:
    kernel: np.ndarray
    bias: np.ndarray | None = None


@dataclass
class BiamParams:
    """Every learnable weight of the head plus batch-norm state."""

    conv_in: ConvParams
    bn_in: BatchNormState
    w_q: list[np.ndarray]
    w_k: list[np.ndarray]
    w_v: list[np.ndarray]
    w_o: np.ndarray
    cr1: ConvParams
    cr2: ConvParams
    w_g: np.ndarray
    cg: ConvParams
    bn_g: BatchNormState
    cf: ConvParams
    w_a: np.ndarray

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        """Learnable tensors in the fixed documented order."""
        yield "conv_in.kernel", self.conv_in.kernel
        yield "conv_in.bias", self.conv_in.bias
        yield "bn_in.gamma", self.bn_in.gamma
        yield "bn_in.beta", self.bn_in.beta
        for i in range(len(self.w_q)):
            yield f"head{i}.w_q", self.w_q[i]
            yield f"head{i}.w_k", self.w_k[i]
            yield f"head{i}.w_v", self.w_v[i]
        yield "w_o", self.w_o
        yield "cr1.kernel", self.cr1.kernel
        yield "cr1.bias", self.cr1.bias
        yield "cr2.kernel", self.cr2.kernel
        yield "cr2.bias", self.cr2.bias
        yield "w_g", self.w_g
        yield "cg.kernel", self.cg.kernel
        yield "cg.bias", self.cg.bias
        yield "bn_g.gamma", self.bn_g.gamma
        yield "bn_g.beta", self.bn_g.beta
        yield "cf.kernel", self.cf.kernel
        yield "cf.bias", self.cf.bias
        yield "w_a", self.w_a

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        """Running statistics; persisted but not optimized."""
        yield "bn_in.running_mean", self.bn_in.running_mean
        yield "bn_in.running_var", self.bn_in.running_var
        yield "bn_g.running_mean", self.bn_g.running_mean
        yield "bn_g.running_var", self.bn_g.running_var

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.named_parameters()
        yield from self.named_buffers()

    def parameter_count(self) -> int:
        return sum(a.size for _, a in self.named_parameters())

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        """Replace a tensor by its `named_tensors` name (used by loading)."""
        holder, _, attr = name.rpartition(".")
        if not holder:
            setattr(self, name, value)
        elif holder.startswith("head"):
            idx = int(holder[4:])
            getattr(self, attr)[idx] = value
        else:
            setattr(getattr(self, holder), attr, value)

    def copy(self) -> "BiamParams":
        return BiamParams(
            conv_in=ConvParams(self.conv_in.kernel.copy(), self.conv_in.bias.copy()),
            bn_in=self.bn_in.copy(),
            w_q=[a.copy() for a in self.w_q],
            w_k=[a.copy() for a in self.w_k],
            w_v=[a.copy() for a in self.w_v],
            w_o=self.w_o.copy(),
            cr1=ConvParams(self.cr1.kernel.copy(), self.cr1.bias.copy()),
            cr2=ConvParams(self.cr2.kernel.copy(), self.cr2.bias.copy()),
            w_g=self.w_g.copy(),
            cg=ConvParams(self.cg.kernel.copy(), self.cg.bias.copy()),
            bn_g=self.bn_g.copy(),
            cf=ConvParams(self.cf.kernel.copy(), self.cf.bias.copy()),
            w_a=self.w_a.copy(),
        )

    def astype(self, dtype) -> "BiamParams":
        out = self.copy()
        for name, arr in out.named_tensors():
            out.set_tensor(name, arr.astype(dtype))
        return out


@dataclass
class AttributeMatrix:
    """Class names with their unit-norm attribute embedding rows."""

    class_names: list[str]
    rows: np.ndarray

    def __post_init__(self):
        if self.rows.ndim != 2 or len(self.class_names) != self.rows.shape[0]:
            raise DimensionError(
                f"{len(self.class_names)} names for {self.rows.shape} embedding rows"
            )
        norms = np.sqrt((self.rows.astype(np.float64) ** 2).sum(axis=1))
        nonzero = norms > 0
        if np.any(np.abs(norms[nonzero] - 1.0) > 1e-5):
            raise DimensionError("attribute rows must be unit-norm (within 1e-5)")

    @classmethod
    def from_raw(cls, class_names: list[str], rows: np.ndarray) -> "AttributeMatrix":
        from .tensor import l2_normalize_rows

        normed, zero_rows = l2_normalize_rows(np.asarray(rows))
        if zero_rows.any():
            bad = [class_names[i] for i in np.flatnonzero(zero_rows)]
            warnings.warn(f"zero embedding rows left unnormalized: {bad}")
        return cls(list(class_names), normed)

    @staticmethod
    def concat(a: "AttributeMatrix", b: "AttributeMatrix") -> "AttributeMatrix":
        return AttributeMatrix(
            a.class_names + b.class_names, np.concatenate([a.rows, b.rows], axis=0)
        )

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def d_a(self) -> int:
        return self.rows.shape[1]


@dataclass
class ResponseMaps:
    """Per-region class scores plus their spatially pooled image scores."""

    maps: np.ndarray  # (h, w, classes)
    scores: np.ndarray  # (classes,)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _glorot(rng: np.random.Generator, shape, fan_in, fan_out, dtype):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def _conv_init(rng, k, c_in, c_out, dtype, bias=True) -> ConvParams:
    kernel = _glorot(rng, (k, k, c_in, c_out), k * k * c_in, k * k * c_out, dtype)
    return ConvParams(kernel, np.zeros(c_out, dtype=dtype) if bias else None)


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> BiamParams:
    """Seed-deterministic initialization: Glorot-uniform kernels, zero biases."""
    d_r, d_g, d_a, dh = cfg.d_r, cfg.d_g, cfg.d_a, cfg.d_head
    params = BiamParams(
        conv_in=_conv_init(rng, 3, d_r, d_r, dtype),
        bn_in=BatchNormState.create(d_r, dtype),
        w_q=[_glorot(rng, (1, 1, d_r, dh), d_r, dh, dtype) for _ in range(cfg.heads)],
        w_k=[_glorot(rng, (1, 1, d_r, dh), d_r, dh, dtype) for _ in range(cfg.heads)],
        w_v=[_glorot(rng, (1, 1, d_r, dh), d_r, dh, dtype) for _ in range(cfg.heads)],
        w_o=_glorot(rng, (1, 1, d_r, d_r), d_r, d_r, dtype),
        cr1=_conv_init(rng, 1, d_r, d_r, dtype),
        cr2=_conv_init(rng, 1, d_r, d_r, dtype),
        w_g=_glorot(rng, (d_g, d_r), d_g, d_r, dtype),
        cg=_conv_init(rng, 3, d_r, d_r, dtype),
        bn_g=BatchNormState.create(d_r, dtype),
        cf=_conv_init(rng, 1, 2 * d_r, d_r, dtype),
        w_a=_glorot(rng, (d_r, d_a), d_r, d_a, dtype),
    )
    return params


def zero_grads(params: BiamParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.named_parameters()}


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

@dataclass
class _HeadCache:
    r_q: BackwardRule
    r_k: BackwardRule
    r_v: BackwardRule
    r_soft: BackwardRule
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    rel: np.ndarray


@dataclass
class RcbCache:
    heads: list[_HeadCache]
    r_wo: BackwardRule
    r_cr1: BackwardRule
    r_cr_relu: BackwardRule
    r_cr2: BackwardRule
    shape: tuple


def rcb_forward(
    h_r: np.ndarray, params: BiamParams, mode: str = "eval"
) -> np.ndarray:
    """Region-contextualized enrichment of latent features."""
    e_r, _ = _rcb_forward_cached(h_r, params)
    return e_r


def _rcb_forward_cached(h_r: np.ndarray, params: BiamParams):
    h, w, d_r = h_r.shape
    hw = h * w
    dh = params.w_q[0].shape[3]
    scale = 1.0 / math.sqrt(dh)

    head_caches = []
    attended = []
    for i in range(len(params.w_q)):
        q3, r_q = conv2d(h_r, params.w_q[i])
        k3, r_k = conv2d(h_r, params.w_k[i])
        v3, r_v = conv2d(h_r, params.w_v[i])
        q = q3.reshape(hw, dh)
        k = k3.reshape(hw, dh)
        v = v3.reshape(hw, dh)
        rel, r_soft = softmax_rows((q @ k.T) * scale)
        attended.append(rel @ v)
        head_caches.append(_HeadCache(r_q, r_k, r_v, r_soft, q, k, v, rel))

    concat = np.concatenate(attended, axis=1).reshape(h, w, d_r)
    o_r, r_wo = conv2d(concat, params.w_o)
    u = h_r + o_r
    t1, r_cr1 = conv2d(u, params.cr1.kernel, params.cr1.bias)
    t2, r_cr_relu = relu(t1)
    t3, r_cr2 = conv2d(t2, params.cr2.kernel, params.cr2.bias)
    e_r = t3 + u
    cache = RcbCache(head_caches, r_wo, r_cr1, r_cr_relu, r_cr2, (h, w, d_r))
    return e_r, cache


def _rcb_backward(cache: RcbCache, de_r: np.ndarray, grads: dict) -> np.ndarray:
    """Returns the gradient w.r.t. h_r; accumulates parameter grads."""
    h, w, d_r = cache.shape
    hw = h * w
    nheads = len(cache.heads)
    dh = d_r // nheads
    scale = 1.0 / math.sqrt(dh)

    # e_r = t3 + u
    du = de_r.copy()
    dt2, dk_cr2, db_cr2 = cache.r_cr2(de_r)
    grads["cr2.kernel"] += dk_cr2
    grads["cr2.bias"] += db_cr2
    (dt1,) = cache.r_cr_relu(dt2)
    du2, dk_cr1, db_cr1 = cache.r_cr1(dt1)
    grads["cr1.kernel"] += dk_cr1
    grads["cr1.bias"] += db_cr1
    du += du2

    # u = h_r + o_r
    dh_r = du.copy()
    dconcat3, dk_wo = cache.r_wo(du)
    grads["w_o"] += dk_wo
    dconcat = dconcat3.reshape(hw, d_r)

    for i, hc in enumerate(cache.heads):
        da = dconcat[:, i * dh : (i + 1) * dh]
        drel = da @ hc.v.T
        dv = hc.rel.T @ da
        (dlogits,) = hc.r_soft(drel)
        dq = (dlogits @ hc.k) * scale
        dk = (dlogits.T @ hc.q) * scale
        dh_q, dw_q = hc.r_q(dq.reshape(h, w, dh))
        dh_k, dw_k = hc.r_k(dk.reshape(h, w, dh))
        dh_v, dw_v = hc.r_v(dv.reshape(h, w, dh))
        grads[f"head{i}.w_q"] += dw_q
        grads[f"head{i}.w_k"] += dw_k
        grads[f"head{i}.w_v"] += dw_v
        dh_r += dh_q + dh_k + dh_v
    return dh_r


@dataclass
class _ScbFront:
    """SCB state up to (but excluding) its batch normalization."""

    r_gap: BackwardRule
    r_sig: BackwardRule
    r_mul: BackwardRule
    r_cg: BackwardRule
    r_g_relu: BackwardRule
    q_g: np.ndarray
    k_g: np.ndarray
    x_g: np.ndarray
    rel_g: np.ndarray


def _scb_front(h_r, x_g, params):
    if x_g.shape != (params.w_g.shape[0],):
        raise DimensionError(
            f"global feature has shape {tuple(x_g.shape)}, "
            f"expected ({params.w_g.shape[0]},)"
        )
    q_g, r_gap = global_avg_pool(h_r)
    k_g = x_g @ params.w_g
    rel_g, r_sig = sigmoid(q_g * k_g)
    alpha_g, r_mul = pointwise("mul", h_r, rel_g)
    c2, r_cg = conv2d(alpha_g, params.cg.kernel, params.cg.bias)
    a2, r_g_relu = relu(c2)
    front = _ScbFront(r_gap, r_sig, r_mul, r_cg, r_g_relu, q_g, k_g, x_g, rel_g)
    return a2, front


def _scb_front_backward(front: _ScbFront, da2, params, grads):
    """Backward of the pre-BN part; returns (dh_r, dx_g)."""
    (dc2,) = front.r_g_relu(da2)
    dalpha, dk_cg, db_cg = front.r_cg(dc2)
    grads["cg.kernel"] += dk_cg
    grads["cg.bias"] += db_cg
    dh_r, drel = front.r_mul(dalpha)
    (dprod,) = front.r_sig(drel)
    dq_g = dprod * front.k_g
    dk_g = dprod * front.q_g
    grads["w_g"] += np.outer(front.x_g, dk_g)
    dx_g = params.w_g @ dk_g
    (dh_gap,) = front.r_gap(dq_g)
    return dh_r + dh_gap, dx_g


def scb_forward(
    h_r: np.ndarray,
    x_g: np.ndarray,
    params: BiamParams,
    mode: str = "eval",
    update_running: bool = True,
) -> np.ndarray:
    """Scene-contextualized enrichment of latent features."""
    a2, _ = _scb_front(h_r, x_g, params)
    b2, _ = batchnorm2d(a2[None], params.bn_g, mode, update_running)
    return b2[0] + h_r


@dataclass
class BiamCache:
    """Per-batch forward state; single-image calls are a batch of one."""

    fronts_in: list[tuple[BackwardRule, BackwardRule]]  # (conv_in, relu) rules
    r_bn_in: BackwardRule
    rcbs: list[RcbCache]
    scb_fronts: list[_ScbFront]
    r_bn_g: BackwardRule
    r_cfs: list[BackwardRule]
    h_r: list[np.ndarray]
    d_r: int


def biam_forward(
    x_r: np.ndarray,
    x_g: np.ndarray,
    params: BiamParams,
    mode: str = "eval",
    update_running: bool = True,
) -> np.ndarray:
    """Full enrichment: shared latent features, both blocks, fused output."""
    e_f, _ = biam_forward_cached(x_r, x_g, params, mode, update_running)
    return e_f


def biam_forward_cached(x_r, x_g, params, mode="eval", update_running=True):
    (e_f,), cache = biam_forward_batch([(x_r, x_g)], params, mode, update_running)
    return e_f, cache


def biam_forward_batch(
    batch: list[tuple[np.ndarray, np.ndarray]],
    params: BiamParams,
    mode: str = "eval",
    update_running: bool = True,
) -> tuple[list[np.ndarray], BiamCache]:
    """Forward a batch of images; batch-norm statistics span the whole batch.

    Everything except the two normalization layers is per-image.
    """
    d_r = params.conv_in.kernel.shape[2]
    fronts_in = []
    a1s = []
    for x_r, _ in batch:
        if x_r.ndim != 3 or x_r.shape[2] != d_r:
            raise DimensionError(
                f"region features have shape {tuple(x_r.shape)}, expected "
                f"h x w x {d_r}"
            )
        c1, r_conv_in = conv2d(x_r, params.conv_in.kernel, params.conv_in.bias)
        a1, r_in_relu = relu(c1)
        fronts_in.append((r_conv_in, r_in_relu))
        a1s.append(a1)
    hb, r_bn_in = batchnorm2d(np.stack(a1s), params.bn_in, mode, update_running)
    h_rs = [hb[i] for i in range(len(batch))]

    rcbs = []
    e_rs = []
    scb_fronts = []
    a2s = []
    for h_r, (_, x_g) in zip(h_rs, batch):
        e_r, rcb_cache = _rcb_forward_cached(h_r, params)
        rcbs.append(rcb_cache)
        e_rs.append(e_r)
        a2, front = _scb_front(h_r, x_g, params)
        scb_fronts.append(front)
        a2s.append(a2)
    b2, r_bn_g = batchnorm2d(np.stack(a2s), params.bn_g, mode, update_running)

    e_fs = []
    r_cfs = []
    for i, h_r in enumerate(h_rs):
        e_g = b2[i] + h_r
        fused = np.concatenate([e_rs[i], e_g], axis=2)
        e_f, r_cf = conv2d(fused, params.cf.kernel, params.cf.bias)
        e_fs.append(e_f)
        r_cfs.append(r_cf)
    cache = BiamCache(
        fronts_in, r_bn_in, rcbs, scb_fronts, r_bn_g, r_cfs, h_rs, d_r
    )
    return e_fs, cache


def biam_backward(
    cache: BiamCache, de_f: np.ndarray, params: BiamParams, grads: dict
) -> tuple[np.ndarray, np.ndarray]:
    """Single-image backward; returns (dx_r, dx_g)."""
    (dx_r,), (dx_g,) = biam_backward_batch(cache, [de_f], params, grads)
    return dx_r, dx_g


def biam_backward_batch(
    cache: BiamCache,
    de_fs: list[np.ndarray],
    params: BiamParams,
    grads: dict,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Propagate upstream gradients of every e_f in the batch.

    Mirrors the forward: per-image chains meet at the two batched
    normalization layers.  Returns per-image (dx_r, dx_g) lists.
    """
    d_r = cache.d_r
    n = len(de_fs)
    dh_rs = []
    db2s = []
    de_rs = []
    for i in range(n):
        dfused, dk_cf, db_cf = cache.r_cfs[i](de_fs[i])
        grads["cf.kernel"] += dk_cf
        grads["cf.bias"] += db_cf
        de_rs.append(dfused[:, :, :d_r])
        de_g = dfused[:, :, d_r:]
        db2s.append(de_g)  # e_g = b2 + h_r
        dh_rs.append(de_g.copy())

    da2, dgamma_g, dbeta_g = cache.r_bn_g(np.stack(db2s))
    grads["bn_g.gamma"] += dgamma_g
    grads["bn_g.beta"] += dbeta_g

    dx_gs = []
    for i in range(n):
        dh_rs[i] += _rcb_backward(cache.rcbs[i], de_rs[i], grads)
        dh_scb, dx_g = _scb_front_backward(cache.scb_fronts[i], da2[i], params, grads)
        dh_rs[i] += dh_scb
        dx_gs.append(dx_g)

    da1, dgamma, dbeta = cache.r_bn_in(np.stack(dh_rs))
    grads["bn_in.gamma"] += dgamma
    grads["bn_in.beta"] += dbeta
    dx_rs = []
    for i in range(n):
        r_conv_in, r_in_relu = cache.fronts_in[i]
        (dc1,) = r_in_relu(da1[i])
        dx_r, dk_in, db_in = r_conv_in(dc1)
        grads["conv_in.kernel"] += dk_in
        grads["conv_in.bias"] += db_in
        dx_rs.append(dx_r)
    return dx_rs, dx_gs


# ---------------------------------------------------------------------------
# region-level classification
# ---------------------------------------------------------------------------

@dataclass
class ClassifyCache:
    flat: np.ndarray  # (hw, d_r)
    proj: np.ndarray  # (hw, d_a)
    attr_rows: np.ndarray
    w_a: np.ndarray
    pool_rules: list[BackwardRule]
    shape: tuple


def classify_regions(
    e_f: np.ndarray,
    w_a: np.ndarray,
    attrs: AttributeMatrix,
    k: int,
    aggregate: str = "mean",
) -> ResponseMaps:
    """Per-region compatibility scores and their top-k pooled class scores.

    Swapping the attribute matrix (seen / unseen / concatenated) changes the
    class axis only; no parameter depends on it.
    """
    maps_, _ = classify_regions_cached(e_f, w_a, attrs, k, aggregate)
    return maps_


def classify_regions_cached(e_f, w_a, attrs, k, aggregate="mean"):
    h, w, d_r = e_f.shape
    if w_a.shape[0] != d_r:
        raise DimensionError(
            f"w_a expects d_r={w_a.shape[0]} features, e_f has {d_r}"
        )
    if attrs.d_a != w_a.shape[1]:
        raise DimensionError(
            f"attribute width {attrs.d_a} != w_a output width {w_a.shape[1]}"
        )
    flat = e_f.reshape(h * w, d_r)
    proj = flat @ w_a
    m = (proj @ attrs.rows.T).reshape(h, w, attrs.count)
    scores = np.empty(attrs.count, dtype=e_f.dtype)
    pool_rules = []
    for c in range(attrs.count):
        scores[c], rule = topk_mean_pool(m[:, :, c], k, aggregate)
        pool_rules.append(rule)
    if debug_enabled():
        for c in range(attrs.count):
            check, _ = topk_mean_pool(m[:, :, c], k, aggregate)
            assert check == scores[c], "pooled score inconsistent with response map"
    cache = ClassifyCache(flat, proj, attrs.rows, w_a, pool_rules, (h, w, d_r))
    return ResponseMaps(m, scores), cache


def classify_backward(cache: ClassifyCache, ds: np.ndarray):
    """Maps d(scores) to (de_f, dw_a)."""
    h, w, d_r = cache.shape
    n_classes = len(cache.pool_rules)
    dm = np.zeros((h, w, n_classes), dtype=cache.flat.dtype)
    for c in range(n_classes):
        if ds[c] != 0:
            (dmap,) = cache.pool_rules[c](ds[c])
            dm[:, :, c] = dmap
    dm_flat = dm.reshape(h * w, n_classes)
    dproj = dm_flat @ cache.attr_rows
    dw_a = cache.flat.T @ dproj
    de_f = (dproj @ cache.w_a.T).reshape(h, w, d_r)
    return de_f, dw_a


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, params: BiamParams) -> None:
    """Write config + all tensors; float32 little-endian payload."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(
            struct.pack(
                "<9I",
                cfg.h,
                cfg.w,
                cfg.d_r,
                cfg.d_g,
                cfg.d_a,
                cfg.heads,
                cfg.topk,
                cfg.seed,
                _AGGREGATE_CODES[cfg.topk_aggregate],
            )
        )
        for _, arr in params.named_tensors():
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, BiamParams]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}", offset=0)
    if len(data) < 6:
        raise FormatError("truncated checkpoint header", offset=len(data))
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    if len(data) < 6 + 36:
        raise FormatError("truncated checkpoint config", offset=len(data))
    fields = struct.unpack_from("<9I", data, 6)
    codes = {v: k for k, v in _AGGREGATE_CODES.items()}
    if fields[8] not in codes:
        raise FormatError(f"unknown aggregate code {fields[8]}", offset=6 + 32)
    cfg = ModelConfig(*fields[:8], topk_aggregate=codes[fields[8]])

    # template provides the expected shapes in the canonical order
    params = init_params(cfg, np.random.default_rng(0))
    offset = 6 + 36
    for name, template in params.named_tensors():
        if offset + 1 > len(data):
            raise FormatError(f"truncated before tensor {name}", offset=offset)
        (rank,) = struct.unpack_from("<B", data, offset)
        offset += 1
        if rank != template.ndim:
            raise FormatError(
                f"tensor {name}: rank {rank} != expected {template.ndim}",
                offset=offset - 1,
            )
        if offset + 4 * rank > len(data):
            raise FormatError(f"truncated extents of tensor {name}", offset=offset)
        extents = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        if extents != template.shape:
            raise FormatError(
                f"tensor {name}: shape {extents} != expected {template.shape}",
                offset=offset - 4 * rank,
            )
        nbytes = 4 * int(np.prod(extents))
        if offset + nbytes > len(data):
            raise FormatError(f"truncated values of tensor {name}", offset=offset)
        arr = np.frombuffer(data[offset : offset + nbytes], dtype="<f4").reshape(
            extents
        )
        params.set_tensor(name, arr.copy())
        offset += nbytes
    if offset != len(data):
        raise FormatError(
            f"{len(data) - offset} trailing bytes after last tensor", offset=offset
        )
    return cfg, params
