"""Dense tensor kernels with hand-derived backward rules.

Every differentiable operation returns ``(output, BackwardRule)``; the rule
maps the upstream gradient to one gradient per differentiable input.  Arrays
are plain numpy ndarrays, channels-last, float32 for training and float64 for
gradient verification.  A finite-difference checker (`grad_check`) validates
each rule.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    DegenerateBatchError,
    DimensionError,
    NumericError,
    ParameterError,
)

DEFAULT_DTYPE = np.float32
VERIFY_DTYPE = np.float64

_debug = os.environ.get("BIAM_DEBUG", "0") not in ("", "0")


def set_debug(enabled: bool) -> None:
    """Toggle debug-mode checks (finite outputs, score consistency)."""
    global _debug
    _debug = bool(enabled)


def debug_enabled() -> bool:
    return _debug


def _check_finite(name: str, *arrays) -> None:
    if not _debug:
        return
    for a in arrays:
        if a is None:
            continue
        if not np.all(np.isfinite(a)):
            raise NumericError(f"{name} produced non-finite values")


class BackwardRule:
    """Gradient rule captured at forward time.

    ``saved`` holds the activations the rule needs; calling the rule with the
    upstream gradient returns a tuple with one gradient per differentiable
    input, shapes matching those inputs.  All rules are linear in the upstream
    gradient, so a zero upstream gradient yields zero gradients.
    """

    __slots__ = ("saved", "_apply")

    def __init__(self, saved: tuple, apply_fn: Callable):
        self.saved = saved
        self._apply = apply_fn

    def __call__(self, grad_out):
        grads = self._apply(grad_out)
        _check_finite("backward", *[g for g in grads if isinstance(g, np.ndarray)])
        return grads


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, BackwardRule]:
    """Matrix product C = A @ B with dC -> (dC @ B^T, A^T @ dC)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    out = a @ b
    _check_finite("matmul", out)

    def apply(g):
        return g @ b.T, a.T @ g

    return out, BackwardRule((a, b), apply)


def conv2d(
    x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None
) -> tuple[np.ndarray, BackwardRule]:
    """Same-padded stride-1 cross-correlation on a (h, w, c_in) tensor.

    ``kernel`` is (k, k, c_in, c_out) with k in {1, 3}; zero padding of
    (k-1)/2 keeps the spatial extent.  The backward rule yields dx, dkernel
    and (when a bias is present) dbias.
    """
    if x.ndim != 3:
        raise DimensionError(f"conv2d input must be h x w x c, got {tuple(x.shape)}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"conv2d kernel must be k x k x c_in x c_out, got {tuple(kernel.shape)}")
    k = kernel.shape[0]
    if k not in (1, 3):
        raise DimensionError(f"conv2d supports k in (1, 3), got k={k}")
    h, w, c_in = x.shape
    if kernel.shape[2] != c_in:
        raise DimensionError(
            f"conv2d channel mismatch: input has {c_in}, kernel expects {kernel.shape[2]}"
        )
    c_out = kernel.shape[3]
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias must be ({c_out},), got {tuple(bias.shape)}")

    if k == 1:
        wmat = kernel.reshape(c_in, c_out)
        flat = x.reshape(h * w, c_in)
        out = flat @ wmat
        if bias is not None:
            out = out + bias
        out = out.reshape(h, w, c_out)
        _check_finite("conv2d", out)

        def apply1(g):
            gf = g.reshape(h * w, c_out)
            dx = (gf @ wmat.T).reshape(h, w, c_in)
            dk = (flat.T @ gf).reshape(1, 1, c_in, c_out)
            if bias is None:
                return dx, dk
            return dx, dk, gf.sum(axis=0)

        return out, BackwardRule((x, kernel), apply1)

    pad = (k - 1) // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((h, w, k, k, c_in), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j, :] = xp[i : i + h, j : j + w, :]
    cmat = cols.reshape(h * w, k * k * c_in)
    wmat = kernel.reshape(k * k * c_in, c_out)
    out = cmat @ wmat
    if bias is not None:
        out = out + bias
    out = out.reshape(h, w, c_out)
    _check_finite("conv2d", out)

    def apply3(g):
        gf = g.reshape(h * w, c_out)
        dk = (cmat.T @ gf).reshape(k, k, c_in, c_out)
        dcols = (gf @ wmat.T).reshape(h, w, k, k, c_in)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[i : i + h, j : j + w, :] += dcols[:, :, i, j, :]
        dx = dxp[pad : pad + h, pad : pad + w, :]
        if bias is None:
            return dx, dk
        return dx, dk, gf.sum(axis=0)

    return out, BackwardRule((x, kernel), apply3)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax_rows(x: np.ndarray) -> tuple[np.ndarray, BackwardRule]:
    """Row-wise softmax with per-row max subtraction; rows sum to 1."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {tuple(x.shape)}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    _check_finite("softmax_rows", y)

    def apply(g):
        # J^T g = y * (g - sum(g * y)) per row
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return y, BackwardRule((y,), apply)


def _broadcast_shapes_ok(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape == b.shape:
        return True
    # per-channel vector against a channels-last tensor
    return b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]


def pointwise(kind: str, *inputs: np.ndarray) -> tuple[np.ndarray, BackwardRule]:
    """Elementwise op: relu, sigmoid (unary), add, mul (binary).

    add/mul also accept a per-channel vector as second operand, broadcast
    across spatial positions of a channels-last tensor.
    """
    if kind == "relu":
        (x,) = inputs
        out = np.maximum(x, 0)

        def apply_relu(g):
            return (g * (x > 0),)

        return out, BackwardRule((x,), apply_relu)

    if kind == "sigmoid":
        (x,) = inputs
        # split by sign for overflow-free exp
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def apply_sig(g):
            return (g * out * (1.0 - out),)

        return out, BackwardRule((out,), apply_sig)

    if kind in ("add", "mul"):
        a, b = inputs
        if not _broadcast_shapes_ok(a, b):
            raise DimensionError(
                f"pointwise {kind}: shapes {tuple(a.shape)} and {tuple(b.shape)} "
                "are neither equal nor channel-broadcastable"
            )
        channel_vec = a.shape != b.shape
        spatial_axes = tuple(range(a.ndim - 1))
        if kind == "add":
            out = a + b

            def apply_add(g):
                if channel_vec:
                    return g, g.sum(axis=spatial_axes)
                return g, g

            rule = BackwardRule((), apply_add)
        else:
            out = a * b

            def apply_mul(g):
                da = g * b
                if channel_vec:
                    return da, (g * a).sum(axis=spatial_axes)
                return da, g * a

            rule = BackwardRule((a, b), apply_mul)
        _check_finite(f"pointwise {kind}", out)
        return out, rule

    raise ParameterError(f"unknown pointwise kind: {kind!r}")


def relu(x):
    return pointwise("relu", x)


def sigmoid(x):
    return pointwise("sigmoid", x)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=DEFAULT_DTYPE) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.gamma.copy(),
            self.beta.copy(),
            self.running_mean.copy(),
            self.running_var.copy(),
            self.momentum,
            self.eps,
        )

    def astype(self, dtype) -> "BatchNormState":
        return BatchNormState(
            self.gamma.astype(dtype),
            self.beta.astype(dtype),
            self.running_mean.astype(dtype),
            self.running_var.astype(dtype),
            self.momentum,
            self.eps,
        )


def batchnorm2d(
    x: np.ndarray,
    state: BatchNormState,
    mode: str,
    update_running: bool = True,
) -> tuple[np.ndarray, BackwardRule]:
    """Batch normalization over a (B, h, w, c) tensor.

    Train mode normalizes by batch-and-spatial statistics and (unless
    ``update_running`` is False) folds them into the running estimates with
    the state's momentum; eval mode normalizes by the running statistics and
    is a fixed affine map.  The backward rule covers x, gamma and beta.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects B x h x w x c, got {tuple(x.shape)}")
    c = state.channels
    if x.shape[3] != c:
        raise DimensionError(
            f"batchnorm2d channel mismatch: input has {x.shape[3]}, state has {c}"
        )
    axes = (0, 1, 2)
    if mode == "train":
        n = x.shape[0] * x.shape[1] * x.shape[2]
        if n < 2:
            raise DegenerateBatchError(
                f"batchnorm2d train mode needs B*h*w >= 2, got {n}"
            )
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_running:
            m = state.momentum
            unbiased = var * (n / (n - 1))
            state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(
                state.running_mean.dtype
            )
            state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(
                state.running_var.dtype
            )
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x - mean) * inv
        out = state.gamma * xhat + state.beta
        _check_finite("batchnorm2d", out)
        gamma = state.gamma

        def apply_train(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma
            dx = (inv / n) * (
                n * dxhat
                - dxhat.sum(axis=axes)
                - xhat * (dxhat * xhat).sum(axis=axes)
            )
            return dx, dgamma, dbeta

        return out, BackwardRule((xhat, inv), apply_train)

    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x - state.running_mean) * inv
        out = state.gamma * xhat + state.beta
        _check_finite("batchnorm2d", out)
        gamma = state.gamma

        def apply_eval(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            return g * gamma * inv, dgamma, dbeta

        return out, BackwardRule((xhat, inv), apply_eval)

    raise ParameterError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# pooling and normalization
# ---------------------------------------------------------------------------

def global_avg_pool(x: np.ndarray) -> tuple[np.ndarray, BackwardRule]:
    """Per-channel spatial mean of a (h, w, c) tensor."""
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool expects h x w x c, got {tuple(x.shape)}")
    h, w, _ = x.shape
    out = x.mean(axis=(0, 1))

    def apply(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype, copy=True),)

    return out, BackwardRule((), apply)


def topk_mean_pool(
    x: np.ndarray, k: int, aggregate: str = "mean"
) -> tuple[np.floating, BackwardRule]:
    """Mean (or sum) of the k largest entries of a spatial map.

    Ties are broken toward the smallest flat index; the backward rule routes
    1/k (or 1 for sum) of the upstream scalar to each selected position.
    """
    if x.ndim != 2:
        raise DimensionError(f"topk_mean_pool expects h x w, got {tuple(x.shape)}")
    flat = x.ravel()
    if not 1 <= k <= flat.size:
        raise ParameterError(f"top-k count {k} out of range [1, {flat.size}]")
    if aggregate not in ("mean", "sum"):
        raise ParameterError(f"aggregate must be 'mean' or 'sum', got {aggregate!r}")
    idx = np.argsort(-flat, kind="stable")[:k]
    if aggregate == "mean":
        val = flat[idx].mean()
        share = 1.0 / k
    else:
        val = flat[idx].sum()
        share = 1.0

    def apply(g):
        dflat = np.zeros_like(flat)
        dflat[idx] = g * share
        return (dflat.reshape(x.shape),)

    return val, BackwardRule((idx,), apply)


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rescale each row to unit Euclidean norm.

    Zero rows are returned unchanged; the second return value flags them so
    callers can warn.
    """
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got {tuple(x.shape)}")
    norms = np.sqrt((x * x).sum(axis=1))
    zero_rows = norms == 0
    safe = np.where(zero_rows, 1.0, norms)
    return x / safe[:, None], zero_rows


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(
    fn: Callable, inputs: list[np.ndarray], eps: float = 1e-5
) -> float:
    """Compare analytic gradients of a scalar objective to central differences.

    ``fn(*inputs)`` must return ``(value, grads)`` where ``grads`` has one
    entry per input (``None`` marks a non-differentiable input).  Inputs must
    be float64 and pre-checked to sit away from non-smooth points.  Returns
    the max over coordinates of |analytic - central| / max(1, |central|).
    """
    inputs = [np.asarray(x) for x in inputs]
    for x in inputs:
        if x.dtype != np.float64:
            raise ParameterError("grad_check requires float64 inputs")
    value, grads = fn(*inputs)
    if not np.isfinite(value):
        raise NumericError("objective value is not finite")
    if len(grads) != len(inputs):
        raise ParameterError(
            f"fn returned {len(grads)} gradients for {len(inputs)} inputs"
        )
    max_err = 0.0
    for x, gx in zip(inputs, grads):
        if gx is None:
            continue
        if np.asarray(gx).shape != x.shape:
            raise DimensionError(
                f"gradient shape {np.asarray(gx).shape} != input shape {x.shape}"
            )
        it = np.nditer(x, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = x[ix]
            x[ix] = orig + eps
            fp = fn(*inputs)[0]
            x[ix] = orig - eps
            fm = fn(*inputs)[0]
            x[ix] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite value during finite differencing")
            cd = (fp - fm) / (2.0 * eps)
            err = abs(float(gx[ix]) - cd) / max(1.0, abs(cd))
            if err > max_err:
                max_err = err
            it.iternext()
    return max_err
