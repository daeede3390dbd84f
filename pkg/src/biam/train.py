"""Ranking-loss training: pairwise hinge, Adam with linear warmup, epoch loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DatasetError, DimensionError, LabelError
from .head import (
    BiamParams,
    ModelConfig,
    biam_backward_batch,
    biam_forward_batch,
    classify_backward,
    classify_regions_cached,
    zero_grads,
)


@dataclass(frozen=True)
class LabelSet:
    """Positive class indices of one image out of ``total`` classes."""

    positives: frozenset[int]
    total: int

    def __post_init__(self):
        if self.total < 1:
            raise LabelError("class count must be positive")
        for idx in self.positives:
            if not 0 <= idx < self.total:
                raise LabelError(
                    f"label index {idx} outside [0, {self.total})"
                )

    @classmethod
    def of(cls, positives, total: int) -> "LabelSet":
        return cls(frozenset(int(i) for i in positives), total)

    @property
    def n_positive(self) -> int:
        return len(self.positives)

    def multi_hot(self, dtype=np.float32) -> np.ndarray:
        y = np.zeros(self.total, dtype=dtype)
        y[sorted(self.positives)] = 1
        return y


def ranking_loss(
    s: np.ndarray, labels: LabelSet, mode: str = "mean-pairs"
) -> tuple[float, np.ndarray]:
    """Pairwise hinge: every positive should outscore every negative by >= 1.

    Returns the loss and its subgradient w.r.t. the scores.  ``mode`` selects
    the normalizer: "mean-pairs" divides by the number of (positive, negative)
    pairs, "sum" leaves the raw double sum.
    """
    if mode not in ("mean-pairs", "sum"):
        raise ConfigError(f"loss mode must be 'mean-pairs' or 'sum', got {mode!r}")
    if s.shape != (labels.total,):
        raise LabelError(
            f"score vector has shape {tuple(s.shape)}, labels expect ({labels.total},)"
        )
    ds = np.zeros_like(s)
    n_p = labels.n_positive
    n_n = labels.total - n_p
    if n_p == 0 or n_n == 0:
        return 0.0, ds
    pos = np.fromiter(sorted(labels.positives), dtype=np.intp)
    neg = np.setdiff1d(np.arange(labels.total, dtype=np.intp), pos, assume_unique=True)
    margins = s[neg][:, None] - s[pos][None, :] + 1.0  # (n_n, n_p)
    violating = margins > 0
    norm = 1.0 / (n_p * n_n) if mode == "mean-pairs" else 1.0
    loss = float(margins[violating].sum()) * norm
    ds[neg] += norm * violating.sum(axis=1)
    ds[pos] -= norm * violating.sum(axis=0)
    return loss, ds


@dataclass
class AdamState:
    """First/second moment estimates mirroring the parameter tree."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    base_lr: float = 1e-3

    @classmethod
    def create(
        cls,
        params: BiamParams,
        beta1: float = 0.5,
        beta2: float = 0.999,
        eps: float = 1e-8,
        base_lr: float = 1e-3,
    ) -> "AdamState":
        return cls(
            m={n: np.zeros_like(a) for n, a in params.named_parameters()},
            v={n: np.zeros_like(a) for n, a in params.named_parameters()},
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            base_lr=base_lr,
        )


def adam_step(
    params: BiamParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.named_parameters():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {name}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 40
    warmup_steps: int | None = None  # default: min(500, steps per epoch)
    base_lr: float = 1e-3
    seed: int = 0
    loss_mode: str = "mean-pairs"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.warmup_steps is not None and self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.loss_mode not in ("mean-pairs", "sum"):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")


def warmup_lr(t: int, cfg: TrainConfig) -> float:
    """Linear ramp from base_lr/W to base_lr over the first W steps."""
    w = cfg.warmup_steps if cfg.warmup_steps is not None else 500
    return cfg.base_lr * min(1.0, (t + 1) / w)


def resolve_warmup(cfg: TrainConfig, n_images: int) -> TrainConfig:
    if cfg.warmup_steps is not None:
        return cfg
    steps_per_epoch = max(1, math.ceil(n_images / cfg.batch_size))
    return replace(cfg, warmup_steps=min(500, steps_per_epoch))


def train_epoch(
    dataset,
    params: BiamParams,
    attrs,
    opt_state: AdamState,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
) -> tuple[BiamParams, AdamState, float]:
    """One pass over ``dataset`` (a sequence of (FeatureRecord, LabelSet)).

    Seeded shuffle, per-image forward/backward summed over each mini-batch,
    Adam update with warmup.  Deterministic given the seed and the optimizer
    step counter.  Returns the epoch's mean per-image loss.
    """
    if len(dataset) == 0:
        raise DatasetError("training dataset is empty")
    cfg = resolve_warmup(cfg, len(dataset))
    expected_r = (model_cfg.h, model_cfg.w, model_cfg.d_r)
    expected_g = (model_cfg.d_g,)
    for rec, labels in dataset:
        if rec.x_r.shape != expected_r or rec.x_g.shape != expected_g:
            raise DatasetError(
                f"image {rec.image_id!r} has features "
                f"{tuple(rec.x_r.shape)}/{tuple(rec.x_g.shape)}, config expects "
                f"{expected_r}/{expected_g}"
            )
        if labels.total != attrs.count:
            raise DatasetError(
                f"image {rec.image_id!r} labeled over {labels.total} classes, "
                f"attribute matrix has {attrs.count}"
            )

    rng = np.random.default_rng([cfg.seed, opt_state.t])
    order = rng.permutation(len(dataset))
    total_loss = 0.0
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start : start + cfg.batch_size]
        grads = zero_grads(params)
        inv_b = 1.0 / len(batch)
        pairs = [(dataset[idx][0].x_r, dataset[idx][0].x_g) for idx in batch]
        e_fs, cache = biam_forward_batch(pairs, params, "train")
        de_fs = []
        for i, idx in enumerate(batch):
            _, labels = dataset[idx]
            maps, ccache = classify_regions_cached(
                e_fs[i], params.w_a, attrs, model_cfg.topk, model_cfg.topk_aggregate
            )
            loss, ds = ranking_loss(maps.scores, labels, cfg.loss_mode)
            total_loss += loss
            de_f, dw_a = classify_backward(ccache, ds * inv_b)
            grads["w_a"] += dw_a
            de_fs.append(de_f)
        biam_backward_batch(cache, de_fs, params, grads)
        lr = warmup_lr(opt_state.t, cfg)
        adam_step(params, grads, opt_state, lr)
    return params, opt_state, total_loss / len(dataset)
