"""Rank-based evaluation: per-class average precision and top-K F1."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import MetricError, ParameterError
from .train import LabelSet


def mean_average_precision(
    scores: np.ndarray, labels: list[LabelSet]
) -> tuple[dict[int, float], float]:
    """AP per class (image ranking by descending score) and their mean.

    Ties rank the smaller image index first.  Classes without positives have
    undefined AP and are excluded from the mean; if no class has a positive
    the metric is undefined.
    """
    n, c = scores.shape
    if n < 1 or len(labels) != n:
        raise MetricError(f"{len(labels)} label sets for {n} score rows")
    positive = np.zeros((n, c), dtype=bool)
    for i, ls in enumerate(labels):
        positive[i, sorted(ls.positives)] = True
    per_class: dict[int, float] = {}
    ranks = np.arange(1, n + 1, dtype=np.float64)
    for cls in range(c):
        p_c = int(positive[:, cls].sum())
        if p_c == 0:
            continue
        order = np.argsort(-scores[:, cls], kind="stable")
        flags = positive[order, cls]
        cum = np.cumsum(flags)
        per_class[cls] = float((cum[flags] / ranks[flags]).sum() / p_c)
    if not per_class:
        raise MetricError("no class has a positive example; mAP undefined")
    return per_class, float(sum(per_class.values()) / len(per_class))


def f1_at_k(
    scores: np.ndarray,
    labels: list[LabelSet],
    k: int,
    average: str = "micro",
) -> tuple[float, float, float]:
    """Precision/recall/F1 of each image's top-k predicted classes.

    "micro" (default) pools hits over the corpus; "macro" averages the
    per-image values.  Ties pick the smaller class index.
    """
    n, c = scores.shape
    if not 1 <= k <= c:
        raise ParameterError(f"top-K count {k} out of range [1, {c}]")
    if average not in ("micro", "macro"):
        raise ParameterError(f"average must be 'micro' or 'macro', got {average!r}")
    topk = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    hits_per_image = np.array(
        [sum(1 for cls in topk[i] if cls in labels[i].positives) for i in range(n)],
        dtype=np.float64,
    )
    if average == "micro":
        hits = float(hits_per_image.sum())
        total_pos = sum(ls.n_positive for ls in labels)
        precision = hits / (k * n)
        recall = hits / total_pos if total_pos else 0.0
    else:
        precision = float((hits_per_image / k).mean())
        recalls = [
            hits_per_image[i] / ls.n_positive if ls.n_positive else 0.0
            for i, ls in enumerate(labels)
        ]
        recall = float(np.mean(recalls))
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class EvalReport:
    """Evaluation summary; serializes with fixed field names."""

    per_class_ap: dict[str, float]
    map: float
    f1: dict[int, dict[str, float]]
    counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "per_class_ap": self.per_class_ap,
            "f1": {str(k): v for k, v in sorted(self.f1.items())},
            "counts": self.counts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate(
    scores: np.ndarray,
    labels: list[LabelSet],
    class_names: list[str],
    ks: list[int],
    average: str = "micro",
) -> EvalReport:
    """Build the full report for one score matrix."""
    per_class, map_value = mean_average_precision(scores, labels)
    f1s = {}
    for k in ks:
        p, r, f1 = f1_at_k(scores, labels, k, average)
        f1s[k] = {"p": p, "r": r, "f1": f1}
    return EvalReport(
        per_class_ap={class_names[cls]: ap for cls, ap in sorted(per_class.items())},
        map=map_value,
        f1=f1s,
        counts={
            "images": scores.shape[0],
            "classes": scores.shape[1],
            "positives": int(sum(ls.n_positive for ls in labels)),
        },
    )
