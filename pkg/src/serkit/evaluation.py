"""Evaluation: confusion accumulation, UAR, dimensional CCC, checkpoint ensembling.

UAR (balanced accuracy) is the principal metric: the unweighted mean of
per-class recalls over classes with support, optionally restricted to the
primary four classes (Neutral, Angry, Sad, Happy). Ensembling averages the
post-softmax probability vectors and post-sigmoid dimension vectors of the
top checkpoints by development categorical loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .datapipe import FeatureStore, merge_segments
from .errors import DataError
from .labels import NUM_CLASSES, EmotionLabel
from .model import DimScores, ModelOutput

log = logging.getLogger("serkit.evaluation")

PRIMARY_FOUR = frozenset({EmotionLabel.NEUTRAL, EmotionLabel.ANGRY,
                          EmotionLabel.SAD, EmotionLabel.HAPPY})


class ConfusionMatrix:
    """7x7 integer counts; rows are reference labels, columns predictions."""

    def __init__(self, counts: Optional[np.ndarray] = None):
        if counts is None:
            self.counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (NUM_CLASSES, NUM_CLASSES) or np.any(counts < 0):
                raise DataError(f"confusion matrix must be non-negative 7x7, got {counts.shape}")
            self.counts = counts.copy()

    def accumulate(self, ref, hyp) -> "ConfusionMatrix":
        self.counts[int(ref), int(hyp)] += 1
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    @property
    def n_scored(self) -> int:
        return int(self.counts.sum())

    def snapshot(self) -> np.ndarray:
        return self.counts.copy()


def per_class_recall(cm: ConfusionMatrix) -> np.ndarray:
    """Recall per class; NaN where the class has no support."""
    support = cm.counts.sum(axis=1)
    with np.errstate(invalid="ignore"):
        recall = np.where(support > 0, np.diag(cm.counts) / np.maximum(support, 1), np.nan)
    return recall


def uar(cm: ConfusionMatrix, class_subset=None) -> float:
    """Mean recall over supported classes (optionally within a subset).

    Zero-support classes are excluded from the mean and reported in the log;
    predictions land in the full 7-way column space, so out-of-subset
    predictions count against their reference class.
    """
    classes = range(NUM_CLASSES) if class_subset is None else sorted(int(c) for c in class_subset)
    support = cm.counts.sum(axis=1)
    recalls = []
    excluded = []
    for c in classes:
        if support[c] > 0:
            recalls.append(cm.counts[c, c] / support[c])
        else:
            excluded.append(EmotionLabel(c).canonical_name)
    if not recalls:
        raise DataError("UAR undefined: no class in the subset has support")
    if excluded:
        log.info("UAR excludes zero-support classes: %s", ", ".join(excluded))
    return float(np.mean(recalls))


def weighted_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.counts.sum()
    if total == 0:
        raise DataError("weighted accuracy undefined on an empty confusion matrix")
    return float(np.trace(cm.counts) / total)


def ccc_metric(refs: np.ndarray, preds: np.ndarray) -> tuple:
    """Per-dimension CCC over the full eval set (two-pass population moments).

    A constant reference dimension yields 0.0 with a warning instead of 0/0.
    """
    refs = np.asarray(refs, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if refs.shape != preds.shape or refs.ndim != 2 or refs.shape[1] != 3:
        raise DataError(f"ccc_metric expects matching [n, 3] arrays, got {refs.shape}, {preds.shape}")
    if refs.shape[0] < 2:
        raise DataError(f"ccc_metric needs n >= 2, got {refs.shape[0]}")
    out = []
    for dim in range(3):
        y = refs[:, dim]
        p = preds[:, dim]
        mu_y = y.mean()
        mu_p = p.mean()
        var_y = float(np.mean((y - mu_y) ** 2))
        var_p = float(np.mean((p - mu_p) ** 2))
        cov = float(np.mean((y - mu_y) * (p - mu_p)))
        denom = var_y + var_p + (mu_y - mu_p) ** 2
        if denom == 0.0 or var_y == 0.0:
            log.warning("constant reference in CCC dimension %d: reporting 0", dim)
            out.append(0.0)
        else:
            out.append(float(2.0 * cov / denom))
    return tuple(out)


def select_top_checkpoints(history: list, k: int = 4) -> list:
    """k paths with the lowest dev categorical loss; ties keep the earlier epoch."""
    if not history:
        raise DataError("checkpoint history is empty")
    ranked = sorted(range(len(history)), key=lambda i: (history[i][1], i))
    return [history[i][0] for i in ranked[:k]]


def ensemble_predict(models: list, features) -> ModelOutput:
    """Arithmetic mean of post-softmax probabilities and post-sigmoid dims.

    The returned logits are log(mean probs), whose softmax reproduces the
    averaged distribution exactly.
    """
    if not models:
        raise DataError("ensemble needs at least one model")
    probs = np.zeros(NUM_CLASSES)
    dims = np.zeros(3)
    for model in models:
        out = model.forward(features)
        probs += out.cat_probs.data
        dims += out.dim_tensor.data
    probs /= len(models)
    dims /= len(models)
    a, v, d = (float(x) for x in dims)
    return ModelOutput(cat_logits=Tensor(np.log(np.maximum(probs, 1e-300))),
                       cat_probs=Tensor(probs), dim_tensor=Tensor(dims),
                       dims=DimScores(arousal=a, valence=v, dominance=d))


# -- manifest-level evaluation ---------------------------------------------------


@dataclass
class EvalReport:
    uar_7: float
    uar_4: float
    weighted_accuracy: float
    per_class_recall: tuple
    ccc_arousal: Optional[float]
    ccc_valence: Optional[float]
    ccc_dominance: Optional[float]
    n_scored: int

    def rows(self) -> list:
        """Stable (metric, value) ordering for CSV emission."""
        rows = [
            ("n_scored", self.n_scored),
            ("uar_7", self.uar_7),
            ("uar_4", self.uar_4),
            ("weighted_accuracy", self.weighted_accuracy),
        ]
        for label, value in zip(EmotionLabel, self.per_class_recall):
            rows.append((f"recall_{label.name.lower()}", value))
        for name, value in (("ccc_arousal", self.ccc_arousal),
                            ("ccc_valence", self.ccc_valence),
                            ("ccc_dominance", self.ccc_dominance)):
            if value is not None:
                rows.append((name, value))
        return rows


def _subset_uar_or_nan(cm: ConfusionMatrix, subset) -> float:
    try:
        return uar(cm, class_subset=subset)
    except DataError:
        log.warning("4-class UAR undefined on this set")
        return float("nan")


def evaluate_manifest(models: list, records: list, granularity: str = "fine",
                      merge_cap_s: float = 15.0, store: Optional[FeatureStore] = None) -> EvalReport:
    """Score a manifest with an ensemble at fine or merged granularity.

    Merged granularity treats the manifest order as a contiguous timeline,
    merges consecutive equal-label segments up to merge_cap_s seconds, and
    scores one duration-weighted averaged prediction per merged segment.
    """
    if granularity not in ("fine", "merged"):
        raise DataError(f"unknown granularity {granularity!r}")
    store = store or FeatureStore()
    per_record = []
    for record in records:
        out = ensemble_predict(models, store.get(record))
        per_record.append((record, out.cat_probs.data, out.dim_tensor.data))

    cm = ConfusionMatrix()
    dim_refs = []
    dim_preds = []
    if granularity == "fine":
        for record, probs, dims in per_record:
            cm.accumulate(record.label_index, int(np.argmax(probs)))
            if record.has_dims:
                dim_refs.append(record.dim_array())
                dim_preds.append(dims)
    else:
        cursor = 0.0
        segments = []
        spans = []
        for record, probs, dims in per_record:
            segments.append((cursor, cursor + record.duration_s, record.label_index))
            spans.append((cursor, cursor + record.duration_s, record, probs, dims))
            cursor += record.duration_s
        for start, end, label in merge_segments(segments, cap_s=merge_cap_s):
            probs = np.zeros(NUM_CLASSES)
            dims = np.zeros(3)
            ref_dims = np.zeros(3)
            weight = 0.0
            all_dims = True
            for s_start, s_end, record, s_probs, s_dims in spans:
                overlap = min(end, s_end) - max(start, s_start)
                if overlap <= 1e-12:
                    continue
                probs += overlap * s_probs
                dims += overlap * s_dims
                if record.has_dims:
                    ref_dims += overlap * record.dim_array()
                else:
                    all_dims = False
                weight += overlap
            probs /= weight
            cm.accumulate(label, int(np.argmax(probs)))
            if all_dims and weight > 0:
                dim_refs.append(ref_dims / weight)
                dim_preds.append(dims / weight)

    ccc_vals = (None, None, None)
    if len(dim_refs) >= 2:
        ccc_vals = ccc_metric(np.stack(dim_refs), np.stack(dim_preds))
    return EvalReport(
        uar_7=uar(cm),
        uar_4=_subset_uar_or_nan(cm, PRIMARY_FOUR),
        weighted_accuracy=weighted_accuracy(cm),
        per_class_recall=tuple(per_class_recall(cm)),
        ccc_arousal=ccc_vals[0],
        ccc_valence=ccc_vals[1],
        ccc_dominance=ccc_vals[2],
        n_scored=cm.n_scored,
    )
