"""Inference and metrics: seen-class accuracy and unseen-detection AUROC.

Inference applies no augmentation; raw inputs go through the trained students.
Accuracy comes from the inlier student's K-way head; the detection score over
unlabeled data is the same uncertainty blend used in training, computed from
the two students. The hidden seen/unseen flags are read here and only here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetricError, ValidationError
from .soft_weighting import scores_from_probs


@dataclass
class ScoreHistogram:
    bin_edges: list[float]
    seen_counts: list[int]
    unseen_counts: list[int]


@dataclass
class EvalResult:
    accuracy: float
    auroc: float
    per_class_accuracy: dict[int, float]
    score_histogram: ScoreHistogram
    mean_score_seen: float = float("nan")
    mean_score_unseen: float = float("nan")

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auroc": self.auroc,
            "per_class_accuracy": {str(k): v for k, v in self.per_class_accuracy.items()},
            "score_histogram": {
                "bin_edges": self.score_histogram.bin_edges,
                "seen_counts": self.score_histogram.seen_counts,
                "unseen_counts": self.score_histogram.unseen_counts,
            },
            "mean_score_seen": self.mean_score_seen,
            "mean_score_unseen": self.mean_score_unseen,
        }


def predict_labels(model, inputs: np.ndarray, head: str = "k") -> np.ndarray:
    """Argmax class ids (1-based) from un-augmented inputs; ties go to the lowest id."""
    probs = model.probs(np.atleast_2d(np.asarray(inputs, dtype=np.float64)), head=head)
    return np.argmax(probs, axis=1) + 1


def compute_accuracy(predictions, true_labels) -> float:
    predictions = np.asarray(predictions)
    true_labels = np.asarray(true_labels)
    if predictions.shape != true_labels.shape:
        raise ValidationError(
            f"predictions and labels must align: {predictions.shape} vs {true_labels.shape}"
        )
    if predictions.size == 0:
        raise ValidationError("accuracy is undefined on empty inputs")
    return float(np.mean(predictions == true_labels))


def per_class_accuracy(predictions, true_labels) -> dict[int, float]:
    predictions = np.asarray(predictions)
    true_labels = np.asarray(true_labels)
    out: dict[int, float] = {}
    for c in np.unique(true_labels):
        sel = true_labels == c
        out[int(c)] = float(np.mean(predictions[sel] == c))
    return out


def _midranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their midrank."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    boundaries = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1], True])
    for lo, hi in zip(boundaries[:-1], boundaries[1:]):
        ranks[order[lo:hi]] = 0.5 * (lo + hi + 1)  # positions lo+1..hi, averaged
    return ranks


def compute_auroc(scores, is_unseen) -> float:
    """Probability that a random (unseen, seen) pair is ordered correctly by score.

    Computed from midranks, so ties count one half; agrees exactly with the
    all-pairs definition.
    """
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(is_unseen, dtype=bool)
    if scores.shape != flags.shape or scores.ndim != 1:
        raise ValidationError(f"scores and flags must be aligned vectors, got {scores.shape}")
    n_pos = int(flags.sum())
    n_neg = int((~flags).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC needs both classes present, got {n_pos} unseen / {n_neg} seen"
        )
    ranks = _midranks(scores)
    pos_rank_sum = float(ranks[flags].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def score_histogram(scores, is_unseen, bins: int = 20) -> ScoreHistogram:
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(is_unseen, dtype=bool)
    edges = np.linspace(0.0, 1.0, bins + 1)
    seen_counts, _ = np.histogram(scores[~flags], bins=edges)
    unseen_counts, _ = np.histogram(scores[flags], bins=edges)
    return ScoreHistogram(
        bin_edges=edges.tolist(),
        seen_counts=seen_counts.tolist(),
        unseen_counts=unseen_counts.tolist(),
    )


def detection_scores(student_in, student_out, inputs: np.ndarray, gamma: float) -> np.ndarray:
    """Inference-time uncertainty scores on raw (un-augmented) inputs."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    p_in = student_in.probs(x, head="k")
    p_out = student_out.probs(x, head="k1")
    return scores_from_probs(p_in, p_out, gamma)


def run_inference(
    student_in,
    student_out,
    test_x: np.ndarray,
    test_y: np.ndarray,
    unlabeled_x: np.ndarray,
    unlabeled_is_unseen: np.ndarray,
    gamma: float,
) -> EvalResult:
    """Full evaluation: test accuracy via the inlier student, AUROC via both students."""
    if len(np.atleast_1d(test_y)) == 0 or len(np.atleast_2d(unlabeled_x)) == 0:
        raise ValidationError("run_inference requires nonempty test and unlabeled sets")
    preds = predict_labels(student_in, test_x, head="k")
    acc = compute_accuracy(preds, test_y)
    scores = detection_scores(student_in, student_out, unlabeled_x, gamma)
    flags = np.asarray(unlabeled_is_unseen, dtype=bool)
    auroc = compute_auroc(scores, flags)
    return EvalResult(
        accuracy=acc,
        auroc=auroc,
        per_class_accuracy=per_class_accuracy(preds, test_y),
        score_histogram=score_histogram(scores, flags),
        mean_score_seen=float(scores[~flags].mean()) if (~flags).any() else float("nan"),
        mean_score_unseen=float(scores[flags].mean()) if flags.any() else float("nan"),
    )
