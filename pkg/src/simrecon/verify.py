"""Threshold-based verification accuracy with K-fold cross-validation.

A pair is predicted "same identity" when its similarity score is >= the
threshold. Candidate thresholds are the midpoints between consecutive
distinct sorted scores plus one sentinel below the minimum and one above the
maximum; the search is exact, and accuracy ties resolve to the smallest
threshold. Folds are contiguous blocks of the input order (the pair list's
order is the protocol's fold definition; there is no shuffling).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .eigenspace import ImageTensor
from .oracle import SyntheticEmbedder, cosine


@dataclass
class VerificationPair:
    score: float
    label: int  # 1 same identity, 0 different

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not np.isfinite(self.score):
            raise ValueError("score must be finite")


@dataclass
class FoldReport:
    thresholds: list[float]
    accuracies: list[float]
    mean_accuracy: float

    @property
    def folds(self) -> int:
        return len(self.accuracies)


def _scores_labels(pairs) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([p.score for p in pairs], dtype=np.float64)
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    return scores, labels


def _accuracy(scores: np.ndarray, labels: np.ndarray, threshold: float) -> float:
    return float(np.mean((scores >= threshold).astype(np.int64) == labels))


def best_threshold(pairs: list[VerificationPair]) -> tuple[float, float]:
    """Exact accuracy-maximizing threshold; ties go to the smallest candidate."""
    if not pairs:
        raise ValueError("need at least one pair")
    scores, labels = _scores_labels(pairs)
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    uniq = np.unique(s_sorted)
    candidates = np.concatenate(
        [[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]]
    )
    # boundary b = number of scores below the candidate; accuracy =
    # (negatives below + positives at-or-above) / n, all from prefix sums.
    n = scores.size
    neg_below = np.concatenate([[0], np.cumsum(1 - l_sorted)])
    pos_at_or_above = labels.sum() - np.concatenate([[0], np.cumsum(l_sorted)])
    boundaries = np.searchsorted(s_sorted, candidates, side="left")
    accs = (neg_below[boundaries] + pos_at_or_above[boundaries]) / n
    best = int(np.argmax(accs))  # first maximum = smallest threshold
    return float(candidates[best]), float(accs[best])


def kfold_accuracy(pairs: list[VerificationPair], folds: int = 10) -> FoldReport:
    """Per-fold threshold fit on the other folds, scored on the held-out fold."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if len(pairs) < folds:
        raise ValueError(f"need at least {folds} pairs, got {len(pairs)}")
    blocks = np.array_split(np.arange(len(pairs)), folds)
    thresholds: list[float] = []
    accuracies: list[float] = []
    scores, labels = _scores_labels(pairs)
    for block in blocks:
        held = np.zeros(len(pairs), dtype=bool)
        held[block] = True
        train = [pairs[i] for i in np.nonzero(~held)[0]]
        t, _ = best_threshold(train)
        thresholds.append(t)
        accuracies.append(_accuracy(scores[held], labels[held], t))
    return FoldReport(
        thresholds=thresholds,
        accuracies=accuracies,
        mean_accuracy=float(np.mean(accuracies)),
    )


def evaluate_replacement(
    positive_pairs: list[tuple[ImageTensor, ImageTensor]],
    negative_pairs: list[tuple[ImageTensor, ImageTensor]],
    embedder: SyntheticEmbedder,
    folds: int = 10,
) -> FoldReport:
    """Score positives as (reconstructed, genuine) and negatives as genuine pairs.

    Positives keep their order, negatives follow, and the K-fold protocol runs
    on that combined list.
    """
    pairs = [
        VerificationPair(cosine(embedder.embed(a), embedder.embed(b)), 1)
        for a, b in positive_pairs
    ]
    pairs += [
        VerificationPair(cosine(embedder.embed(a), embedder.embed(b)), 0)
        for a, b in negative_pairs
    ]
    return kfold_accuracy(pairs, folds)


def write_fold_report(report: FoldReport, path) -> None:
    """Per-fold rows plus a trailing summary row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "threshold", "accuracy"])
        for i, (t, a) in enumerate(zip(report.thresholds, report.accuracies)):
            writer.writerow([i, repr(t), repr(a)])
        writer.writerow(["mean", "", repr(report.mean_accuracy)])


@dataclass
class PairRecord:
    id_a: str
    path_a: str
    id_b: str
    path_b: str
    label: int


def read_pairs_file(path) -> list[PairRecord]:
    """Parse the (id_a, path_a, id_b, path_b, label) CSV; errors name the line."""
    records: list[PairRecord] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if lineno == 1 and row and row[0].strip().lower() == "id_a":
                continue  # optional header
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 5:
                raise ValueError(
                    f"{path}: line {lineno}: expected 5 columns, got {len(row)}"
                )
            id_a, path_a, id_b, path_b, label_s = (cell.strip() for cell in row)
            if label_s not in ("0", "1"):
                raise ValueError(
                    f"{path}: line {lineno}: label must be 0 or 1, got {label_s!r}"
                )
            records.append(PairRecord(id_a, path_a, id_b, path_b, int(label_s)))
    return records
