"""Frame-level accuracy and average precision, plus the pooled evaluator."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import ScoreTrack, Segment
from .errors import AlignmentError, MetricError
from .fusion import moving_average


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    map: float
    n_frames: int
    threshold: float
    window: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "map": self.map,
            "n_frames": self.n_frames,
            "threshold": self.threshold,
            "window": self.window,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(
            accuracy=float(d["accuracy"]), map=float(d["map"]), n_frames=int(d["n_frames"]),
            threshold=float(d["threshold"]), window=int(d["window"]),
        )


def accuracy(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    """Fraction of frames where (score > threshold) equals the label."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.size == 0:
        raise AlignmentError(
            f"scores and labels must be equally sized and non-empty, "
            f"got {scores.shape} vs {labels.shape}"
        )
    predicted = (scores > threshold).astype(np.int64)
    return float(np.mean(predicted == labels))


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """AP as the mean of precision-at-rank over positives.

    Frames are ranked by descending score, ties broken by ascending original
    index so the result is reproducible.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.size == 0:
        raise AlignmentError("scores and labels must be equally sized and non-empty")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positive labels")
    order = np.lexsort((np.arange(scores.size), -scores))
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, scores.size + 1)
    return float(np.sum(hits[ranked == 1] / ranks[ranked == 1]) / n_pos)


def average_precision_sweep(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Brute-force AP: precision/recall at every distinct threshold.

    Independent of :func:`average_precision`; for distinct scores the two
    agree exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positive labels")
    ap = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= thr
        tp = int(np.sum(predicted & (labels == 1)))
        precision = tp / int(predicted.sum())
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def evaluate(
    tracks: Mapping[str, ScoreTrack],
    segments: Sequence[Segment],
    threshold: float = 0.5,
    window: int = 25,
    pooling: str = "pooled",
) -> EvalReport:
    """Smooth each track, pool frames over all segments, and score them.

    ``pooling="pooled"`` computes one AP over all frames; ``"per_segment"``
    averages per-segment APs over segments that have at least one positive.
    """
    if pooling not in ("pooled", "per_segment"):
        raise ValueError(f"unknown pooling mode {pooling!r}")
    all_scores: list[np.ndarray] = []
    all_labels: list[np.ndarray] = []
    for segment in sorted(segments, key=lambda s: s.id):
        track = tracks.get(segment.id)
        if track is None:
            raise AlignmentError(f"no score track for segment '{segment.id}'")
        if len(track) != segment.n_frames:
            raise AlignmentError(
                f"segment '{segment.id}': track has {len(track)} scores for "
                f"{segment.n_frames} frames"
            )
        smoothed = moving_average(track.scores, window) if window > 1 else track.scores
        all_scores.append(smoothed)
        all_labels.append(segment.labels)
    pooled_scores = np.concatenate(all_scores)
    pooled_labels = np.concatenate(all_labels)
    if pooling == "pooled":
        ap = average_precision(pooled_scores, pooled_labels)
    else:
        per_segment = [
            average_precision(s, l)
            for s, l in zip(all_scores, all_labels)
            if int(np.sum(l)) > 0
        ]
        if not per_segment:
            raise MetricError("no segment has a positive label")
        ap = float(np.mean(per_segment))
    return EvalReport(
        accuracy=accuracy(pooled_scores, pooled_labels, threshold),
        map=ap,
        n_frames=int(pooled_scores.size),
        threshold=threshold,
        window=window,
    )
