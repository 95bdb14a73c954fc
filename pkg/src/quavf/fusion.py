"""Quality-aware late fusion of branch scores and moving-average smoothing."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ScoreTrack
from .errors import AlignmentError, ConfigError, ValidationError
from .quality import QualityTrack


@dataclass(frozen=True)
class FusedTrack:
    """Fused per-frame scores plus the vision weights that produced them."""

    segment_id: str
    scores: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "weights", weights)
        if scores.shape != weights.shape:
            raise AlignmentError(
                f"fused track '{self.segment_id}': scores and weights differ in length"
            )
        if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
            raise ValidationError(f"fused track '{self.segment_id}': scores must lie in [0, 1]")

    def as_score_track(self) -> ScoreTrack:
        return ScoreTrack(segment_id=self.segment_id, scores=self.scores)

    def __len__(self) -> int:
        return self.scores.size


def quavf_fuse(v: float, a: float, q: float) -> float:
    """Weighted sum of branch scores; the vision weight is the face quality."""
    for name, value in (("vision score", v), ("audio score", a), ("quality", q)):
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return q * v + (1.0 - q) * a


def fuse_tracks(vision: ScoreTrack, audio: ScoreTrack, quality: QualityTrack) -> FusedTrack:
    """Elementwise quality-weighted fusion; q=0 frames pass the audio score through."""
    if not (vision.segment_id == audio.segment_id == quality.segment_id):
        raise AlignmentError(
            f"segment ids disagree: vision '{vision.segment_id}', audio '{audio.segment_id}', "
            f"quality '{quality.segment_id}'"
        )
    if not (len(vision) == len(audio) == len(quality)):
        raise AlignmentError(
            f"track lengths disagree for segment '{vision.segment_id}': "
            f"vision {len(vision)}, audio {len(audio)}, quality {len(quality)}"
        )
    q = quality.frame_quality
    fused = np.array(
        [quavf_fuse(v, a, w) for v, a, w in zip(vision.scores, audio.scores, q)]
    )
    return FusedTrack(segment_id=vision.segment_id, scores=fused, weights=q.copy())


def moving_average(scores: Sequence[float], window: int = 25) -> np.ndarray:
    """Centered moving average; the window shrinks at the sequence boundaries.

    Sums run left to right in float64 so results are reproducible down to the
    last bit.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"smoothing window must be odd and >= 1, got {window}")
    values = [float(s) for s in scores]
    n = len(values)
    half = window // 2
    out = np.empty(n, dtype=np.float64)
    for t in range(n):
        lo = max(0, t - half)
        hi = min(n, t + half + 1)
        out[t] = sum(values[lo:hi]) / (hi - lo)
    return out


def smooth_track(track: ScoreTrack, window: int = 25) -> ScoreTrack:
    if window == 1:
        return track
    return ScoreTrack(segment_id=track.segment_id, scores=moving_average(track.scores, window))
