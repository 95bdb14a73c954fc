"""Face quality scores from landmark confidences: filtering and features.

A frame's quality is the mean confidence over its landmark points (0 when the
frame has no face box).  A sample's quality is the mean over all 15 window
slots, with padded or missing slots contributing 0.  Qualities gate training
data (strict threshold) and feed the models either as a scalar or as a one-hot
bin vector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence, TypeVar

import numpy as np

from .data import Frame, Segment, WINDOW_SIZE, WINDOW_STRIDE_S, window_positions
from .errors import ConfigError, ValidationError

N_LANDMARKS = 68

T = TypeVar("T")


class ConfidenceProvider(Protocol):
    """Source of per-landmark confidences for a frame's face crop."""

    def confidences(self, segment_id: str, frame: Frame) -> Sequence[float]:
        """Confidences in [0, 1] for a frame that has a box."""
        ...


class SidecarProvider:
    """Reads ground-truth landmark confidences from a ``landmarks.json`` sidecar."""

    def __init__(self, path: Path | str):
        self._table = json.loads(Path(path).read_text())

    def confidences(self, segment_id: str, frame: Frame) -> Sequence[float]:
        try:
            return self._table[segment_id][str(frame.index)]
        except KeyError as exc:
            raise ValidationError(
                f"no landmark confidences for segment '{segment_id}' frame {frame.index}"
            ) from exc


class ConstantProvider:
    """Fixed confidence for every landmark point; handy in tests."""

    def __init__(self, value: float, n_points: int = N_LANDMARKS):
        self.value = value
        self.n_points = n_points

    def confidences(self, segment_id: str, frame: Frame) -> Sequence[float]:
        return [self.value] * self.n_points


@dataclass(frozen=True)
class QualityTrack:
    """Per-frame face quality for one segment; missing-box frames score 0."""

    segment_id: str
    frame_quality: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.frame_quality, dtype=np.float64)
        object.__setattr__(self, "frame_quality", q)
        if q.ndim != 1 or q.size == 0:
            raise ValidationError(f"quality track '{self.segment_id}': need a non-empty 1-D array")
        if q.min() < 0.0 or q.max() > 1.0:
            raise ValidationError(f"quality track '{self.segment_id}': values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.frame_quality.size


def frame_quality(confidences: Sequence[float]) -> float:
    """Mean landmark confidence; an empty list (no box) scores 0."""
    values = np.asarray(confidences, dtype=np.float64)
    if values.size == 0:
        return 0.0
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValidationError("landmark confidences must lie in [0, 1]")
    return float(values.mean())


def sample_quality(frame_qualities: Sequence[float]) -> float:
    """Mean frame quality over a sample's window entries."""
    values = np.asarray(frame_qualities, dtype=np.float64)
    if values.size == 0:
        raise ValidationError("a sample must include at least one frame")
    return float(values.mean())


def filter_samples(
    samples: Sequence[T],
    threshold: float,
    quality_of: Callable[[T], float] | None = None,
) -> list[T]:
    """Retain samples with quality strictly above the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"filter threshold must lie in [0, 1], got {threshold}")
    get = quality_of if quality_of is not None else (lambda s: s.quality)
    return [s for s in samples if get(s) > threshold]


def quantize_quality(q: float, n_bins: int = 10) -> np.ndarray:
    """One-hot vector marking which of the n uniform bins q falls into."""
    if n_bins < 2:
        raise ConfigError(f"need at least 2 quality bins, got {n_bins}")
    if not 0.0 <= q <= 1.0:
        raise ValidationError(f"quality must lie in [0, 1], got {q}")
    hot = min(int(np.floor(q * n_bins)), n_bins - 1)
    vec = np.zeros(n_bins, dtype=np.float64)
    vec[hot] = 1.0
    return vec


def segment_frame_quality(segment: Segment, provider: ConfidenceProvider) -> QualityTrack:
    """Per-frame quality for a segment; frames without a box score 0."""
    qualities = np.zeros(segment.n_frames, dtype=np.float64)
    for i, frame in enumerate(segment.frames):
        if frame.has_box:
            qualities[i] = frame_quality(provider.confidences(segment.id, frame))
    return QualityTrack(segment_id=segment.id, frame_quality=qualities)


def window_quality(
    segment: Segment,
    track: QualityTrack,
    target: int,
    stride_s: float = WINDOW_STRIDE_S,
) -> float:
    """Sample quality of the 15-slot window centered on the target frame."""
    indices, in_range = window_positions(segment, target, stride_s)
    values = np.zeros(WINDOW_SIZE, dtype=np.float64)
    for j, i in enumerate(indices):
        if in_range[j] and segment.frames[int(i)].has_box:
            values[j] = track.frame_quality[int(i)]
    return sample_quality(values)


def windowed_quality_track(
    segment: Segment, track: QualityTrack, stride_s: float = WINDOW_STRIDE_S
) -> QualityTrack:
    """Per-frame fusion weights: the window quality centered at every frame."""
    if len(track) != segment.n_frames:
        raise ValidationError(
            f"quality track '{track.segment_id}' length {len(track)} does not match "
            f"segment '{segment.id}' with {segment.n_frames} frames"
        )
    values = np.array(
        [window_quality(segment, track, t, stride_s) for t in range(segment.n_frames)]
    )
    return QualityTrack(segment_id=segment.id, frame_quality=values)
