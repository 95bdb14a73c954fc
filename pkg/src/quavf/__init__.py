"""Talking-to-me detection with quality-aware audio-visual late fusion."""

from . import (  # noqa: F401  (imports register model kinds for checkpoints)
    audio_branch,
    audio_features,
    av_joint,
    blocks,
    data,
    fusion,
    metrics,
    quality,
    synth,
    vision_branch,
)

__version__ = "0.1.0"
