"""Audio-only talking-to-me model.

A frozen random strided projection stands in for a pretrained speech encoder:
it maps non-overlapping pairs of log-mel columns to one feature vector, i.e.
50 features per second.  One trainable self-attention layer refines the
sequence (with sinusoidal positions), adaptive average pooling aligns it to
the labeled frame count, and a per-frame affine head emits logits.

Only the real (pre-padding) feature span enters attention and pooling, so
frame i of the output always covers frame i of the label timeline.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .audio_features import (
    DEFAULT_MEL_PARAMS,
    TARGET_SECONDS,
    add_noise,
    draw_crop_span,
    log_mel_prefix,
)
from .blocks import (
    SelfAttentionLayer,
    TrainConfig,
    adaptive_avg_pool_rows,
    bce_with_logits,
    check_finite_loss,
    chunked,
    clip_and_step,
    init_parameters,
    make_optimizer,
    register_model_kind,
    save_checkpoint,
    sinusoidal_positions,
)
from .data import AudioClip, Segment
from .errors import ConfigError, TrainingError, ValidationError

FEATURES_PER_SECOND = 50
MAX_FEATURES = int(FEATURES_PER_SECOND * TARGET_SECONDS)

# Log-mel values live in [-10, ~2]; shift/scale them to roughly unit range
# before the random projection so tanh stays out of saturation.
MEL_SHIFT = 10.0
MEL_SCALE = 5.0


@dataclass(frozen=True)
class AudioBranchConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    encoder_seed: int = 1234
    seed: int = 0


@dataclass(frozen=True)
class AudioAugmentation:
    """Waveform augmentations applied per training draw (crop, then noise)."""

    crop_p: float = 0.0
    crop_min_s: float = 3.0
    noise_snr_db: tuple[float, float] | None = None


class ToyAudioEncoder(nn.Module):
    """Frozen seed-pinned linear map over pairs of mel columns, plus tanh."""

    def __init__(self, d_out: int, seed: int):
        super().__init__()
        self.proj = nn.Linear(2 * DEFAULT_MEL_PARAMS.n_mels, d_out)
        init_parameters(self, seed)
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True

    def forward(self, mel_values: torch.Tensor) -> torch.Tensor:
        """(n_mels, T) -> (T // 2, d_out)."""
        n_mels, t = mel_values.shape
        scaled = (mel_values + MEL_SHIFT) / MEL_SCALE - 1.0
        pairs = scaled.T.reshape(t // 2, 2 * n_mels)
        return torch.tanh(self.proj(pairs))


class AudioBranchModel(nn.Module):
    def __init__(self, config: AudioBranchConfig):
        super().__init__()
        self.config = config
        self.encoder = ToyAudioEncoder(config.d_model, config.encoder_seed)
        self.refine = SelfAttentionLayer(config.d_model, config.n_heads, config.d_ff)
        self.head = nn.Linear(config.d_model, 1)
        init_parameters(self.refine, config.seed)
        with torch.no_grad():  # zero head: training starts at the ln(2) plateau
            self.head.weight.zero_()
            self.head.bias.zero_()
        self.register_buffer(
            "positions", sinusoidal_positions(MAX_FEATURES, config.d_model), persistent=False
        )

    def real_feature_count(self, duration_s: float) -> int:
        """Features covering the clip's true span; padding is excluded."""
        n = int(math.ceil(min(duration_s, TARGET_SECONDS) * FEATURES_PER_SECOND))
        return max(1, min(n, MAX_FEATURES))

    def refine_features(self, features: torch.Tensor) -> torch.Tensor:
        """Add positions and run the attention layer over (T, d_model)."""
        x = features + self.positions[: features.shape[0]]
        return self.refine(x.unsqueeze(0)).squeeze(0)

    def frame_logits(self, clip: AudioClip, n_frames: int) -> torch.Tensor:
        n_real = self.real_feature_count(clip.duration)
        mel_cols = log_mel_prefix(clip, 2 * n_real)
        dtype = self.head.weight.dtype
        features = self.encoder(torch.as_tensor(mel_cols, dtype=dtype))
        refined = self.refine_features(features)
        pooled = adaptive_avg_pool_rows(refined, n_frames)
        return self.head(pooled).squeeze(-1)


def build_audio_branch(config: AudioBranchConfig | dict) -> AudioBranchModel:
    if isinstance(config, dict):
        config = AudioBranchConfig(**config)
    return AudioBranchModel(config)


register_model_kind("audio_branch", build_audio_branch)


def save(model: AudioBranchModel, path, history=None) -> None:
    save_checkpoint(path, "audio_branch", asdict(model.config), model, history)


def adaptive_pool(features: np.ndarray, n_out: int) -> np.ndarray:
    """Average contiguous (possibly one-row-overlapping) windows to n_out rows."""
    pooled = adaptive_avg_pool_rows(torch.as_tensor(np.asarray(features, dtype=np.float64)), n_out)
    return pooled.numpy()


def forward(model: AudioBranchModel, clip: AudioClip, n_frames: int) -> np.ndarray:
    """Per-frame scores in (0, 1) for the clip's n_frames labeled frames."""
    if n_frames < 1:
        raise ValidationError(f"need n_frames >= 1, got {n_frames}")
    with torch.no_grad():
        logits = model.frame_logits(clip, n_frames)
        return torch.sigmoid(logits).double().numpy()


def predict_segment(model: AudioBranchModel, segment: Segment) -> np.ndarray:
    return forward(model, segment.load_audio(), segment.n_frames)


def _augmented_sample(
    segment: Segment, augment: AudioAugmentation | None, rng: np.random.Generator
) -> tuple[AudioClip, np.ndarray] | None:
    """Apply the augmentation chain; returns the clip plus the labels it covers."""
    clip = segment.load_audio()
    labels = segment.labels
    if augment is not None and augment.crop_p > 0.0:
        start, stop = draw_crop_span(
            clip.samples.size, clip.sample_rate, augment.crop_p, augment.crop_min_s, rng
        )
        if (start, stop) != (0, clip.samples.size):
            ts = segment.timestamps
            lo = int(np.searchsorted(ts, start / clip.sample_rate, side="left"))
            hi = int(np.searchsorted(ts, stop / clip.sample_rate, side="right"))
            if hi <= lo:
                return None
            clip = AudioClip(clip.samples[start:stop], clip.sample_rate)
            labels = labels[lo:hi]
    if augment is not None and augment.noise_snr_db is not None:
        clip = add_noise(clip, augment.noise_snr_db, rng)
    return clip, labels


def train(
    model: AudioBranchModel,
    segments: list[Segment],
    hyper: TrainConfig,
    augment: AudioAugmentation | None = None,
) -> list[float]:
    """Minimize per-frame BCE with SGD momentum; returns epoch mean losses."""
    if not segments:
        raise TrainingError("audio branch: empty training set")
    segments = sorted(segments, key=lambda s: s.id)
    rng = np.random.default_rng(hyper.seed)
    optimizer = make_optimizer(model, hyper)
    curve: list[float] = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(segments))
        sample_losses = np.full(len(segments), np.nan)
        for batch_no, batch in enumerate(chunked(order.tolist(), hyper.batch_size)):
            optimizer.zero_grad()
            contributions = 0
            for idx in batch:
                drawn = _augmented_sample(segments[idx], augment, rng)
                if drawn is None:
                    continue  # crop span covered no labeled frame; skip this draw
                clip, labels = drawn
                logits = model.frame_logits(clip, len(labels))
                loss = bce_with_logits(
                    logits, hyper.targets(torch.as_tensor(labels, dtype=logits.dtype))
                )
                (loss / len(batch)).backward()
                value = float(loss.item())
                check_finite_loss(value, epoch, batch_no)
                sample_losses[idx] = value
                contributions += 1
            if contributions:
                clip_and_step(model, optimizer, hyper)
        if np.all(np.isnan(sample_losses)):
            raise TrainingError(f"audio branch: no usable sample in epoch {epoch}")
        curve.append(float(np.nanmean(sample_losses)))
    return curve
