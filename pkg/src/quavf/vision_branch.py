"""Vision-only talking-to-me model over 15-frame face-crop windows.

Crops are downscaled to 32x32 grayscale and encoded independently by a small
conv stack, then a learnable CLS token plus two self-attention layers
aggregate the window; padded or box-less slots are masked out of attention.
The window's face quality can be injected next to the final CLS vector either
as a projected scalar or as a projected one-hot bin vector, and training
samples below a quality threshold are discarded up front.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .blocks import (
    SelfAttentionLayer,
    TrainConfig,
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
from .data import (
    FrameWindow,
    ScoreTrack,
    Segment,
    WINDOW_SIZE,
    WINDOW_STRIDE_S,
    window_positions,
)
from .errors import ConfigError, TrainingError, ValidationError
from .quality import QualityTrack, filter_samples, quantize_quality, window_quality

ENCODER_INPUT = 32
QUALITY_MODES = ("none", "scalar", "quantized")


@dataclass(frozen=True)
class VisionBranchConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    conv_channels: tuple[int, int] = (8, 16)
    quality_mode: str = "quantized"
    n_bins: int = 10
    d_quality: int = 8
    encoder_seed: int = 977
    seed: int = 0

    def __post_init__(self) -> None:
        if self.quality_mode not in QUALITY_MODES:
            raise ConfigError(f"quality_mode must be one of {QUALITY_MODES}")
        if self.quality_mode == "quantized" and self.n_bins < 2:
            raise ConfigError("quantized quality needs at least 2 bins")


class ToyImageEncoder(nn.Module):
    """Two conv + average-pool stages on 32x32 grayscale, then an affine map.

    The output is layer-normalized: a random affine of this size contracts
    features to ~1e-2 scale, which O(1) positional encodings would drown out.
    """

    def __init__(self, d_out: int, conv_channels: tuple[int, int], seed: int):
        super().__init__()
        c1, c2 = conv_channels
        self.conv1 = nn.Conv2d(1, c1, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, kernel_size=3, padding=1)
        side = ENCODER_INPUT // 4
        self.fc = nn.Linear(c2 * side * side, d_out)
        self.norm = nn.LayerNorm(d_out)
        init_parameters(self, seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, 32, 32) -> (B, d_out)."""
        h = torch.tanh(self.conv1(x))
        h = torch.nn.functional.avg_pool2d(h, 2)
        h = torch.tanh(self.conv2(h))
        h = torch.nn.functional.avg_pool2d(h, 2)
        return self.norm(self.fc(h.flatten(1)))


def preprocess_crop(crop: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """H x W x C float image -> (1, 32, 32) grayscale tensor; parameter-free."""
    arr = np.asarray(crop, dtype=np.float64)
    if arr.ndim != 3:
        raise ValidationError(f"crops must be H x W x C, got shape {arr.shape}")
    gray = torch.as_tensor(arr.mean(axis=2), dtype=dtype)[None, :, :]
    return torch.nn.functional.adaptive_avg_pool2d(gray, (ENCODER_INPUT, ENCODER_INPUT))


class VisionBranchModel(nn.Module):
    def __init__(self, config: VisionBranchConfig):
        super().__init__()
        self.config = config
        self.cls_token = nn.Parameter(torch.zeros(config.d_model))
        self.attn1 = SelfAttentionLayer(config.d_model, config.n_heads, config.d_ff)
        self.attn2 = SelfAttentionLayer(config.d_model, config.n_heads, config.d_ff)
        head_in = config.d_model
        if config.quality_mode == "none":
            self.quality_proj = None
        else:
            q_in = 1 if config.quality_mode == "scalar" else config.n_bins
            self.quality_proj = nn.Linear(q_in, config.d_quality)
            head_in += config.d_quality
        self.head = nn.Linear(head_in, 1)
        init_parameters(self, config.seed)
        with torch.no_grad():  # zero head: training starts at the ln(2) plateau
            self.head.weight.zero_()
            self.head.bias.zero_()
        self.encoder = ToyImageEncoder(config.d_model, config.conv_channels, config.encoder_seed)
        self.register_buffer(
            "positions", sinusoidal_positions(WINDOW_SIZE, config.d_model), persistent=False
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def quality_feature(self, q: torch.Tensor) -> torch.Tensor | None:
        if self.config.quality_mode == "none":
            return None
        if self.config.quality_mode == "scalar":
            return self.quality_proj(q[:, None])
        onehots = np.stack([quantize_quality(float(v), self.config.n_bins) for v in q])
        return self.quality_proj(torch.as_tensor(onehots, dtype=self.dtype))

    def window_logits(
        self, features: torch.Tensor, mask: torch.Tensor, q: torch.Tensor
    ) -> torch.Tensor:
        """features: (B, 15, D); mask: (B, 15) True = real slot; q: (B,)."""
        b = features.shape[0]
        tokens = features + self.positions[None, :, :]
        cls = self.cls_token[None, None, :].expand(b, 1, -1)
        x = torch.cat([cls, tokens], dim=1)
        padding = torch.cat(
            [torch.zeros(b, 1, dtype=torch.bool), ~mask], dim=1
        )
        x = self.attn1(x, key_padding_mask=padding)
        x = self.attn2(x, key_padding_mask=padding)
        summary = x[:, 0]
        extra = self.quality_feature(q)
        if extra is not None:
            summary = torch.cat([summary, extra], dim=1)
        return self.head(summary).squeeze(-1)


def build_vision_branch(config: VisionBranchConfig | dict) -> VisionBranchModel:
    if isinstance(config, dict):
        config = dict(config)
        config["conv_channels"] = tuple(config.get("conv_channels", (8, 16)))
        config = VisionBranchConfig(**config)
    return VisionBranchModel(config)


register_model_kind("vision_branch", build_vision_branch)


def save(model: VisionBranchModel, path, history=None) -> None:
    save_checkpoint(path, "vision_branch", asdict(model.config), model, history)


def encode_windows(model: VisionBranchModel, windows: Sequence[FrameWindow]) -> torch.Tensor:
    """Encode crops of several windows into (B, 15, d_model) features."""
    flat = torch.stack(
        [preprocess_crop(c, model.dtype) for w in windows for c in w.crops]
    )
    feats = model.encoder(flat)
    return feats.view(len(windows), WINDOW_SIZE, -1)


def forward(model: VisionBranchModel, window: FrameWindow, q: float) -> float:
    """Score in (0, 1) for the window's target frame, given its sample quality."""
    if not 0.0 <= q <= 1.0:
        raise ValidationError(f"sample quality must lie in [0, 1], got {q}")
    with torch.no_grad():
        feats = encode_windows(model, [window])
        mask = torch.as_tensor(window.mask, dtype=torch.bool)[None, :]
        logits = model.window_logits(feats, mask, torch.as_tensor([q], dtype=model.dtype))
        return float(torch.sigmoid(logits)[0])


@dataclass(frozen=True)
class VisionSample:
    """One training sample: a target frame and its window quality."""

    segment_pos: int
    target: int
    label: int
    quality: float


def build_samples(
    segments: Sequence[Segment],
    quality_tracks: Mapping[str, QualityTrack],
    stride_s: float = WINDOW_STRIDE_S,
) -> list[VisionSample]:
    samples = []
    for pos, segment in enumerate(segments):
        track = quality_tracks.get(segment.id)
        if track is None:
            raise ValidationError(f"no quality track for segment '{segment.id}'")
        for target in range(segment.n_frames):
            samples.append(
                VisionSample(
                    segment_pos=pos,
                    target=target,
                    label=segment.frames[target].label,
                    quality=window_quality(segment, track, target, stride_s),
                )
            )
    return samples


class _WindowFeatures:
    """Per-frame crop features for a list of segments.

    With a frozen encoder the features are computed once outside the graph;
    when fine-tuning, preprocessed crops are kept instead and encoded inside
    the training graph on every use.  Slots that are padded or box-less get a
    zero feature; the attention mask keeps them out of the computation.
    """

    def __init__(self, model: VisionBranchModel, segments: Sequence[Segment], fine_tune: bool,
                 stride_s: float = WINDOW_STRIDE_S):
        self.model = model
        self.segments = segments
        self.fine_tune = fine_tune
        self.stride_s = stride_s
        self.d_model = model.config.d_model
        self._frame_features: list[torch.Tensor] = []
        self._frame_pixels: list[torch.Tensor] = []
        self._positions: list[list[tuple[np.ndarray, np.ndarray]]] = []
        for segment in segments:
            pixels, boxed = self._segment_pixels(segment)
            if fine_tune:
                self._frame_pixels.append(pixels)
            else:
                with torch.no_grad():
                    feats = model.encoder(pixels)
                    feats[~boxed] = 0.0
                self._frame_features.append(feats)
            self._positions.append(
                [window_positions(segment, t, stride_s) for t in range(segment.n_frames)]
            )

    def _segment_pixels(self, segment: Segment) -> tuple[torch.Tensor, torch.Tensor]:
        zero = torch.zeros(1, ENCODER_INPUT, ENCODER_INPUT, dtype=self.model.dtype)
        pixels, boxed = [], []
        for frame in segment.frames:
            crop = frame.load_crop()
            pixels.append(zero if crop is None else preprocess_crop(crop, self.model.dtype))
            boxed.append(crop is not None)
        return torch.stack(pixels), torch.as_tensor(boxed, dtype=torch.bool)

    def mask_for(self, seg_pos: int, target: int) -> np.ndarray:
        indices, in_range = self._positions[seg_pos][target]
        segment = self.segments[seg_pos]
        has_box = np.array([segment.frames[int(i)].has_box for i in indices])
        return in_range & has_box

    def batch(
        self, keys: Sequence[tuple[int, int]]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Window features and masks for (segment_pos, target) keys."""
        masks = np.stack([self.mask_for(sp, t) for sp, t in keys])
        mask_t = torch.as_tensor(masks, dtype=torch.bool)
        if self.fine_tune:
            pix = torch.stack(
                [self._frame_pixels[sp][self._positions[sp][t][0]] for sp, t in keys]
            )
            feats = self.model.encoder(pix.view(-1, 1, ENCODER_INPUT, ENCODER_INPUT))
            feats = feats.view(len(keys), WINDOW_SIZE, self.d_model)
            feats = feats * mask_t[:, :, None].to(feats.dtype)
        else:
            feats = torch.stack(
                [self._frame_features[sp][self._positions[sp][t][0]] for sp, t in keys]
            )
            feats = feats * mask_t[:, :, None].to(feats.dtype)
        return feats, mask_t


def train(
    model: VisionBranchModel,
    segments: list[Segment],
    quality_tracks: Mapping[str, QualityTrack],
    threshold: float,
    hyper: TrainConfig,
    fine_tune: bool = False,
    stride_s: float = WINDOW_STRIDE_S,
) -> list[float]:
    """BCE on the window's target-frame label over quality-filtered samples."""
    segments = sorted(segments, key=lambda s: s.id)
    samples = filter_samples(
        build_samples(segments, quality_tracks, stride_s), threshold, lambda s: s.quality
    )
    if not samples:
        raise ConfigError(
            f"quality filter at tau={threshold} retained no training samples"
        )
    for p in model.encoder.parameters():
        p.requires_grad_(fine_tune)
    features = _WindowFeatures(model, segments, fine_tune, stride_s)
    optimizer = make_optimizer(model, hyper)
    rng = np.random.default_rng(hyper.seed)
    targets_all = hyper.targets(torch.as_tensor([s.label for s in samples], dtype=model.dtype))
    quals_all = torch.as_tensor([s.quality for s in samples], dtype=model.dtype)
    curve: list[float] = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(samples))
        sample_losses = np.empty(len(samples))
        for batch_no, batch in enumerate(chunked(order.tolist(), hyper.batch_size)):
            optimizer.zero_grad()
            keys = [(samples[i].segment_pos, samples[i].target) for i in batch]
            feats, masks = features.batch(keys)
            logits = model.window_logits(feats, masks, quals_all[batch])
            per_sample = torch.nn.functional.binary_cross_entropy_with_logits(
                logits, targets_all[batch], reduction="none"
            )
            loss = per_sample.mean()
            loss.backward()
            check_finite_loss(float(loss.item()), epoch, batch_no)
            clip_and_step(model, optimizer, hyper)
            sample_losses[batch] = per_sample.detach().double().numpy()
        curve.append(float(sample_losses.mean()))
    return curve


def predict_segment(
    model: VisionBranchModel,
    segment: Segment,
    quality_track: QualityTrack,
    stride_s: float = WINDOW_STRIDE_S,
) -> ScoreTrack:
    """Per-frame vision scores for the whole segment."""
    with torch.no_grad():
        features = _WindowFeatures(model, [segment], fine_tune=False, stride_s=stride_s)
        keys = [(0, t) for t in range(segment.n_frames)]
        feats, masks = features.batch(keys)
        q = torch.as_tensor(
            [window_quality(segment, quality_track, t, stride_s) for t in range(segment.n_frames)],
            dtype=model.dtype,
        )
        scores = torch.sigmoid(model.window_logits(feats, masks, q))
    return ScoreTrack(segment_id=segment.id, scores=scores.double().numpy())
