"""Early-fusion audio-vision baseline.

Audio features of the window's 7.5 s span are average-pooled to 15 tokens and
concatenated along time with the 15 per-frame vision tokens; a per-token MLP
fuses them (modality-type embeddings are added first, since the MLP cannot
otherwise tell the halves apart), and two self-attention layers over CLS + 30
tokens feed a single head scoring the center frame.  Missing boxes enter as
zero crops with no attention masking, which is exactly how bad visual data
drags this model down.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .audio_branch import FEATURES_PER_SECOND, MAX_FEATURES, ToyAudioEncoder
from .audio_features import TARGET_SECONDS, log_mel_prefix
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
from .data import (
    AudioClip,
    FrameWindow,
    ScoreTrack,
    Segment,
    WINDOW_SIZE,
    WINDOW_STRIDE_S,
    window_positions,
)
from .errors import TrainingError, ValidationError
from .vision_branch import ENCODER_INPUT, ToyImageEncoder, preprocess_crop


@dataclass(frozen=True)
class AVJointConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    d_hidden: int = 128
    conv_channels: tuple[int, int] = (8, 16)
    audio_encoder_seed: int = 1234
    image_encoder_seed: int = 977
    seed: int = 0


class AVJointModel(nn.Module):
    def __init__(self, config: AVJointConfig):
        super().__init__()
        self.config = config
        self.type_embed = nn.Parameter(torch.zeros(2, config.d_model))
        self.fuse_in = nn.Linear(config.d_model, config.d_hidden)
        self.fuse_out = nn.Linear(config.d_hidden, config.d_model)
        self.cls_token = nn.Parameter(torch.zeros(config.d_model))
        self.attn1 = SelfAttentionLayer(config.d_model, config.n_heads, config.d_ff)
        self.attn2 = SelfAttentionLayer(config.d_model, config.n_heads, config.d_ff)
        self.head = nn.Linear(config.d_model, 1)
        init_parameters(self, config.seed)
        with torch.no_grad():  # zero head: training starts at the ln(2) plateau
            self.head.weight.zero_()
            self.head.bias.zero_()
        self.audio_encoder = ToyAudioEncoder(config.d_model, config.audio_encoder_seed)
        self.image_encoder = ToyImageEncoder(
            config.d_model, config.conv_channels, config.image_encoder_seed
        )
        self.register_buffer(
            "positions", sinusoidal_positions(2 * WINDOW_SIZE, config.d_model), persistent=False
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def audio_tokens(self, clip: AudioClip) -> torch.Tensor:
        """Pool the clip's real feature span down to 15 tokens."""
        n_real = int(math.ceil(min(clip.duration, TARGET_SECONDS) * FEATURES_PER_SECOND))
        n_real = max(1, min(n_real, MAX_FEATURES))
        if n_real < WINDOW_SIZE:
            raise ValidationError(
                f"window audio too short: {clip.duration:.3f}s yields {n_real} features, "
                f"need at least {WINDOW_SIZE}"
            )
        mel_cols = log_mel_prefix(clip, 2 * n_real)
        features = self.audio_encoder(torch.as_tensor(mel_cols, dtype=self.dtype))
        return adaptive_avg_pool_rows(features, WINDOW_SIZE)

    def fuse_tokens(self, audio: torch.Tensor, vision: torch.Tensor) -> torch.Tensor:
        """(B, 15, D) + (B, 15, D) -> CLS-prefixed fused sequence (B, 31, D)."""
        a = audio + self.type_embed[0] + self.positions[None, :WINDOW_SIZE]
        v = vision + self.type_embed[1] + self.positions[None, WINDOW_SIZE:]
        seq = torch.cat([a, v], dim=1)
        seq = self.fuse_out(torch.nn.functional.gelu(self.fuse_in(seq)))
        cls = self.cls_token[None, None, :].expand(seq.shape[0], 1, -1)
        return torch.cat([cls, seq], dim=1)

    def fused_logits(self, audio: torch.Tensor, vision: torch.Tensor) -> torch.Tensor:
        x = self.fuse_tokens(audio, vision)
        x = self.attn1(x)
        x = self.attn2(x)
        return self.head(x[:, 0]).squeeze(-1)


def build_av_joint(config: AVJointConfig | dict) -> AVJointModel:
    if isinstance(config, dict):
        config = dict(config)
        config["conv_channels"] = tuple(config.get("conv_channels", (8, 16)))
        config = AVJointConfig(**config)
    return AVJointModel(config)


register_model_kind("av_joint", build_av_joint)


def save(model: AVJointModel, path, history=None) -> None:
    save_checkpoint(path, "av_joint", asdict(model.config), model, history)


def window_audio_clip(
    segment: Segment, target: int, clip: AudioClip | None = None,
    stride_s: float = WINDOW_STRIDE_S,
) -> AudioClip:
    """The segment audio restricted to the window's 7.5 s extent."""
    if clip is None:
        clip = segment.load_audio()
    t = segment.frames[target].timestamp
    half = WINDOW_SIZE * stride_s / 2.0
    lo = max(0.0, t - half)
    hi = min(clip.duration, t + half)
    lo_i = int(round(lo * clip.sample_rate))
    hi_i = max(lo_i + 1, int(round(hi * clip.sample_rate)))
    return AudioClip(samples=clip.samples[lo_i:hi_i], sample_rate=clip.sample_rate)


def forward(model: AVJointModel, window: FrameWindow, clip: AudioClip) -> float:
    """Score in (0, 1) for the window's target frame.

    The clip must cover exactly the window's time span (see
    :func:`window_audio_clip`).
    """
    with torch.no_grad():
        audio = model.audio_tokens(clip)[None, :, :]
        crops = torch.stack([preprocess_crop(c, model.dtype) for c in window.crops])
        vision = model.image_encoder(crops)[None, :, :]
        return float(torch.sigmoid(model.fused_logits(audio, vision))[0])


class _JointFeatures:
    """Cached per-window audio tokens and per-frame vision inputs.

    The audio encoder is always frozen, so each window's pooled tokens are
    computed once.  Vision features are cached when the image encoder is
    frozen; otherwise preprocessed pixels are kept and encoded in-graph.
    Slots without a box (or out of range) are zero images, not masked.
    """

    def __init__(self, model: AVJointModel, segments: Sequence[Segment], fine_tune: bool,
                 stride_s: float = WINDOW_STRIDE_S):
        self.model = model
        self.segments = segments
        self.fine_tune = fine_tune
        self._audio: list[torch.Tensor] = []
        self._vision_feats: list[torch.Tensor] = []
        self._vision_pixels: list[torch.Tensor] = []
        self._slots: list[list[np.ndarray]] = []
        zero_img = torch.zeros(1, ENCODER_INPUT, ENCODER_INPUT, dtype=model.dtype)
        for segment in segments:
            clip = segment.load_audio()
            with torch.no_grad():
                tokens = torch.stack(
                    [
                        model.audio_tokens(window_audio_clip(segment, t, clip, stride_s))
                        for t in range(segment.n_frames)
                    ]
                )
            self._audio.append(tokens)

            # slot -> frame-array index; index n_frames is the zero image
            pixels = []
            for frame in segment.frames:
                crop = frame.load_crop()
                pixels.append(zero_img if crop is None else preprocess_crop(crop, model.dtype))
            pixels.append(zero_img)
            stack = torch.stack(pixels)
            slots = []
            for t in range(segment.n_frames):
                indices, in_range = window_positions(segment, t, stride_s)
                usable = np.where(
                    in_range & np.array([segment.frames[int(i)].has_box for i in indices]),
                    indices,
                    segment.n_frames,
                )
                slots.append(usable)
            self._slots.append(slots)
            if fine_tune:
                self._vision_pixels.append(stack)
            else:
                with torch.no_grad():
                    self._vision_feats.append(model.image_encoder(stack))

    def batch(self, keys: Sequence[tuple[int, int]]) -> tuple[torch.Tensor, torch.Tensor]:
        audio = torch.stack([self._audio[sp][t] for sp, t in keys])
        if self.fine_tune:
            pix = torch.stack(
                [self._vision_pixels[sp][self._slots[sp][t]] for sp, t in keys]
            )
            vision = self.model.image_encoder(pix.view(-1, 1, ENCODER_INPUT, ENCODER_INPUT))
            vision = vision.view(len(keys), WINDOW_SIZE, -1)
        else:
            vision = torch.stack(
                [self._vision_feats[sp][self._slots[sp][t]] for sp, t in keys]
            )
        return audio, vision


def train(
    model: AVJointModel,
    segments: list[Segment],
    hyper: TrainConfig,
    fine_tune: bool = False,
    stride_s: float = WINDOW_STRIDE_S,
) -> list[float]:
    """BCE on the target-frame label over every (segment, frame) window."""
    if not segments:
        raise TrainingError("av joint: empty training set")
    segments = sorted(segments, key=lambda s: s.id)
    for p in model.image_encoder.parameters():
        p.requires_grad_(fine_tune)
    features = _JointFeatures(model, segments, fine_tune, stride_s)
    keys = [(sp, t) for sp, s in enumerate(segments) for t in range(s.n_frames)]
    targets_all = hyper.targets(
        torch.as_tensor([segments[sp].frames[t].label for sp, t in keys], dtype=model.dtype)
    )
    optimizer = make_optimizer(model, hyper)
    rng = np.random.default_rng(hyper.seed)
    curve: list[float] = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(keys))
        sample_losses = np.empty(len(keys))
        for batch_no, batch in enumerate(chunked(order.tolist(), hyper.batch_size)):
            optimizer.zero_grad()
            audio, vision = features.batch([keys[i] for i in batch])
            logits = model.fused_logits(audio, vision)
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
    model: AVJointModel, segment: Segment, stride_s: float = WINDOW_STRIDE_S
) -> ScoreTrack:
    with torch.no_grad():
        features = _JointFeatures(model, [segment], fine_tune=False, stride_s=stride_s)
        keys = [(0, t) for t in range(segment.n_frames)]
        audio, vision = features.batch(keys)
        scores = torch.sigmoid(model.fused_logits(audio, vision))
    return ScoreTrack(segment_id=segment.id, scores=scores.double().numpy())
