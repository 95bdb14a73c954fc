"""Deterministic synthetic talking-to-me segments.

Each segment alternates talking / non-talking label runs (geometric lengths).
While the label is positive the audio carries a 440 Hz harmonic tone over a
constant Gaussian noise bed, and the synthetic face's mouth flips between
bright and dark on alternating frames; negative stretches play either noise
alone or a detuned 523 Hz tone, with a static mouth.  Visually corrupted
segments replace every crop with uniform pixel noise, and a per-frame dropout
knob removes boxes (and crops) while keeping labels, as in real egocentric
data where audio annotation outlives the face track.

A ``landmarks.json`` sidecar carries ground-truth landmark confidences
(~0.9 for intact faces, ~0.05 for noise crops) consumed by the quality module.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CANONICAL_SAMPLE_RATE, write_manifest, write_wav, write_crop
from .errors import ConfigError
from .quality import N_LANDMARKS

TONE_HZ = 440.0
DETUNED_HZ = 466.16
TONE_AMP = 0.30
HARMONIC_AMP = 0.12
MOUTH_CLOSED = 0.55
MOUTH_OPEN = 0.25
PIXEL_NOISE = 0.08
INTACT_CONFIDENCE = 0.90
CORRUPT_CONFIDENCE = 0.05


@dataclass(frozen=True)
class SynthConfig:
    n_segments: int = 200
    frames_per_segment: int = 48
    frame_rate: float = 2.0
    crop_size: int = 64
    p_box_dropout: float = 0.0
    p_visual_corrupt: float = 0.0
    snr_clean_db: float = 20.0
    mean_run_frames: float = 128.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_segments < 1 or self.frames_per_segment < 1:
            raise ConfigError("segment and frame counts must be >= 1")
        if self.crop_size < 8:
            raise ConfigError(f"crop size must be >= 8 pixels, got {self.crop_size}")
        if self.frame_rate <= 0:
            raise ConfigError("frame rate must be positive")
        for name in ("p_box_dropout", "p_visual_corrupt"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.mean_run_frames < 1:
            raise ConfigError("mean run length must be >= 1 frame")


def generate(config: SynthConfig, out_dir: Path | str) -> Path:
    """Write a full dataset under out_dir and return the manifest path.

    The random stream is derived per segment from (seed, segment index), so
    output does not depend on generation order.
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    crops_dir = out_dir / "crops"
    audio_dir.mkdir(parents=True, exist_ok=True)
    crops_dir.mkdir(parents=True, exist_ok=True)

    records = []
    landmarks: dict[str, dict[str, list[float]]] = {}
    for index in range(config.n_segments):
        seg_id = f"seg{index:04d}"
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, index)))
        record, confidences = _generate_segment(config, seg_id, rng, out_dir)
        records.append(record)
        landmarks[seg_id] = confidences

    manifest_path = out_dir / "manifest.json"
    write_manifest(records, manifest_path)
    (out_dir / "landmarks.json").write_text(json.dumps(landmarks) + "\n")
    return manifest_path


def _generate_segment(
    config: SynthConfig, seg_id: str, rng: np.random.Generator, out_dir: Path
) -> tuple[dict, dict[str, list[float]]]:
    n = config.frames_per_segment
    corrupted = bool(rng.random() < config.p_visual_corrupt)
    labels, detuned = _label_runs(n, config.mean_run_frames, rng)
    face = _face_layout(config.crop_size, rng)
    dropped = rng.random(n) < config.p_box_dropout

    audio_rel = f"audio/{seg_id}.wav"
    write_wav(
        out_dir / audio_rel,
        _segment_audio(labels, detuned, config, rng),
        CANONICAL_SAMPLE_RATE,
    )

    seg_crop_dir = out_dir / "crops" / seg_id
    frames = []
    confidences: dict[str, list[float]] = {}
    for i in range(n):
        frame: dict = {
            "index": i,
            "timestamp": i / config.frame_rate,
            "label": int(labels[i]),
        }
        if not dropped[i]:
            if corrupted:
                crop = _noise_crop(config.crop_size, rng)
                level = CORRUPT_CONFIDENCE
            else:
                bob = rng.integers(-2, 3, size=2)
                gain = float(rng.uniform(0.8, 1.2))
                crop = _face_crop(face, config.crop_size, labels[i], i, bob) * gain
                crop = crop + _blotches(config.crop_size, rng)
                crop = np.clip(crop + rng.normal(0.0, PIXEL_NOISE, crop.shape), 0.0, 1.0)
                level = INTACT_CONFIDENCE
            seg_crop_dir.mkdir(parents=True, exist_ok=True)
            crop_rel = f"crops/{seg_id}/f{i:04d}.png"
            write_crop(out_dir / crop_rel, crop)
            frame["box"] = {
                "x": float(face["box_x"]), "y": float(face["box_y"]),
                "w": float(config.crop_size), "h": float(config.crop_size),
            }
            frame["crop_path"] = crop_rel
            conf = np.clip(level + rng.uniform(-0.04, 0.04, N_LANDMARKS), 0.0, 1.0)
            confidences[str(i)] = [float(c) for c in conf]
        frames.append(frame)

    record = {
        "id": seg_id,
        "frame_rate": config.frame_rate,
        "audio_path": audio_rel,
        "frames": frames,
    }
    return record, confidences


def _label_runs(
    n: int, mean_run: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame labels and, for negative frames, whether their run is detuned."""
    labels = np.zeros(n, dtype=np.int64)
    detuned = np.zeros(n, dtype=bool)
    label = int(rng.integers(0, 2))
    pos = 0
    while pos < n:
        run = int(rng.geometric(1.0 / mean_run))
        end = min(n, pos + run)
        labels[pos:end] = label
        if label == 0:
            detuned[pos:end] = rng.random() < 0.5
        pos = end
        label = 1 - label
    return labels, detuned


def _segment_audio(
    labels: np.ndarray,
    detuned: np.ndarray,
    config: SynthConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    sr = CANONICAL_SAMPLE_RATE
    n_samples = int(round(labels.size / config.frame_rate * sr))
    t = np.arange(n_samples) / sr
    tone = np.zeros(n_samples)
    span = sr / config.frame_rate
    for i, label in enumerate(labels):
        lo = int(round(i * span))
        hi = min(n_samples, int(round((i + 1) * span)))
        if label == 1:
            freq = TONE_HZ
        elif detuned[i]:
            freq = DETUNED_HZ
        else:
            continue
        seg_t = t[lo:hi]
        tone[lo:hi] = TONE_AMP * np.sin(2 * np.pi * freq * seg_t)
        tone[lo:hi] += HARMONIC_AMP * np.sin(2 * np.pi * 2 * freq * seg_t)

    tone_power = TONE_AMP**2 / 2 + HARMONIC_AMP**2 / 2
    noise_power = tone_power / 10.0 ** (config.snr_clean_db / 10.0)
    noise = np.sqrt(noise_power) * rng.standard_normal(n_samples)
    return np.clip(tone + noise, -1.0, 1.0)


def _noise_crop(crop_size: int, rng: np.random.Generator) -> np.ndarray:
    """Pure block noise: a mid-gray field with scattered dark patches.

    Low spatial frequency survives downscaling, so encoders see scattered
    features rather than one gray attractor.  The dark patches land in the
    open-mouth intensity range at random positions, which is what makes
    training on these crops (whose labels the pixels cannot explain)
    genuinely damaging."""
    block = max(1, crop_size // 8)
    coarse = 0.55 + rng.uniform(-0.13, 0.13, (8, 8, 3))
    n_dark = int(rng.integers(4, 9))
    rows = rng.integers(0, 8, n_dark)
    cols = rng.integers(0, 8, n_dark)
    coarse[rows, cols] = rng.uniform(0.15, 0.35, (n_dark, 3))
    return np.kron(coarse, np.ones((block, block, 1)))[:crop_size, :crop_size]


def _blotches(crop_size: int, rng: np.random.Generator) -> np.ndarray:
    """Mild per-frame blocky shading, shared nuisance of every clean crop.

    Keeping blocky texture inside the clean data's nuisance span makes models
    treat block noise as noise instead of as novel positive evidence.
    """
    block = max(1, crop_size // 8)
    coarse = rng.uniform(-0.10, 0.10, (8, 8, 1))
    return np.kron(coarse, np.ones((block, block, 1)))[:crop_size, :crop_size]


def _face_layout(crop_size: int, rng: np.random.Generator) -> dict:
    jitter = crop_size // 16
    return {
        "cx": crop_size / 2 + rng.integers(-jitter, jitter + 1),
        "cy": crop_size / 2 + rng.integers(-jitter, jitter + 1),
        "radius": crop_size * (0.36 + 0.04 * rng.random()),
        "skin": 0.70 + 0.08 * rng.random(),
        "box_x": float(rng.integers(40, 200)),
        "box_y": float(rng.integers(40, 160)),
    }


def _face_crop(
    face: dict, crop_size: int, label: int, frame_index: int,
    bob: np.ndarray | None = None,
) -> np.ndarray:
    """Cartoon face; a talking mouth opens on alternating frames.

    The whole face bobs by a couple of pixels per frame and the caller jitters
    global illumination, so mere temporal change does not give talking away;
    the periodic dark open-mouth patch does.
    """
    cx = face["cx"] + (bob[0] if bob is not None else 0)
    cy = face["cy"] + (bob[1] if bob is not None else 0)
    yy, xx = np.mgrid[0:crop_size, 0:crop_size]
    img = np.full((crop_size, crop_size), 0.40)
    inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= face["radius"] ** 2
    img[inside] = face["skin"]

    eye_dy = face["radius"] * 0.35
    eye_dx = face["radius"] * 0.40
    eye_r = max(1.5, face["radius"] * 0.12)
    for sx in (-1, 1):
        ex, ey = cx + sx * eye_dx, cy - eye_dy
        img[(xx - ex) ** 2 + (yy - ey) ** 2 <= eye_r**2] = 0.15

    mouth = MOUTH_OPEN if (label == 1 and frame_index % 2 == 1) else MOUTH_CLOSED
    mw = face["radius"] * 0.55
    mh = face["radius"] * 0.22
    my = cy + face["radius"] * 0.45
    mouth_mask = (np.abs(xx - cx) <= mw) & (np.abs(yy - my) <= mh)
    img[mouth_mask & inside] = mouth

    return np.repeat(img[:, :, None], 3, axis=2)
