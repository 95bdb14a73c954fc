"""Log-mel spectrograms with pad-to-30s semantics, plus audio augmentations.

The spectrogram recipe is fixed for the whole project: 16 kHz input, 25 ms
periodic Hann window, 10 ms hop, 400-point FFT with centered reflection
padding, 80 triangular HTK-mel filters spanning 0-8000 Hz, and
log10(mel power + 1e-10).  A padded 30 s clip always yields an 80 x 3000
matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import AudioClip, CANONICAL_SAMPLE_RATE
from .errors import ValidationError

TARGET_SECONDS = 30.0
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class MelParams:
    """Spectrogram constants; fixed so outputs are comparable everywhere."""

    sample_rate: int = CANONICAL_SAMPLE_RATE
    n_fft: int = 400
    window: int = 400
    hop: int = 160
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0


DEFAULT_MEL_PARAMS = MelParams()


@dataclass(frozen=True)
class MelSpectrogram:
    """80 x T log-mel matrix; one column per 10 ms hop."""

    values: np.ndarray
    frame_hop_s: float = 0.01

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2 or values.shape[0] != DEFAULT_MEL_PARAMS.n_mels:
            raise ValidationError(
                f"mel spectrogram must be {DEFAULT_MEL_PARAMS.n_mels} x T, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError("mel spectrogram contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def pad_or_trim(clip: AudioClip, target_s: float = TARGET_SECONDS) -> AudioClip:
    """Right-pad with zeros or truncate to exactly target_s seconds."""
    target = int(round(target_s * clip.sample_rate))
    samples = clip.samples
    if samples.size < target:
        samples = np.concatenate([samples, np.zeros(target - samples.size)])
    elif samples.size > target:
        samples = samples[:target]
    return AudioClip(samples=samples, sample_rate=clip.sample_rate)


@lru_cache(maxsize=8)
def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(params: MelParams = DEFAULT_MEL_PARAMS) -> np.ndarray:
    """Triangular filters (n_mels x n_fft//2+1), peak 1, HTK mel spacing."""
    n_bins = params.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * params.sample_rate / params.n_fft
    edges_hz = _mel_to_hz(
        np.linspace(_hz_to_mel(params.fmin), _hz_to_mel(params.fmax), params.n_mels + 2)
    )
    bank = np.zeros((params.n_mels, n_bins))
    for i in range(params.n_mels):
        lo, center, hi = edges_hz[i], edges_hz[i + 1], edges_hz[i + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        bank[i] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def _mel_columns(samples: np.ndarray, n_frames: int, params: MelParams) -> np.ndarray:
    half = params.n_fft // 2
    padded = np.pad(samples, half, mode="reflect")
    starts = np.arange(n_frames) * params.hop
    frames = padded[starts[:, None] + np.arange(params.window)[None, :]]
    spectrum = np.fft.rfft(frames * _hann_periodic(params.window), n=params.n_fft, axis=1)
    mel_power = (np.abs(spectrum) ** 2) @ mel_filterbank(params).T
    return np.log10(mel_power.T + LOG_FLOOR)


def log_mel(clip: AudioClip, params: MelParams = DEFAULT_MEL_PARAMS) -> MelSpectrogram:
    """Pad/trim to 30 s and compute the fixed-shape log-mel spectrogram."""
    if clip.sample_rate != params.sample_rate:
        raise ValidationError(
            f"expected {params.sample_rate} Hz audio, got {clip.sample_rate} Hz"
        )
    samples = pad_or_trim(clip).samples
    return MelSpectrogram(values=_mel_columns(samples, samples.size // params.hop, params))


def log_mel_prefix(
    clip: AudioClip, n_cols: int, params: MelParams = DEFAULT_MEL_PARAMS
) -> np.ndarray:
    """Leading n_cols columns of ``log_mel(clip)``, skipping the transform of
    the zero-padded tail; used where only the real span is consumed."""
    if clip.sample_rate != params.sample_rate:
        raise ValidationError(
            f"expected {params.sample_rate} Hz audio, got {clip.sample_rate} Hz"
        )
    target = int(round(TARGET_SECONDS * params.sample_rate))
    n_cols = min(n_cols, target // params.hop)
    half = params.n_fft // 2
    needed = (n_cols - 1) * params.hop + params.window - half
    if needed > target - half:
        # the trailing columns reach the right reflection edge of the
        # padded-to-30s signal; fall back to the full computation
        samples = pad_or_trim(clip).samples
        return _mel_columns(samples, n_cols, params)
    needed = max(needed, half + 1)
    samples = clip.samples[: min(clip.samples.size, target)]
    if samples.size < needed:
        samples = np.concatenate([samples, np.zeros(needed - samples.size)])
    else:
        samples = samples[:needed]
    padded = np.pad(samples, (half, 0), mode="reflect")
    starts = np.arange(n_cols) * params.hop
    frames = padded[starts[:, None] + np.arange(params.window)[None, :]]
    spectrum = np.fft.rfft(frames * _hann_periodic(params.window), n=params.n_fft, axis=1)
    mel_power = (np.abs(spectrum) ** 2) @ mel_filterbank(params).T
    return np.log10(mel_power.T + LOG_FLOOR)


def add_noise(
    clip: AudioClip, snr_db_range: tuple[float, float], rng: np.random.Generator
) -> AudioClip:
    """Add white Gaussian noise at an SNR drawn uniformly from the range (dB).

    The noise realization is rescaled to hit the drawn SNR exactly; the sum is
    clipped to [-1, 1].
    """
    lo, hi = snr_db_range
    if lo > hi:
        raise ValidationError(f"bad SNR range: min {lo} > max {hi}")
    signal_power = float(np.mean(clip.samples**2))
    if signal_power == 0.0:
        raise ValidationError("cannot add noise at a fixed SNR to a silent clip")
    snr_db = float(rng.uniform(lo, hi))
    noise = rng.standard_normal(clip.samples.size)
    target_power = signal_power / 10.0 ** (snr_db / 10.0)
    noise *= np.sqrt(target_power / np.mean(noise**2))
    mixed = np.clip(clip.samples + noise, -1.0, 1.0)
    return AudioClip(samples=mixed, sample_rate=clip.sample_rate)


def draw_crop_span(
    n_samples: int,
    sample_rate: int,
    p: float,
    min_len_s: float,
    rng: np.random.Generator,
) -> tuple[int, int]:
    """Sample the [start, stop) span random_crop would keep.

    With probability 1-p the full span is kept.  Exposed separately so
    training can align frame labels with the retained span.
    """
    duration = n_samples / sample_rate
    if min_len_s > duration:
        raise ValidationError(
            f"minimum crop length {min_len_s}s exceeds clip duration {duration:.3f}s"
        )
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"crop probability must lie in [0, 1], got {p}")
    if rng.random() >= p:
        return 0, n_samples
    length_s = float(rng.uniform(min_len_s, duration))
    start_s = float(rng.uniform(0.0, duration - length_s))
    start = int(round(start_s * sample_rate))
    length = max(1, int(round(length_s * sample_rate)))
    stop = min(n_samples, start + length)
    return start, stop


def random_crop(
    clip: AudioClip, p: float, min_len_s: float, rng: np.random.Generator
) -> AudioClip:
    """With probability p keep a contiguous slice of uniform random length."""
    start, stop = draw_crop_span(clip.samples.size, clip.sample_rate, p, min_len_s, rng)
    if (start, stop) == (0, clip.samples.size):
        return clip
    return AudioClip(samples=clip.samples[start:stop], sample_rate=clip.sample_rate)
