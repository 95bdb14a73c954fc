"""Segment data model, dataset manifest, frame windows, and score files.

A dataset is a JSON manifest (list of segment records) next to its media:
single-channel 16-bit PCM WAV audio at 16 kHz and lossless PNG face crops.
Score files are CSV with header ``segment_id,frame_index,score`` and scores
printed with 9 significant digits.
"""
from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import AlignmentError, ParseError, ValidationError

CANONICAL_SAMPLE_RATE = 16000
WINDOW_SIZE = 15
HALF_WINDOW = 7
WINDOW_STRIDE_S = 0.5
SCORE_DIGITS = 9

# Zero-crop shape used when a segment has no face crop at all to copy from.
FALLBACK_CROP_SHAPE = (32, 32, 3)


@dataclass(frozen=True)
class BoundingBox:
    """Face box in pixels; (x, y) is the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        vals = (self.x, self.y, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError(f"bounding box coordinates must be finite, got {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"bounding box needs w > 0 and h > 0, got w={self.w}, h={self.h}")


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = CANONICAL_SAMPLE_RATE

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size == 0:
            raise ValidationError("audio clip must be a non-empty 1-D sample array")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("audio clip contains non-finite samples")
        if samples.min() < -1.0 or samples.max() > 1.0:
            raise ValidationError("audio samples must lie in [-1, 1]")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class Frame:
    """One timeline entry of a segment.

    The face crop may live in memory (``crop``) or on disk (``crop_path``);
    a crop is present iff the box is present.
    """

    index: int
    timestamp: float
    label: int
    box: BoundingBox | None = None
    crop: np.ndarray | None = None
    crop_path: Path | None = None

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValidationError(f"frame {self.index}: label must be 0 or 1, got {self.label!r}")
        if not np.isfinite(self.timestamp):
            raise ValidationError(f"frame {self.index}: timestamp must be finite")
        has_crop = self.crop is not None or self.crop_path is not None
        if (self.box is None) != (not has_crop):
            raise ValidationError(
                f"frame {self.index}: crop must be present iff the box is present"
            )

    @property
    def has_box(self) -> bool:
        return self.box is not None

    def load_crop(self) -> np.ndarray | None:
        """Return the crop as an H x W x C float array in [0, 1], or None."""
        if self.crop is not None:
            return self.crop
        if self.crop_path is not None:
            return load_crop_image(self.crop_path)
        return None


@dataclass(frozen=True)
class Segment:
    """A tracked-person clip: frame timeline plus its audio."""

    id: str
    frames: tuple[Frame, ...]
    frame_rate: float
    audio: AudioClip | None = None
    audio_path: Path | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise ValidationError(f"segment '{self.id}': needs at least one frame")
        if self.frame_rate <= 0:
            raise ValidationError(f"segment '{self.id}': frame rate must be positive")
        if self.audio is None and self.audio_path is None:
            raise ValidationError(f"segment '{self.id}': no audio given")
        ts = [f.timestamp for f in self.frames]
        for i in range(1, len(ts)):
            if ts[i] <= ts[i - 1]:
                raise ValidationError(
                    f"segment '{self.id}' frame {self.frames[i].index}: "
                    "timestamps must be strictly increasing"
                )
        if self.audio is not None and self.audio.duration < ts[-1]:
            raise ValidationError(
                f"segment '{self.id}': audio duration {self.audio.duration:.3f}s shorter "
                f"than last frame timestamp {ts[-1]:.3f}s"
            )

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    @property
    def labels(self) -> np.ndarray:
        return np.array([f.label for f in self.frames], dtype=np.int64)

    def load_audio(self) -> AudioClip:
        if self.audio is not None:
            return self.audio
        return read_wav(self.audio_path)

    def crop_shape(self) -> tuple[int, int, int]:
        """Shape used for zero-filled crops of frames without a box."""
        for frame in self.frames:
            if frame.crop is not None:
                return frame.crop.shape
            if frame.crop_path is not None:
                with Image.open(frame.crop_path) as img:
                    w, h = img.size
                    channels = len(img.getbands())
                return (h, w, channels)
        return FALLBACK_CROP_SHAPE


@dataclass(frozen=True)
class ScoreTrack:
    """Per-frame scores in [0, 1] aligned to a segment's frames."""

    segment_id: str
    scores: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        if scores.ndim != 1 or scores.size == 0:
            raise ValidationError(f"track '{self.segment_id}': scores must be a non-empty 1-D array")
        if not np.all(np.isfinite(scores)):
            raise ValidationError(f"track '{self.segment_id}': scores contain non-finite values")
        if scores.min() < 0.0 or scores.max() > 1.0:
            raise ValidationError(f"track '{self.segment_id}': scores must lie in [0, 1]")

    def __len__(self) -> int:
        return self.scores.size


@dataclass(frozen=True)
class FrameWindow:
    """The 15-crop context around a target frame; mask marks real entries."""

    target_index: int
    crops: tuple[np.ndarray, ...]
    mask: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "crops", tuple(self.crops))
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        if len(self.crops) != WINDOW_SIZE or self.mask.shape != (WINDOW_SIZE,):
            raise ValidationError(f"frame window must hold exactly {WINDOW_SIZE} crops")


# ---------------------------------------------------------------------------
# Frame windows


def window_positions(
    segment: Segment, target: int, stride_s: float = WINDOW_STRIDE_S
) -> tuple[np.ndarray, np.ndarray]:
    """Frame indices and in-range flags for the 15 window slots around target.

    Slot k (k = -7..7) asks for time ``t_target + k * stride_s`` and gets the
    nearest frame, ties broken toward the earlier frame.  Slots whose time
    falls outside the segment's timeline reuse the boundary frame and are
    flagged out of range.
    """
    if not 0 <= target < segment.n_frames:
        raise ValidationError(
            f"segment '{segment.id}': target index {target} out of range "
            f"[0, {segment.n_frames})"
        )
    ts = segment.timestamps
    times = segment.frames[target].timestamp + stride_s * np.arange(-HALF_WINDOW, HALF_WINDOW + 1)
    in_range = (times >= ts[0]) & (times <= ts[-1])
    right = np.searchsorted(ts, times, side="left")
    indices = np.empty(WINDOW_SIZE, dtype=np.int64)
    n = ts.size
    for j, t in enumerate(times):
        r = right[j]
        if r >= n:
            indices[j] = n - 1
        elif r == 0:
            indices[j] = 0
        else:
            l = r - 1
            indices[j] = l if (t - ts[l]) <= (ts[r] - t) else r
    return indices, in_range


def window_mask(segment: Segment, target: int, stride_s: float = WINDOW_STRIDE_S) -> np.ndarray:
    """True per slot iff the slot is in range and its frame has a box."""
    indices, in_range = window_positions(segment, target, stride_s)
    has_box = np.array([segment.frames[i].has_box for i in indices])
    return in_range & has_box


def extract_window(
    segment: Segment, target: int, stride_s: float = WINDOW_STRIDE_S
) -> FrameWindow:
    """Build the 15-crop window around the target frame.

    Out-of-range slots and slots landing on frames without a box contribute
    an all-zero crop and mask False.
    """
    indices, in_range = window_positions(segment, target, stride_s)
    zero_shape: tuple[int, ...] | None = None
    loaded: list[np.ndarray | None] = []
    mask = np.zeros(WINDOW_SIZE, dtype=bool)
    for j, i in enumerate(indices):
        frame = segment.frames[int(i)]
        if in_range[j] and frame.has_box:
            crop = frame.load_crop()
            loaded.append(crop)
            mask[j] = True
            if zero_shape is None:
                zero_shape = crop.shape
        else:
            loaded.append(None)
    if zero_shape is None:
        zero_shape = segment.crop_shape()
    crops = tuple(
        c if c is not None else np.zeros(zero_shape, dtype=np.float32) for c in loaded
    )
    return FrameWindow(target_index=target, crops=crops, mask=mask)


# ---------------------------------------------------------------------------
# Audio and image files


def write_wav(path: Path | str, samples: np.ndarray, sample_rate: int = CANONICAL_SAMPLE_RATE) -> None:
    """Write mono float samples in [-1, 1] as 16-bit PCM."""
    samples = np.asarray(samples, dtype=np.float64)
    ints = np.clip(np.rint(samples * 32767.0), -32767, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(ints.tobytes())


def read_wav(path: Path | str) -> AudioClip:
    with wave.open(str(path), "rb") as wf:
        _check_wav_format(wf, path)
        raw = wf.readframes(wf.getnframes())
        rate = wf.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples=samples, sample_rate=rate)


def wav_duration(path: Path | str) -> float:
    """Duration in seconds, read from the header only."""
    with wave.open(str(path), "rb") as wf:
        _check_wav_format(wf, path)
        return wf.getnframes() / wf.getframerate()


def _check_wav_format(wf: wave.Wave_read, path: Path | str) -> None:
    if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
        raise ValidationError(f"{path}: audio must be single-channel 16-bit PCM")
    if wf.getframerate() != CANONICAL_SAMPLE_RATE:
        raise ValidationError(
            f"{path}: audio must be {CANONICAL_SAMPLE_RATE} Hz, got {wf.getframerate()} Hz"
        )


def write_crop(path: Path | str, image: np.ndarray) -> None:
    """Write an H x W x C float image in [0, 1] as PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.rint(arr * 255.0).astype(np.uint8)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    Image.fromarray(data).save(str(path), format="PNG")


def load_crop_image(path: Path | str) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


# ---------------------------------------------------------------------------
# Manifest


def write_manifest(records: Sequence[Mapping], path: Path | str) -> None:
    Path(path).write_text(json.dumps(list(records), indent=2) + "\n")


def load_manifest(path: Path | str) -> list[Segment]:
    """Load and validate a dataset manifest; segments come back sorted by id."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise ParseError(f"{path}: manifest top level must be a list of segment records")
    base = path.parent
    segments = [_parse_segment(rec, i, base) for i, rec in enumerate(doc)]
    seen: set[str] = set()
    for seg in segments:
        if seg.id in seen:
            raise ValidationError(f"duplicate segment id '{seg.id}' in manifest")
        seen.add(seg.id)
    segments.sort(key=lambda s: s.id)
    for seg in segments:
        duration = wav_duration(seg.audio_path)
        last_ts = seg.frames[-1].timestamp
        if duration < last_ts:
            raise ValidationError(
                f"segment '{seg.id}': audio duration {duration:.3f}s shorter than "
                f"last frame timestamp {last_ts:.3f}s"
            )
    return segments


def _parse_segment(rec, position: int, base: Path) -> Segment:
    if not isinstance(rec, Mapping):
        raise ParseError(f"segment record {position}: expected an object")
    seg_id = rec.get("id")
    if not isinstance(seg_id, str) or not seg_id:
        raise ParseError(f"segment record {position}: missing or invalid 'id'")
    frame_rate = rec.get("frame_rate")
    if not isinstance(frame_rate, (int, float)) or frame_rate <= 0:
        raise ParseError(f"segment record {position} ('{seg_id}'): missing or invalid 'frame_rate'")
    audio_path = rec.get("audio_path")
    if not isinstance(audio_path, str):
        raise ParseError(f"segment record {position} ('{seg_id}'): missing 'audio_path'")
    frame_recs = rec.get("frames")
    if not isinstance(frame_recs, list) or not frame_recs:
        raise ParseError(f"segment record {position} ('{seg_id}'): missing or empty 'frames'")

    frames = []
    for frec in frame_recs:
        frames.append(_parse_frame(frec, seg_id, base))
    frames.sort(key=lambda f: f.index)
    for want, frame in enumerate(frames):
        if frame.index != want:
            raise ValidationError(
                f"segment '{seg_id}' frame {frame.index}: frame indices must run 0..n-1"
            )
    resolved_audio = base / audio_path
    if not resolved_audio.exists():
        raise ValidationError(f"segment '{seg_id}': audio file not found: {resolved_audio}")
    return Segment(
        id=seg_id, frames=tuple(frames), frame_rate=float(frame_rate), audio_path=resolved_audio
    )


def _parse_frame(frec, seg_id: str, base: Path) -> Frame:
    if not isinstance(frec, Mapping):
        raise ParseError(f"segment '{seg_id}': frame record must be an object")
    index = frec.get("index")
    if not isinstance(index, int):
        raise ParseError(f"segment '{seg_id}': frame record missing integer 'index'")
    where = f"segment '{seg_id}' frame {index}"
    timestamp = frec.get("timestamp")
    if not isinstance(timestamp, (int, float)):
        raise ValidationError(f"{where}: missing or invalid 'timestamp'")
    label = frec.get("label")
    if label not in (0, 1):
        raise ValidationError(f"{where}: missing or invalid 'label' (need 0 or 1)")

    box = None
    box_rec = frec.get("box")
    if box_rec is not None:
        if not isinstance(box_rec, Mapping) or not all(k in box_rec for k in ("x", "y", "w", "h")):
            raise ValidationError(f"{where}: box must have fields x, y, w, h")
        try:
            box = BoundingBox(
                x=float(box_rec["x"]), y=float(box_rec["y"]),
                w=float(box_rec["w"]), h=float(box_rec["h"]),
            )
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from exc

    crop_path = frec.get("crop_path")
    if (box is None) != (crop_path is None):
        raise ValidationError(f"{where}: crop must be present iff the box is present")
    resolved_crop = None
    if crop_path is not None:
        resolved_crop = base / crop_path
        if not resolved_crop.exists():
            raise ValidationError(f"{where}: crop file not found: {resolved_crop}")
    try:
        return Frame(
            index=index, timestamp=float(timestamp), label=int(label),
            box=box, crop_path=resolved_crop,
        )
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from exc


# ---------------------------------------------------------------------------
# Score files


def format_score(value: float) -> str:
    return f"{value:.{SCORE_DIGITS}g}"


def write_score_file(
    tracks: Iterable[ScoreTrack],
    path: Path | str,
    value_column: str = "score",
    quality: Mapping[str, np.ndarray] | None = None,
) -> None:
    """Write tracks as CSV; an optional per-frame quality sidecar column."""
    lines = []
    header = f"segment_id,frame_index,{value_column}"
    if quality is not None:
        header += ",quality"
    lines.append(header)
    for track in sorted(tracks, key=lambda t: t.segment_id):
        q = quality.get(track.segment_id) if quality is not None else None
        if q is not None and len(q) != len(track):
            raise AlignmentError(
                f"track '{track.segment_id}': quality sidecar length {len(q)} != "
                f"score length {len(track)}"
            )
        for i, s in enumerate(track.scores):
            row = f"{track.segment_id},{i},{format_score(s)}"
            if q is not None:
                row += f",{format_score(q[i])}"
            lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_score_file(path: Path | str) -> dict[str, ScoreTrack]:
    """Read a score CSV into tracks keyed by segment id.

    Columns beyond the third (e.g. a quality sidecar) are ignored.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty score file")
    header = lines[0].split(",")
    if len(header) < 3 or header[0] != "segment_id" or header[1] != "frame_index":
        raise ParseError(f"{path}: unexpected header {lines[0]!r}")
    per_segment: dict[str, list[float]] = {}
    order: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) < 3:
            raise ParseError(f"{path}:{lineno}: expected at least 3 fields, got {len(fields)}")
        seg_id = fields[0]
        try:
            frame_index = int(fields[1])
            value = float(fields[2])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: malformed row: {exc}") from exc
        if not 0.0 <= value <= 1.0:
            raise ValidationError(
                f"{path}:{lineno}: score {value!r} outside [0, 1] for segment '{seg_id}'"
            )
        if seg_id not in per_segment:
            per_segment[seg_id] = []
            order.append(seg_id)
        elif order[-1] != seg_id:
            raise ParseError(f"{path}:{lineno}: rows for segment '{seg_id}' are not contiguous")
        if frame_index != len(per_segment[seg_id]):
            raise ParseError(
                f"{path}:{lineno}: frame indices for segment '{seg_id}' must run 0..n-1"
            )
        per_segment[seg_id].append(value)
    return {seg_id: ScoreTrack(seg_id, np.array(vals)) for seg_id, vals in per_segment.items()}


def write_scores(track: ScoreTrack, path: Path | str) -> None:
    """Write a single track in the score file format."""
    write_score_file([track], path)


def read_scores(path: Path | str) -> ScoreTrack:
    """Read a score file that must contain exactly one segment."""
    tracks = read_score_file(path)
    if len(tracks) != 1:
        raise ParseError(f"{path}: expected exactly one segment, found {len(tracks)}")
    return next(iter(tracks.values()))
