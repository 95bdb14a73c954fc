"""Pipeline orchestration: config, stages, artifacts, and reproducibility.

Every stage reads its inputs from and writes its outputs under the work
directory, so stages can be re-run in isolation.  A run manifest (input
hashes, config, seed, version) is written per command, and a lock file guards
the work directory against concurrent runs.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__ as VERSION
from . import audio_branch, av_joint, vision_branch
from .blocks import TrainConfig, configure_numerics, load_checkpoint, load_history
from .data import ScoreTrack, Segment, load_manifest, read_score_file, write_score_file
from .errors import ConfigError, QuavfError
from .fusion import fuse_tracks, smooth_track
from .metrics import EvalReport, evaluate
from .quality import (
    ConstantProvider,
    QualityTrack,
    SidecarProvider,
    segment_frame_quality,
    windowed_quality_track,
)
from .synth import SynthConfig, generate

MODEL_NAMES = ("audio", "vision", "avjoint")
EVAL_NAMES = MODEL_NAMES + ("quavf",)
REPORT_LABELS = {
    "audio": "audio-only",
    "vision": "vision-only",
    "avjoint": "av-joint",
    "quavf": "quavf",
}

DEFAULT_CONFIG: dict = {
    "work_dir": "quavf_work",
    "data_dir": None,  # defaults to <work_dir>/data
    "seed": 7,
    "synth": {
        "n_segments": 200,
        "frames_per_segment": 48,
        "frame_rate": 2.0,
        "crop_size": 64,
        "p_box_dropout": 0.3,
        "p_visual_corrupt": 0.5,
        "snr_clean_db": 20.0,
        "mean_run_frames": 128.0,
    },
    "split": {"val_fraction": 0.2},
    "quality": {"provider": "sidecar", "tau": 0.3, "n_bins": 10},
    "audio": {
        "d_model": 64,
        "n_heads": 4,
        "d_ff": 256,
        "train": {"lr": 0.3, "epochs": 8, "batch_size": 8},
        "augment": {"crop_p": 0.9, "crop_min_s": 3.0, "noise_snr_db": None},
    },
    "vision": {
        "d_model": 64,
        "n_heads": 4,
        "d_ff": 256,
        "quality_mode": "quantized",
        "fine_tune": False,
        "train": {"lr": 0.3, "epochs": 10, "batch_size": 64},
    },
    "avjoint": {
        "d_model": 64,
        "n_heads": 4,
        "d_ff": 256,
        "d_hidden": 128,
        "fine_tune": True,
        "train": {"lr": 0.3, "epochs": 6, "batch_size": 64},
    },
    "fusion": {"order": "fuse_then_smooth"},
    "eval": {"threshold": 0.5, "window": 25, "split": "val"},
}


def _deep_merge(base: dict, override: Mapping) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if key in merged and isinstance(merged[key], dict) and isinstance(value, Mapping):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def set_dotted(config: dict, dotted: str, raw_value: str) -> None:
    """Apply one ``a.b.c=value`` override; the value parses as JSON if it can."""
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    keys = dotted.split(".")
    node = config
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = value


@dataclass
class PipelineConfig:
    raw: dict

    def __post_init__(self) -> None:
        tau = self.raw["quality"]["tau"]
        if not 0.0 <= tau <= 1.0:
            raise ConfigError(f"quality.tau must lie in [0, 1], got {tau}")
        window = self.raw["eval"]["window"]
        if not (isinstance(window, int) and window >= 1 and window % 2 == 1):
            raise ConfigError(f"eval.window must be an odd integer >= 1, got {window}")
        if self.raw["fusion"]["order"] not in ("fuse_then_smooth", "smooth_then_fuse"):
            raise ConfigError(f"unknown fusion.order {self.raw['fusion']['order']!r}")
        if self.raw["eval"]["split"] not in ("train", "val", "all"):
            raise ConfigError(f"eval.split must be train, val or all")
        frac = self.raw["split"]["val_fraction"]
        if not 0.0 <= frac < 1.0:
            raise ConfigError(f"split.val_fraction must lie in [0, 1), got {frac}")

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def work_dir(self) -> Path:
        return Path(self.raw["work_dir"])

    @property
    def data_dir(self) -> Path:
        configured = self.raw.get("data_dir")
        return Path(configured) if configured else self.work_dir / "data"

    @property
    def manifest_path(self) -> Path:
        return self.data_dir / "manifest.json"

    def scores_path(self, model: str) -> Path:
        return self.work_dir / "scores" / f"{model}.csv"

    def checkpoint_path(self, model: str) -> Path:
        return self.work_dir / "models" / f"{model}.json"

    def eval_path(self, model: str) -> Path:
        return self.work_dir / "eval" / f"{model}.json"

    @property
    def frame_quality_path(self) -> Path:
        return self.work_dir / "quality" / "frame_quality.csv"

    @property
    def window_quality_path(self) -> Path:
        return self.work_dir / "quality" / "window_quality.csv"

    def synth_config(self) -> SynthConfig:
        params = dict(self.raw["synth"])
        params.setdefault("seed", self.seed)
        return SynthConfig(**params)

    def train_config(self, model: str) -> TrainConfig:
        section = self.raw[model]["train"]
        offset = {"audio": 1, "vision": 2, "avjoint": 3}[model]
        return TrainConfig(
            lr=float(section["lr"]),
            epochs=int(section["epochs"]),
            batch_size=int(section["batch_size"]),
            momentum=float(section.get("momentum", 0.9)),
            seed=self.seed + offset,
        )


def load_config(
    path: Path | str | None = None,
    overrides: Sequence[str] = (),
    seed: int | None = None,
) -> PipelineConfig:
    raw = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        user = json.loads(Path(path).read_text())
        if not isinstance(user, Mapping):
            raise ConfigError(f"{path}: config top level must be an object")
        raw = _deep_merge(raw, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        set_dotted(raw, key, value)
    if seed is not None:
        raw["seed"] = seed
    env_workdir = os.environ.get("QUAVF_WORKDIR")
    if env_workdir:
        raw["work_dir"] = env_workdir
    return PipelineConfig(raw=raw)


# ---------------------------------------------------------------------------
# Work-dir plumbing


class WorkDirLock:
    """Guards a work dir against concurrent pipeline runs."""

    def __init__(self, work_dir: Path):
        self.path = Path(work_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise QuavfError(
                f"work dir is locked by another run ({self.path}); "
                "remove the lock file if that run is gone"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_run_manifest(cfg: PipelineConfig, command: str, inputs: Sequence[Path]) -> None:
    doc = {
        "command": command,
        "config": cfg.raw,
        "seed": cfg.seed,
        "version": VERSION,
        "inputs": {str(p): _sha256(p) for p in sorted(inputs) if Path(p).exists()},
    }
    out_dir = cfg.work_dir / "manifests"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command}.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise QuavfError(f"missing {path}; run `quavf {producer}` first")
    return path


def load_dataset(cfg: PipelineConfig) -> list[Segment]:
    return load_manifest(_require(cfg.manifest_path, "synth"))


def split_segments(
    cfg: PipelineConfig, segments: Sequence[Segment]
) -> tuple[list[Segment], list[Segment]]:
    """Deterministic train/val split by segment-id hash."""
    cut = round(float(cfg.raw["split"]["val_fraction"]) * 1000)
    train, val = [], []
    for segment in segments:
        bucket = int(hashlib.sha256(segment.id.encode()).hexdigest(), 16) % 1000
        (val if bucket < cut else train).append(segment)
    return train, val


def eval_split(cfg: PipelineConfig, segments: Sequence[Segment]) -> list[Segment]:
    mode = cfg.raw["eval"]["split"]
    if mode == "all":
        return list(segments)
    train, val = split_segments(cfg, segments)
    return train if mode == "train" else val


def _read_quality_tracks(path: Path) -> dict[str, QualityTrack]:
    return {
        seg_id: QualityTrack(segment_id=seg_id, frame_quality=track.scores)
        for seg_id, track in read_score_file(path).items()
    }


# ---------------------------------------------------------------------------
# Stages


def stage_synth(cfg: PipelineConfig) -> Path:
    cfg.data_dir.mkdir(parents=True, exist_ok=True)
    manifest = generate(cfg.synth_config(), cfg.data_dir)
    write_run_manifest(cfg, "synth", [manifest])
    return manifest


def _provider(cfg: PipelineConfig):
    spec = cfg.raw["quality"]["provider"]
    if spec == "sidecar":
        return SidecarProvider(_require(cfg.data_dir / "landmarks.json", "synth"))
    if isinstance(spec, str) and spec.startswith("constant:"):
        return ConstantProvider(float(spec.split(":", 1)[1]))
    raise ConfigError(f"unknown quality.provider {spec!r}")


def stage_quality(cfg: PipelineConfig) -> None:
    segments = load_dataset(cfg)
    provider = _provider(cfg)
    frame_tracks = [segment_frame_quality(s, provider) for s in segments]
    window_tracks = [
        windowed_quality_track(s, t) for s, t in zip(segments, frame_tracks)
    ]
    out_dir = cfg.work_dir / "quality"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_score_file(
        [ScoreTrack(t.segment_id, t.frame_quality) for t in frame_tracks],
        cfg.frame_quality_path,
        value_column="quality",
    )
    write_score_file(
        [ScoreTrack(t.segment_id, t.frame_quality) for t in window_tracks],
        cfg.window_quality_path,
        value_column="quality",
    )
    write_run_manifest(cfg, "quality", [cfg.manifest_path, cfg.data_dir / "landmarks.json"])


def stage_train(cfg: PipelineConfig, model_name: str) -> None:
    configure_numerics()
    if model_name not in MODEL_NAMES:
        raise ConfigError(f"unknown model {model_name!r}, expected one of {MODEL_NAMES}")
    segments = load_dataset(cfg)
    train_segments, _ = split_segments(cfg, segments)
    hyper = cfg.train_config(model_name)
    out = cfg.checkpoint_path(model_name)
    out.parent.mkdir(parents=True, exist_ok=True)
    inputs = [cfg.manifest_path]

    if model_name == "audio":
        section = cfg.raw["audio"]
        model = audio_branch.build_audio_branch(
            audio_branch.AudioBranchConfig(
                d_model=section["d_model"], n_heads=section["n_heads"], d_ff=section["d_ff"],
                seed=cfg.seed + 101,
            )
        )
        aug_raw = section.get("augment") or {}
        snr = aug_raw.get("noise_snr_db")
        augment = audio_branch.AudioAugmentation(
            crop_p=float(aug_raw.get("crop_p", 0.0)),
            crop_min_s=float(aug_raw.get("crop_min_s", 3.0)),
            noise_snr_db=tuple(snr) if snr else None,
        )
        history = audio_branch.train(model, train_segments, hyper, augment)
        audio_branch.save(model, out, history)
    elif model_name == "vision":
        section = cfg.raw["vision"]
        quality_tracks = _read_quality_tracks(_require(cfg.frame_quality_path, "quality"))
        inputs.append(cfg.frame_quality_path)
        model = vision_branch.build_vision_branch(
            vision_branch.VisionBranchConfig(
                d_model=section["d_model"], n_heads=section["n_heads"], d_ff=section["d_ff"],
                quality_mode=section["quality_mode"], n_bins=int(cfg.raw["quality"]["n_bins"]),
                seed=cfg.seed + 102,
            )
        )
        history = vision_branch.train(
            model, train_segments, quality_tracks,
            threshold=float(cfg.raw["quality"]["tau"]),
            hyper=hyper, fine_tune=bool(section["fine_tune"]),
        )
        vision_branch.save(model, out, history)
    else:
        section = cfg.raw["avjoint"]
        model = av_joint.build_av_joint(
            av_joint.AVJointConfig(
                d_model=section["d_model"], n_heads=section["n_heads"], d_ff=section["d_ff"],
                d_hidden=section["d_hidden"], seed=cfg.seed + 103,
            )
        )
        history = av_joint.train(
            model, train_segments, hyper, fine_tune=bool(section["fine_tune"])
        )
        av_joint.save(model, out, history)
    write_run_manifest(cfg, f"train-{model_name}", inputs)


def stage_predict(cfg: PipelineConfig, model_name: str) -> None:
    configure_numerics()
    if model_name not in MODEL_NAMES:
        raise ConfigError(f"unknown model {model_name!r}, expected one of {MODEL_NAMES}")
    segments = load_dataset(cfg)
    model = load_checkpoint(_require(cfg.checkpoint_path(model_name), f"train --model {model_name}"))
    tracks = []
    inputs = [cfg.manifest_path, cfg.checkpoint_path(model_name)]
    if model_name == "audio":
        for segment in segments:
            tracks.append(
                ScoreTrack(segment.id, audio_branch.predict_segment(model, segment))
            )
    elif model_name == "vision":
        quality_tracks = _read_quality_tracks(_require(cfg.frame_quality_path, "quality"))
        inputs.append(cfg.frame_quality_path)
        for segment in segments:
            tracks.append(
                vision_branch.predict_segment(model, segment, quality_tracks[segment.id])
            )
    else:
        for segment in segments:
            tracks.append(av_joint.predict_segment(model, segment))
    out = cfg.scores_path(model_name)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_score_file(tracks, out)
    write_run_manifest(cfg, f"predict-{model_name}", inputs)


def stage_fuse(cfg: PipelineConfig) -> None:
    vision_tracks = read_score_file(_require(cfg.scores_path("vision"), "predict --model vision"))
    audio_tracks = read_score_file(_require(cfg.scores_path("audio"), "predict --model audio"))
    window_q = _read_quality_tracks(_require(cfg.window_quality_path, "quality"))
    segments = load_dataset(cfg)
    order = cfg.raw["fusion"]["order"]
    window = int(cfg.raw["eval"]["window"])
    fused_tracks, weights = [], {}
    for segment in segments:
        for source, name in ((vision_tracks, "vision"), (audio_tracks, "audio")):
            if segment.id not in source:
                raise QuavfError(
                    f"no {name} scores for segment '{segment.id}' "
                    f"(expected {segment.n_frames} frames)"
                )
        vision = vision_tracks[segment.id]
        audio = audio_tracks[segment.id]
        if order == "smooth_then_fuse":
            vision = smooth_track(vision, window)
            audio = smooth_track(audio, window)
        fused = fuse_tracks(vision, audio, window_q[segment.id])
        fused_tracks.append(fused.as_score_track())
        weights[segment.id] = fused.weights
    out = cfg.scores_path("quavf")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_score_file(fused_tracks, out, quality=weights)
    write_run_manifest(
        cfg, "fuse",
        [cfg.scores_path("vision"), cfg.scores_path("audio"), cfg.window_quality_path],
    )


def stage_eval(cfg: PipelineConfig, model_name: str, window: int | None = None,
               threshold: float | None = None) -> dict[str, EvalReport]:
    if model_name not in EVAL_NAMES:
        raise ConfigError(f"unknown model {model_name!r}, expected one of {EVAL_NAMES}")
    producer = "fuse" if model_name == "quavf" else f"predict --model {model_name}"
    tracks = read_score_file(_require(cfg.scores_path(model_name), producer))
    segments = eval_split(cfg, load_dataset(cfg))
    window = int(cfg.raw["eval"]["window"]) if window is None else window
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"smoothing window must be odd and >= 1, got {window}")
    threshold = float(cfg.raw["eval"]["threshold"]) if threshold is None else threshold
    reports = {
        "without_smoothing": evaluate(tracks, segments, threshold, window=1),
        "with_smoothing": evaluate(tracks, segments, threshold, window=window),
    }
    out = cfg.eval_path(model_name)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        json.dumps({k: r.to_dict() for k, r in reports.items()}, sort_keys=True, indent=2) + "\n"
    )
    write_run_manifest(cfg, f"eval-{model_name}", [cfg.scores_path(model_name), cfg.manifest_path])
    return reports


def report_table(cfg: PipelineConfig) -> str:
    """Aligned accuracy/mAP comparison for every evaluated model."""
    rows = []
    for name in EVAL_NAMES:
        path = cfg.eval_path(name)
        if not path.exists():
            continue
        doc = json.loads(path.read_text())
        rows.append(
            (
                REPORT_LABELS[name],
                doc["without_smoothing"]["accuracy"], doc["without_smoothing"]["map"],
                doc["with_smoothing"]["accuracy"], doc["with_smoothing"]["map"],
            )
        )
    if not rows:
        raise QuavfError("nothing evaluated yet; run `quavf eval` first")
    header = ("model", "acc", "mAP", "acc(smooth)", "mAP(smooth)")
    formatted = [header] + [
        (label,) + tuple(f"{100.0 * v:.1f}" for v in values) for label, *values in rows
    ]
    widths = [max(len(row[i]) for row in formatted) for i in range(len(header))]
    lines = []
    for i, row in enumerate(formatted):
        lines.append(
            "  ".join(cell.ljust(widths[j]) if j == 0 else cell.rjust(widths[j])
                      for j, cell in enumerate(row))
        )
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def stage_report(cfg: PipelineConfig) -> str:
    table = report_table(cfg)
    out = cfg.work_dir / "eval" / "report.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table + "\n")
    return table


def run_all(cfg: PipelineConfig) -> str:
    stage_synth(cfg)
    stage_quality(cfg)
    for name in MODEL_NAMES:
        stage_train(cfg, name)
        stage_predict(cfg, name)
    stage_fuse(cfg)
    for name in EVAL_NAMES:
        stage_eval(cfg, name)
    return stage_report(cfg)
