"""Dataset serialization: one JSON episode record per line plus a manifest.

Layout of a dataset directory:

  manifest.json   {"format_version": 1, "config": {...}, "episode_seeds": [...]}
  episodes.jsonl  one JSON object per episode (see below)

Episode record schema::

  {"seed": int, "frames": [
      {"scan": b64, "camera": b64, "path": b64, "waypoints": b64,
       "y_future": [bool, ...],
       "occ_lidar_true": bool, "occ_camera_true": bool,
       "occ_lidar_auto": bool, "occ_camera_auto": bool}, ...]}

All numeric payloads are base64 of little-endian 64-bit floats in row-major
order; array shapes are implied by the manifest config (scan length by
``lidar_beams``, images by ``image_height`` x ``image_width``, waypoints by
payload length). Writes are atomic (write-then-rename).
"""
from __future__ import annotations

import base64
import dataclasses
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .world import Episode, Frame, WorldConfig

__all__ = [
    "save_dataset",
    "load_dataset",
    "encode_array",
    "decode_array",
    "atomic_write_text",
    "atomic_write_bytes",
    "config_to_dict",
    "config_from_dict",
]

FORMAT_VERSION = 1


def encode_array(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return base64.b64encode(a.tobytes()).decode("ascii")


def decode_array(text: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def config_to_dict(config: WorldConfig) -> dict:
    d = dataclasses.asdict(config)
    for key, value in d.items():
        if isinstance(value, tuple):
            d[key] = list(value)
    return d


def config_from_dict(d: dict) -> WorldConfig:
    kwargs = dict(d)
    for key in ("occlusion_duration_range", "obstacle_radius_range"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return WorldConfig(**kwargs)


def _frame_record(frame: Frame) -> dict:
    return {
        "scan": encode_array(frame.scan),
        "camera": encode_array(frame.camera),
        "path": encode_array(frame.path),
        "waypoints": encode_array(frame.path_waypoints),
        "y_future": [bool(v) for v in frame.y_future],
        "occ_lidar_true": frame.occ_lidar_true,
        "occ_camera_true": frame.occ_camera_true,
        "occ_lidar_auto": frame.occ_lidar_auto,
        "occ_camera_auto": frame.occ_camera_auto,
    }


def _frame_from_record(rec: dict, config: WorldConfig) -> Frame:
    h, w = config.image_height, config.image_width
    waypoint_bytes = len(base64.b64decode(rec["waypoints"]))
    n_waypoints = waypoint_bytes // (8 * 2)
    return Frame(
        scan=decode_array(rec["scan"], (config.lidar_beams,)),
        camera=decode_array(rec["camera"], (h, w, 3)).astype(np.float32),
        path=decode_array(rec["path"], (h, w)).astype(np.float32),
        path_waypoints=decode_array(rec["waypoints"], (n_waypoints, 2)),
        y_future=np.array(rec["y_future"], dtype=bool),
        occ_lidar_true=bool(rec["occ_lidar_true"]),
        occ_camera_true=bool(rec["occ_camera_true"]),
        occ_lidar_auto=bool(rec["occ_lidar_auto"]),
        occ_camera_auto=bool(rec["occ_camera_auto"]),
    )


def save_dataset(directory: str | Path, episodes: list[Episode], config: WorldConfig) -> None:
    directory = Path(directory)
    lines = []
    for ep in episodes:
        record = {"seed": ep.seed, "frames": [_frame_record(f) for f in ep.frames]}
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(config),
        "episode_seeds": [ep.seed for ep in episodes],
    }
    atomic_write_text(directory / "episodes.jsonl", "\n".join(lines) + "\n")
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_dataset(directory: str | Path) -> tuple[list[Episode], WorldConfig]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    episodes_path = directory / "episodes.jsonl"
    if not manifest_path.exists() or not episodes_path.exists():
        raise FileNotFoundError(f"{directory} is not a dataset directory (missing manifest or episodes)")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version: {manifest.get('format_version')}")
    config = config_from_dict(manifest["config"])
    episodes = []
    with episodes_path.open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            base = dataclasses.replace(config, rng_seed=int(rec["seed"]))
            episodes.append(
                Episode(
                    frames=[_frame_from_record(fr, config) for fr in rec["frames"]],
                    config=base,
                    seed=int(rec["seed"]),
                )
            )
    return episodes, config
