"""JSONL and config file handling.

One record per line; field names are fixed: ``values``, ``class_index``,
``role``, ``box``, ``scores``, ``predicted_label``, ``image_id``. Configs
are flat JSON or TOML documents; unknown keys are rejected.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .types import DetectionRecord, GroundTruthRecord, LabeledEmbedding, RunConfig

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml

__all__ = [
    "JsonlError",
    "read_jsonl",
    "write_jsonl",
    "atomic_write_text",
    "load_config",
    "save_config",
    "labeled_embedding_to_record",
    "labeled_embedding_from_record",
    "detection_to_record",
    "detection_from_record",
    "ground_truth_to_record",
    "ground_truth_from_record",
]


class JsonlError(ValueError):
    """A malformed JSONL line; carries the 1-based line number."""

    def __init__(self, path, line_number: int, reason: str):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {reason}")


def read_jsonl(path) -> Iterator[dict]:
    """Yield one decoded object per non-empty line."""
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlError(path, i, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise JsonlError(path, i, "record is not a JSON object")
            yield obj


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_jsonl(path, records: Iterable[dict]) -> None:
    """Write records atomically (temp file + rename)."""
    atomic_write_text(path, "".join(_dumps(r) + "\n" for r in records))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _require(obj: dict, *keys: str) -> None:
    missing = [k for k in keys if k not in obj]
    if missing:
        raise ValueError(f"record is missing fields {missing}")


def labeled_embedding_to_record(e: LabeledEmbedding) -> dict:
    return {
        "values": [float(x) for x in e.values],
        "class_index": int(e.class_index),
        "role": e.role,
    }


def labeled_embedding_from_record(obj: dict) -> LabeledEmbedding:
    _require(obj, "values", "class_index")
    return LabeledEmbedding(
        values=np.asarray(obj["values"], dtype=np.float64),
        class_index=int(obj["class_index"]),
        role=obj.get("role", "foreground"),
    )


def detection_to_record(det: DetectionRecord) -> dict:
    return {
        "box": [float(c) for c in det.box],
        "scores": [float(s) for s in det.scores],
        "predicted_label": int(det.predicted_label),
        "image_id": str(det.image_id),
    }


def detection_from_record(obj: dict) -> DetectionRecord:
    _require(obj, "box", "scores", "predicted_label", "image_id")
    return DetectionRecord(
        box=tuple(obj["box"]),
        scores=np.asarray(obj["scores"], dtype=np.float64),
        predicted_label=int(obj["predicted_label"]),
        image_id=str(obj["image_id"]),
    )


def ground_truth_to_record(gt: GroundTruthRecord) -> dict:
    return {
        "box": [float(c) for c in gt.box],
        "class_index": int(gt.class_index),
        "image_id": str(gt.image_id),
    }


def ground_truth_from_record(obj: dict) -> GroundTruthRecord:
    _require(obj, "box", "class_index", "image_id")
    return GroundTruthRecord(
        box=tuple(obj["box"]),
        class_index=int(obj["class_index"]),
        image_id=str(obj["image_id"]),
    )


def load_config(path) -> RunConfig:
    """Load a RunConfig from a flat JSON or TOML file (by extension)."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        with open(path, "rb") as fh:
            data = _toml.load(fh)
    else:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a flat table/object")
    if "fg_bg_ratio" in data:
        data["fg_bg_ratio"] = tuple(data["fg_bg_ratio"])
    return RunConfig.from_dict(data)


def save_config(path, cfg: RunConfig) -> None:
    atomic_write_text(path, json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
