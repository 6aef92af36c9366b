#!/usr/bin/env python3
"""
File formats used by occ-forge.

Raw tensors are little-endian C-order bytes next to a JSON sidecar
describing shape and dtype. Point clouds use a small binary container with
an 8-byte magic and a record count. Reports are JSON with sorted keys and
CSV, so identical results produce identical bytes.
"""

import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from src.core.exceptions import DataError
from src.core.models import CameraModel, PointCloud
from src.logging.logger_config import log_debug

DTYPES: Dict[str, str] = {
    "f32": "<f4",
    "f64": "<f8",
    "u8": "|u1",
    "u16": "<u2",
    "i64": "<i8",
}

POINT_MAGIC = b"OCCPTS01"
POINT_RECORD = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("class_id", "<f4")])
POINT_CSV_HEADER = ["x", "y", "z", "class_id"]


def _tensor_paths(stem: Path) -> Tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def save_tensor(stem: Path, array: np.ndarray, dtype: str = "f32") -> Path:
    """
    Write `<stem>.bin` and its `<stem>.json` sidecar.

    Args:
        stem: path without suffix
        array: data to store
        dtype: one of f32, f64, u8, u16, i64

    Returns:
        Path of the .bin file
    """
    if dtype not in DTYPES:
        raise DataError(f"Unsupported tensor dtype: {dtype}", {"supported": sorted(DTYPES)})
    data_path, meta_path = _tensor_paths(stem)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(np.asarray(array).astype(DTYPES[dtype]))
    data_path.write_bytes(array.tobytes(order="C"))
    write_json(meta_path, {"shape": list(array.shape), "dtype": dtype, "order": "C"})
    log_debug(f"Saved tensor {data_path.name} {array.shape} {dtype}")
    return data_path


def load_tensor(stem: Path) -> np.ndarray:
    """Read a tensor written by save_tensor."""
    data_path, meta_path = _tensor_paths(stem)
    if not data_path.exists() or not meta_path.exists():
        raise DataError(f"Missing tensor files for {Path(stem).name}", {"path": str(data_path)})
    meta = read_json(meta_path)
    dtype = meta.get("dtype")
    if dtype not in DTYPES:
        raise DataError(f"Unsupported tensor dtype in sidecar: {dtype}", {"path": str(meta_path)})
    shape = tuple(int(s) for s in meta.get("shape", []))
    raw = data_path.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(DTYPES[dtype]).itemsize
    if len(raw) != expected:
        raise DataError("Tensor size does not match its sidecar",
                        {"path": str(data_path), "bytes": len(raw), "expected": expected})
    return np.frombuffer(raw, dtype=DTYPES[dtype]).reshape(shape).copy()


def save_point_cloud(path: Path, cloud: PointCloud) -> Path:
    """Binary point cloud: magic, u64 count, then (x, y, z, class_id) f32 records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = np.zeros(len(cloud), dtype=POINT_RECORD)
    records["x"] = cloud.points[:, 0]
    records["y"] = cloud.points[:, 1]
    records["z"] = cloud.points[:, 2]
    records["class_id"] = cloud.classes
    with open(path, "wb") as f:
        f.write(POINT_MAGIC)
        f.write(np.array([len(cloud)], dtype="<u8").tobytes())
        f.write(records.tobytes())
    log_debug(f"Saved {len(cloud)} points to {path.name}")
    return path


def load_point_cloud(path: Path) -> PointCloud:
    """Read a point cloud written by save_point_cloud."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Point cloud not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != POINT_MAGIC:
        raise DataError(f"Not an occ-forge point cloud: {path}")
    count = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    body = raw[16:]
    if len(body) != count * POINT_RECORD.itemsize:
        raise DataError("Point cloud is truncated", {"path": str(path), "count": count})
    records = np.frombuffer(body, dtype=POINT_RECORD)
    points = np.stack([records["x"], records["y"], records["z"]], axis=1).astype(np.float64)
    return PointCloud(points, np.rint(records["class_id"]).astype(np.int64))


def load_point_cloud_csv(path: Path) -> PointCloud:
    """Hand-made fixtures: CSV with header x,y,z,class_id."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Point CSV not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = [h.strip() for h in next(reader, [])]
        if header != POINT_CSV_HEADER:
            raise DataError("Point CSV header must be x,y,z,class_id", {"header": header})
        rows = [row for row in reader if row]
    try:
        values = np.array([[float(v) for v in row] for row in rows], dtype=np.float64).reshape(-1, 4)
    except ValueError as e:
        raise DataError(f"Malformed point CSV {path.name}: {e}") from e
    return PointCloud(values[:, :3], np.rint(values[:, 3]).astype(np.int64))


def load_points(path: Path) -> PointCloud:
    """Point cloud from a .csv fixture or an OCCPTS01 file, by suffix."""
    if Path(path).suffix.lower() == ".csv":
        return load_point_cloud_csv(path)
    return load_point_cloud(path)


def save_camera(path: Path, camera: CameraModel) -> Path:
    return write_json(path, camera.to_dict())


def load_camera(path: Path) -> CameraModel:
    return CameraModel.from_dict(read_json(path))


def save_pgm(path: Path, image: np.ndarray, max_value: Optional[float] = None) -> Path:
    """Write a 2D array as an 8-bit PGM scaled so max_value (default: array max) maps to 255."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DataError("PGM export needs a 2D array", {"ndim": image.ndim})
    top = float(image.max()) if max_value is None and image.size else float(max_value or 0.0)
    scaled = np.zeros(image.shape) if top <= 0 else np.clip(image / top, 0.0, 1.0) * 255.0
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(scaled).astype(np.uint8)).save(path, format="PPM")
    return path


def read_json(path: Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise DataError(f"File not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"Invalid JSON in {path.name}: {e}") from e


def write_json(path: Path, data: Any) -> Path:
    """Deterministic JSON: sorted keys, 2-space indent, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    return path


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_csv(path: Path, rows: Iterable[Dict[str, Any]], fieldnames: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: ("" if row.get(key) is None else row.get(key)) for key in fieldnames})
    return path

