"""
Readers and writers for the on-disk formats: WEM1 image sets, PGM renders,
waypoint files and the learning-curve CSV. All writers go through atomic_write.
"""
import csv
import io
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, List, Union

import numpy as np

from core.exceptions import DataError, FormatError, ParseError, TruncationError
from models.training import LEARNING_CURVE_COLUMNS, LR_SWEEP_COLUMNS, IterationRecord

logger = logging.getLogger(__name__)

WEM1_MAGIC = b"WEM1"
WEM1_HEADER = struct.Struct("<4sIII")

PathLike = Union[str, Path]


def atomic_write(path: PathLike, payload: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise DataError(f"cannot write {path}: {e}")


def encode_wem1(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype="<f4")
    if images.ndim != 3 or images.shape[0] < 1:
        raise DataError(f"WEM1 needs [count >= 1, height, width] images, got shape {images.shape}")
    count, height, width = images.shape
    return WEM1_HEADER.pack(WEM1_MAGIC, count, height, width) + images.tobytes(order="C")


def decode_wem1(payload: bytes) -> np.ndarray:
    if len(payload) < WEM1_HEADER.size:
        raise TruncationError(f"WEM1 header needs {WEM1_HEADER.size} bytes, file has {len(payload)}", offset=len(payload))
    magic, count, height, width = WEM1_HEADER.unpack_from(payload, 0)
    if magic != WEM1_MAGIC:
        raise FormatError(f"bad WEM1 magic {magic!r}", offset=0)
    if count == 0:
        raise FormatError("WEM1 image count is zero", offset=4)
    if height == 0 or width == 0:
        raise FormatError(f"WEM1 image extents {height}x{width} are empty", offset=8)
    expected = WEM1_HEADER.size + 4 * count * height * width
    if len(payload) < expected:
        raise TruncationError(
            f"WEM1 payload truncated: header declares {count} images of {height}x{width}, "
            f"need {expected} bytes, have {len(payload)}",
            offset=len(payload),
        )
    data = np.frombuffer(payload, dtype="<f4", count=count * height * width, offset=WEM1_HEADER.size)
    return data.reshape(count, height, width).astype(np.float32)


def read_wem1(path: PathLike) -> np.ndarray:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}")
    return decode_wem1(payload)


def write_wem1(images: np.ndarray, path: PathLike) -> None:
    atomic_write(path, encode_wem1(images))
    logger.info("Wrote %d images to %s", len(images), path)


def to_gray_bytes(raster: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to bytes with round((v + 1) / 2 * 255), clamped"""
    scaled = np.floor((np.asarray(raster, dtype=np.float64) + 1.0) / 2.0 * 255.0 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def encode_pgm(raster: np.ndarray) -> bytes:
    height, width = raster.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + to_gray_bytes(raster).tobytes(order="C")


def write_pgm(raster: np.ndarray, path: PathLike) -> None:
    atomic_write(path, encode_pgm(raster))


def parse_waypoints(text: str) -> np.ndarray:
    points = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"expected 'x y', got '{raw.strip()}'", line=number)
        try:
            x, y = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"non-numeric waypoint '{raw.strip()}'", line=number)
        if not (np.isfinite(x) and np.isfinite(y)):
            raise ParseError(f"non-finite waypoint '{raw.strip()}'", line=number)
        points.append((x, y))
    return np.array(points, dtype=np.float64).reshape(-1, 2)


def read_waypoints(path: PathLike) -> np.ndarray:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read waypoint file {path}: {e}")
    return parse_waypoints(text)


def encode_learning_curve(records: Iterable[IterationRecord]) -> bytes:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(LEARNING_CURVE_COLUMNS)
    for rec in records:
        writer.writerow(rec.to_row())
    return buffer.getvalue().encode("utf-8")


def write_learning_curve(records: List[IterationRecord], path: PathLike) -> None:
    atomic_write(path, encode_learning_curve(records))


def encode_lr_sweep(records: Iterable[IterationRecord]) -> bytes:
    """Generator loss against learning rate; iterations before the first update have an empty loss"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(LR_SWEEP_COLUMNS)
    for rec in records:
        writer.writerow(rec.to_row(LR_SWEEP_COLUMNS))
    return buffer.getvalue().encode("utf-8")


def write_lr_sweep(records: List[IterationRecord], path: PathLike) -> None:
    atomic_write(path, encode_lr_sweep(records))


def read_learning_curve(path: PathLike) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))
