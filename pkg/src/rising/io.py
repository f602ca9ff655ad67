"""Raw float32 image/sinogram files with JSON headers, and atomic writes.

An array ``foo.imgraw`` (or ``foo.sinraw``) is accompanied by ``foo.json``
holding ``{"width", "height", "dtype": "f32", "order": "row-major"}``.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

IMAGE_EXT = ".imgraw"
SINOGRAM_EXT = ".sinraw"
_DTYPE = np.dtype("<f4")


class FormatError(ValueError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | Path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def header_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def write_raw(path: str | Path, array: np.ndarray) -> Path:
    """Write a 2D array as little-endian float32 plus its JSON header."""
    path = Path(path)
    array = np.asarray(array)
    if array.ndim != 2:
        raise FormatError(f"{path}: expected a 2D array, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise FormatError(f"{path}: refusing to write non-finite values")
    height, width = array.shape
    header = {"width": int(width), "height": int(height), "dtype": "f32", "order": "row-major"}
    atomic_write_bytes(path, np.ascontiguousarray(array, dtype=_DTYPE).tobytes())
    write_json(header_path(path), header)
    return path


def read_raw(path: str | Path) -> np.ndarray:
    """Read an array written by :func:`write_raw`, validating it against its header."""
    path = Path(path)
    try:
        header = read_json(header_path(path))
        payload = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if header.get("dtype") != "f32" or header.get("order") != "row-major":
        raise FormatError(f"{path}: unsupported header {header}")
    width, height = int(header["width"]), int(header["height"])
    if len(payload) != width * height * _DTYPE.itemsize:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header says {width}x{height} f32")
    return np.frombuffer(payload, dtype=_DTYPE).reshape(height, width).astype(np.float64)


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(doc) -> str:
    """Stable short hash of a JSON-serialisable document."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
