"""Tensor files, JSON manifests, CSV tables and grayscale renders.

A tensor is stored as two files sharing a stem: ``<stem>.bin`` holds the
raw little-endian values in x-fastest (Fortran) order, complex values as
interleaved (re, im) float64 pairs; ``<stem>.json`` is the sidecar
``{shape, domain, dtype, seed, description}``.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

DTYPES = {"c128": np.dtype("<c16"), "f64": np.dtype("<f8")}


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".bin", ".json") else path


def save_tensor(path, data, domain: str, seed=None, description: str = "") -> list[Path]:
    """Write ``data`` as ``<stem>.bin`` + ``<stem>.json``; returns both paths."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(data)
    code = "c128" if np.iscomplexobj(data) else "f64"
    raw = np.asarray(data, dtype=DTYPES[code])
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    bin_path.write_bytes(raw.tobytes(order="F"))
    meta = {
        "shape": list(raw.shape),
        "domain": domain,
        "dtype": code,
        "seed": None if seed is None else int(seed),
        "description": description,
    }
    write_json(json_path, meta)
    return [bin_path, json_path]


def load_tensor(path) -> tuple[np.ndarray, dict]:
    stem = _stem(path)
    meta = json.loads(stem.with_suffix(".json").read_text())
    dtype = DTYPES[meta["dtype"]]
    flat = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype=dtype)
    shape = tuple(meta["shape"])
    if flat.size != int(np.prod(shape)):
        raise ValueError(f"{stem}.bin holds {flat.size} values, sidecar declares shape {shape}")
    return np.ascontiguousarray(flat.reshape(shape, order="F"), dtype=dtype.newbyteorder("=")), meta


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def append_csv(path, header: list[str], row) -> Path:
    path = Path(path)
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(header)
        writer.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_pgm16(path, image, vmin=None, vmax=None) -> Path:
    """Render a real 2D array as a 16-bit binary PGM (x down, y across)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {img.shape}")
    finite = np.isfinite(img)
    lo = float(np.min(img[finite])) if vmin is None and finite.any() else float(vmin or 0.0)
    hi = float(np.max(img[finite])) if vmax is None and finite.any() else float(vmax or 1.0)
    scaled = np.zeros_like(img) if hi <= lo else (np.where(finite, img, lo) - lo) / (hi - lo)
    pixels = np.round(np.clip(scaled, 0.0, 1.0) * 65535).astype(">u2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode()
    path.write_bytes(header + pixels.tobytes())
    return path


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(height, width)
