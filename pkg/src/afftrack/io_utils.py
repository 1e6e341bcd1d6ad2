"""File I/O helpers: atomic writes, PNGs, keypoint records, flow binaries.

All output files are written through a temp-file-plus-rename so partially
written artifacts never appear under their final name.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _png_bytes(img: Image.Image) -> bytes:
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_png_rgb(path, rgb01: np.ndarray) -> None:
    """8-bit RGB PNG from float [0, 1] (H, W, 3)."""
    arr = np.clip(np.asarray(rgb01) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    atomic_write_bytes(path, _png_bytes(Image.fromarray(arr, mode="RGB")))


def read_png_rgb(path) -> np.ndarray:
    """Float [0, 1] (H, W, 3) from an RGB PNG."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_png_gray(path, gray01: np.ndarray) -> None:
    arr = np.clip(np.asarray(gray01) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    atomic_write_bytes(path, _png_bytes(Image.fromarray(arr, mode="L")))


def write_png_indexed(path, ids: np.ndarray, palette: list[tuple[int, int, int]]) -> None:
    """Indexed PNG where the palette index is the object id."""
    ids = np.asarray(ids)
    if ids.max(initial=0) >= len(palette):
        raise ConfigError("mask id exceeds palette size")
    img = Image.fromarray(ids.astype(np.uint8), mode="P")
    flat = []
    for r, g, b in palette:
        flat.extend([r, g, b])
    img.putpalette(flat)
    atomic_write_bytes(path, _png_bytes(img))


def read_png_indexed(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "P":
            raise ConfigError(f"{path} is not an indexed PNG")
        return np.asarray(img, dtype=np.int64)


def write_flow(path, flows: np.ndarray) -> None:
    """Per-step cell flows as little-endian float32: (T-1, 2, N)."""
    arr = np.asarray(flows, dtype="<f4")
    atomic_write_bytes(path, arr.tobytes())


def read_flow(path, n_cells: int) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % (2 * n_cells) != 0:
        raise ConfigError("flow file length disagrees with cell count")
    return raw.reshape(-1, 2, n_cells).astype(np.float64)


def write_keypoints(path, tracks: np.ndarray) -> None:
    """Text records 'frame joint x y', one per line; (T, J, 2) input."""
    tracks = np.asarray(tracks)
    lines = []
    for t in range(tracks.shape[0]):
        for j in range(tracks.shape[1]):
            x, y = tracks[t, j]
            lines.append(f"{t} {j} {x:.4f} {y:.4f}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_keypoints(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            t, j, x, y = line.split()
            rows.append((int(t), int(j), float(x), float(y)))
    if not rows:
        raise ConfigError(f"no keypoint records in {path}")
    n_t = max(r[0] for r in rows) + 1
    n_j = max(r[1] for r in rows) + 1
    out = np.full((n_t, n_j, 2), np.nan)
    for t, j, x, y in rows:
        out[t, j] = (x, y)
    return out
