"""Image file helpers: 8-bit RGB, binary masks and 16-bit millimeter depth."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IoFailure


def read_image(path):
    """RGB uint8 array (H, W, 3). Grayscale inputs are replicated to three channels."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read image {path}: {exc}") from exc
    return arr.copy()


def write_image(path, rgb):
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        raise ValueError("images must be uint8")
    try:
        Image.fromarray(rgb).save(path)
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot write image {path}: {exc}") from exc


def read_mask(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read mask {path}: {exc}") from exc
    return arr > 127


def write_mask(path, mask):
    write_image_gray(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def write_image_gray(path, gray):
    try:
        Image.fromarray(np.asarray(gray, dtype=np.uint8), mode="L").save(path)
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot write image {path}: {exc}") from exc


def write_depth_mm(path, depth_m):
    """Store meters as 16-bit millimeters (0 = invalid, values saturate at 65.535 m)."""
    mm = np.clip(np.rint(np.asarray(depth_m, dtype=np.float64) * 1000.0), 0, 65535).astype(np.uint16)
    try:
        Image.fromarray(mm).save(path)
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot write depth {path}: {exc}") from exc


def read_depth_mm(path):
    """Depth in meters from a 16-bit millimeter PNG."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read depth {path}: {exc}") from exc
    if arr.ndim != 2:
        raise IoFailure(f"{path}: depth images must be single-channel")
    return arr.astype(np.float64) / 1000.0


def list_frames(directory, suffix=".png"):
    """Sorted frame files in ``directory``."""
    d = Path(directory)
    if not d.is_dir():
        raise IoFailure(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.is_file() and (suffix is None or p.suffix == suffix))
