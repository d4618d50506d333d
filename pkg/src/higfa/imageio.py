"""8-bit grayscale image files: binary PGM (P5) and PNG."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["read_gray", "write_gray", "read_pgm", "write_pgm"]


def write_pgm(path, img: np.ndarray) -> None:
    img = np.ascontiguousarray(np.asarray(img, dtype=np.uint8))
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    data = raw[m.end():]
    if len(data) < w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data[: w * h], dtype=np.uint8).reshape(h, w).copy()


def write_gray(path, img: np.ndarray) -> None:
    """Write by extension: .pgm or .png."""
    path = Path(path)
    img = np.asarray(img, dtype=np.uint8)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, img)
    elif path.suffix.lower() == ".png":
        Image.fromarray(img, mode="L").save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image extension: {path.suffix}")


def read_gray(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    if path.suffix.lower() == ".png":
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    raise ValueError(f"unsupported image extension: {path.suffix}")
