"""PNG / PPM / PGM reading and writing as float arrays in ``[0, 1]``."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


def load_image(path, channels: int | None = None) -> np.ndarray:
    """Decode to ``[H, W, C]`` float32, clamped to ``[0, 1]``.

    ``channels`` forces 1 (luma) or 3 (RGB); by default grayscale files give
    one channel and everything else three.
    """
    with Image.open(path) as im:
        if channels == 1 or (channels is None and im.mode in ("L", "I", "I;16", "1")):
            im = im.convert("L")
        else:
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.clip(arr, 0.0, 1.0)


def quantize(arr: np.ndarray) -> np.ndarray:
    """Round-half-up to 8 bit."""
    return np.floor(np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _atomic_write(path: Path, write) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_image(path, arr: np.ndarray) -> None:
    """Write an ``[H, W, C]`` (or ``[H, W]``) array; format from the suffix."""
    q = quantize(arr)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[:, :, 0]
    im = Image.fromarray(q)  # uint8 2-D gives L, [H, W, 3] gives RGB
    suffix = Path(path).suffix.lower()
    fmt = {".png": "PNG", ".ppm": "PPM", ".pgm": "PPM", ".pnm": "PPM"}.get(suffix)
    if fmt is None:
        raise ValueError(f"unsupported image suffix {suffix!r}; use one of {IMAGE_SUFFIXES}")
    _atomic_write(Path(path), lambda tmp: im.save(tmp, format=fmt))


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
