"""Frame image export: binary PGM always, PNG when Pillow is installed."""

from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np

from ._fileio import atomic_write
from .tensor import Tensor


def quantize(frames) -> np.ndarray:
    """Map [0, 1] to bytes with ``floor(p*255 + 0.5)`` (0.5 -> 128)."""
    a = np.asarray(frames, dtype=np.float64)
    if a.size and (np.isnan(a).any() or a.min() < 0.0 or a.max() > 1.0):
        raise ValueError("frame values must lie in [0, 1]")
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def encode_pgm(img: np.ndarray) -> bytes:
    """Binary P5, maxval 255, for a 2-d uint8 image."""
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"expected a 2-d uint8 image, got {img.dtype}{img.shape}")
    h, w = img.shape
    return f"P5 {w} {h} 255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


_PGM_HEAD = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def decode_pgm(buf: bytes) -> np.ndarray:
    m = _PGM_HEAD.match(buf)
    if m is None:
        raise ValueError("not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    body = buf[m.end():]
    if len(body) != w * h:
        raise ValueError(f"PGM payload has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def _as_frames(frames) -> np.ndarray:
    a = np.asarray(frames.data if isinstance(frames, Tensor) else frames)
    if a.ndim == 4:
        if a.shape[1] != 1:
            raise ValueError(f"expected one channel, got shape {a.shape}")
        a = a[:, 0]
    if a.ndim != 3:
        raise ValueError(f"frames must be (T, 1, H, W) or (T, H, W), got {a.shape}")
    return a


def _png_bytes(img: np.ndarray) -> bytes:
    try:
        from PIL import Image
    except ImportError:
        raise RuntimeError("PNG export needs Pillow; install it or use format='pgm'") from None
    out = io.BytesIO()
    Image.fromarray(img, mode="L").save(out, format="PNG")
    return out.getvalue()


def _encode(img: np.ndarray, fmt: str) -> bytes:
    if fmt == "pgm":
        return encode_pgm(img)
    if fmt == "png":
        return _png_bytes(img)
    raise ValueError(f"unknown image format {fmt!r}; choose 'pgm' or 'png'")


def export_frames(frames, out_dir, fmt: str = "pgm", prefix: str = "frame", start: int = 0) -> list:
    """Write one image per frame as ``<prefix>_<index>.<fmt>``; return the paths.

    Indices are zero-padded to at least 3 digits so names sort in order.
    """
    q = quantize(_as_frames(frames))
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    width = max(3, len(str(start + len(q) - 1)))
    paths = []
    for i, img in enumerate(q):
        p = out_dir / f"{prefix}_{start + i:0{width}d}.{fmt}"
        atomic_write(p, _encode(img, fmt))
        paths.append(p)
    return paths


def export_strip(top, bottom, path, fmt: str = "pgm", gap: int = 1) -> Path:
    """Two rows of frames (e.g. truth above prediction) in one image."""
    a, b = quantize(_as_frames(top)), quantize(_as_frames(bottom))
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"frame sizes differ: {a.shape[1:]} vs {b.shape[1:]}")
    t = max(len(a), len(b))
    h, w = a.shape[1:]
    canvas = np.zeros((2 * h + gap, t * (w + gap) - gap), dtype=np.uint8)
    for row, frames in ((0, a), (h + gap, b)):
        for i, img in enumerate(frames):
            canvas[row:row + h, i * (w + gap):i * (w + gap) + w] = img
    path = Path(path)
    atomic_write(path, _encode(canvas, fmt))
    return path
