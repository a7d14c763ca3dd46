"""PNG (8-bit) and PFM (float32) image files.

Images are float arrays ``H x W x C`` (or ``H x W``) in memory. PNG stores
``round(255 * x)``; PFM stores float32 little-endian, rows bottom-to-top as
the format requires.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageFormatError(ValueError):
    """Unsupported extension or a corrupt / truncated file."""


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image, path) -> None:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 3 and a.shape[2] not in (3, 4):
        raise ImageFormatError(f"PNG needs 1, 3 or 4 channels, got {a.shape}")
    buf = io.BytesIO()
    Image.fromarray(_to_uint8(a)).save(buf, format="PNG")
    Path(path).write_bytes(buf.getvalue())


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB", "RGBA"):
                im = im.convert("RGBA" if "A" in im.mode else "RGB")
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ImageFormatError(f"{path}: cannot decode PNG ({exc})") from None
    return arr.astype(np.float64) / 255.0


def save_pfm(image, path) -> None:
    a = np.asarray(image, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ImageFormatError(f"PFM needs 1 or 3 channels, got {a.shape}")
    h, w = a.shape[:2]
    header = tag + b"\n" + f"{w} {h}\n-1.0\n".encode()
    payload = np.ascontiguousarray(a[::-1]).astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_pfm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    try:
        tag, dims, scale, payload = blob.split(b"\n", 3)
        channels = {b"PF": 3, b"Pf": 1}[tag.strip()]
        w, h = (int(x) for x in dims.split())
        scale = float(scale)
    except (ValueError, KeyError) as exc:
        raise ImageFormatError(f"{path}: bad PFM header ({exc})") from None
    n = w * h * channels
    if len(payload) < 4 * n:
        raise ImageFormatError(f"{path}: truncated PFM ({len(payload)} of {4 * n} payload bytes)")
    dtype = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(payload[: 4 * n], dtype=dtype).astype(np.float32)
    a = a.reshape(h, w, channels)[::-1]
    return np.ascontiguousarray(a[..., 0] if channels == 1 else a)


def save_image(image, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        save_png(image, path)
    elif suffix == ".pfm":
        save_pfm(image, path)
    else:
        raise ImageFormatError(f"unsupported image format {suffix!r} (use .png or .pfm)")


def load_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return load_png(path)
    if suffix == ".pfm":
        return load_pfm(path)
    raise ImageFormatError(f"unsupported image format {suffix!r} (use .png or .pfm)")
