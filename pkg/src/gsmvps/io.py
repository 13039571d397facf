"""Image and raw float-map I/O.

Float maps: 16-byte little-endian header (magic ``b"GSFM"``, width, height,
channels as uint32) followed by float32 samples in row-major HWC order.
PNGs are written through OpenCV; channel order on disk is the usual RGB.
"""

from __future__ import annotations

import struct
from pathlib import Path

import cv2
import numpy as np

FLOAT_MAGIC = b"GSFM"
_HEADER = struct.Struct("<4sIII")


def write_float_map(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[..., None]
    h, w, c = data.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FLOAT_MAGIC, w, h, c))
        f.write(np.ascontiguousarray(data).astype("<f4").tobytes())


def read_float_map(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, w, h, c = _HEADER.unpack_from(raw)
    if magic != FLOAT_MAGIC:
        raise ValueError(f"{path}: not a float map (magic {magic!r})")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if data.size != w * h * c:
        raise ValueError(f"{path}: truncated float map")
    return data.reshape(h, w, c).astype(np.float32)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, x * 12.92, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def read_png_raw(path: str | Path) -> np.ndarray:
    """Stored integers (uint8 or uint16), RGB order, shape [H, W] or [H, W, 3]."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    if img.ndim == 3:
        img = img[..., :3][..., ::-1]
    return np.ascontiguousarray(img)


def write_png_raw(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.dtype not in (np.uint8, np.uint16):
        raise TypeError("raw PNG data must be uint8 or uint16")
    if data.ndim == 3:
        data = np.ascontiguousarray(data[..., ::-1])
    if not cv2.imwrite(str(path), data):
        raise OSError(f"cannot write image {path}")


def raw_to_float(raw: np.ndarray) -> np.ndarray:
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    return raw.astype(np.float64) / scale


def float_to_raw(x: np.ndarray, bits: int = 16) -> np.ndarray:
    top = 65535 if bits == 16 else 255
    dtype = np.uint16 if bits == 16 else np.uint8
    return np.round(np.clip(x, 0.0, 1.0) * top).astype(dtype)


def save_image(path: str | Path, linear_rgb: np.ndarray, srgb: bool = True, bits: int = 8) -> None:
    """Export a linear image as PNG (sRGB-encoded unless ``srgb`` is False)."""
    x = linear_to_srgb(linear_rgb) if srgb else np.clip(linear_rgb, 0, 1)
    write_png_raw(path, float_to_raw(x, bits))


def encode_normals(n: np.ndarray, bits: int = 16) -> np.ndarray:
    """Unit normals in [-1, 1] -> integers via ``(n + 1) / 2 * max``."""
    return float_to_raw((np.asarray(n) + 1.0) / 2.0, bits)


def decode_normals(raw: np.ndarray) -> np.ndarray:
    return raw_to_float(raw) * 2.0 - 1.0
