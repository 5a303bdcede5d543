"""Image file I/O: 8-bit grayscale PNGs and little-endian PFM float maps."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image


def save_gray_u8(path: str | Path, pixels: np.ndarray) -> None:
    """Write a single-channel 8-bit image (used for images and class masks)."""
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ValueError(f"expected 2-d uint8 array, got {pixels.dtype} {pixels.shape}")
    Image.fromarray(pixels, mode="L").save(Path(path))


def load_gray_u8(path: str | Path) -> np.ndarray:
    img = Image.open(Path(path)).convert("L")
    return np.asarray(img, dtype=np.uint8)


def load_image_unit(path: str | Path) -> np.ndarray:
    """Load an image as float32 in [0, 1], shape (H, W)."""
    return load_gray_u8(path).astype(np.float32) / 255.0


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a grayscale portable float map, little-endian, rows bottom-up."""
    if data.ndim != 2:
        raise ValueError(f"expected 2-d array, got shape {data.shape}")
    h, w = data.shape
    payload = np.flipud(data.astype("<f4")).tobytes()
    with Path(path).open("wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale marks little-endian
        fh.write(payload)


def read_pfm(path: str | Path) -> np.ndarray:
    with Path(path).open("rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM file")
        w, h = (int(tok) for tok in fh.readline().split())
        scale = float(fh.readline())
        count = w * h
        raw = fh.read(count * 4)
    if len(raw) != count * 4:
        raise ValueError(f"{path}: truncated PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


def pack_tensor(name: str, array: np.ndarray) -> bytes:
    """One tensor entry of the binary tensor container (see read side)."""
    name_b = name.encode("utf-8")
    arr = np.ascontiguousarray(array, dtype="<f4")
    head = struct.pack("<I", len(name_b)) + name_b
    head += struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.tobytes()


def unpack_tensors(buf: bytes, count: int) -> list[tuple[str, np.ndarray]]:
    out = []
    off = 0
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        out.append((name, arr.copy()))
    if off != len(buf):
        raise ValueError("trailing bytes after last tensor")
    return out
