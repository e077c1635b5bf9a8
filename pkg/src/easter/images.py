"""Grayscale image I/O and the preprocessing shared by training and inference."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

INPUT_HEIGHT = 40
BACKGROUND = 255
LUMA = np.array([0.299, 0.587, 0.114])


def write_pgm(path, image: np.ndarray) -> None:
    """Write an 8-bit grayscale array as binary PGM (P5)."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise DataError(f"PGM needs a 2-D uint8 array, got {image.shape} {image.dtype}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def _pgm_tokens(buf: bytes, count: int):
    pos, out = 0, []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise DataError(f"{path}: not a binary PGM file")
    (magic, w, h, maxval), pos = _pgm_tokens(buf, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise DataError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos) if len(buf) - pos >= w * h else None
    if data is None:
        raise DataError(f"{path}: truncated pixel data")
    return data.reshape(h, w).copy()


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Luminance conversion with fixed 0.299/0.587/0.114 weights; gray input passes through."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.uint8, copy=False)
    if image.ndim == 3 and image.shape[2] in (3, 4):
        rgb = image[..., :3].astype(np.float64)
        return np.clip(np.rint(rgb @ LUMA), 0, 255).astype(np.uint8)
    if image.ndim == 3 and image.shape[2] == 1:
        return image[..., 0].astype(np.uint8, copy=False)
    raise DataError(f"unsupported image shape {image.shape}")


def read_image(path) -> np.ndarray:
    """Load any PGM or Pillow-readable file as an 8-bit grayscale array."""
    path = os.fspath(path)
    if path.lower().endswith(".pgm"):
        try:
            return read_pgm(path)
        except DataError:
            pass
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "RGB", "RGBA"):
                arr = np.asarray(im)
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from None
    return to_grayscale(arr)


def resize_to_height(image: np.ndarray, height: int = INPUT_HEIGHT) -> np.ndarray:
    """Bilinear rescale to ``height`` rows, keeping the aspect ratio."""
    h, w = image.shape
    if h == height:
        return image
    new_w = max(1, int(round(w * height / h)))
    return np.asarray(Image.fromarray(image).resize((new_w, height), Image.BILINEAR))


def normalize(image: np.ndarray) -> np.ndarray:
    """Map 8-bit pixels to [-1, 1]: scale to [0, 1], then (x - 0.5) / 0.5."""
    return (image.astype(np.float32) / 255.0 - 0.5) / 0.5


def pad_batch(images) -> tuple[np.ndarray, list[int]]:
    """Right-pad normalized ``[H, W]`` arrays with the background value to a common width."""
    widths = [im.shape[1] for im in images]
    height = images[0].shape[0]
    out = np.full((len(images), height, max(widths)), normalize(np.array([BACKGROUND]))[0], dtype=np.float32)
    for i, im in enumerate(images):
        out[i, :, : im.shape[1]] = im
    return out, widths
