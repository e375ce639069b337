"""Minimal netpbm image I/O: binary PGM (P5) and PPM (P6).

Images load as float64 arrays of shape (1, h, w, c) with values in [0, 1]
(c = 1 for PGM, 3 for PPM); predicted masks save as P5 with values {0, 255}.
Malformed files raise FormatError with the offending byte offset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

__all__ = ["read_image", "write_mask", "write_gray"]


class _TokenScanner:
    """Whitespace/comment-aware header tokenizer over raw netpbm bytes."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.off = 0
        self.what = what

    def fail(self, message: str) -> FormatError:
        return FormatError(f"{self.what}: {message}", where=f"byte {self.off}")

    def token(self) -> bytes:
        data, n = self.data, len(self.data)
        while self.off < n:
            ch = data[self.off]
            if ch == ord("#"):
                while self.off < n and data[self.off] not in b"\r\n":
                    self.off += 1
            elif chr(ch).isspace():
                self.off += 1
            else:
                break
        if self.off >= n:
            raise self.fail("truncated header")
        start = self.off
        while self.off < n and not chr(data[self.off]).isspace() and data[self.off] != ord("#"):
            self.off += 1
        return data[start : self.off]

    def positive_int(self, name: str) -> int:
        tok = self.token()
        try:
            value = int(tok.decode("ascii"), 10)
        except (UnicodeDecodeError, ValueError) as exc:
            raise self.fail(f"{name}: {tok!r} is not a decimal integer") from exc
        if value <= 0:
            raise self.fail(f"{name} must be positive, got {value}")
        return value


def read_image(path) -> np.ndarray:
    """Decode a P5/P6 file to float64 (1, h, w, c) scaled to [0, 1]."""
    data = Path(path).read_bytes()
    s = _TokenScanner(data, f"image file {path}")
    magic = s.token()
    if magic not in (b"P5", b"P6"):
        s.off = 0
        raise s.fail(f"unsupported magic {magic!r} (want P5 or P6)")
    channels = 1 if magic == b"P5" else 3
    width = s.positive_int("width")
    height = s.positive_int("height")
    maxval = s.positive_int("maxval")
    if maxval > 65535:
        raise s.fail(f"maxval {maxval} exceeds 65535")
    s.off += 1  # single whitespace byte separates header from raster
    per_sample = 2 if maxval > 255 else 1
    count = width * height * channels
    raster = data[s.off : s.off + count * per_sample]
    if len(raster) != count * per_sample:
        raise s.fail(
            f"raster truncated: wanted {count * per_sample} bytes, got {len(raster)}"
        )
    dtype = ">u2" if per_sample == 2 else np.uint8
    values = np.frombuffer(raster, dtype=dtype).astype(np.float64) / maxval
    return values.reshape(1, height, width, channels)


def write_mask(path, mask: np.ndarray) -> None:
    """Write a (h, w) or (1, h, w) array of {0, 1} as P5 with values {0, 255}."""
    m = np.squeeze(np.asarray(mask))
    if m.ndim != 2:
        raise ShapeError(f"mask must be 2-d, got shape {np.asarray(mask).shape}")
    payload = np.where(m != 0, 255, 0).astype(np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + payload.tobytes())


def write_gray(path, image: np.ndarray) -> None:
    """Write floats in [0, 1] (h, w) as 8-bit P5, rounding half away from zero."""
    img = np.squeeze(np.asarray(image, dtype=np.float64))
    if img.ndim != 2:
        raise ShapeError(
            f"grayscale image must be 2-d, got shape {np.asarray(image).shape}"
        )
    payload = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + payload.tobytes())
