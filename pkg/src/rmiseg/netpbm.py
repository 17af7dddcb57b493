"""Binary netpbm readers and writers: PGM (P5) for masks and grayscale maps,
PPM (P6) for rendered images. 8-bit only."""

from __future__ import annotations

import numpy as np


def write_pgm(path, gray: np.ndarray) -> None:
    """Write a (H, W) uint8 array as binary PGM."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {gray.shape}")
    height, width = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a (H, W, 3) uint8 array as binary PPM."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs a (H, W, 3) array, got shape {rgb.shape}")
    height, width, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _read_header(fh, magic: bytes):
    if fh.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")

    def next_token() -> bytes:
        tok = b""
        while True:
            ch = fh.read(1)
            if not ch:
                raise ValueError("truncated netpbm header")
            if ch == b"#":  # comment runs to end of line
                while ch not in (b"\n", b""):
                    ch = fh.read(1)
                continue
            if ch.isspace():
                if tok:
                    return tok
                continue
            tok += ch

    width = int(next_token())
    height = int(next_token())
    maxval = int(next_token())
    if maxval != 255:
        raise ValueError(f"only 8-bit netpbm supported, maxval={maxval}")
    return width, height


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a (H, W) uint8 array."""
    with open(path, "rb") as fh:
        width, height = _read_header(fh, b"P5")
        raw = fh.read(width * height)
    if len(raw) != width * height:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width)


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        width, height = _read_header(fh, b"P6")
        raw = fh.read(width * height * 3)
    if len(raw) != width * height * 3:
        raise ValueError(f"{path}: truncated PPM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
