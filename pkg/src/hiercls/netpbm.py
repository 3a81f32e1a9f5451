"""Binary netpbm image I/O: PPM (P6) for color, PGM (P5) for gray.

Chosen as the on-disk image format because both are parseable in a few
lines of any language and carry no codec or compression dependencies.
Only 8-bit (maxval 255) files are supported.
"""

from __future__ import annotations

import numpy as np

from hiercls.errors import DatasetError


def _read_header_tokens(data: bytes, path, count: int) -> tuple[list[int], int]:
    """Read `count` whitespace-separated integer tokens after the magic,
    skipping '#' comments; returns (tokens, offset past the single
    whitespace byte that terminates the header)."""
    tokens: list[int] = []
    i = 2  # past the 2-byte magic
    current = b""
    while len(tokens) < count:
        if i >= len(data):
            raise DatasetError(f"{path}: truncated netpbm header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif c in (b" ", b"\t", b"\r", b"\n"):
            if current:
                try:
                    tokens.append(int(current))
                except ValueError:
                    raise DatasetError(
                        f"{path}: bad netpbm header token {current!r}"
                    ) from None
                current = b""
        elif c.isdigit():
            current += c
        else:
            raise DatasetError(f"{path}: unexpected byte {c!r} in netpbm header")
        i += 1
    return tokens, i


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3) uint8, got {image.dtype} {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary PGM."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError(f"PGM needs (H, W) uint8, got {image.dtype} {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != magic:
        raise DatasetError(
            f"{path}: not a {magic.decode()} netpbm file (starts with {data[:2]!r})"
        )
    (w, h, maxval), offset = _read_header_tokens(data, path, 3)
    if maxval != 255:
        raise DatasetError(f"{path}: only maxval 255 supported, got {maxval}")
    if w <= 0 or h <= 0:
        raise DatasetError(f"{path}: bad dimensions {w}x{h}")
    expected = w * h * channels
    pixels = data[offset:]
    if len(pixels) != expected:
        raise DatasetError(
            f"{path}: expected {expected} pixel bytes, found {len(pixels)}"
        )
    arr = np.frombuffer(pixels, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(h, w).copy()
    return arr.reshape(h, w, channels).copy()


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5", 1)
