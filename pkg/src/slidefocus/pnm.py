"""Binary netpbm I/O: P6 color images and P5 grayscale maps.

Maxval 255 maps to one byte per sample; maxval above 255 maps to two bytes
big-endian per the netpbm convention (used for region-label rasters whose
ids exceed 255). Round trips are bit-exact.
"""

from __future__ import annotations

import numpy as np


def _read_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise ValueError(f"expected {magic.decode()} file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment runs to end of line
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    return fields[0], fields[1], fields[2], pos


def write_ppm(path, image: np.ndarray) -> None:
    """Write an [H, W, 3] uint8 array as binary PPM (P6)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("PPM writer expects an [H, W, 3] uint8 array")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, maxval, pos = _read_header(data, b"P6")
    if maxval != 255:
        raise ValueError("only maxval 255 PPM supported")
    return np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos).reshape(h, w, 3).copy()


def write_pgm(path, image: np.ndarray, maxval: int | None = None) -> None:
    """Write an [H, W] array as binary PGM (P5); 16-bit big-endian when maxval > 255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM writer expects an [H, W] array")
    if maxval is None:
        maxval = 255 if img.dtype == np.uint8 else 65535
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        if maxval > 255:
            fh.write(img.astype(">u2").tobytes())
        else:
            fh.write(img.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read binary PGM; returns uint8 for maxval <= 255, else uint16."""
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, maxval, pos = _read_header(data, b"P5")
    if maxval > 255:
        a = np.frombuffer(data, dtype=">u2", count=h * w, offset=pos)
        return a.reshape(h, w).astype(np.uint16)
    return np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w).copy()
