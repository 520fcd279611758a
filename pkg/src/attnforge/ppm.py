"""Binary PPM (P6) and PGM (P5) read/write, 8-bit, no comments."""

from pathlib import Path

import numpy as np


def write_ppm(path, image: np.ndarray):
    """image: (H, W, 3) uint8."""
    image = np.asarray(image, dtype=np.uint8)
    h, w, c = image.shape
    if c != 3:
        raise ValueError("PPM requires 3 channels")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def write_pgm(path, image: np.ndarray):
    """image: (H, W) uint8."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def _read_header(f, magic: bytes):
    if f.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        tok = b""
        ch = f.read(1)
        while ch.isspace():
            ch = f.read(1)
        while ch and not ch.isspace():
            tok += ch
            ch = f.read(1)
        if not tok:
            raise ValueError("truncated header")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("only 8-bit images supported")
    return w, h


def read_ppm(path) -> np.ndarray:
    with open(Path(path), "rb") as f:
        w, h = _read_header(f, b"P6")
        data = f.read(w * h * 3)
    if len(data) != w * h * 3:
        raise ValueError(f"truncated pixel data in {path}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    with open(Path(path), "rb") as f:
        w, h = _read_header(f, b"P5")
        data = f.read(w * h)
    if len(data) != w * h:
        raise ValueError(f"truncated pixel data in {path}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
