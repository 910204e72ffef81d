"""Binary PPM/PGM image I/O with the project's gamma conventions.

Color images are stored as 8-bit P6 PPM in sRGB-ish space (gamma 1/2.2
applied to linear values clamped to [0,1]). Scalar maps (depth, alpha,
shadow ratio) are 16-bit P5 PGM, big-endian per the netpbm spec, with the
linear value range recorded in a `<name>.scale.txt` sidecar. Binary masks
are 8-bit P5 with values 0/255.
"""

from __future__ import annotations

import os

import numpy as np

GAMMA = 2.2


def linear_to_srgb8(img: np.ndarray) -> np.ndarray:
    """Clamp linear [0,1] floats and encode to uint8 with gamma 1/2.2."""
    clamped = np.clip(img, 0.0, 1.0)
    return np.round(255.0 * clamped ** (1.0 / GAMMA)).astype(np.uint8)


def srgb8_to_linear(img: np.ndarray) -> np.ndarray:
    return (img.astype(np.float64) / 255.0) ** GAMMA


def _read_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise ValueError(f"expected {magic!r} header, got {data[:2]!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment line
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    return fields[0], fields[1], fields[2], pos + 1  # w, h, maxval, data offset


def write_ppm(path: str | os.PathLike, linear_rgb: np.ndarray) -> None:
    """Write an (H, W, 3) linear float image as 8-bit P6."""
    h, w, _ = linear_rgb.shape
    body = linear_to_srgb8(linear_rgb)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(body.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit P6 file back to linear float (H, W, 3)."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, off = _read_header(data, b"P6")
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, maxval={maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=off)
    return srgb8_to_linear(raw.reshape(h, w, 3))


def write_pgm16(path: str | os.PathLike, values: np.ndarray,
                lo: float, hi: float) -> None:
    """Write an (H, W) float map as 16-bit P5; [lo, hi] maps to [0, 65535]."""
    h, w = values.shape
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((values - lo) / span, 0.0, 1.0)
    body = np.round(scaled * 65535.0).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(body.tobytes())
    with open(str(path) + ".scale.txt", "w") as f:
        f.write(f"lo {lo!r}\nhi {hi!r}\n")


def read_pgm16(path: str | os.PathLike) -> np.ndarray:
    """Read a 16-bit P5 map back to floats using its sidecar scale."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, off = _read_header(data, b"P5")
    if maxval != 65535:
        raise ValueError(f"expected 16-bit PGM, maxval={maxval}")
    raw = np.frombuffer(data, dtype=">u2", count=w * h, offset=off)
    lo, hi = 0.0, 1.0
    with open(str(path) + ".scale.txt") as f:
        for line in f:
            key, val = line.split()
            if key == "lo":
                lo = float(val)
            elif key == "hi":
                hi = float(val)
    return lo + (raw.reshape(h, w).astype(np.float64) / 65535.0) * (hi - lo)


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    """Write a binary (H, W) mask as 8-bit P5 with values 0/255."""
    h, w = mask.shape
    body = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(body.tobytes())


def read_mask(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, off = _read_header(data, b"P5")
    if maxval != 255:
        raise ValueError(f"expected 8-bit PGM mask, maxval={maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off)
    return raw.reshape(h, w) >= 128
