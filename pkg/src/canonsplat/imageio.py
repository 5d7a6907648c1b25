"""Image files: 8-bit PNG for colour, PFM for float maps (depth, alpha)."""
from __future__ import annotations

import re

import numpy as np
from PIL import Image


def write_png(path, image):
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


def read_png(path):
    """Float image in [0, 1]; grayscale is returned as (H, W), colour as (H, W, 3)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


def write_pfm(path, data):
    """Little-endian PFM; rows are stored bottom-up as the format requires."""
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 2:
        header = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    payload = data[m.end():]
    if len(payload) < 4 * w * h * channels:
        raise ValueError(f"{path}: truncated PFM payload")
    a = np.frombuffer(payload[:4 * w * h * channels], dtype=dtype)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return a.reshape(shape)[::-1].astype(np.float64)
