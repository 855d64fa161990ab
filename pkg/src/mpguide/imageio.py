"""PFM (lossless) and PNG (tone-mapped preview) image output."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, image: np.ndarray) -> None:
    """Colour PFM: header "PF\\n<w> <h>\\n-1.0\\n", rows bottom to top, little-endian float32."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (height, width, 3) image")
    h, w, _ = img.shape
    header = f"PF\n{w} {h}\n-1.0\n".encode("ascii")
    payload = np.ascontiguousarray(img[::-1], dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"PF":
        raise ValueError("not a colour PFM file")
    w, h = (int(v) for v in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(parts[3], dtype=dtype, count=w * h * 3).reshape(h, w, 3)
    return img[::-1].astype(np.float32)


def tonemap(image: np.ndarray) -> np.ndarray:
    """clamp(x^(1/2.2)) * 255, rounded half to even."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, None) ** (1.0 / 2.2)
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    Image.fromarray(tonemap(image), mode="RGB").save(path)


def write_image(film, path, png: bool = False) -> None:
    img = film.image() if hasattr(film, "image") else np.asarray(film)
    write_pfm(path, img)
    if png:
        write_png(Path(path).with_suffix(".png"), img)
