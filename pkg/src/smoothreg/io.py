"""Image, flow, landmark and manifest files.

Images are grayscale PNG (8 or 16 bit) or binary PGM; intensities are scaled
to ``[0, 1]`` by the maximum representable value. Flows use the Middlebury
``.flo`` layout: magic ``PIEH``, little-endian int32 width and height, then
row-major interleaved float32 ``(dx, dy)``.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .bench import LandmarkSet

__all__ = [
    "read_image",
    "write_image",
    "read_flow",
    "write_flow",
    "read_landmarks",
    "write_landmarks",
    "read_json",
    "write_json",
]

FLO_MAGIC = b"PIEH"
_IMAGE_SUFFIXES = (".png", ".pgm")


def _check_suffix(path: Path) -> None:
    if path.suffix.lower() not in _IMAGE_SUFFIXES:
        raise ValueError(f"{path}: unsupported image format (use .png or .pgm)")


def read_image(path) -> np.ndarray:
    """Load a grayscale image as float64 in ``[0, 1]``."""
    path = Path(path)
    _check_suffix(path)
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if mode in ("L", "P", "1"):
        scale = 255.0
    elif mode.startswith("I;16") or mode == "I":
        scale = 65535.0
    else:
        raise ValueError(f"{path}: expected a grayscale image, got mode {mode}")
    return arr.astype(np.float64) / scale


def write_image(path, img: np.ndarray, bits: int = 8) -> None:
    """Save an image in ``[0, 1]`` (values are clipped) as 8- or 16-bit grayscale."""
    path = Path(path)
    _check_suffix(path)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    if bits == 8:
        im = Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
    elif bits == 16:
        q = np.round(np.clip(img, 0, 1) * 65535).astype(np.uint16)
        im = Image.fromarray(q)
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    im.save(path)


def write_flow(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"expected an (H, W, 2) field, got shape {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flow(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != FLO_MAGIC:
        raise ValueError(f"{path}: not a .flo file (bad magic)")
    w, h = (int(v) for v in np.frombuffer(data, dtype="<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise ValueError(f"{path}: invalid size {w}x{h}")
    if len(data) != 12 + 8 * w * h:
        raise ValueError(f"{path}: expected {8 * w * h} payload bytes, found {len(data) - 12}")
    vals = np.frombuffer(data, dtype="<f4", offset=12)
    return vals.reshape(h, w, 2).astype(np.float64)


def write_landmarks(path, landmarks: LandmarkSet) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["xf", "yf", "xm", "ym"])
        for row in landmarks.points:
            wr.writerow([repr(float(v)) for v in row])


def read_landmarks(path) -> LandmarkSet:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != ["xf", "yf", "xm", "ym"]:
            raise ValueError(f"{path}: expected header xf,yf,xm,ym, got {header}")
        rows = [[float(v) for v in r] for r in rd if r]
    if any(len(r) != 4 for r in rows):
        raise ValueError(f"{path}: every landmark row needs 4 values")
    return LandmarkSet(np.array(rows).reshape(-1, 4))


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
