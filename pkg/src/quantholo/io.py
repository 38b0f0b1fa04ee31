"""
Reading targets and writing run artifacts.
"""

from __future__ import annotations

import json
import os
from importlib import resources

import numpy as np
from PIL import Image
from skimage.transform import resize

from .supervision import TargetContent

DEFAULT_GAMMA = 2.2
BUILTIN_TARGETS = ("camera", "coins", "moon", "horse", "astronaut", "clock", "page", "text")


def _read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P", "LA"):
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32, np.int64):
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64)


def _fit(arr, shape):
    if shape is None or arr.shape == tuple(shape):
        return arr
    return resize(arr, shape, order=1, anti_aliasing=True, mode="reflect")


def load_amplitude(path, gamma: float = DEFAULT_GAMMA, shape=None) -> np.ndarray:
    """Amplitude in [0, 1] from an 8/16-bit PNG: ``sqrt(value ** gamma)``."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    value = np.clip(_fit(_read_png(path), shape), 0.0, 1.0)
    return np.sqrt(value ** gamma)


def builtin_target_path(name: str):
    return resources.files("quantholo") / "data" / "targets" / f"{name}.png"


def builtin_amplitude(name: str, shape=(64, 64), gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    with resources.as_file(builtin_target_path(name)) as p:
        return load_amplitude(p, gamma, shape)


def load_depth(path, shape=None) -> np.ndarray:
    """Depth map from a 16-bit PNG (normalized to [0, 1]) or a raw float file.

    Raw files are ``.npy`` or little-endian float32 ``.raw``/``.bin`` with a
    square shape unless ``shape`` is given.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        return _fit(_read_png(path), shape)
    if ext == ".npy":
        return _fit(np.load(path).astype(np.float64), shape)
    raw = np.fromfile(path, dtype="<f4").astype(np.float64)
    if shape is None:
        side = int(round(np.sqrt(raw.size)))
        shape = (side, side)
    return raw.reshape(shape)


def _manifest(directory):
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        return json.load(fh)


def load_focal_stack(directory, gamma: float = DEFAULT_GAMMA, shape=None) -> TargetContent:
    """Directory with ``manifest.json``: ``{"planes": [{"file": ..., "distance": z}, ...]}``."""
    man = _manifest(directory)
    entries = sorted(man["planes"], key=lambda e: e["distance"])
    planes = [load_amplitude(os.path.join(directory, e["file"]), gamma, shape) for e in entries]
    return TargetContent("focal_stack", planes=np.stack(planes),
                         distances=tuple(e["distance"] for e in entries))


def load_light_field(directory, gamma: float = DEFAULT_GAMMA) -> TargetContent:
    """Directory with ``manifest.json``: ``{"distance": z, "views": [{"file", "u", "v"}]}``.

    View ``(u, v)`` images are (Py, Px) patch-grid amplitudes; ``u`` indexes
    the vertical angular bin and ``v`` the horizontal one.
    """
    man = _manifest(directory)
    views = man["views"]
    nu = max(e["u"] for e in views) + 1
    nv = max(e["v"] for e in views) + 1
    first = load_amplitude(os.path.join(directory, views[0]["file"]), gamma)
    out = np.zeros(first.shape + (nu, nv))
    for e in views:
        out[:, :, e["u"], e["v"]] = load_amplitude(os.path.join(directory, e["file"]), gamma)
    return TargetContent("light_field", views=out, distances=(man["distance"],))


def to_display(amplitude, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Inverse of the target linearization: amplitude -> 8-bit encoded value in [0, 1]."""
    return np.clip(np.asarray(amplitude), 0.0, 1.0) ** (2.0 / gamma)


def save_amplitude_png(path, amplitude, gamma: float = DEFAULT_GAMMA):
    img = np.round(to_display(amplitude, gamma) * 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def save_index_png(path, indices):
    """Level indices as a 16-bit grayscale PNG (one index per pixel value)."""
    arr = np.asarray(indices)
    if arr.min() < 0 or arr.max() > 65535:
        raise ValueError("level indices must fit in 16 bits")
    Image.fromarray(arr.astype(np.uint16)).save(path)


def load_index_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.int64)
