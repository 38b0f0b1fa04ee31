"""
Synthetic two-layer scenes for 3D and 4D supervision.

Both generators composite a textured foreground disk over a textured
background in intensity, then return amplitudes in [0, 1].
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter, shift
from skimage.transform import resize

from .io import builtin_amplitude
from .supervision import StftSpec, TargetContent, stft_plan


def _layers(shape, front="coins", back="moon", radius=0.3):
    m, n = shape
    y, x = np.meshgrid(np.linspace(-0.5, 0.5, m), np.linspace(-0.5, 0.5, n), indexing="ij")
    alpha = (x * x + y * y <= radius * radius).astype(np.float64)
    fg = builtin_amplitude(front, shape) ** 2
    bg = builtin_amplitude(back, shape) ** 2
    return fg, bg, alpha


def _normalize(intensity):
    amp = np.sqrt(np.clip(intensity, 0.0, None))
    peak = amp.max()
    return amp / peak if peak > 0 else amp


def two_plane_focal_stack(shape=(64, 64), distances=(0.009, 0.011), blur: float = 2.0,
                          front: str = "coins", back: str = "moon") -> TargetContent:
    """Focal stack of a foreground disk (in focus on the first plane) over a
    background (in focus on the second plane); defocus is a Gaussian blur."""
    fg, bg, alpha = _layers(shape, front, back)
    planes = []
    for j in range(2):
        sf = 0.0 if j == 0 else blur
        sb = blur if j == 0 else 0.0
        f = gaussian_filter(fg * alpha, sf, mode="wrap") if sf else fg * alpha
        a = gaussian_filter(alpha, sf, mode="wrap") if sf else alpha
        b = gaussian_filter(bg, sb, mode="wrap") if sb else bg
        planes.append(f + (1.0 - a) * b)
    planes = np.stack(planes)
    return TargetContent("focal_stack", planes=_normalize(planes), distances=tuple(distances))


def layered_light_field(shape=(64, 64), stft_spec: StftSpec | None = None, z: float = 0.01,
                        disparity: float = 1.0, front: str = "coins", back: str = "moon") -> TargetContent:
    """Light field on the STFT patch grid of ``shape``.

    View ``(a, b)`` shifts the foreground by ``+disparity`` and the background
    by ``-disparity`` patch-grid pixels per unit of normalized view offset.
    """
    spec = stft_spec or StftSpec()
    py, px = stft_plan(spec, tuple(shape)).grid
    w = spec.window_size
    fg, bg, alpha = (resize(layer, (py, px), order=1, anti_aliasing=True, mode="reflect")
                     for layer in _layers(shape, front, back))
    c = (w - 1) / 2.0
    views = np.zeros((py, px, w, w))
    for a in range(w):
        for b in range(w):
            off = np.array([a - c, b - c]) / max(c, 1.0)
            sf = tuple(disparity * off)
            sb = tuple(-disparity * off)
            f = shift(fg * alpha, sf, order=1, mode="nearest")
            al = shift(alpha, sf, order=1, mode="nearest")
            bk = shift(bg, sb, order=1, mode="nearest")
            views[:, :, a, b] = f + (1.0 - al) * bk
    return TargetContent("light_field", views=_normalize(views), distances=(z,))

