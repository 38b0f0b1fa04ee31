"""Image quality metrics on [0, 1] images."""

import numpy as np
from skimage.metrics import structural_similarity

PSNR_CAP = 100.0


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB, capped at 100 dB for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak ** 2 / mse))


def ssim(a, b) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, data range 1.

    For images smaller than 11 px the Gaussian filter is unchanged (boundary
    reflection) and only the border crop shrinks to the largest odd window
    that fits.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim > 2:
        return float(np.mean([ssim(x, y) for x, y in zip(a.reshape(-1, *a.shape[-2:]),
                                                           b.reshape(-1, *b.shape[-2:]))]))
    side = min(a.shape)
    radius = min(5, (side - 1) // 2)
    if radius < 1:
        raise ValueError(f"images of shape {a.shape} are too small for SSIM")
    return float(structural_similarity(a, b, win_size=2 * radius + 1, data_range=1.0, gaussian_weights=True,
                                       sigma=1.5, use_sample_covariance=False, K1=0.01, K2=0.03))
