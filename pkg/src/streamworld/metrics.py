"""Image fidelity metrics over uint8 RGB frames.

PSNR is capped at 99 dB for identical inputs. SSIM uses a 7x7 uniform window
with the standard constants, averaged over the valid region and channels.
(A learned perceptual metric is deliberately absent: it would need a
pretrained network.)
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter

PSNR_CAP = 99.0
_C1 = (0.01 * 255) ** 2
_C2 = (0.03 * 255) ** 2


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(255.0 ** 2 / mse))


def ssim(a: np.ndarray, b: np.ndarray, win: int = 7) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    half = win // 2
    values = []
    for c in range(x.shape[2]):
        xc, yc = x[..., c], y[..., c]
        mx = uniform_filter(xc, win)
        my = uniform_filter(yc, win)
        mxx = uniform_filter(xc * xc, win)
        myy = uniform_filter(yc * yc, win)
        mxy = uniform_filter(xc * yc, win)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + _C1) * (2 * cxy + _C2)
        den = (mx * mx + my * my + _C1) * (vx + vy + _C2)
        smap = num / den
        values.append(smap[half:-half, half:-half].mean())  # valid region only
    return float(np.mean(values))
