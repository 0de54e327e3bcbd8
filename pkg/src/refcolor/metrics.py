"""Image metrics: PSNR, MS-SSIM, embedding cosine proxy and the spatial-entanglement score."""

from __future__ import annotations

import numpy as np
import torch
from scipy import ndimage

from ._validation import check_image, check_mask, check_same_hw

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
_K1, _K2 = 0.01, 0.03
_MIN_SCALE = 8


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 99 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_components(x, y, sigma=1.5):
    """Mean luminance term and mean contrast-structure term for one 2-D channel."""
    C1, C2 = _K1 ** 2, _K2 ** 2
    blur = lambda v: ndimage.gaussian_filter(v, sigma, mode="reflect", truncate=3.5)  # noqa: E731
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    cs = (2 * sxy + C2) / (sxx + syy + C2)
    lum = (2 * mx * my + C1) / (mx * mx + my * my + C1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ms_ssim_scales(height: int, width: int) -> int:
    """Number of dyadic scales whose coarsest level keeps at least 8 px."""
    n = 1
    while n < len(MS_SSIM_WEIGHTS) and min(height, width) // (2 ** n) >= _MIN_SCALE:
        n += 1
    return n


def ms_ssim(a, b) -> float:
    """Multi-scale SSIM averaged over channels.

    The scale count is reduced for small images so the coarsest scale is at
    least 8 px; the standard weights are renormalised over the kept scales.
    Negative per-scale terms are clamped to zero before exponentiation.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    H, W = a.shape[-2:]
    if min(H, W) < 16:
        raise ValueError("MS-SSIM needs images of at least 16 px for two scales")
    n = ms_ssim_scales(H, W)
    weights = MS_SSIM_WEIGHTS[:n] / MS_SSIM_WEIGHTS[:n].sum()
    scores = []
    for x, y in zip(a, b):
        vals = []
        for s in range(n):
            ssim, cs = _ssim_components(x, y)
            vals.append(max(ssim if s == n - 1 else cs, 0.0))
            if s < n - 1:
                x = _downsample2(x)
                y = _downsample2(y)
        scores.append(float(np.prod(np.power(vals, weights))))
    return float(np.mean(scores))


def _downsample2(x):
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _region_mean(img, mask, background: bool, name: str):
    region = mask[0] <= 0.5 if background else mask[0] > 0.5
    frac = region.mean()
    if frac < 0.01:
        kind = "background" if background else "foreground"
        raise ValueError(f"{name} {kind} covers less than 1% of the image")
    return img[:, region].mean(axis=1)


def entanglement_score(result, reference, sketch_mask, reference_mask) -> float:
    """Background colour fidelity of ``result`` relative to the reference's two regions.

    ``d(result_bg, reference_bg) - d(result_bg, reference_fg)`` with max-norm
    distances between region mean colours. Negative means the result's
    background is closer to the reference background than to its foreground.
    """
    result = check_image(result, channels=3, name="result").astype(np.float64)
    reference = check_image(reference, channels=3, name="reference").astype(np.float64)
    sketch_mask = check_mask(sketch_mask, name="sketch_mask")
    reference_mask = check_mask(reference_mask, name="reference_mask")
    check_same_hw(result, sketch_mask)
    check_same_hw(reference, reference_mask)
    # both regions must be present in both images
    _region_mean(result, sketch_mask, False, "sketch_mask")
    res_bg = _region_mean(result, sketch_mask, True, "sketch_mask")
    ref_bg = _region_mean(reference, reference_mask, True, "reference_mask")
    ref_fg = _region_mean(reference, reference_mask, False, "reference_mask")
    return float(np.abs(res_bg - ref_bg).max() - np.abs(res_bg - ref_fg).max())


@torch.no_grad()
def embed_cosine(a, b, embedder) -> float:
    """Cosine similarity of the frozen embedder's CLS vectors (a CLIP-similarity proxy)."""
    a = check_image(a, channels=3, name="a")
    b = check_image(b, channels=3, name="b")
    u = embedder(torch.from_numpy(a[None])).cls[0, 0].double()
    v = embedder(torch.from_numpy(b[None])).cls[0, 0].double()
    return float(torch.dot(u, v) / (u.norm() * v.norm()))
