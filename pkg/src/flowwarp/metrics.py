"""Image similarity (SSIM, PSNR) and temporal consistency (TCM)."""

from __future__ import annotations

import json
import math

import numpy as np
from scipy import ndimage

from .core import ContractError, as_flow, as_image
from .warp import warp_backward

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
TCM_SCALE = 10.0


def _pair(a, b):
    a = as_image(a, "a")
    b = as_image(b, "b")
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for unit dynamic range; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    out = ndimage.correlate1d(img, win, axis=0, mode="constant")
    out = ndimage.correlate1d(out, win, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over every full window position and channel."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ContractError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(num / den)
    return float(np.mean(vals))


def warping_errors(frames, flows) -> list[float]:
    """Per-pair mean absolute error between frame t and frame t-1 warped onto
    it by ``flows[t-1]`` (the backward optical flow from t to t-1)."""
    frames = [as_image(f, "frame") for f in frames]
    if len(frames) < 2:
        raise ContractError("TCM needs at least two frames")
    if len(flows) != len(frames) - 1:
        raise ContractError(f"{len(frames)} frames need {len(frames) - 1} flows, got {len(flows)}")
    errs = []
    for t in range(1, len(frames)):
        u = as_flow(flows[t - 1])
        errs.append(float(np.mean(np.abs(frames[t] - warp_backward(frames[t - 1], u)))))
    return errs


def tcm(frames, flows) -> float:
    """``1 / (1 + 10 E)`` with ``E`` the mean warping error over consecutive pairs."""
    return 1.0 / (1.0 + TCM_SCALE * float(np.mean(warping_errors(frames, flows))))


def metrics_json(values: dict) -> str:
    """Metrics object as JSON; an infinite PSNR is written as the string "inf"."""
    def enc(v):
        if isinstance(v, dict):
            return {k: enc(x) for k, x in v.items()}
        if isinstance(v, float) and math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return json.dumps(enc(values), indent=2, sort_keys=True)
