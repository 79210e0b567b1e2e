"""Backward-flow warping, flow resampling and composition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sampling
from .core import ContractError, as_flow, as_image, same_hw


@dataclass
class WarpGradients:
    d_image: np.ndarray
    d_flow: np.ndarray


def _grid(height: int, width: int):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def _taps(flow: np.ndarray) -> sampling.Taps:
    h, w = flow.shape[:2]
    xs, ys = _grid(h, w)
    return sampling.locate(xs + flow[..., 0], ys + flow[..., 1], h, w, "clamp")


def warp_backward(source, flow) -> np.ndarray:
    """Bilinearly sample ``source`` at ``(x + dx, y + dy)``; clamp-to-edge outside.

    >>> img = np.arange(4.0).reshape(2, 2, 1)
    >>> float(warp_backward(img, np.full((2, 2, 2), 0.5))[0, 0, 0])
    1.5
    """
    src = as_image(source, "source")
    fl = as_flow(flow)
    same_hw(src, fl, names=("source", "flow"))
    h, w, c = src.shape
    return sampling.gather(src.reshape(h * w, c), _taps(fl))


def warp_backward_grad(source, flow, upstream) -> WarpGradients:
    src = as_image(source, "source")
    fl = as_flow(flow)
    up = as_image(upstream, "upstream")
    same_hw(src, fl, up, names=("source", "flow", "upstream"))
    if up.shape != src.shape:
        raise ContractError(f"upstream shape {up.shape} != output shape {src.shape}")
    h, w, c = src.shape
    flat = src.reshape(h * w, c)
    taps = _taps(fl)
    d_image = sampling.scatter(taps, up, h * w).reshape(h, w, c)
    gx, gy = sampling.position_grad(flat, taps, up)
    return WarpGradients(d_image, np.stack([gx, gy], axis=-1))


def warp_flow(target, carrier) -> np.ndarray:
    """Resample the flow ``target`` along ``carrier`` (channelwise bilinear)."""
    t = as_flow(target, "target")
    u = as_flow(carrier, "carrier")
    same_hw(t, u, names=("target", "carrier"))
    return warp_backward(t, u)


def warp_flow_grad(target, carrier, upstream) -> WarpGradients:
    """Adjoints of :func:`warp_flow`; ``d_image`` is the adjoint on ``target``."""
    return warp_backward_grad(as_flow(target, "target"), as_flow(carrier, "carrier"), upstream)


def downsample_flow(flow, factor: int) -> np.ndarray:
    """Block-average ``factor x factor`` cells and rescale vectors to the coarse grid."""
    fl = as_flow(flow)
    if factor < 1 or factor & (factor - 1):
        raise ContractError(f"factor must be a power of two, got {factor}")
    h, w = fl.shape[:2]
    if h % factor or w % factor:
        raise ContractError(f"{h}x{w} flow is not divisible by {factor}")
    blocks = fl.reshape(h // factor, factor, w // factor, factor, 2)
    return blocks.mean(axis=(1, 3)) / factor


def downsample_flow_grad(upstream, factor: int) -> np.ndarray:
    up = as_flow(upstream, "upstream")
    g = up / (factor ** 3)
    return np.repeat(np.repeat(g, factor, axis=0), factor, axis=1)


def compose_flows(coarse, fine) -> np.ndarray:
    c = as_flow(coarse, "coarse")
    f = as_flow(fine, "fine")
    if c.shape != f.shape:
        raise ContractError(f"coarse {c.shape} and fine {f.shape} flows differ in shape")
    return c + f
