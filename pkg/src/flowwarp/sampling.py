"""Bilinear sampling at fractional positions, with its adjoints.

Two border modes are supported: ``"clamp"`` (edge replication, used for
warping) and ``"zero"`` (zero padding, used inside convolutions). Derivatives
with respect to the sample position use ``floor`` to split the cell, so at
integer coordinates the right/down-continuous branch is taken.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Taps:
    """Corner indices and weights for a batch of sample positions."""

    idx: np.ndarray      # (4, *P) flat indices into the H*W grid
    weight: np.ndarray   # (4, *P) bilinear weights (zeroed for dropped corners)
    valid: np.ndarray    # (4, *P) corner lies inside the grid (always true for clamp)
    fx: np.ndarray
    fy: np.ndarray


def locate(px: np.ndarray, py: np.ndarray, height: int, width: int, mode: str) -> Taps:
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xs = (x0, x0 + 1, x0, x0 + 1)
    ys = (y0, y0, y0 + 1, y0 + 1)
    ws = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    idx, weight, valid = [], [], []
    for xc, yc, wc in zip(xs, ys, ws):
        if mode == "clamp":
            ok = np.ones(xc.shape, dtype=bool)
            xc = np.clip(xc, 0, width - 1)
            yc = np.clip(yc, 0, height - 1)
        elif mode == "zero":
            ok = (xc >= 0) & (xc < width) & (yc >= 0) & (yc < height)
            xc = np.where(ok, xc, 0)
            yc = np.where(ok, yc, 0)
        else:
            raise ValueError(f"unknown border mode {mode!r}")
        idx.append(yc * width + xc)
        weight.append(np.where(ok, wc, 0.0))
        valid.append(ok)
    return Taps(np.stack(idx), np.stack(weight), np.stack(valid), fx, fy)


def gather(flat: np.ndarray, taps: Taps) -> np.ndarray:
    """Sample a ``(H*W, C)`` grid; returns ``(*P, C)``."""
    out = 0.0
    for k in range(4):
        out = out + taps.weight[k][..., None] * flat[taps.idx[k]]
    return out


def corner_values(flat: np.ndarray, taps: Taps) -> list[np.ndarray]:
    return [np.where(taps.valid[k][..., None], flat[taps.idx[k]], 0.0) for k in range(4)]


def position_grad(flat: np.ndarray, taps: Taps, upstream: np.ndarray):
    """Adjoints of ``sum(upstream * gather(flat, taps))`` w.r.t. (px, py).

    Under clamp, a position beyond the edge sees two identical clamped
    corners so its derivative is zero, matching the constant extension.
    """
    v00, v10, v01, v11 = corner_values(flat, taps)
    fx = taps.fx[..., None]
    fy = taps.fy[..., None]
    dvx = (1 - fy) * (v10 - v00) + fy * (v11 - v01)
    dvy = (1 - fx) * (v01 - v00) + fx * (v11 - v10)
    return (upstream * dvx).sum(-1), (upstream * dvy).sum(-1)


def scatter(taps: Taps, upstream: np.ndarray, n_pixels: int) -> np.ndarray:
    """Adjoint of :func:`gather` w.r.t. the grid, returns ``(H*W, C)``."""
    c = upstream.shape[-1]
    up = upstream.reshape(-1, c)
    chan = np.arange(c)
    idx = (taps.idx.reshape(4, -1, 1) * c + chan).ravel()
    vals = (taps.weight.reshape(4, -1, 1) * up[None]).ravel()
    return np.bincount(idx, weights=vals, minlength=n_pixels * c).reshape(n_pixels, c)
