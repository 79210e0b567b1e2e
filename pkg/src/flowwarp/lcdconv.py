"""Layout-constrained deformable convolution and plain convolutions.

A 3x3 deformable tap ``k`` at output pixel ``p`` reads the input bilinearly at
``p + p_k + offset_k(p)`` (zero outside the image). The tap is kept only if
the layout class at the nearest pixel of that position equals the class at
``p``; taps landing outside the image are dropped. The gate is a hard
indicator and is held constant when differentiating.

Taps are ordered row-major over ``(dy, dx)`` in ``{-1, 0, 1}``; weights are
stored as ``(out, in, 3, 3)`` indexed ``[o, c, dy + 1, dx + 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sampling
from .core import ContractError, as_image

TAP_DY, TAP_DX = (a.ravel().astype(np.float64) for a in np.mgrid[-1:2, -1:2])


@dataclass(frozen=True, eq=False)
class ConvSpec:
    weights: np.ndarray  # (out, in, 3, 3)
    bias: np.ndarray     # (out,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 4 or w.shape[2:] != (3, 3):
            raise ContractError(f"weights must be (out, in, 3, 3), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ContractError(f"bias must be ({w.shape[0]},), got {b.shape}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


@dataclass
class LcdGradients:
    d_x: np.ndarray
    d_weights: np.ndarray
    d_bias: np.ndarray
    d_offsets: np.ndarray


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    # rows ordered (tap, in_channel) to match the (H, W, 9, C) sample layout
    o, c = w.shape[:2]
    return w.transpose(2, 3, 1, 0).reshape(9 * c, o)


def _weight_from_matrix(m: np.ndarray, o: int, c: int) -> np.ndarray:
    return m.reshape(3, 3, c, o).transpose(3, 2, 0, 1)


# --------------------------------------------------------------------------
# plain convolutions (zero padding, stride 1)

def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    h, wd, c = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = np.stack(
        [xp[dy:dy + h, dx:dx + wd] for dy in range(3) for dx in range(3)], axis=2
    ).reshape(h * wd, 9 * c)
    y = cols @ _weight_matrix(w) + b
    return y.reshape(h, wd, -1), cols


def conv3x3_backward(cols: np.ndarray, w: np.ndarray, dy_out: np.ndarray):
    h, wd, o = dy_out.shape
    c = w.shape[1]
    g = dy_out.reshape(h * wd, o)
    d_w = _weight_from_matrix(cols.T @ g, o, c)
    d_b = g.sum(0)
    dcols = (g @ _weight_matrix(w).T).reshape(h, wd, 3, 3, c)
    dxp = np.zeros((h + 2, wd + 2, c))
    for dy in range(3):
        for dx in range(3):
            dxp[dy:dy + h, dx:dx + wd] += dcols[:, :, dy, dx]
    return dxp[1:-1, 1:-1], d_w, d_b


def conv3x3(x, spec: ConvSpec) -> np.ndarray:
    a = as_image(x, "x")
    if a.shape[2] != spec.in_channels:
        raise ContractError(f"x has {a.shape[2]} channels, conv expects {spec.in_channels}")
    return conv3x3_forward(a, spec.weights, spec.bias)[0]


def conv1x1_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # w: (out, in)
    return x @ w.T + b


def conv1x1_backward(x: np.ndarray, w: np.ndarray, dy_out: np.ndarray):
    c, o = x.shape[2], dy_out.shape[2]
    g = dy_out.reshape(-1, o)
    return dy_out @ w, g.T @ x.reshape(-1, c), g.sum(0)


# --------------------------------------------------------------------------
# LC-DConv

@dataclass
class LcdCache:
    x: np.ndarray
    w: np.ndarray
    taps: sampling.Taps
    gate: np.ndarray      # (H, W, 9) bool
    samples: np.ndarray   # (H*W, 9*C) gated samples


def tap_positions(offsets: np.ndarray):
    h, w = offsets.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px = xs[..., None] + TAP_DX + offsets[..., 0]
    py = ys[..., None] + TAP_DY + offsets[..., 1]
    return px, py


def layout_gate(layout: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """``[class(p) == class(round(sample position))]``, False outside the image."""
    h, w = layout.shape
    rx = np.floor(px + 0.5).astype(np.int64)
    ry = np.floor(py + 0.5).astype(np.int64)
    inside = (rx >= 0) & (rx < w) & (ry >= 0) & (ry < h)
    sampled = layout[np.where(inside, ry, 0), np.where(inside, rx, 0)]
    return inside & (sampled == layout[..., None])


def _check(x, offsets, layout):
    a = as_image(x, "x")
    off = np.asarray(offsets, dtype=np.float64)
    lay = np.asarray(layout)
    h, w = a.shape[:2]
    if off.shape != (h, w, 9, 2):
        raise ContractError(f"offsets must be ({h}, {w}, 9, 2), got {off.shape}")
    if lay.shape != (h, w):
        raise ContractError(f"layout must be ({h}, {w}), got {lay.shape}")
    return a, off, lay


def lcd_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, offsets: np.ndarray,
                layout: np.ndarray):
    h, wd, c = x.shape
    px, py = tap_positions(offsets)
    taps = sampling.locate(px, py, h, wd, "zero")
    gate = layout_gate(layout, px, py)
    s = sampling.gather(x.reshape(h * wd, c), taps) * gate[..., None]
    s = s.reshape(h * wd, 9 * c)
    y = s @ _weight_matrix(w) + b
    return y.reshape(h, wd, -1), LcdCache(x, w, taps, gate, s)


def lcd_backward(cache: LcdCache, dy_out: np.ndarray) -> LcdGradients:
    x, w = cache.x, cache.w
    h, wd, c = x.shape
    o = w.shape[0]
    g = dy_out.reshape(h * wd, o)
    d_w = _weight_from_matrix(cache.samples.T @ g, o, c)
    d_b = g.sum(0)
    ds = (g @ _weight_matrix(w).T).reshape(h, wd, 9, c) * cache.gate[..., None]
    d_x = sampling.scatter(cache.taps, ds, h * wd).reshape(h, wd, c)
    gx, gy = sampling.position_grad(x.reshape(h * wd, c), cache.taps, ds)
    return LcdGradients(d_x, d_w, d_b, np.stack([gx, gy], axis=-1))


def lc_dconv_forward(x, spec: ConvSpec, offsets, layout) -> np.ndarray:
    a, off, lay = _check(x, offsets, layout)
    if a.shape[2] != spec.in_channels:
        raise ContractError(f"x has {a.shape[2]} channels, conv expects {spec.in_channels}")
    return lcd_forward(a, spec.weights, spec.bias, off, lay)[0]


def lc_dconv_grad(x, spec: ConvSpec, offsets, layout, upstream) -> LcdGradients:
    a, off, lay = _check(x, offsets, layout)
    y, cache = lcd_forward(a, spec.weights, spec.bias, off, lay)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != y.shape:
        raise ContractError(f"upstream shape {up.shape} != output shape {y.shape}")
    return lcd_backward(cache, up)
