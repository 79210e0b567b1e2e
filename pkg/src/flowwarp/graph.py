"""A small reverse-mode tape over the operators the warping network uses.

Each op computes its output eagerly and, when the tape is recording, pushes
a closure that maps the output adjoint to input adjoints using the explicit
gradient routines of the operator modules. There is no general tracing.
"""

from __future__ import annotations

import numpy as np

from . import lcdconv, losses, tps, warp
from .sampling import locate, position_grad, scatter, gather


class Var:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad=False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)


def _acc(v: Var, g):
    if not v.requires_grad:
        return
    v.grad = g if v.grad is None else v.grad + g


class Tape:
    def __init__(self, record: bool = True):
        self.record = record
        self._ops = []

    # -- bookkeeping -------------------------------------------------------
    def leaf(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), requires_grad=self.record)

    def const(self, value) -> Var:
        return Var(value if np.isscalar(value) else np.asarray(value, dtype=np.float64))

    def _out(self, value, inputs, backward) -> Var:
        out = Var(value, requires_grad=self.record and any(v.requires_grad for v in inputs))
        if out.requires_grad:
            self._ops.append((out, backward))
        return out

    def backward(self, loss: Var):
        loss.grad = 1.0
        for out, fn in reversed(self._ops):
            if out.grad is not None:
                fn(out.grad)

    # -- elementwise ---------------------------------------------------------
    def add(self, a: Var, b: Var) -> Var:
        def bw(g):
            _acc(a, g)
            _acc(b, g)
        return self._out(a.value + b.value, (a, b), bw)

    def scale(self, a: Var, s: float) -> Var:
        return self._out(a.value * s, (a,), lambda g: _acc(a, g * s))

    def weighted_sum(self, terms, weights) -> Var:
        val = sum(w * t.value for t, w in zip(terms, weights))

        def bw(g):
            for t, w in zip(terms, weights):
                _acc(t, g * w)
        return self._out(val, tuple(terms), bw)

    def leaky_relu(self, a: Var, slope=0.1) -> Var:
        pos = a.value > 0
        return self._out(np.where(pos, a.value, slope * a.value), (a,),
                         lambda g: _acc(a, np.where(pos, g, slope * g)))

    def tanh(self, a: Var) -> Var:
        y = np.tanh(a.value)
        return self._out(y, (a,), lambda g: _acc(a, g * (1 - y * y)))

    def concat(self, parts) -> Var:
        sizes = np.cumsum([p.value.shape[-1] for p in parts])[:-1]

        def bw(g):
            for p, gp in zip(parts, np.split(g, sizes, axis=-1)):
                _acc(p, gp)
        return self._out(np.concatenate([p.value for p in parts], axis=-1), tuple(parts), bw)

    # -- resampling ----------------------------------------------------------
    def avgpool2(self, a: Var) -> Var:
        h, w, c = a.value.shape
        y = a.value.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

        def bw(g):
            _acc(a, np.repeat(np.repeat(g, 2, 0), 2, 1) / 4.0)
        return self._out(y, (a,), bw)

    def upsample2(self, a: Var) -> Var:
        h, w, c = a.value.shape

        def bw(g):
            _acc(a, g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)))
        return self._out(np.repeat(np.repeat(a.value, 2, 0), 2, 1), (a,), bw)

    def warp(self, src: Var, flow: Var) -> Var:
        s, f = src.value, flow.value
        h, w, c = s.shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        taps = locate(xs + f[..., 0], ys + f[..., 1], h, w, "clamp")
        flat = s.reshape(h * w, c)

        def bw(g):
            if src.requires_grad:
                _acc(src, scatter(taps, g, h * w).reshape(h, w, c))
            if flow.requires_grad:
                gx, gy = position_grad(flat, taps, g)
                _acc(flow, np.stack([gx, gy], axis=-1))
        return self._out(gather(flat, taps), (src, flow), bw)

    def downsample_flow(self, flow: Var, factor: int) -> Var:
        if factor == 1:
            return flow
        return self._out(warp.downsample_flow(flow.value, factor), (flow,),
                         lambda g: _acc(flow, warp.downsample_flow_grad(g, factor)))

    # -- convolutions --------------------------------------------------------
    def conv3x3(self, x: Var, w: Var, b: Var) -> Var:
        y, cols = lcdconv.conv3x3_forward(x.value, w.value, b.value)

        def bw(g):
            dx, dw, db = lcdconv.conv3x3_backward(cols, w.value, g)
            _acc(x, dx)
            _acc(w, dw)
            _acc(b, db)
        return self._out(y, (x, w, b), bw)

    def conv1x1(self, x: Var, w: Var, b: Var) -> Var:
        def bw(g):
            dx, dw, db = lcdconv.conv1x1_backward(x.value, w.value, g)
            _acc(x, dx)
            _acc(w, dw)
            _acc(b, db)
        return self._out(lcdconv.conv1x1_forward(x.value, w.value, b.value), (x, w, b), bw)

    def lc_dconv(self, x: Var, w: Var, b: Var, offsets: Var, layout: np.ndarray) -> Var:
        h, wd = x.value.shape[:2]
        off = offsets.value.reshape(h, wd, 9, 2)
        y, cache = lcdconv.lcd_forward(x.value, w.value, b.value, off, layout)

        def bw(g):
            gr = lcdconv.lcd_backward(cache, g)
            _acc(x, gr.d_x)
            _acc(w, gr.d_weights)
            _acc(b, gr.d_bias)
            _acc(offsets, gr.d_offsets.reshape(offsets.value.shape))
        return self._out(y, (x, w, b, offsets), bw)

    # -- matching head -------------------------------------------------------
    def correlation(self, a: Var, b: Var) -> Var:
        def bw(g):
            da, db = tps.correlation_grad(a.value, b.value, g)
            _acc(a, da)
            _acc(b, db)
        return self._out(tps.correlation(a.value, b.value), (a, b), bw)

    def spatial_mean(self, a: Var) -> Var:
        h, w = a.value.shape[:2]
        return self._out(a.value.mean(axis=(0, 1)), (a,),
                         lambda g: _acc(a, np.broadcast_to(g / (h * w), a.value.shape)))

    def dense(self, x: Var, w: Var, b: Var) -> Var:
        # w: (out, in)
        def bw(g):
            _acc(x, w.value.T @ g)
            _acc(w, np.outer(g, x.value))
            _acc(b, g)
        return self._out(w.value @ x.value + b.value, (x, w, b), bw)

    def tps_flow(self, theta: Var, height: int, width: int) -> Var:
        t = tps.fit_tps(tps.lattice(), theta.value.reshape(tps.K, 2))
        return self._out(tps.tps_to_flow(t, height, width), (theta,),
                         lambda g: _acc(theta, tps.tps_flow_grad(t, g).reshape(theta.value.shape)))

    # -- losses --------------------------------------------------------------
    def rec_loss(self, pred: Var, target: np.ndarray) -> Var:
        val, d = losses.rec_loss_grad(pred.value, target)
        return self._out(val, (pred,), lambda g: _acc(pred, g * d))

    def tvl1(self, flow: Var) -> Var:
        val, d = losses.tvl1_loss_grad(flow.value)
        return self._out(val, (flow,), lambda g: _acc(flow, g * d))

    def ftc(self, f_t: Var, f_prev: Var, u: np.ndarray) -> Var:
        val, d_t, d_prev = losses.ftc_loss_grad(f_t.value, f_prev.value, u)

        def bw(g):
            _acc(f_t, g * d_t)
            _acc(f_prev, g * d_prev)
        return self._out(val, (f_t, f_prev), bw)
