"""Finite-difference checks of every analytic gradient.

Each check draws a random, non-degenerate input (sample positions kept away
from integer cells and rounding boundaries, L1 residuals kept away from
zero), contracts the operator output with a random probe to get a scalar,
and compares the analytic adjoint against central differences. The result
is the largest relative error over the checked coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lcdconv, losses, network, synthdata, tps, warp
from .core import rng_for

THRESHOLDS = {"warp": 1e-4, "lcdconv": 1e-4, "ftc": 1e-4, "tvl1": 1e-4, "tps": 1e-6,
              "network": 1e-3, "lcdconv-reduction": 1e-12}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    threshold: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


def rel_error(analytic, numeric, floor=1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def central_diff(f, x: np.ndarray, idx, h: float) -> np.ndarray:
    out = []
    for i in idx:
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        out.append((f(xp) - f(xm)) / (2 * h))
    return np.array(out)


def _away_from_integers(rng, shape, lo=0.15, hi=0.85, span=3):
    return rng.integers(-span, span, size=shape) + rng.uniform(lo, hi, size=shape)


def check_warp(seed: int = 0, n_points: int = 20) -> CheckResult:
    rng = rng_for(seed, "gradcheck/warp")
    h, w, c = 8, 9, 3
    src = rng.uniform(size=(h, w, c))
    flow = _away_from_integers(rng, (h, w, 2), span=2)
    probe = rng.normal(size=(h, w, c))
    g = warp.warp_backward_grad(src, flow, probe)
    loss_f = lambda f: float((warp.warp_backward(src, f) * probe).sum())
    loss_s = lambda s: float((warp.warp_backward(s, flow) * probe).sum())
    fi = rng.choice(flow.size, n_points, replace=False)
    si = rng.choice(src.size, n_points, replace=False)
    err = max(rel_error(g.d_flow.flat[fi], central_diff(loss_f, flow, fi, 1e-4)),
              rel_error(g.d_image.flat[si], central_diff(loss_s, src, si, 1e-4)))
    return CheckResult("warp", err, THRESHOLDS["warp"], 2 * n_points)


def _lcd_problem(rng, h=7, w=8, cin=3, cout=4):
    x = rng.normal(size=(h, w, cin))
    spec = lcdconv.ConvSpec(rng.normal(size=(cout, cin, 3, 3)), rng.normal(size=cout))
    # fractional parts avoid 0 (bilinear kink) and 0.5 (rounding flip)
    frac = rng.uniform(0.1, 0.4, size=(h, w, 9, 2)) * rng.choice([-1, 1], size=(h, w, 9, 2))
    offsets = rng.integers(-1, 2, size=(h, w, 9, 2)) + frac
    layout = np.zeros((h, w), dtype=int)
    layout[:, w // 2:] = 1
    layout[h // 2:, :2] = 2
    return x, spec, offsets, layout


def check_lcdconv(seed: int = 0, n_points: int = 20) -> CheckResult:
    rng = rng_for(seed, "gradcheck/lcdconv")
    x, spec, off, lay = _lcd_problem(rng)
    probe = rng.normal(size=x.shape[:2] + (spec.out_channels,))
    g = lcdconv.lc_dconv_grad(x, spec, off, lay, probe)

    def f_x(v):
        return float((lcdconv.lc_dconv_forward(v, spec, off, lay) * probe).sum())

    def f_w(v):
        return float((lcdconv.lc_dconv_forward(x, lcdconv.ConvSpec(v, spec.bias), off, lay) * probe).sum())

    def f_o(v):
        return float((lcdconv.lc_dconv_forward(x, spec, v, lay) * probe).sum())

    # only offsets of taps that pass the gate carry gradient; check those and a few gated ones
    errs = []
    for arr, fn, d in ((x, f_x, g.d_x), (spec.weights, f_w, g.d_weights), (off, f_o, g.d_offsets)):
        idx = rng.choice(arr.size, n_points, replace=False)
        errs.append(rel_error(d.flat[idx], central_diff(fn, np.array(arr), idx, 1e-4)))
    return CheckResult("lcdconv", max(errs), THRESHOLDS["lcdconv"], 3 * n_points)


def check_lcdconv_reduction(seed: int = 0) -> CheckResult:
    """Uniform layout and zero offsets against a direct loop convolution."""
    rng = rng_for(seed, "gradcheck/lcdconv-reduction")
    h, w, cin, cout = 6, 7, 3, 2
    x = rng.normal(size=(h, w, cin))
    spec = lcdconv.ConvSpec(rng.normal(size=(cout, cin, 3, 3)), rng.normal(size=cout))
    y = lcdconv.lc_dconv_forward(x, spec, np.zeros((h, w, 9, 2)), np.ones((h, w), dtype=int))
    ref = np.zeros((h, w, cout))
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    for i in range(h):
        for j in range(w):
            for o in range(cout):
                ref[i, j, o] = spec.bias[o] + np.sum(spec.weights[o].transpose(1, 2, 0) * xp[i:i + 3, j:j + 3])
    return CheckResult("lcdconv-reduction", float(np.max(np.abs(y - ref))),
                       THRESHOLDS["lcdconv-reduction"], y.size)


# L1 subgradients cancel to exactly zero at some pixels; central differences
# there return pure roundoff (~1e-11), so the relative error needs a floor
# well above that but far below the 1/(H*W) gradient scale.
L1_FLOOR = 1e-6


def check_ftc(seed: int = 0, n_points: int = 20) -> CheckResult:
    rng = rng_for(seed, "gradcheck/ftc")
    h, w = 8, 8
    f_prev = _away_from_integers(rng, (h, w, 2), span=2)
    u = _away_from_integers(rng, (h, w, 2), span=2)
    f_t = rng.normal(size=(h, w, 2)) * 3
    _, d_t, d_prev = losses.ftc_loss_grad(f_t, f_prev, u)
    it = rng.choice(f_t.size, n_points, replace=False)
    ip = rng.choice(f_prev.size, n_points, replace=False)
    err = max(
        rel_error(d_t.flat[it], central_diff(lambda v: losses.ftc_loss(v, f_prev, u), f_t, it, 1e-5),
                  floor=L1_FLOOR),
        rel_error(d_prev.flat[ip], central_diff(lambda v: losses.ftc_loss(f_t, v, u), f_prev, ip, 1e-5),
                  floor=L1_FLOOR),
    )
    return CheckResult("ftc", err, THRESHOLDS["ftc"], 2 * n_points)


def check_tvl1(seed: int = 0, n_points: int = 20) -> CheckResult:
    rng = rng_for(seed, "gradcheck/tvl1")
    f = rng.normal(size=(8, 9, 2))
    _, d = losses.tvl1_loss_grad(f)
    idx = rng.choice(f.size, n_points, replace=False)
    err = rel_error(d.flat[idx], central_diff(losses.tvl1_loss, f, idx, 1e-5), floor=L1_FLOOR)
    return CheckResult("tvl1", err, THRESHOLDS["tvl1"], n_points)


def check_tps(seed: int = 0) -> CheckResult:
    rng = rng_for(seed, "gradcheck/tps")
    h, w = 12, 14
    grid = tps.lattice()
    theta = grid + rng.uniform(-0.2, 0.2, size=grid.shape)
    probe = rng.normal(size=(h, w, 2))
    t = tps.fit_tps(grid, theta)
    d = tps.tps_flow_grad(t, probe)
    f = lambda th: float((tps.tps_to_flow(tps.fit_tps(grid, th), h, w) * probe).sum())
    idx = np.arange(theta.size)
    return CheckResult("tps", rel_error(d.ravel(), central_diff(f, theta, idx, 1e-4)),
                       THRESHOLDS["tps"], theta.size)


def network_problem(seed: int = 0):
    """A perturbed model and a mid-sequence sample with full FTC history."""
    rng = rng_for(seed, "gradcheck/network")
    seq = synthdata.generate(synthdata.SpriteScene(int(rng.integers(2 ** 31)), motion="affine"), 12)
    state = network.perturb_state(network.init_state(seed), seed)
    cache = {t: seq.exemplar_flows[t] + rng.normal(scale=0.3, size=seq.exemplar_flows[t].shape)
             for t in range(11)}
    return state, network.make_sample(seq, 10, cache)


def check_network(seed: int = 0, n_params: int = 10, h: float = 1e-6) -> CheckResult:
    rng = rng_for(seed, "gradcheck/network-params")
    state, sample = network_problem(seed)
    _, grads, _ = network.objective(state, sample)
    names = list(state.params)
    sizes = np.array([state.params[k].size for k in names], dtype=float)
    errs = []
    for _ in range(n_params):
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        i = int(rng.integers(state.params[k].size))

        def f(v, k=k):
            s = state.copy()
            s.params[k] = v.reshape(state.params[k].shape)
            return network.objective(s, sample, record=False)[0].l_full

        num = central_diff(f, state.params[k].ravel().copy(), [i], h)
        errs.append(rel_error(grads[k].flat[i], num))
    return CheckResult("network", max(errs), THRESHOLDS["network"], n_params)


CHECKS = {
    "warp": check_warp,
    "lcdconv": check_lcdconv,
    "ftc": check_ftc,
    "tvl1": check_tvl1,
    "tps": check_tps,
    "network": check_network,
}


def run(op: str, seed: int = 0) -> list[CheckResult]:
    results = [CHECKS[op](seed)]
    if op == "lcdconv":
        results.append(check_lcdconv_reduction(seed))
    return results
