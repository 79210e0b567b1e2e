"""Training objectives: flow temporal consistency, TV-L1 smoothness, the
multi-scale reconstruction surrogate and their weighted sum.

Every L1 norm is a mean over pixels of the per-pixel sum over components.
The subgradient of ``|r|`` at ``r == 0`` is taken as 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import ContractError, NumericalError, as_flow, as_image
from .warp import warp_flow, warp_flow_grad

LAMBDA_FTC = 5.0
LAMBDA_TVL1 = 0.5
FTC_LAGS = (1, 3, 9)


# --------------------------------------------------------------------------
# flow temporal consistency

def ftc_residual(f_t, f_prev, u) -> np.ndarray:
    f_t = as_flow(f_t, "f_t")
    f_prev = as_flow(f_prev, "f_prev")
    u = as_flow(u, "u")
    if not (f_t.shape == f_prev.shape == u.shape):
        raise ContractError(f"flow shapes differ: {f_t.shape}, {f_prev.shape}, {u.shape}")
    return f_t - warp_flow(f_prev, u) - u


def ftc_loss(f_t, f_prev, u) -> float:
    """Mean over pixels of ``|f_t - W_u(f_prev) - u|_1``."""
    r = ftc_residual(f_t, f_prev, u)
    return float(np.abs(r).sum(-1).mean())


def ftc_loss_grad(f_t, f_prev, u):
    """Returns ``(loss, d_f_t, d_f_prev)``."""
    r = ftc_residual(f_t, f_prev, u)
    n = r.shape[0] * r.shape[1]
    g = np.sign(r) / n
    d_prev = -warp_flow_grad(f_prev, u, g).d_image
    return float(np.abs(r).sum(-1).mean()), g, d_prev


def available_lags(t: int, history: Mapping[int, object], lags=FTC_LAGS) -> list[int]:
    return [l for l in lags if t - l >= 0 and (t - l) in history]


def ftc_multiscale(flows: Mapping[int, object], gt_flows: Mapping[int, object], t: int | None = None,
                   lags: Sequence[int] = FTC_LAGS) -> float:
    """Sum of :func:`ftc_loss` at frame ``t`` over every lag with history.

    ``flows`` maps frame index to predicted flow, ``gt_flows`` maps lag to the
    optical flow from ``t`` to ``t - lag``. ``t`` defaults to the last frame.
    """
    if t is None:
        t = max(flows)
    use = [l for l in available_lags(t, flows, lags) if l in gt_flows]
    if not use:
        raise ContractError(f"no FTC lag in {tuple(lags)} has history at frame {t}")
    return sum(ftc_loss(flows[t], flows[t - l], gt_flows[l]) for l in use)


# --------------------------------------------------------------------------
# TV-L1

def tvl1_loss(f) -> float:
    return tvl1_loss_grad(f)[0]


def tvl1_loss_grad(f):
    """Forward-difference TV-L1 of a flow field and its adjoint.

    Horizontal differences exist for ``W - 1`` columns and vertical ones for
    ``H - 1`` rows; both sums are divided by the pixel count ``H * W``.
    """
    v = as_flow(f)
    n = v.shape[0] * v.shape[1]
    dx = v[:, 1:] - v[:, :-1]
    dy = v[1:] - v[:-1]
    loss = (np.abs(dx).sum() + np.abs(dy).sum()) / n
    sx = np.sign(dx) / n
    sy = np.sign(dy) / n
    g = np.zeros_like(v)
    g[:, 1:] += sx
    g[:, :-1] -= sx
    g[1:] += sy
    g[:-1] -= sy
    return float(loss), g


# --------------------------------------------------------------------------
# reconstruction surrogate

class FeatureExtractor(Protocol):
    """A linear multi-level feature map; real perceptual networks can plug in
    here as long as they also provide the adjoint."""

    def features(self, img: np.ndarray) -> list[np.ndarray]: ...

    def adjoint(self, grads: list[np.ndarray], shape: tuple) -> np.ndarray: ...


@lru_cache(maxsize=16)
def _blur_down(n: int, sigma: float) -> np.ndarray:
    # Gaussian blur with edge replication, then keep every other sample
    radius = int(math.ceil(3 * sigma))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    G = np.zeros((n, n))
    for i in range(n):
        for j, t in zip(range(i - radius, i + radius + 1), taps):
            G[i, min(max(j, 0), n - 1)] += t
    m = G[::2].copy()
    m.setflags(write=False)
    return m


class GaussianPyramid:
    """Levels ``0..levels-1``: the image, then repeatedly blurred (sigma) and
    decimated by two."""

    def __init__(self, levels: int = 3, sigma: float = 1.0):
        self.levels = levels
        self.sigma = sigma

    def _ops(self, h, w):
        ops = []
        for _ in range(self.levels - 1):
            if h % 2 or w % 2:
                raise ContractError(f"{h}x{w} cannot be halved for the pyramid")
            ops.append((_blur_down(h, self.sigma), _blur_down(w, self.sigma)))
            h, w = h // 2, w // 2
        return ops

    def features(self, img):
        out = [img]
        for A, B in self._ops(*img.shape[:2]):
            out.append(np.einsum("ij,jkc,lk->ilc", A, out[-1], B, optimize=True))
        return out

    def adjoint(self, grads, shape):
        ops = self._ops(*shape[:2])
        g = grads[-1]
        for (A, B), gl in zip(reversed(ops), reversed(grads[:-1])):
            g = gl + np.einsum("ij,ilc,lk->jkc", A, g, B, optimize=True)
        return g


def rec_loss_grad(pred, target, extractor: FeatureExtractor | None = None):
    """Sum over pyramid levels of mean per-pixel L1 (summed over channels).

    Returns ``(loss, d_pred)``.
    """
    p = as_image(pred, "pred")
    t = as_image(target, "target")
    if p.shape != t.shape:
        raise ContractError(f"pred {p.shape} and target {t.shape} differ")
    ex = extractor or GaussianPyramid()
    feats = ex.features(p - t)
    loss = 0.0
    grads = []
    for f in feats:
        n = f.shape[0] * f.shape[1]
        loss += np.abs(f).sum() / n
        grads.append(np.sign(f) / n)
    return float(loss), ex.adjoint(grads, p.shape)


def rec_loss(pred, target, extractor: FeatureExtractor | None = None) -> float:
    return rec_loss_grad(pred, target, extractor)[0]


# --------------------------------------------------------------------------
# weighted objective

@dataclass
class LossReport:
    l_rec_fine: float
    l_rec_coarse: float
    l_ftc: float
    l_tvl1: float
    l_full: float
    lambda1: float = LAMBDA_FTC
    lambda2: float = LAMBDA_TVL1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        return cls(**json.loads(line))


def full_objective(l_rec_fine: float, l_rec_coarse: float, l_ftc: float, l_tvl1: float,
                   lambda1: float = LAMBDA_FTC, lambda2: float = LAMBDA_TVL1) -> LossReport:
    parts = (l_rec_fine, l_rec_coarse, l_ftc, l_tvl1)
    if not all(math.isfinite(x) for x in parts):
        raise NumericalError(f"non-finite loss component in {parts}")
    total = l_rec_fine + l_rec_coarse + lambda1 * l_ftc + lambda2 * l_tvl1
    return LossReport(float(l_rec_fine), float(l_rec_coarse), float(l_ftc), float(l_tvl1),
                      float(total), float(lambda1), float(lambda2))
