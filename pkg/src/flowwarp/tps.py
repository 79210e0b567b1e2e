"""Thin-plate-spline transforms on a 3x3 control lattice and the feature
correlation map that drives the control-point regressor.

Control points live in normalised coordinates where the image spans
``[-1, 1]`` on both axes (``-1`` is the centre of the first pixel and ``1``
that of the last one). A transform maps an output location to the location
it should be sampled from, so converting it to a flow gives a backward flow.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import ContractError, NumericalError, as_flow, as_image

K = 9
REGULARIZATION = 1e-6
_NORM_EPS = 1e-8


def lattice() -> np.ndarray:
    """The 9 predefined grid points, row-major (y outer, x inner)."""
    ys, xs = np.meshgrid([-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def _kernel(d2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r^2, written on squared distances; U(0) = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = d2 * np.log(d2)
    return np.where(d2 > 0, out, 0.0)


def _sqdist(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return ((p[:, None, :] - q[None, :, :]) ** 2).sum(-1)


@lru_cache(maxsize=8)
def _system_inverse(grid_key: bytes) -> np.ndarray:
    grid = np.frombuffer(grid_key).reshape(-1, 2)
    n = len(grid)
    if len({tuple(g) for g in grid}) != n:
        raise ContractError("TPS grid points must be distinct")
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = _kernel(_sqdist(grid, grid)) + REGULARIZATION * np.eye(n)
    L[:n, n] = 1.0
    L[:n, n + 1:] = grid
    L[n, :n] = 1.0
    L[n + 1:, :n] = grid.T
    if np.linalg.cond(L) > 1e12:
        raise NumericalError("TPS system is singular beyond regularisation")
    return np.linalg.inv(L)


@dataclass(frozen=True, eq=False)
class TpsTransform:
    """Fitted TPS: ``map(p) = [1, x, y] @ affine + U(|p - g_i|) @ radial``."""

    grid_points: np.ndarray  # (K, 2)
    theta: np.ndarray        # (K, 2) control point positions
    affine: np.ndarray       # (3, 2)
    radial: np.ndarray       # (K, 2)

    def map(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(-1, 2)
        out = _kernel(_sqdist(flat, self.grid_points)) @ self.radial
        out += self.affine[0] + flat @ self.affine[1:]
        return out.reshape(pts.shape)

    def jacobian(self, points: np.ndarray) -> np.ndarray:
        """d map / d p, shape ``(*P, 2, 2)`` with ``[..., out, in]``."""
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(-1, 2)
        diff = flat[:, None, :] - self.grid_points[None]
        d2 = (diff ** 2).sum(-1)
        with np.errstate(divide="ignore"):
            g = np.where(d2 > 0, 2.0 * (np.log(d2) + 1.0), 0.0)
        # dU/dp_j = 2 (p_j - g_j)(log r^2 + 1)
        dU = g[..., None] * diff                       # (N, K, 2)
        J = np.einsum("nki,ko->noi", dU, self.radial)
        J += self.affine[1:].T[None]
        return J.reshape(pts.shape[:-1] + (2, 2))


def fit_tps(grid_points, theta) -> TpsTransform:
    grid = np.ascontiguousarray(grid_points, dtype=np.float64)
    th = np.asarray(theta, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[1] != 2 or th.shape != grid.shape:
        raise ContractError(f"grid {grid.shape} and theta {th.shape} must both be (K, 2)")
    Linv = _system_inverse(grid.tobytes())
    n = len(grid)
    coeffs = Linv[:, :n] @ th
    return TpsTransform(grid.copy(), th.copy(), coeffs[n:], coeffs[:n])


def pixel_to_norm(height: int, width: int):
    """Normalised coordinates of every pixel centre, shape ``(H, W, 2)``."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    sx = 2.0 / (width - 1) if width > 1 else 0.0
    sy = 2.0 / (height - 1) if height > 1 else 0.0
    return np.stack([xs * sx - 1.0, ys * sy - 1.0], axis=-1)


def _half_extent(height: int, width: int) -> np.ndarray:
    return np.array([(width - 1) / 2.0, (height - 1) / 2.0])


def tps_to_flow(t: TpsTransform, height: int, width: int) -> np.ndarray:
    """Dense backward flow ``(x' - x, y' - y)`` in pixels for the transform."""
    p = pixel_to_norm(height, width)
    return (t.map(p) - p) * _half_extent(height, width)


@lru_cache(maxsize=8)
def _flow_basis(height: int, width: int, grid_key: bytes) -> np.ndarray:
    grid = np.frombuffer(grid_key).reshape(-1, 2)
    n = len(grid)
    p = pixel_to_norm(height, width).reshape(-1, 2)
    rows = np.concatenate([_kernel(_sqdist(p, grid)), np.ones((len(p), 1)), p], axis=1)
    basis = rows @ _system_inverse(grid_key)[:, :n]
    basis.setflags(write=False)
    return basis


def flow_basis(height: int, width: int, grid_points=None) -> np.ndarray:
    """Per-pixel weights ``B`` with ``map(p) = B[p] @ theta``; shape ``(H*W, K)``."""
    grid = lattice() if grid_points is None else np.ascontiguousarray(grid_points, dtype=np.float64)
    return _flow_basis(height, width, grid.tobytes())


def tps_flow_grad(t: TpsTransform, upstream) -> np.ndarray:
    """Adjoint on theta of ``sum(upstream * tps_to_flow(t, H, W))``."""
    up = as_flow(upstream, "upstream")
    h, w = up.shape[:2]
    B = flow_basis(h, w, t.grid_points)
    return (B.T @ up.reshape(-1, 2)) * _half_extent(h, w)


# --------------------------------------------------------------------------
# correlation

def _normalize(f: np.ndarray):
    n = np.sqrt((f * f).sum(-1, keepdims=True))
    return f / np.maximum(n, _NORM_EPS), n


def _normalize_grad(fhat: np.ndarray, n: np.ndarray, g: np.ndarray) -> np.ndarray:
    big = n > _NORM_EPS
    proj = g - fhat * (fhat * g).sum(-1, keepdims=True)
    return np.where(big, proj / np.maximum(n, _NORM_EPS), g / _NORM_EPS)


def correlation(feat_a, feat_b) -> np.ndarray:
    """Cosine similarity of every position of ``feat_a`` with every position of
    ``feat_b``; returns ``(h, w, h*w)`` indexed by the ``feat_a`` position."""
    a = as_image(feat_a, "feat_a")
    b = as_image(feat_b, "feat_b")
    if a.shape != b.shape:
        raise ContractError(f"feature shapes differ: {a.shape} vs {b.shape}")
    h, w, c = a.shape
    ah, _ = _normalize(a.reshape(-1, c))
    bh, _ = _normalize(b.reshape(-1, c))
    return (ah @ bh.T).reshape(h, w, h * w)


def correlation_grad(feat_a, feat_b, upstream):
    a = as_image(feat_a, "feat_a")
    b = as_image(feat_b, "feat_b")
    h, w, c = a.shape
    ah, na = _normalize(a.reshape(-1, c))
    bh, nb = _normalize(b.reshape(-1, c))
    g = np.asarray(upstream, dtype=np.float64).reshape(h * w, h * w)
    da = _normalize_grad(ah, na, g @ bh)
    db = _normalize_grad(bh, nb, g.T @ ah)
    return da.reshape(a.shape), db.reshape(b.shape)
