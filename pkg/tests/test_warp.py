import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowwarp.core import ContractError
from flowwarp.gradcheck import central_diff, check_warp, rel_error
from flowwarp.warp import (
    compose_flows,
    downsample_flow,
    warp_backward,
    warp_backward_grad,
    warp_flow,
)


def bilinear_clamp(img, x, y):
    """Scalar-loop oracle: clamp the integer corners, weight by fractions."""
    h, w = img.shape[:2]
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    out = 0.0
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xc = min(max(x0 + dx, 0), w - 1)
        yc = min(max(y0 + dy, 0), h - 1)
        out = out + wt * img[yc, xc]
    return out


def test_zero_flow_is_identity():
    img = np.random.default_rng(0).uniform(size=(5, 6, 3))
    assert np.array_equal(warp_backward(img, np.zeros((5, 6, 2))), img)


def test_ramp_shift_by_one():
    h, w = 4, 7
    ramp = np.tile(np.arange(w) / (w - 1), (h, 1))[:, :, None]
    flow = np.zeros((h, w, 2))
    flow[..., 0] = 1.0
    out = warp_backward(ramp, flow)
    expected = np.array([[min(x + 1, w - 1) / (w - 1) for x in range(w)] for _ in range(h)])
    assert np.max(np.abs(out[..., 0] - expected)) < 1e-15


def test_midpoint_is_average():
    src = np.array([[1.0, 2.0], [3.0, 5.0]])[:, :, None]
    flow = np.zeros((2, 2, 2))
    flow[0, 0] = 0.5
    assert warp_backward(src, flow)[0, 0, 0] == pytest.approx(11.0 / 4)


def test_shape_mismatch():
    with pytest.raises(ContractError):
        warp_backward(np.zeros((4, 4, 1)), np.zeros((4, 5, 2)))
    with pytest.raises(ContractError):
        compose_flows(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)))


def test_warp_flow_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    target = rng.normal(size=(8, 8, 2))
    carrier = rng.uniform(-3, 3, size=(8, 8, 2))
    out = warp_flow(target, carrier)
    for y in range(8):
        for x in range(8):
            ref = bilinear_clamp(target, x + carrier[y, x, 0], y + carrier[y, x, 1])
            assert np.allclose(out[y, x], ref, atol=1e-12)


def test_warp_flow_identity_and_constant():
    rng = np.random.default_rng(4)
    t = rng.normal(size=(6, 6, 2))
    assert np.array_equal(warp_flow(t, np.zeros_like(t)), t)
    const = np.broadcast_to([1.5, -2.0], (6, 6, 2)).copy()
    out = warp_flow(const, rng.uniform(-9, 9, size=(6, 6, 2)))
    assert np.allclose(out, const, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linear_in_source(seed, a, b):
    rng = np.random.default_rng(seed)
    i1, i2 = rng.normal(size=(2, 5, 6, 2))
    flow = rng.uniform(-4, 4, size=(5, 6, 2))
    lhs = warp_backward(a * i1 + b * i2, flow)
    rhs = a * warp_backward(i1, flow) + b * warp_backward(i2, flow)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_grad_zero_flow_ones():
    g = warp_backward_grad(np.ones((5, 5, 1)), np.zeros((5, 5, 2)), np.ones((5, 5, 1)))
    assert np.array_equal(g.d_image[1:-1, 1:-1], np.ones((3, 3, 1)))


def test_constant_source_has_zero_flow_gradient():
    rng = np.random.default_rng(5)
    g = warp_backward_grad(np.full((6, 6, 2), 0.7), rng.uniform(-2, 2, size=(6, 6, 2)),
                           rng.normal(size=(6, 6, 2)))
    assert np.max(np.abs(g.d_flow)) < 1e-14


def test_flow_gradient_finite_differences():
    rng = np.random.default_rng(6)
    src = rng.uniform(size=(7, 7, 2))
    flow = rng.integers(-2, 2, size=(7, 7, 2)) + rng.uniform(0.2, 0.8, size=(7, 7, 2))
    probe = rng.normal(size=(7, 7, 2))
    g = warp_backward_grad(src, flow, probe)
    idx = rng.choice(flow.size, 20, replace=False)
    num = central_diff(lambda f: float((warp_backward(src, f) * probe).sum()), flow, idx, 1e-4)
    assert rel_error(g.d_flow.flat[idx], num) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradcheck_suite(seed):
    assert check_warp(seed).passed


def test_downsample_rules():
    const = np.broadcast_to([2.0, 4.0], (4, 4, 2)).copy()
    assert np.array_equal(downsample_flow(const, 2), np.broadcast_to([1.0, 2.0], (2, 2, 2)))
    rng = np.random.default_rng(7)
    f = rng.normal(size=(8, 8, 2))
    assert np.array_equal(downsample_flow(f, 1), f)
    with pytest.raises(ContractError):
        downsample_flow(np.zeros((6, 4, 2)), 4)
    with pytest.raises(ContractError):
        downsample_flow(np.zeros((6, 6, 2)), 3)


def test_downsample_ramp_block_means():
    ys, xs = np.mgrid[0:4, 0:4].astype(float)
    f = np.stack([xs, 2 * ys], axis=-1)
    out = downsample_flow(f, 2)
    for by in range(2):
        for bx in range(2):
            block = f[2 * by:2 * by + 2, 2 * bx:2 * bx + 2].reshape(-1, 2)
            assert np.allclose(out[by, bx], block.mean(0) / 2, atol=0)


def test_downsample_composes():
    f = np.random.default_rng(8).normal(size=(16, 8, 2))
    assert np.max(np.abs(downsample_flow(downsample_flow(f, 2), 2) - downsample_flow(f, 4))) < 1e-12


def test_compose():
    rng = np.random.default_rng(9)
    c, f = rng.normal(size=(2, 5, 5, 2))
    assert np.array_equal(compose_flows(c, np.zeros_like(c)), c)
    assert np.array_equal(compose_flows(c, -c), np.zeros_like(c))
    out = compose_flows(c, f)
    for y in range(5):
        for x in range(5):
            for k in range(2):
                assert out[y, x, k] == c[y, x, k] + f[y, x, k]
