import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowwarp.core import ContractError
from flowwarp.gradcheck import check_lcdconv, check_lcdconv_reduction
from flowwarp.lcdconv import (
    ConvSpec,
    TAP_DX,
    TAP_DY,
    conv3x3,
    lc_dconv_forward,
    lc_dconv_grad,
    layout_gate,
    tap_positions,
)


def bilinear_zero(x, px, py):
    h, w = x.shape[:2]
    x0, y0 = math.floor(px), math.floor(py)
    fx, fy = px - x0, py - y0
    out = np.zeros(x.shape[2])
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        if 0 <= xi < w and 0 <= yi < h:
            out = out + wt * x[yi, xi]
    return out


def loop_lcd(x, spec, offsets, layout):
    """Per-pixel, per-tap brute force of the gated deformable convolution."""
    h, w = x.shape[:2]
    y = np.zeros((h, w, spec.out_channels))
    for i in range(h):
        for j in range(w):
            acc = spec.bias.copy()
            for k, (dy, dx) in enumerate((a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)):
                px = j + dx + offsets[i, j, k, 0]
                py = i + dy + offsets[i, j, k, 1]
                rx, ry = math.floor(px + 0.5), math.floor(py + 0.5)
                if not (0 <= rx < w and 0 <= ry < h) or layout[ry, rx] != layout[i, j]:
                    continue
                acc = acc + spec.weights[:, :, dy + 1, dx + 1] @ bilinear_zero(x, px, py)
            y[i, j] = acc
    return y


def random_problem(seed, h=6, w=7, cin=2, cout=3, spread=1.5):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(h, w, cin))
    spec = ConvSpec(rng.normal(size=(cout, cin, 3, 3)), rng.normal(size=cout))
    off = rng.uniform(-spread, spread, size=(h, w, 9, 2))
    lay = rng.integers(0, 3, size=(h, w))
    return x, spec, off, lay


def test_tap_order_is_row_major():
    assert list(zip(TAP_DY, TAP_DX)) == [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)]


@pytest.mark.parametrize("seed", range(3))
def test_reduces_to_standard_conv(seed):
    assert check_lcdconv_reduction(seed).passed
    x, spec, _, _ = random_problem(seed)
    h, w = x.shape[:2]
    y = lc_dconv_forward(x, spec, np.zeros((h, w, 9, 2)), np.full((h, w), 2))
    assert np.max(np.abs(y - conv3x3(x, spec))) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_uniform_layout_is_deformable_conv(seed):
    x, spec, off, _ = random_problem(seed)
    uni = np.zeros(x.shape[:2], dtype=int)
    y = lc_dconv_forward(x, spec, off, uni)
    assert np.max(np.abs(y - loop_lcd(x, spec, off, uni))) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_matches_brute_force(seed):
    x, spec, off, lay = random_problem(seed)
    assert np.max(np.abs(lc_dconv_forward(x, spec, off, lay) - loop_lcd(x, spec, off, lay))) < 1e-12


def test_split_layout_hand_enumeration():
    x = (np.arange(9, dtype=float) + 1).reshape(3, 3, 1)
    lay = np.array([[1, 2, 2]] * 3)
    spec = ConvSpec(np.ones((1, 1, 3, 3)), np.zeros(1))
    y = lc_dconv_forward(x, spec, np.zeros((3, 3, 9, 2)), lay)[..., 0]
    # left column (tops) sees only vertically adjacent left-column pixels
    assert y[0, 0] == 1 + 4
    assert y[1, 0] == 1 + 4 + 7
    assert y[2, 0] == 4 + 7
    # right block (bottoms) never reads the left column
    assert y[1, 1] == 2 + 3 + 5 + 6 + 8 + 9
    assert y[0, 2] == 2 + 3 + 5 + 6
    # dense 3x3 would have included the left column
    assert conv3x3(x, spec)[1, 1, 0] == 45


def test_zero_weights_give_bias():
    x, _, off, lay = random_problem(4)
    spec = ConvSpec(np.zeros((3, 2, 3, 3)), np.array([0.5, -1.0, 2.0]))
    y = lc_dconv_forward(x, spec, off, lay)
    assert np.array_equal(y, np.broadcast_to(spec.bias, y.shape))


@pytest.mark.parametrize("seed", range(4))
def test_gate_exhaustive(seed):
    rng = np.random.default_rng(seed)
    h, w = 5, 6
    lay = rng.integers(0, 3, size=(h, w))
    # include exact half-pixel positions to pin the rounding rule
    off = rng.integers(-4, 5, size=(h, w, 9, 2)) / 2.0 + rng.choice([0, 0.2], size=(h, w, 9, 2))
    px, py = tap_positions(off)
    gate = layout_gate(lay, px, py)
    for i in range(h):
        for j in range(w):
            for k in range(9):
                rx, ry = math.floor(px[i, j, k] + 0.5), math.floor(py[i, j, k] + 0.5)
                expect = 0 <= rx < w and 0 <= ry < h and lay[ry, rx] == lay[i, j]
                assert gate[i, j, k] == expect


def test_half_pixel_rounds_up():
    lay = np.array([[0, 1]])
    assert layout_gate(lay, np.array([[0.5]]), np.array([[0.0]]))[0, 0] == False  # noqa: E712
    assert layout_gate(lay, np.array([[0.49]]), np.array([[0.0]]))[0, 0] == True  # noqa: E712


def test_other_class_samples_never_contribute():
    rng = np.random.default_rng(5)
    h, w = 6, 6
    lay = rng.integers(0, 2, size=(h, w))
    x = rng.normal(size=(h, w, 2))
    spec = ConvSpec(rng.normal(size=(2, 2, 3, 3)), np.zeros(2))
    off = rng.integers(-1, 2, size=(h, w, 9, 2)).astype(float)  # integer: one pixel per tap
    y = lc_dconv_forward(x, spec, off, lay)
    for c in (0, 1):
        poisoned = x.copy()
        poisoned[lay != c] = 1e6
        y2 = lc_dconv_forward(poisoned, spec, off, lay)
        assert np.array_equal(y2[lay == c], y[lay == c])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-2, 2), st.floats(-2, 2))
def test_linear_in_input_and_weights(seed, a, b):
    x, spec, off, lay = random_problem(seed % 1000, h=4, w=5)
    rng = np.random.default_rng(seed)
    x2 = rng.normal(size=x.shape)
    zero_b = ConvSpec(spec.weights, np.zeros(spec.out_channels))
    f = lambda v, s=zero_b: lc_dconv_forward(v, s, off, lay)
    assert np.max(np.abs(f(a * x + b * x2) - (a * f(x) + b * f(x2)))) < 1e-12
    w2 = rng.normal(size=spec.weights.shape)
    g = lambda wt: lc_dconv_forward(x, ConvSpec(wt, np.zeros(spec.out_channels)), off, lay)
    assert np.max(np.abs(g(a * spec.weights + b * w2) - (a * g(spec.weights) + b * g(w2)))) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_gradients_finite_differences(seed):
    r = check_lcdconv(seed)
    assert r.passed, r


def test_masked_taps_carry_no_gradient():
    x, spec, off, lay = random_problem(6)
    h, w = x.shape[:2]
    up = np.random.default_rng(6).normal(size=(h, w, spec.out_channels))
    g = lc_dconv_grad(x, spec, off, lay, up)
    gate = layout_gate(lay, *tap_positions(off))
    assert not gate.all() and gate.any()
    assert np.all(g.d_offsets[~gate] == 0.0)
    # input pixels only reachable through masked taps get no gradient
    px, py = tap_positions(off)
    reach = np.zeros((h, w), dtype=bool)
    for (i, j, k) in zip(*np.nonzero(gate)):
        x0, y0 = math.floor(px[i, j, k]), math.floor(py[i, j, k])
        for yy in (y0, y0 + 1):
            for xx in (x0, x0 + 1):
                if 0 <= xx < w and 0 <= yy < h:
                    reach[yy, xx] = True
    assert np.all(g.d_x[~reach] == 0.0)


def test_weight_gradient_matches_dense_conv_oracle():
    x, spec, _, _ = random_problem(7)
    h, w = x.shape[:2]
    up = np.random.default_rng(7).normal(size=(h, w, spec.out_channels))
    g = lc_dconv_grad(x, spec, np.zeros((h, w, 9, 2)), np.zeros((h, w), dtype=int), up)
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(spec.weights)
    for ky in range(3):
        for kx in range(3):
            patch = xp[ky:ky + h, kx:kx + w]
            ref[:, :, ky, kx] = np.einsum("hwo,hwc->oc", up, patch)
    assert np.max(np.abs(g.d_weights - ref)) < 1e-12
    assert np.allclose(g.d_bias, up.sum((0, 1)), atol=1e-12)


def test_shape_mismatches():
    x, spec, off, lay = random_problem(8)
    with pytest.raises(ContractError):
        lc_dconv_forward(x, spec, off[:-1], lay)
    with pytest.raises(ContractError):
        lc_dconv_forward(x, spec, off, lay[:, :-1])
    with pytest.raises(ContractError):
        lc_dconv_forward(x[..., :1], spec, off, lay)
    with pytest.raises(ContractError):
        lc_dconv_grad(x, spec, off, lay, np.zeros((2, 2, 3)))
    with pytest.raises(ContractError):
        ConvSpec(np.zeros((2, 2, 3, 3)), np.zeros(3))
