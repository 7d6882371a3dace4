import os
import subprocess
import sys

import numpy as np
import pytest

from paad import _fallback, kernels
from paad.fieldsim import lidar_angles

compiled = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")


def _backends():
    return kernels.backend_module("cython"), kernels.backend_module("numpy")


def test_fallback_im2col_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 6))
    cols = _fallback.im2col(x, 3, 2, 1)
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    Ho, Wo = _fallback.conv_out_size(7, 3, 2, 1), _fallback.conv_out_size(6, 3, 2, 1)
    for b in range(2):
        for i in range(Ho):
            for j in range(Wo):
                patch = pad[b, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3].ravel()
                np.testing.assert_array_equal(cols[b, i * Wo + j], patch)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2, 9, 8))
    cols = _fallback.im2col(x, 3, 2, 1)
    c = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * c)
    rhs = np.sum(x * _fallback.col2im(c, x.shape, 3, 2, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_maxpool_first_maximum_wins_on_ties():
    x = np.ones((1, 1, 2, 2))
    out, arg = _fallback.maxpool2(x)
    assert out[0, 0, 0, 0] == 1 and arg[0, 0, 0, 0] == 0
    d = _fallback.maxpool2_backward(np.full((1, 1, 1, 1), 5.0), arg, x.shape)
    np.testing.assert_array_equal(d[0, 0], [[5, 0], [0, 0]])


def test_ray_cast_single_circle_closed_form():
    circles = np.array([[2.0, 0.0, 0.5]])
    r = kernels.ray_cast(0.0, 0.0, np.array([0.0, np.pi]), circles, 10.0)
    np.testing.assert_allclose(r, [1.5, 10.0])


@compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree_on_conv_kernels(dtype):
    cy, npb = _backends()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 2, 11, 13)).astype(dtype)
    c1, c2 = cy.im2col(x, 3, 2, 1), npb.im2col(x, 3, 2, 1)
    np.testing.assert_array_equal(c1, c2)
    g = rng.standard_normal(c1.shape).astype(dtype)
    np.testing.assert_array_equal(cy.col2im(g, x.shape, 3, 2, 1), npb.col2im(g, x.shape, 3, 2, 1))
    a = rng.standard_normal((3, 4, 6, 8)).astype(dtype)
    (o1, a1), (o2, a2) = cy.maxpool2(a), npb.maxpool2(a)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(a1, a2)
    d = rng.standard_normal(o1.shape).astype(dtype)
    np.testing.assert_array_equal(cy.maxpool2_backward(d, a1, a.shape),
                                  npb.maxpool2_backward(d, a2, a.shape))


@compiled
def test_backends_agree_on_ray_casting():
    cy, npb = _backends()
    rng = np.random.default_rng(3)
    circles = np.column_stack([rng.uniform(-5, 5, 300), rng.uniform(-5, 5, 300),
                               rng.uniform(0.02, 0.3, 300)])
    ang = lidar_angles()
    for ox, oy in [(0.0, 0.0), (1.3, -0.7)]:
        r1 = kernels.ray_cast(ox, oy, ang, circles, 10.0, impl=cy)
        r2 = kernels.ray_cast(ox, oy, ang, circles, 10.0, impl=npb)
        np.testing.assert_allclose(r1, r2, rtol=0, atol=1e-12)


def test_pure_python_switch_selects_numpy_backend():
    env = dict(os.environ, PAAD_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import paad.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
