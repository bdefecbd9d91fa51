"""Compiled and numpy im2col kernels must agree bit for bit."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdcnet import _kernels
from msdcnet._fallback import col2vol, vol2col

BACKENDS = _kernels.backends()


def test_backend_selected_at_import():
    assert _kernels.BACKEND in BACKENDS


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")
@settings(max_examples=40, deadline=None)
@given(
    dims=st.tuples(st.integers(1, 4), st.integers(1, 7), st.integers(1, 7)),
    k=st.tuples(st.sampled_from([1, 3]), st.sampled_from([1, 3, 5]), st.sampled_from([1, 3, 5])),
    stride=st.integers(1, 2),
    pad=st.integers(0, 2),
    dtype=st.sampled_from([np.float32, np.float64]),
    seed=st.integers(0, 2 ** 16),
)
def test_cython_matches_fallback(dims, k, stride, pad, dtype, seed):
    shape = (2, 3) + dims
    s3, p3 = (stride,) * 3, (pad,) * 3
    outs = [(n + 2 * pad - kk) // stride + 1 for n, kk in zip(dims, k)]
    if min(outs) < 1:
        return
    x = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
    ext_v2c, ext_c2v = BACKENDS["cython"]
    cols = vol2col(x, k, s3, p3)
    np.testing.assert_array_equal(ext_v2c(x, k, s3, p3), cols)
    np.testing.assert_array_equal(ext_c2v(cols, shape, k, s3, p3), col2vol(cols, shape, k, s3, p3))


def test_col2vol_is_adjoint_of_vol2col():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 3, 6, 5))
    k, s, p = (3, 3, 3), (2, 2, 2), (1, 1, 1)
    for v2c, c2v in BACKENDS.values():
        cols = v2c(x, k, s, p)
        c = rng.standard_normal(cols.shape)
        assert np.vdot(cols, c) == pytest.approx(np.vdot(x, c2v(c, x.shape, k, s, p)), rel=1e-12)
