import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from degenmfg import _kernels_py, kernels
from degenmfg.fbsde import monomial_exponents

try:
    from degenmfg import _kernels as compiled
except ImportError:
    compiled = None

needs_compiled = pytest.mark.skipif(compiled is None, reason="extension not built")
finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")


def test_poly_design_columns():
    y = np.array([[2.0, 3.0]])
    exps = np.array([[0, 0], [1, 0], [0, 1], [2, 1]])
    np.testing.assert_allclose(kernels.poly_design(y, exps), [[1.0, 2.0, 3.0, 12.0]])


def test_w2_kernel_equal_sizes():
    assert kernels.w2_sq_sorted_1d([0.0, 2.0], [1.0, 3.0]) == pytest.approx(1.0)


@needs_compiled
@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=finite),
       arrays(np.float64, st.integers(1, 40), elements=finite))
def test_backends_agree_on_w2(a, b):
    a, b = np.sort(a), np.sort(b)
    assert compiled.w2_sq_sorted_1d(a, b) == pytest.approx(_kernels_py.w2_sq_sorted_1d(a, b),
                                                          rel=1e-12, abs=1e-12)


@needs_compiled
@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(0, 4), st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_backends_agree_on_design(n, degree, N, seed):
    y = np.random.default_rng(seed).normal(size=(N, n))
    exps = np.ascontiguousarray(monomial_exponents(n, degree), dtype=np.int_)
    np.testing.assert_allclose(compiled.poly_design(y, exps), _kernels_py.poly_design(y, exps),
                               rtol=1e-13, atol=1e-13)
