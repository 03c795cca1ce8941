"""Finite-difference oracle behaviour and the primitive battery."""

import numpy as np
import pytest

from everest import tensor as T
from everest.gradcheck import DEFAULT_TOL, PrecisionError, grad_check, primitive_checks


def test_linear_map_is_exact():
    c = T.Tensor(np.array([2.0, -3.0, 0.5]), dtype=np.float64)
    x = T.Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True, dtype=np.float64)
    err = grad_check(lambda t: (t * c).sum(), x)
    assert err < 1e-9  # central differences are exact for linear maps


def test_quadratic_within_taylor_bound():
    x = T.Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True, dtype=np.float64)
    err = grad_check(lambda t: (t * t).sum(), x, h=1e-5)
    assert err < 1e-9


def test_requires_float64():
    x = T.Tensor(np.ones(3), requires_grad=True, dtype=np.float32)
    with pytest.raises(PrecisionError):
        grad_check(lambda t: t.sum(), x)


def test_rejects_nonscalar_target():
    x = T.Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
    with pytest.raises(T.ShapeError):
        grad_check(lambda t: t * 2.0, x)


@pytest.mark.parametrize("seed", range(5))
def test_primitive_battery(seed):
    errs = primitive_checks(seed)
    bad = {k: v for k, v in errs.items() if v >= DEFAULT_TOL}
    assert not bad, f"primitives over tolerance: {bad}"
