import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plenocal import dual
from plenocal.dual import Dual

finite = st.floats(0.1, 3.0)


def test_seed_and_constant():
    x = Dual.seed(2.0, 1, 3)
    assert x.der.tolist() == [0.0, 1.0, 0.0]
    c = Dual.constant(np.ones(4), 2)
    assert c.der.shape == (4, 2)


@given(finite, finite)
@settings(max_examples=50, deadline=None)
def test_arithmetic_derivatives(a, b):
    x, y = Dual.seed(a, 0, 2), Dual.seed(b, 1, 2)
    f = (x * y + 3.0 - x / y) ** 2 / (1.0 + x)
    h = 1e-6

    def g(p, q):
        return (p * q + 3.0 - p / q) ** 2 / (1.0 + p)

    num = [(g(a + h, b) - g(a - h, b)) / (2 * h), (g(a, b + h) - g(a, b - h)) / (2 * h)]
    np.testing.assert_allclose(f.der, num, rtol=1e-5, atol=1e-6)
    assert f.val == pytest.approx(g(a, b))


def test_elementary_functions():
    x = Dual.seed(0.7, 0, 1)
    assert dual.sin(x).der[0] == pytest.approx(np.cos(0.7))
    assert dual.cos(x).der[0] == pytest.approx(-np.sin(0.7))
    assert dual.sqrt(x).der[0] == pytest.approx(0.5 / np.sqrt(0.7))
    assert dual.sin(0.7) == pytest.approx(np.sin(0.7))


def test_reflected_operators():
    x = Dual.seed(2.0, 0, 1)
    assert (5.0 - x).der[0] == -1.0
    assert (4.0 / x).der[0] == pytest.approx(-1.0)
    assert (np.float64(3.0) * x).der[0] == 3.0
    assert (-x).val == -2.0


def test_broadcast_over_arrays():
    x = Dual(np.array([1.0, 2.0, 3.0]), np.array([[1.0], [1.0], [1.0]]))
    y = x * x
    np.testing.assert_allclose(y.der[:, 0], [2.0, 4.0, 6.0])
    assert dual.value(y).tolist() == [1.0, 4.0, 9.0]


def test_dual_exponent_rejected():
    x = Dual.seed(2.0, 0, 1)
    with pytest.raises(TypeError):
        x ** x
