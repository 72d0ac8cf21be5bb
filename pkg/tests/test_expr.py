import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ttshs.errors import ModelParseError
from ttshs.expr import Expr


@pytest.mark.parametrize("body,tau,expected", [
    ("2 + 3 * tau", 2.0, 8.0),
    ("2^3^2", 0.0, 512.0),  # right-associative
    ("-tau^2", 3.0, -9.0),
    ("(1 - tau) / 4", 5.0, -1.0),
    ("exp(ln(tau))", 2.5, 2.5),
    ("pi * e", 0.0, math.pi * math.e),
    ("5 * 2^(tau/2)", 4.0, 20.0),
])
def test_evaluation(body, tau, expected):
    assert Expr(body)(tau) == pytest.approx(expected, rel=1e-15)


def test_vectorized_and_constant():
    f = Expr("3")
    out = f(np.array([0.0, 1.0, 2.0]))
    np.testing.assert_array_equal(out, [3.0, 3.0, 3.0])
    assert not f.uses_tau
    assert Expr("tau*0 + 1").uses_tau


@pytest.mark.parametrize("body,column", [
    ("tau + sin(tau)", 7),
    ("tau + x", 7),
    ("2 ** tau", 3),
    ("tau $ 2", 5),
    ("'a'", 1),
    ("tau % 2", 1),
    ("exp(tau, 2)", 1),
])
def test_rejections(body, column):
    with pytest.raises(ModelParseError) as info:
        Expr(body, "A[0][0]")
    assert info.value.column == column


def test_column_accounts_for_caret():
    with pytest.raises(ModelParseError) as info:
        Expr("tau^2 + foo")
    assert info.value.column == 9


def test_empty():
    with pytest.raises(ModelParseError):
        Expr("   ")


@given(st.floats(-50, 50), st.floats(0.1, 20))
def test_matches_python(a, t):
    f = Expr(f"({a!r}) * tau^2 - exp(-tau) / ({a!r} + 100)")
    assert f(t) == pytest.approx(a * t**2 - math.exp(-t) / (a + 100), rel=1e-13, abs=1e-13)
