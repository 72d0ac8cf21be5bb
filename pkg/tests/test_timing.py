import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate as sci_integrate
from scipy import special

from ttshs.errors import DivergenceDetectedError, DivergentMomentError, ModelParseError, SurvivalExhaustedError
from ttshs.linalg import matrix_exponential, spectral_radius
from ttshs.quadrature import integrate
from ttshs.timing import EventTimeDistribution as E

PARAMETRIC = [E.exponential(1.5), E.gamma(3.0, 0.7), E.gamma(0.5, 2.0), E.weibull(1.7, 2.0), E.weibull(0.8, 1.0),
              E.lognormal(0.2, 0.6), E.lomax(4.5, 3.0)]


# -- hazard -------------------------------------------------------------------
def test_exponential_hazard_is_constant():
    d = E.exponential(2.5)
    np.testing.assert_array_equal(d.hazard_rate(np.array([0.0, 1.0, 500.0])), 0.4)


@pytest.mark.parametrize("k,lam", [(3.0, 2.0), (0.7, 1.3), (1.0, 4.0)])
def test_weibull_hazard_monomial(k, lam):
    d = E.weibull(k, lam)
    tau = np.linspace(0.1, 2.0 * lam, 9)
    np.testing.assert_allclose(d.hazard_rate(tau), (k / lam) * (tau / lam) ** (k - 1), rtol=1e-12)


def test_hazard_survival_exhausted():
    with pytest.raises(SurvivalExhaustedError):
        E.gamma(4.0, 0.5).hazard_rate(80.0)
    with pytest.raises(SurvivalExhaustedError):
        E.deterministic(2.0).hazard_rate(2.0)
    assert E.deterministic(2.0).hazard_rate(1.0) == 0.0
    with pytest.raises(ValueError):
        E.gamma(4.0, 0.5).hazard_rate(-1.0)


@pytest.mark.parametrize("d", PARAMETRIC[:-1], ids=lambda d: d.describe())
def test_density_from_hazard_identity(d):
    grid = np.linspace(0.05, d.quantile(0.99), 6)
    for t in grid:
        H = sci_integrate.quad(lambda x: float(d.hazard_rate(x)), 0.0, t, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
        assert d.pdf(t) == pytest.approx(d.hazard_rate(t) * math.exp(-H), abs=1e-10)


def test_empirical_hazard_nonnegative():
    d = E.empirical(np.random.default_rng(3).gamma(2.0, 1.0, 50))
    h = d.hazard_rate(np.linspace(0.0, d.quantile(0.95), 40))
    assert np.all(h >= 0)


# -- moments ------------------------------------------------------------------
def test_moment_examples():
    assert E.deterministic(3.0).interevent_moment(2) == 9.0
    assert E.weibull(2.5, 1.7).interevent_moment(1) == pytest.approx(1.7 * special.gamma(1.4), rel=1e-15)
    assert E.exponential(1.3).interevent_moment(3) == pytest.approx(6 * 1.3**3, rel=1e-15)
    assert E.lomax(2.5, 1.0).interevent_moment(3) == math.inf
    assert not E.lomax(2.5, 1.0).moment_finite(3)


@pytest.mark.parametrize("d", PARAMETRIC, ids=lambda d: d.describe())
def test_moments_match_quadrature(d):
    for i in range(4):
        num = sci_integrate.quad(lambda x: x**i * d.pdf(x), 0.0, np.inf, epsabs=0, epsrel=1e-11, limit=400)[0]
        assert d.interevent_moment(i) == pytest.approx(num, rel=1e-8)


def test_timer_moment_examples():
    assert E.deterministic(4.0).timer_moment(1) == 2.0
    assert E.exponential(1.7).timer_moment(1) == pytest.approx(1.7, rel=1e-15)
    for d in PARAMETRIC:
        assert d.timer_moment(0) == pytest.approx(1.0, rel=1e-15)
    with pytest.raises(DivergentMomentError) as info:
        E.lomax(2.5, 1.0).timer_moment(2)
    assert info.value.moment == "<tau_s^3>"


@pytest.mark.parametrize("d", PARAMETRIC[:-1], ids=lambda d: d.describe())
def test_timer_moments_match_quadrature(d):
    m = d.mean_interevent
    for i in range(4):
        num = sci_integrate.quad(lambda x: x**i * d.survival(x) / m, 0.0, np.inf, epsabs=0, epsrel=1e-11,
                                 limit=400)[0]
        assert d.timer_moment(i) == pytest.approx(num, rel=1e-8)


@pytest.mark.parametrize("d", PARAMETRIC, ids=lambda d: d.describe())
def test_pdf_normalized(d):
    total = integrate(d.pdf, 0.0, d.quantile_cap, breakpoints=[d.quantile(0.5)]).value
    assert 1 - 10 * 1e-10 - 1e-12 <= total <= 1 + 1e-12


def test_gamma_from_mean_cv2():
    d = E.gamma_from_mean_cv2(2.0, 0.25)
    assert d.mean_interevent == pytest.approx(2.0)
    assert d.cv2 == pytest.approx(0.25)
    assert E.gamma_from_mean_cv2(2.0, 0.0).family == "deterministic"


def test_invalid_parameters():
    with pytest.raises(ValueError):
        E.exponential(-1.0)
    with pytest.raises(ValueError):
        E.lomax(1.0, 1.0)  # infinite mean
    with pytest.raises(ValueError):
        E.empirical([1.0, -2.0])


# -- transforms and expectations -------------------------------------------------
def test_expectation_examples():
    d = E.exponential(2.0)
    assert d.expect_interevent(lambda t: np.exp(-0.3 * t)) == pytest.approx(1 / 1.6, rel=1e-12)
    np.testing.assert_allclose(d.expect_interevent(lambda t: np.eye(2)), np.eye(2), rtol=1e-12)
    det = E.deterministic(1.5)
    assert det.expect_interevent(lambda t: t**3) == 1.5**3
    assert det.expect_timer(lambda t: t) == pytest.approx(0.75, rel=1e-14)
    assert d.expect_timer(lambda t: 7.0) == pytest.approx(7.0, rel=1e-12)


@pytest.mark.parametrize("d", PARAMETRIC + [E.deterministic(2.0), E.empirical([0.5, 1.0, 2.5, 3.0])],
                         ids=lambda d: d.describe())
def test_timer_laplace_relation(d):
    g = 0.37
    lhs = d.expect_timer(lambda t: np.exp(-g * t))
    rhs = (1 - d.expect_interevent(lambda t: np.exp(-g * t))) / (g * d.mean_interevent)
    assert lhs == pytest.approx(rhs, rel=1e-9)


@pytest.mark.parametrize("d", PARAMETRIC, ids=lambda d: d.describe())
def test_mgf_closed_vs_quadrature(d):
    s = -0.4
    q = sci_integrate.quad(lambda x: math.exp(s * x) * d.pdf(x), 0, np.inf, epsabs=1e-13, epsrel=1e-12)[0]
    assert d.mgf(s) == pytest.approx(q, rel=1e-9)


def test_laplace_complement_small_argument():
    d = E.gamma(3.0, 0.5)
    s = 1e-9
    # 1 - <e^{-s tau}> ~ s <tau> for small s, without cancellation
    assert d.laplace_complement(s) == pytest.approx(s * 1.5 - 0.5 * s * s * d.interevent_moment(2), rel=1e-12)
    assert E.lognormal(0.0, 0.5).laplace_complement(1e-9) == pytest.approx(1e-9 * math.exp(0.125), rel=1e-6)


def test_divergent_mgf():
    assert E.exponential(2.0).mgf(0.6) == math.inf
    assert E.lomax(3.0, 1.0).mgf(0.1) == math.inf
    with pytest.raises(DivergenceDetectedError), np.errstate(over="ignore"):
        E.lomax(3.0, 1.0).expect_interevent(lambda t: np.exp(0.1 * t), vectorized=True)


def _dissipative(rng, n):
    X = rng.normal(size=(n, n))
    S = X - X.T  # skew part keeps it non-normal
    return S - (0.2 + np.abs(rng.normal())) * np.eye(n)


@pytest.mark.parametrize("d", [E.exponential(2.0), E.gamma(4.0, 0.5), E.weibull(3.0, 2.0), E.deterministic(2.0)],
                         ids=lambda d: d.describe())
def test_matrix_mgf_contracts_for_dissipative_drift(d):
    rng = np.random.default_rng(7)
    for _ in range(5):
        A = _dissipative(rng, 3)
        M = d.expect_interevent(lambda t: matrix_exponential(A * t))
        assert np.linalg.norm(M, 2) <= 1 + 1e-10


def test_matrix_mgf_norm_can_exceed_one_for_nonnormal_hurwitz():
    # Hurwitz but not dissipative: the norm bound fails, the spectral radius bound holds
    A = np.array([[-1.0, 30.0], [0.0, -1.0]])
    d = E.deterministic(1.0)
    M = d.expect_interevent(lambda t: matrix_exponential(A * t))
    assert np.linalg.norm(M, 2) > 1
    assert spectral_radius(M) < 1


@settings(max_examples=25, deadline=None)
@given(st.floats(0.3, 5.0), st.floats(0.2, 3.0), st.floats(0.01, 2.0))
def test_gamma_laplace_property(shape, scale, s):
    d = E.gamma(shape, scale)
    expected = (1 + s * scale) ** (-shape)
    assert d.expect_interevent(lambda t: np.exp(-s * t), vectorized=True) == pytest.approx(expected, rel=1e-9)
    assert d.mgf(-s) == pytest.approx(expected, rel=1e-13)


# -- sampling -----------------------------------------------------------------
def test_sampling_means():
    rng = np.random.default_rng(11)
    assert np.all(E.deterministic(2.0).sample_interevent(rng, 5) == 2.0)
    x = E.exponential(2.0).sample_interevent(rng, 10**6)
    assert abs(x.mean() - 2.0) < 4 * 2.0 / 1e3
    d = E.weibull(3.0, 2.0)
    y = d.sample_interevent(rng, 10**6)
    sd = math.sqrt(d.interevent_moment(2) - d.mean_interevent**2)
    assert abs(y.mean() - 2.0 * special.gamma(4 / 3)) < 4 * sd / 1e3
    z = E.empirical([1.0, 2.0, 4.0]).sample_interevent(rng, 1000)
    assert set(np.unique(z)) <= {1.0, 2.0, 4.0}


def test_spec_roundtrip(tmp_path):
    for d in PARAMETRIC + [E.deterministic(2.0)]:
        again = E.from_spec(d.to_spec())
        assert again.family == d.family and again.params == d.params
    p = tmp_path / "taus.csv"
    p.write_text("1.0\n2.0\n3.5\n")
    emp = E.from_spec({"family": "empirical", "path": "taus.csv"}, base_dir=str(tmp_path))
    assert emp.mean_interevent == pytest.approx(6.5 / 3)
    with pytest.raises(ModelParseError):
        E.from_spec({"family": "cauchy"})
    with pytest.raises(ModelParseError):
        E.from_spec({"family": "gamma", "shape": 2.0})
