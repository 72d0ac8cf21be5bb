import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from ttshs.errors import ModelValidationError, ShapeMismatchError
from ttshs.expr import Expr
from ttshs.lti import check_stability
from ttshs.model import TimerFunction, TtshsModel, check_remark1_sufficiency, require_valid, validate_model
from ttshs.timing import EventTimeDistribution as E

from conftest import LAWS_MEAN2


def codes(model):
    return [v.code for v in validate_model(model)]


def test_valid_scalar():
    assert validate_model(TtshsModel.lti([[-1.0]], [1.0], J=[[0.5]])) == []


def test_psd_violation():
    assert codes(TtshsModel.lti([[-1.0]], [1.0], J=[[0.5]], D=[[-1.0]])) == ["psd_violation"]
    # tiny negative eigenvalues from round-off are tolerated
    D = np.array([[1.0, 1.0], [1.0, 1.0 - 1e-12]])
    assert codes(TtshsModel.lti(-np.eye(2), [1.0, 1.0], D=D)) == []
    assert codes(TtshsModel.lti(-np.eye(2), [1.0, 1.0], D=[[1.0, 0.5], [0.0, 1.0]])) == ["psd_violation"]


def test_kernel_contracts():
    bad = TtshsModel.lti([[-1.0]], [1.0], J=[[0.3]], B=[[0.25]], c_hat=[0.5], kernel="binomial_partition")
    assert codes(bad) == ["kernel_contract_violation"]
    good = TtshsModel.lti([[-1.0]], [1.0], J=[[0.5]], B=[[0.25]], c_hat=[0.5], kernel="binomial_partition")
    assert codes(good) == []
    det = TtshsModel.lti([[-1.0]], [1.0], J=[[0.5]], D=[[0.1]], kernel="deterministic")
    assert codes(det) == ["kernel_contract_violation"]
    two = TtshsModel.lti(-np.eye(2), [1.0, 1.0], J=0.5 * np.eye(2), kernel="binomial_partition")
    assert "kernel_contract_violation" in codes(two)


def test_shapes_and_modes():
    with pytest.raises(ShapeMismatchError):
        TtshsModel.lti([[-1.0, 0.0], [0.0, -1.0]], [1.0])
    ltv_in_lti = TtshsModel(1, TimerFunction(np.array([[Expr("-1 - tau")]], dtype=object), (1, 1)),
                            TimerFunction([1.0], (1,)), TtshsModel.lti([[-1.0]]).reset, "LTI", "general")
    assert codes(ltv_in_lti) == ["mode_violation"]
    nan = TtshsModel.lti([[np.nan]], [1.0])
    assert codes(nan) == ["nonfinite_value"]


def test_commuting_hint_checked():
    m = TtshsModel.ltv(2, lambda t: np.array([[-1.0, t], [0.0, -2.0]]), [1.0, 0.0], hint="commuting")
    assert codes(m) == ["commuting_violation"]
    scaled = TtshsModel.ltv(2, lambda t: (1 + t) * np.array([[-1.0, 0.3], [0.2, -2.0]]), [1.0, 0.0],
                            hint="commuting")
    assert codes(scaled) == []
    nonzero = TtshsModel.ltv(1, [[-1.0]], [1.0], hint="drift_matrix_zero")
    assert codes(nonzero) == ["commuting_violation"]


def test_validation_is_pure():
    m = TtshsModel.lti([[-1.0]], [1.0], J=[[0.3]], B=[[0.25]], c_hat=[0.5], kernel="binomial_partition")
    assert validate_model(m) == validate_model(m)
    with pytest.raises(ModelValidationError) as info:
        require_valid(m)
    assert info.value.violations[0].field == "J"


# -- sufficient condition ----------------------------------------------------------
def test_remark_examples():
    assert check_remark1_sufficiency(TtshsModel.lti([[-0.3]], [1.0], J=[[0.5]])).applies
    r = check_remark1_sufficiency(TtshsModel.lti([[0.0, 1.0], [-1.0, 0.0]], [0.0, 0.0], J=0.5 * np.eye(2)))
    assert not r.applies and "Hurwitz" in r.reason
    r = check_remark1_sufficiency(TtshsModel.lti(-np.eye(2), [0.0, 0.0], J=np.diag([0.5, 1.5])))
    assert not r.applies


def test_nonnormal_hurwitz_counterexample():
    # A Hurwitz, J diagonal contractive, yet J <e^{A tau_s}> has radius 2.38 for tau_s = 1
    A = scipy.linalg.logm(np.array([[3.0, 9.5], [-1.0, -3.0]])).real
    assert np.all(np.linalg.eigvals(A).real < 0)
    m = TtshsModel.lti(A, [0.0, 0.0], J=np.diag([0.9, 0.1]))
    v = check_stability(m, E.deterministic(1.0))
    assert v.mean_stable == "no"
    assert v.mean_spectral_radius == pytest.approx(2.3811011811, rel=1e-8)
    r = check_remark1_sufficiency(m)
    assert not r.applies and "symmetric part" in r.reason


@st.composite
def contractive_models(draw):
    n = draw(st.integers(1, 2))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    X = rng.normal(size=(n, n))
    A = (X - X.T) - draw(st.floats(0.05, 2.0)) * np.eye(n)
    J = np.diag(rng.uniform(0.05, 0.95, n))
    Q = np.diag(rng.uniform(0.0, 0.3, n))
    Q = np.where(np.diag(J) ** 2 + np.diag(Q) ** 2 < 0.99, Q, 0.0)
    B = rng.uniform(0, 0.2) * np.eye(n)
    return TtshsModel.lti(A, rng.normal(size=n), J, rng.normal(size=n) * 0.1, Q, B, np.abs(rng.normal(size=n)),
                          0.1 * np.eye(n))


@settings(max_examples=15, deadline=None)
@given(contractive_models())
def test_sufficient_condition_implies_stability(model):
    assert check_remark1_sufficiency(model).applies
    for dist in LAWS_MEAN2.values():
        v = check_stability(model, dist)
        assert v.mean_stable == "yes" and v.second_stable == "yes"
