import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttshs.errors import ConstraintUnsatisfiableError, DivergenceDetectedError, DivergentMomentError
from ttshs.gene import (SWEEP_COLUMNS, GeneModel, gene_mean, gene_mean_ltv, gene_noise, gene_noise_ltv,
                        infer_partitioning, noise, sweep)
from ttshs.lti import steady_second
from ttshs.ltv import steady_second_ltv
from ttshs.timing import EventTimeDistribution as E

LN2 = math.log(2.0)
CYCLES = [E.exponential(2.0), E.gamma(4.0, 0.5), E.gamma(0.5, 4.0), E.deterministic(2.0),
          E.lognormal(math.log(2.0) - 0.08, 0.4), E.weibull(3.0, 2.0 / math.gamma(4 / 3))]


def engine(gm):
    rep = steady_second(gm.to_ttshs(), gm.cycle)
    return rep.mean[0], rep.covariance[0, 0] / rep.mean[0] ** 2


# -- mapping ------------------------------------------------------------------
def test_model_mapping_and_validation():
    m = GeneModel(5.0, 0.2, 0.3, E.exponential(1.0)).to_ttshs()
    np.testing.assert_allclose(m.A, [[-0.2]])
    np.testing.assert_allclose(m.a_hat, [5.0])
    r = m.reset
    assert (r.J.const[0, 0], r.B.const[0, 0], r.c_hat.const[0]) == (0.5, 0.3, 0.5)
    assert not np.any(r.r_hat.const) and not np.any(r.Q.const) and not np.any(r.D.const)
    for bad in (dict(k_x=0.0), dict(gamma_x=-1.0), dict(b=-0.1), dict(rate_profile="cubic")):
        kw = dict(k_x=1.0, gamma_x=0.1, b=0.0, cycle=E.exponential(1.0))
        kw.update(bad)
        with pytest.raises(ValueError):
            GeneModel(**kw)
    ltv = GeneModel(1.0, 0.0, 0.0, E.deterministic(2.0), "exponential").to_ttshs()
    assert ltv.mode == "LTV" and ltv.ltv_structure_hint == "drift_matrix_zero"
    assert ltv.drift_offset(2.0)[0] == pytest.approx(2.0)


# -- means ---------------------------------------------------------------------
def test_mean_examples():
    k, g, m = 4.0, 0.3, 2.0
    assert gene_mean(GeneModel(k, g, 0.0, E.exponential(m))) == pytest.approx(2 * k * m / (1 + 2 * g * m), rel=1e-12)
    assert gene_mean(GeneModel(5.0, 0.0, 0.0, E.deterministic(2.0))) == pytest.approx(15.0, rel=1e-14)
    # k/h = 10 per hour, cycle 2 h
    assert gene_mean(GeneModel(10.0, 0.0, 0.0, E.deterministic(2.0))) == pytest.approx(30.0, rel=1e-14)
    for d in CYCLES:
        k = 3.0
        cv2 = d.cv2
        assert gene_mean(GeneModel(k, 0.0, 0.0, d)) == pytest.approx(k * d.mean_interevent * (3 + cv2) / 2, rel=1e-9)


@pytest.mark.parametrize("d", CYCLES, ids=lambda d: d.describe())
@pytest.mark.parametrize("g", [0.05, 0.4, 3.0])
@pytest.mark.parametrize("b", [0.0, 0.5])
def test_closed_forms_match_engine(d, g, b):
    gm = GeneModel(7.0, g, b, d)
    mean, cv2 = engine(gm)
    res = gene_noise(gm)
    assert res.regime == "general"
    assert gene_mean(gm) == pytest.approx(mean, rel=1e-8)
    assert res.mean == pytest.approx(mean, rel=1e-8)
    assert res.total == pytest.approx(cv2, rel=1e-6)
    assert res.total == pytest.approx(res.cv2_cell_cycle + res.cv2_partitioning, rel=1e-10)
    if b == 0:
        assert res.cv2_partitioning == 0.0


# -- stable limit --------------------------------------------------------------
@pytest.mark.parametrize("b", [0.0, 0.3, 2.0])
def test_stable_limit_deterministic(b):
    res = gene_noise(GeneModel(10.0, 0.0, b, E.deterministic(2.0)))
    assert res.regime == "stable_limit"
    assert res.cv2_cell_cycle == pytest.approx(1 / 27, rel=1e-13)
    assert res.cv2_partitioning == pytest.approx(16 * b / (9 * res.mean), rel=1e-13)


def test_stable_limit_exponential_and_continuity():
    d = E.exponential(2.0)
    assert gene_noise(GeneModel(1.0, 0.0, 0.0, d)).cv2_cell_cycle == pytest.approx(1 / 3, rel=1e-12)
    for d in CYCLES:
        limit = gene_noise(GeneModel(5.0, 0.0, 0.4, d))
        near = gene_noise(GeneModel(5.0, 1e-6, 0.4, d), regime="general")
        assert near.mean == pytest.approx(limit.mean, rel=1e-3)
        assert near.cv2_cell_cycle == pytest.approx(limit.cv2_cell_cycle, rel=1e-3)
        assert near.cv2_partitioning == pytest.approx(limit.cv2_partitioning, rel=1e-3)
        # the switch sends tiny decay rates to the limit formulas
        assert gene_noise(GeneModel(5.0, 1e-6, 0.4, d)).regime == "stable_limit"


def test_stable_limit_matches_engine():
    for d in CYCLES:
        gm = GeneModel(5.0, 0.0, 0.4, d)
        mean, cv2 = engine(gm)
        assert gene_noise(gm).total == pytest.approx(cv2, rel=1e-6)
        assert gene_noise(gm).mean == pytest.approx(mean, rel=1e-8)


def test_stable_limit_needs_third_moment():
    with pytest.raises(DivergentMomentError):
        gene_noise(GeneModel(1.0, 0.0, 0.0, E.lomax(2.5, 1.5)))
    assert gene_mean(GeneModel(1.0, 0.0, 0.0, E.lomax(2.5, 1.5))) > 0
    with pytest.raises(ValueError):
        gene_noise(GeneModel(1.0, 0.0, 0.0, E.exponential(1.0)), regime="general")


# -- fast decay ----------------------------------------------------------------
@pytest.mark.parametrize("d", [d for d in CYCLES if d.cv2 <= 1], ids=lambda d: d.describe())
def test_fast_decay_asymptote(d):
    g = 50.0 / d.mean_interevent
    gm = GeneModel(100.0, g, 0.5, d)
    gen = gene_noise(gm)
    asy = gene_noise(gm, "fast_decay_asymptote")
    assert asy.regime == "fast_decay_asymptote"
    assert asy.cv2_cell_cycle == pytest.approx(1 / 400)
    assert gen.cv2_cell_cycle == pytest.approx(asy.cv2_cell_cycle, rel=0.05)
    assert gen.cv2_partitioning == pytest.approx(asy.cv2_partitioning, rel=0.05)


def test_fast_decay_slower_for_singular_density():
    # gamma shape 1/2: mass piles up at tau = 0 and the corrections decay like (gamma m)^(-1/2)
    d = E.gamma(0.5, 4.0)
    gaps = []
    for x in (50.0, 500.0, 5000.0):
        gm = GeneModel(100.0, x / d.mean_interevent, 0.5, d)
        gaps.append(abs(gene_noise(gm).cv2_partitioning / gene_noise(gm, "fast_decay_asymptote").cv2_partitioning - 1))
    assert gaps[0] > 0.05 and gaps[2] < 0.02
    assert gaps[0] / gaps[1] == pytest.approx(10**0.5, rel=0.15)


# -- shape of the noise landscape --------------------------------------------
def fixed_mean(g, b, cv2, target=100.0):
    d = E.gamma_from_mean_cv2(1.0, cv2)
    k = target / gene_mean(GeneModel(1.0, g, b, d))
    return gene_noise(GeneModel(k, g, b, d))


def test_monotone_in_cycle_noise():
    rows = [fixed_mean(0.1, 1.0, c) for c in np.linspace(0.0, 1.0, 11)]
    for r in rows:
        assert r.mean == pytest.approx(100.0, rel=1e-12)
    cc = [r.cv2_cell_cycle for r in rows]
    part = [r.cv2_partitioning for r in rows]
    assert all(b >= a for a, b in zip(cc, cc[1:]))
    assert all(b <= a for a, b in zip(part, part[1:]))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.01, 5.0), st.floats(1.05, 3.0))
def test_monotone_in_decay_property(cv2, g, factor):
    lo = fixed_mean(g, 1.0, cv2)
    hi = fixed_mean(g * factor, 1.0, cv2)
    assert hi.cv2_cell_cycle <= lo.cv2_cell_cycle * (1 + 1e-12)
    assert hi.cv2_partitioning <= lo.cv2_partitioning * (1 + 1e-12)


# -- timer-dependent synthesis ------------------------------------------------
def test_exponential_rate_deterministic_values():
    m, k = 2.0, 3.0
    gm = GeneModel(k, 0.0, 0.7, E.deterministic(m), "exponential")
    res = gene_noise_ltv(gm)
    assert gene_mean_ltv(gm) == pytest.approx(k * m / LN2**2, rel=1e-13)
    assert k * m / LN2**2 == pytest.approx(2.0814 * k * m, rel=1e-4)
    assert res.cv2_cell_cycle == pytest.approx((3 * LN2 - 2) / 2, rel=1e-12)
    assert res.cv2_cell_cycle > 1 / 27
    assert res.cv2_partitioning == pytest.approx(8 * 0.7 * LN2 / 3 / res.mean, rel=1e-12)
    assert res.total == pytest.approx(res.cv2_cell_cycle + res.cv2_partitioning, rel=1e-12)


@pytest.mark.parametrize("d", [E.deterministic(1.0), E.gamma(8.0, 0.125), E.gamma(4.0, 0.25),
                               E.weibull(3.0, 1.0 / math.gamma(4 / 3))], ids=lambda d: d.describe())
def test_exponential_rate_closed_vs_engine(d):
    gm = GeneModel(2.0, 0.0, 0.4, d, "exponential")
    closed, eng = gene_noise_ltv(gm), gene_noise_ltv(gm, use_engine=True)
    for f in ("mean", "cv2_cell_cycle", "cv2_partitioning", "total"):
        assert getattr(closed, f) == pytest.approx(getattr(eng, f), rel=1e-6)
    decaying = replace(gm, gamma_x=0.3)
    assert gene_mean_ltv(decaying) == pytest.approx(gene_mean_ltv(decaying, use_engine=True), rel=1e-6)


def test_profiles_consistency():
    d = E.gamma(4.0, 0.5)
    const = GeneModel(2.0, 0.2, 0.3, d)
    assert gene_mean_ltv(const) == gene_mean(const)
    assert gene_noise_ltv(const) == gene_noise(const)
    # engine route for the linear profile against the general LTV engine directly
    lin = GeneModel(2.0, 0.2, 0.3, d, "linear")
    rep = steady_second_ltv(lin.to_ttshs(), d)
    res = noise(lin)
    assert res.mean == pytest.approx(rep.mean[0], rel=1e-10)
    assert res.total == pytest.approx(rep.covariance[0, 0] / rep.mean[0] ** 2, rel=1e-10)
    assert res.cv2_partitioning > 0
    # a user expression equal to the built-in linear profile
    from ttshs.expr import Expr

    same = replace(lin, rate_profile=Expr(f"2*(1 + tau/{d.mean_interevent!r})"), k_x=1.0)
    assert noise(same).total == pytest.approx(res.total, rel=1e-9)


def test_exponential_rate_divergence():
    with pytest.raises(DivergenceDetectedError):
        gene_mean_ltv(GeneModel(1.0, 0.0, 0.0, E.lomax(3.0, 2.0), "exponential"))
    with pytest.raises(DivergenceDetectedError):
        gene_noise_ltv(GeneModel(1.0, 0.0, 0.0, E.exponential(1.0), "exponential"))
    # no lognormal MGF exists for s > 0
    with pytest.raises(DivergenceDetectedError):
        gene_mean_ltv(GeneModel(1.0, 0.0, 0.0, E.lognormal(-0.045, 0.3), "exponential"))


# -- inference ----------------------------------------------------------------
def test_inference_examples():
    d = E.deterministic(2.0)
    gm = GeneModel(100.0 / 3.0, 0.0, 0.0, d)
    assert gene_mean(gm) == pytest.approx(100.0)
    est = infer_partitioning(0.1, gm)
    assert est.feasible
    assert est.b_hat == pytest.approx((0.1 - 1 / 27) * 9 * 100 / 16, rel=1e-12)
    assert est.b_hat == pytest.approx(3.5417, rel=1e-4)
    edge = infer_partitioning(1 / 27, gm)
    assert edge.b_hat == pytest.approx(0.0, abs=1e-12)
    low = infer_partitioning(0.01, gm)
    assert low.b_hat == 0.0 and not low.feasible


@pytest.mark.parametrize("gm", [GeneModel(5.0, 0.2, 0.0, E.gamma(4.0, 0.5)),
                                GeneModel(5.0, 0.0, 0.0, E.exponential(2.0)),
                                GeneModel(5.0, 0.0, 0.0, E.gamma(8.0, 0.125), "exponential")],
                         ids=["general", "stable_limit", "exponential_rate"])
def test_inference_round_trip(gm):
    total = noise(replace(gm, b=0.25)).total
    assert infer_partitioning(total, gm).b_hat == pytest.approx(0.25, rel=1e-9)


# -- sweeps -------------------------------------------------------------------
def test_sweep_rows_and_normalisation():
    rows = sweep({"mean_tau": 1.0, "cv2_tau": [0.0, 0.5, 1.0], "gamma_x": [0.1, 1.0], "b": [0.0, 1.0],
                  "fix_mean": 100.0})
    assert len(rows) == 12
    assert list(rows[0]) == list(SWEEP_COLUMNS)
    assert [(r["cv2_tau"], r["gamma_x"], r["b"]) for r in rows[:4]] == [
        (0.0, 0.1, 0.0), (0.0, 0.1, 1.0), (0.0, 1.0, 0.0), (0.0, 1.0, 1.0)]
    for r in rows:
        assert r["mean"] == pytest.approx(100.0, rel=1e-12)
        if r["cv2_tau"] == 0.0:
            assert r["normalized_total"] == 1.0
        ref = fixed_mean(r["gamma_x"], r["b"], r["cv2_tau"])
        assert r["total"] == pytest.approx(ref.total, rel=1e-12)


def test_sweep_axes_and_errors():
    rows = sweep({"cv2_tau": {"start": 0.0, "stop": 1.0, "num": 5}, "gamma_x": 0.2, "k_x": 3.0,
                  "family": "lognormal"})
    assert [r["cv2_tau"] for r in rows] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert sweep({"cv2_tau": [], "gamma_x": [0.1], "k_x": 1.0}) == []
    with pytest.raises(ConstraintUnsatisfiableError):
        sweep({"cv2_tau": [0.0], "gamma_x": [0.1], "fix_mean": -5.0})
    with pytest.raises(ConstraintUnsatisfiableError):
        sweep({"cv2_tau": [0.0], "gamma_x": [0.1], "k_x": 0.0})
    with pytest.raises(ValueError):
        sweep({"cv2_tau": [0.0], "gamma_x": [0.1]})
    with pytest.raises(ValueError):
        sweep({"cv2_tau": [0.0], "gamma_x": [0.1], "k_x": 1.0, "family": "weibull"})


def test_partitioning_sets_direction_of_cycle_noise_effect():
    # cycle 2 h, gamma 0.1/h, mean 20: small b rises, large b falls, b = 8 stays within 2%
    def normalised(b):
        rows = sweep({"mean_tau": 2.0, "cv2_tau": np.linspace(0.0, 1.0, 6).tolist(), "gamma_x": [0.1],
                      "b": [b], "fix_mean": 20.0})
        return np.array([r["normalized_total"] for r in rows])

    assert np.all(np.diff(normalised(2.0)) > 0)
    assert np.all(np.diff(normalised(12.0)) < 0)
    assert np.abs(normalised(8.0) - 1.0).max() < 0.02


def test_noise_to_dict():
    doc = gene_noise(GeneModel(1.0, 0.1, 0.2, E.exponential(1.0))).to_dict()
    assert set(doc) == {"mean", "cv2_cell_cycle", "cv2_partitioning", "total", "regime"}
