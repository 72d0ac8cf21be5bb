"""Gene-product levels across random cell cycles.

A product is synthesised at rate k_x (possibly depending on the cell age
tau), decays at rate gamma_x and is split between daughters at division:
mean half, variance ``b * x-``.  Noise is reported as CV^2 split into a
cell-cycle contribution and a partitioning contribution.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConstraintUnsatisfiableError, DivergentMomentError
from .expr import Expr
from .model import TtshsModel
from .timing import EventTimeDistribution

LN2 = math.log(2.0)
SWITCH = 1e-4  # gamma * <tau_s> below this uses the gamma -> 0 limit formulas
REGIMES = ("auto", "general", "stable_limit", "fast_decay_asymptote")
PROFILES = ("constant", "exponential", "linear")


@dataclass(frozen=True)
class GeneModel:
    """``rate_profile`` is "constant", "exponential" (k 2^{tau/<tau_s>}),
    "linear" (k (1 + tau/<tau_s>)), an ``Expr`` in tau or a callable."""

    k_x: float
    gamma_x: float
    b: float
    cycle: EventTimeDistribution
    rate_profile: object = "constant"

    def __post_init__(self):
        if not self.k_x > 0:
            raise ValueError("k_x must be positive")
        if self.gamma_x < 0:
            raise ValueError("gamma_x must be non-negative")
        if self.b < 0:
            raise ValueError("b must be non-negative")
        if isinstance(self.rate_profile, str) and self.rate_profile not in PROFILES:
            raise ValueError(f"rate_profile must be one of {PROFILES}, an Expr or a callable")

    @property
    def timer_dependent(self):
        return self.rate_profile != "constant"

    def rate(self, tau):
        """k_x(tau), vectorised."""
        tau = np.asarray(tau, dtype=float)
        m = self.cycle.mean_interevent
        prof = self.rate_profile
        if prof == "constant":
            return np.full(tau.shape, self.k_x)
        if prof == "exponential":
            return self.k_x * np.exp(LN2 * tau / m)
        if prof == "linear":
            return self.k_x * (1.0 + tau / m)
        if isinstance(prof, Expr):
            return prof(tau)
        return np.vectorize(lambda t: float(prof(t)))(tau)

    def to_ttshs(self, kernel="gaussian_matched"):
        """The TTSHS with A=-gamma, a=k_x, J=1/2, B=b, c=1/2, r=Q=D=0.

        The deterministic kernel halves exactly, so it drops B and c (b is ignored).
        """
        if kernel == "deterministic":
            common = dict(J=[[0.5]], kernel=kernel)
        else:
            common = dict(J=[[0.5]], B=[[self.b]], c_hat=[0.5], kernel=kernel)
        if not self.timer_dependent:
            return TtshsModel.lti([[-self.gamma_x]], [self.k_x], **common)
        hint = "drift_matrix_zero" if self.gamma_x == 0 else "commuting"
        return TtshsModel.ltv(1, [[-self.gamma_x]], self._rate_entry(), hint=hint, **common)

    def _rate_entry(self):
        # an Expr evaluates vectorised and serialises into model files
        k, m = repr(float(self.k_x)), repr(float(self.cycle.mean_interevent))
        prof = self.rate_profile
        if prof == "exponential":
            return np.array([Expr(f"{k}*2^(tau/{m})", "a_hat[0]")], dtype=object)
        if prof == "linear":
            return np.array([Expr(f"{k}*(1 + tau/{m})", "a_hat[0]")], dtype=object)
        if isinstance(prof, Expr):
            return np.array([prof], dtype=object)
        return lambda t: np.atleast_1d(self.rate(t))


@dataclass(frozen=True)
class NoiseDecomposition:
    mean: float
    cv2_cell_cycle: float
    cv2_partitioning: float
    total: float
    regime: str

    def to_dict(self):
        return {
            "mean": self.mean,
            "cv2_cell_cycle": self.cv2_cell_cycle,
            "cv2_partitioning": self.cv2_partitioning,
            "total": self.total,
            "regime": self.regime,
        }


def _decomp(mean, cc, part, regime):
    return NoiseDecomposition(float(mean), float(cc), float(part), float(cc + part), regime)


def _stable_moments(dist):
    m = dist.interevent_moment(1)
    m3 = dist.interevent_moment(3)
    if not math.isfinite(m3):
        raise DivergentMomentError("<tau_s^3>")
    return m, dist.cv2, m3


def _limit_regime(gm, regime):
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    if regime != "auto":
        return regime
    return "stable_limit" if gm.gamma_x * gm.cycle.mean_interevent <= SWITCH else "general"


# -- constant synthesis rate -----------------------------------------------------
def gene_mean(gm, regime="auto"):
    """Time-averaged mean level for constant synthesis."""
    if gm.timer_dependent:
        return gene_mean_ltv(gm)
    dist = gm.cycle
    k, g = gm.k_x, gm.gamma_x
    m = dist.mean_interevent
    if g == 0 or _limit_regime(gm, regime) == "stable_limit":
        # k (<tau_s> + <tau>); the gamma -> 0 limit of the general formula
        return k * (m + dist.timer_moment(1))
    D1 = dist.laplace_complement(g)
    # k/g - k D1 / (2 g^2 m (1 - L1/2)) with 1 - L1/2 = (1 + D1)/2
    return k / g - k * D1 / (g * g * m * (1.0 + D1))


def gene_noise(gm, regime="auto"):
    """Mean and CV^2 split into cell-cycle and partitioning contributions."""
    if gm.timer_dependent:
        return gene_noise_ltv(gm)
    dist = gm.cycle
    k, g, b = gm.k_x, gm.gamma_x, gm.b
    m = dist.mean_interevent
    reg = _limit_regime(gm, regime)
    if g == 0 and reg != "stable_limit":
        raise ValueError(f"regime '{reg}' needs gamma_x > 0")
    if reg == "stable_limit":
        m, cv2, m3 = _stable_moments(dist)
        mean = k * m * (3.0 + cv2) / 2.0
        cc = 1.0 / 27.0 + 4.0 * (9.0 * m3 / m**3 - 9.0 - 6.0 * cv2 - 7.0 * cv2**2) / (27.0 * (3.0 + cv2) ** 2)
        part = 16.0 * b / (3.0 * (3.0 + cv2) * mean)
        return _decomp(mean, cc, part, reg)
    mean = gene_mean(gm, "general")
    gm_ = g * m
    if reg == "fast_decay_asymptote":
        return _decomp(mean, 1.0 / (8.0 * gm_), b / (2.0 * gm_ * mean), reg)
    D1 = dist.laplace_complement(g)
    D2 = dist.laplace_complement(2.0 * g)
    L1 = 1.0 - D1
    q2 = 0.75 + 0.25 * D2  # 1 - L2/4
    q1 = 0.5 + 0.5 * D1  # 1 - L1/2
    denom_core = -D1 + 2.0 * gm_ * q1
    cc = (-8.0 * q2 * D1**2 + 4.0 * gm_ * (1.0 - 0.25 * L1**2) * D2) / (8.0 * q2 * denom_core**2)
    part = b * D2 / q2 * D1 / denom_core / mean
    return _decomp(mean, cc, part, reg)


# -- timer-dependent synthesis rate ----------------------------------------------
def _exp_profile_transforms(dist):
    """<2^{tau_s/m}> and <4^{tau_s/m}>."""
    m = dist.mean_interevent
    return dist.mgf(LN2 / m), dist.mgf(2.0 * LN2 / m)


def gene_mean_ltv(gm, use_engine=False):
    """Mean level for a timer-dependent synthesis rate."""
    if gm.rate_profile == "constant" and not use_engine:
        return gene_mean(replace(gm, rate_profile="constant"))
    dist = gm.cycle
    if gm.rate_profile == "exponential" and not use_engine:
        m = dist.mean_interevent
        k, g = gm.k_x, gm.gamma_x
        beta = LN2 / m
        E2 = dist.mgf(beta)
        if not math.isfinite(E2):
            from .errors import DivergenceDetectedError

            raise DivergenceDetectedError("<2^(tau_s/<tau_s>)> diverges")
        if g == 0:
            return k * m * ((1.0 + LN2) * E2 - 1.0 - 2.0 * LN2) / LN2**2
        D1 = dist.laplace_complement(g)
        L1 = 1.0 - D1
        # v(tau) = k (2^{tau/m} - e^{-g tau}) / (beta + g)
        v_s = k * (E2 - L1) / (beta + g)
        v_t = k * ((E2 - 1.0) / (beta * m) - D1 / (g * m)) / (beta + g)
        x_plus = v_s / (2.0 - L1)
        return D1 / (g * m) * x_plus + v_t
    from .ltv import steady_mean_ltv

    return float(steady_mean_ltv(gm.to_ttshs(), dist).mean[0])


def gene_noise_ltv(gm, use_engine=False):
    """Noise decomposition for a timer-dependent synthesis rate.

    Closed forms cover the exponential profile with gamma_x = 0; other cases
    go through the timer-dependent moment engine.
    """
    if gm.rate_profile == "constant" and not use_engine:
        return gene_noise(replace(gm, rate_profile="constant"))
    dist = gm.cycle
    if gm.rate_profile == "exponential" and gm.gamma_x == 0 and not use_engine:
        E2, E4 = _exp_profile_transforms(dist)
        if not (math.isfinite(E2) and math.isfinite(E4)):
            from .errors import DivergenceDetectedError

            raise DivergenceDetectedError("<4^(tau_s/<tau_s>)> diverges")
        c = gm.k_x * dist.mean_interevent / LN2
        M = (1.0 + LN2) * E2 - 1.0 - 2.0 * LN2
        mean = c * M / LN2
        # K(tau) = c (2^{tau/m} - 1): variance over tau_s (weight 1/3) and over the timer
        var_s = c * c * (E4 - E2 * E2)
        var_t = c * c * ((E4 - 1.0) / (2.0 * LN2) - (E2 - 1.0) ** 2 / LN2**2)
        cc = (var_s / 3.0 + var_t) / mean**2
        part = 8.0 * gm.b * c * (E2 - 1.0) / (3.0 * mean**2)
        return _decomp(mean, cc, part, "stable_limit")
    from .ltv import steady_second_ltv

    rep = steady_second_ltv(gm.to_ttshs(), dist)
    mean = float(rep.mean[0])
    total = float(rep.covariance[0, 0]) / mean**2
    # partitioning noise is linear in b: split by re-running with b = 0
    if gm.b > 0:
        rep0 = steady_second_ltv(replace(gm, b=0.0).to_ttshs(), dist)
        cc = float(rep0.covariance[0, 0]) / mean**2
    else:
        cc = total
    return _decomp(mean, cc, total - cc, "general")


def noise(gm, regime="auto"):
    """Dispatch on the rate profile."""
    if gm.timer_dependent:
        return gene_noise_ltv(gm)
    return gene_noise(gm, regime)


# -- inference -------------------------------------------------------------------
@dataclass(frozen=True)
class PartitioningEstimate:
    b_hat: float
    feasible: bool
    cv2_cell_cycle: float
    cv2_partitioning_per_unit_b: float


def infer_partitioning(total_noise_measured, gm, regime="auto"):
    """Solve total = CV^2_cc + b * CV^2_part(b=1) for b; b_hat=0 flagged when infeasible."""
    unit = noise(replace(gm, b=1.0), regime)
    cc = unit.cv2_cell_cycle
    per_b = unit.cv2_partitioning
    excess = float(total_noise_measured) - cc
    if excess < 0:
        return PartitioningEstimate(0.0, False, cc, per_b)
    return PartitioningEstimate(excess / per_b, True, cc, per_b)


# -- sweeps ----------------------------------------------------------------------
SWEEP_COLUMNS = ("cv2_tau", "gamma_x", "b", "mean", "cv2_cell_cycle", "cv2_partitioning", "total",
                 "normalized_total")


def _axis(spec, name, default=None):
    v = spec.get(name, default)
    if v is None:
        raise ValueError(f"sweep spec needs '{name}'")
    if isinstance(v, dict):
        return list(np.linspace(float(v["start"]), float(v["stop"]), int(v["num"])))
    if isinstance(v, (int, float)):
        return [float(v)]
    return [float(x) for x in v]


def _cycle(mean_tau, cv2, family):
    if family == "gamma":
        return EventTimeDistribution.gamma_from_mean_cv2(mean_tau, cv2)
    if family == "lognormal":
        if cv2 == 0:
            return EventTimeDistribution.deterministic(mean_tau)
        s2 = math.log1p(cv2)
        return EventTimeDistribution.lognormal(math.log(mean_tau) - 0.5 * s2, math.sqrt(s2))
    raise ValueError(f"sweep family must be 'gamma' or 'lognormal', got {family!r}")


def _cell(mean_tau, cv2, g, b, family, profile, k_x, target):
    cycle = _cycle(mean_tau, cv2, family)
    if target is not None:
        unit = GeneModel(1.0, g, b, cycle, profile)
        base = gene_mean_ltv(unit) if unit.timer_dependent else gene_mean(unit)
        if not base > 0:
            raise ConstraintUnsatisfiableError("mean level cannot be fixed: unit-rate mean is not positive")
        k_x = target / base
    return noise(GeneModel(k_x, g, b, cycle, profile))


def sweep(spec):
    """Rows of the noise grid described by ``spec`` (a mapping), ordered cv2 > gamma > b.

    Keys: mean_tau, cv2_tau, gamma_x, b (lists, scalars or {start, stop, num}),
    either fix_mean (target mean level, k_x rescaled per cell) or k_x,
    optional family ("gamma") and rate_profile ("constant").
    """
    mean_tau = float(spec.get("mean_tau", 1.0))
    family = spec.get("family", "gamma")
    profile = spec.get("rate_profile", "constant")
    cv2s = _axis(spec, "cv2_tau")
    gammas = _axis(spec, "gamma_x")
    bs = _axis(spec, "b", 0.0)
    target = spec.get("fix_mean")
    k_x = spec.get("k_x")
    if target is None and k_x is None:
        raise ValueError("sweep spec needs 'fix_mean' or 'k_x'")
    if target is not None and not float(target) > 0:
        raise ConstraintUnsatisfiableError(f"fix_mean must be positive, got {target}")
    if k_x is not None and target is None and not float(k_x) > 0:
        raise ConstraintUnsatisfiableError(f"k_x must be positive, got {k_x}")
    target = None if target is None else float(target)
    k_x = None if k_x is None else float(k_x)
    refs = {}
    rows = []
    for cv2 in cv2s:
        for g in gammas:
            for b in bs:
                res = _cell(mean_tau, cv2, g, b, family, profile, k_x, target)
                if (g, b) not in refs:
                    refs[(g, b)] = res if cv2 == 0 else _cell(mean_tau, 0.0, g, b, family, profile, k_x, target)
                ref = refs[(g, b)].total
                rows.append({
                    "cv2_tau": cv2,
                    "gamma_x": g,
                    "b": b,
                    "mean": res.mean,
                    "cv2_cell_cycle": res.cv2_cell_cycle,
                    "cv2_partitioning": res.cv2_partitioning,
                    "total": res.total,
                    "normalized_total": res.total / ref if ref > 0 else math.nan,
                })
    return rows
