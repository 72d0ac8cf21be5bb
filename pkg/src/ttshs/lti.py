"""Exact steady-state moments of time-invariant TTSHS.

Everything runs through the augmented generator ``G = [[A, a], [0, 0]]``:
with ``E_s = <exp(G tau_s)>`` (inter-event law) and ``E_t = <exp(G tau)>``
(stationary timer law) the post-reset mean solves

    x+ = J (E_s[:n,:n] x+ + E_s[:n,n]) + r

and the time-averaged mean is ``E_t[:n,:n] x+ + E_t[:n,n]``.  Second moments
are the same computation on the lifted state ``[x; vec(x x^T)]``.  The paths
differ only in how ``E_s`` and ``E_t`` are obtained: adaptive quadrature
(``general_quadrature``), scalar MGFs through an eigendecomposition
(``invertible_A_closed``), or a finite power series when A = 0
(``A_zero_closed``).  The J = I, Q = 0, r = 0 class has its own closed form
(``noisy_reset_closed``).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .errors import (
    DivergenceDetectedError,
    DivergentMomentError,
    NoClosedFormError,
    SubclassViolationError,
    UnstableModelError,
)
from .linalg import augment, expm_batch, is_hurwitz, kron_sum, spectral_radius, vec
from .model import StabilityVerdict, check_remark1_sufficiency, classify_radius

MARGIN = 1e-9
RESIDUAL_TOL = 1e-9
PATHS = ("general_quadrature", "invertible_A_closed", "A_zero_closed", "noisy_reset_closed")
METHODS = ("auto", "general", "closed")
EIGVEC_COND_MAX = 1e8
SERIES_TERMS = 16


@dataclass(frozen=True)
class LiftedModel:
    """Affine TTSHS for ``[x; vec(x x^T)]``; only the mean data is needed."""

    dim: int
    A_mu: np.ndarray
    a_mu: np.ndarray
    J_mu: np.ndarray
    r_mu: np.ndarray


@dataclass
class MomentReport:
    mean: np.ndarray
    second_moment: np.ndarray
    covariance: np.ndarray
    cv_squared: np.ndarray
    verdict: StabilityVerdict
    method_path: str
    quadrature_error: float = 0.0
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "second_moment": None if self.second_moment is None else self.second_moment.tolist(),
            "covariance": None if self.covariance is None else self.covariance.tolist(),
            "cv_squared": None if self.cv_squared is None else [
                None if not np.isfinite(c) else float(c) for c in self.cv_squared
            ],
            "verdict": self.verdict.to_dict() if self.verdict is not None else None,
            "method_path": self.method_path,
            "quadrature_error": self.quadrature_error,
            "warnings": list(self.warnings),
        }


# -- lifting -----------------------------------------------------------------
def _bkron(X, Y):
    """Kronecker product over the last two axes, broadcasting leading axes."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    lead = np.broadcast_shapes(X.shape[:-2], Y.shape[:-2])
    p, q = X.shape[-2:]
    r, s = Y.shape[-2:]
    out = np.einsum("...ij,...kl->...ikjl", X, Y)
    return out.reshape(lead + (p * r, q * s))


def lift_coefficients(A, a, J, r, Q, B, c, D):
    """Lifted (A_mu, a_mu, J_mu, r_mu); inputs may carry a leading batch axis."""
    A = np.asarray(A, dtype=float)
    n = A.shape[-1]
    lead = A.shape[:-2]
    eye = np.broadcast_to(np.eye(n), lead + (n, n))
    col = lambda v: np.asarray(v, dtype=float)[..., :, None]  # noqa: E731
    N = n + n * n
    A_mu = np.zeros(lead + (N, N))
    A_mu[..., :n, :n] = A
    A_mu[..., n:, :n] = _bkron(eye, col(a)) + _bkron(col(a), eye)
    A_mu[..., n:, n:] = _bkron(eye, A) + _bkron(A, eye)
    a_mu = np.zeros(lead + (N,))
    a_mu[..., :n] = a
    J_mu = np.zeros(lead + (N, N))
    J_mu[..., :n, :n] = J
    J_mu[..., n:, :n] = (_bkron(B, col(c)) + _bkron(J, col(r)) + _bkron(col(c), B)
                         + _bkron(col(r), J))
    J_mu[..., n:, n:] = _bkron(J, J) + _bkron(Q, Q)
    rr = np.asarray(r, dtype=float)
    outer = rr[..., :, None] * rr[..., None, :]
    S = np.asarray(D, dtype=float) + outer
    r_mu = np.zeros(lead + (N,))
    r_mu[..., :n] = rr
    r_mu[..., n:] = np.swapaxes(S, -1, -2).reshape(lead + (n * n,))  # column-major vec
    return A_mu, a_mu, J_mu, r_mu


def lift(model):
    """Lifted model of an LTI TTSHS."""
    c = model.constants()
    A_mu, a_mu, J_mu, r_mu = lift_coefficients(
        c["A"], c["a_hat"], c["J"], c["r_hat"], c["Q"], c["B"], c["c_hat"], c["D"]
    )
    return LiftedModel(A_mu.shape[0], A_mu, a_mu, J_mu, r_mu)


def reset_augment(J, r):
    n = J.shape[0]
    out = np.eye(n + 1)
    out[:n, :n] = J
    out[:n, n] = r
    return out


# -- expectations of the augmented exponential -------------------------------
@dataclass
class _Expectations:
    E_s: np.ndarray
    E_t: np.ndarray
    path: str
    error: float = 0.0


def _expect_general(G, dist, timer=True):
    f = lambda t: expm_batch(G, t)  # noqa: E731
    E_s, err_s = dist.expect_interevent(f, vectorized=True, full_output=True)
    err = float(np.max(err_s))
    E_t = None
    if timer:
        E_t, err_t = dist.expect_timer(f, vectorized=True, full_output=True)
        err = max(err, float(np.max(err_t)))
    return _Expectations(E_s, E_t, "general_quadrature", err)


def _series_scale(dist):
    m = SERIES_TERMS + 2
    return (dist.interevent_moment(m) / math.factorial(m)) ** (1.0 / m)


def _eig_functions(lam, dist):
    """h0 = <e^{l s}>, h1 = <int_0^s e^{l u} du> and timer analogues p0, p1."""
    m = dist.interevent_moment(1)
    scale = _series_scale(dist)
    if abs(lam) * scale < 0.05:
        mom = [dist.interevent_moment(j) for j in range(SERIES_TERMS + 3)]
        fact = math.factorial
        h0 = sum(lam**j * mom[j] / fact(j) for j in range(SERIES_TERMS + 1))
        h1 = sum(lam**j * mom[j + 1] / fact(j + 1) for j in range(SERIES_TERMS + 1))
        p1 = sum(lam**j * mom[j + 2] / fact(j + 2) for j in range(SERIES_TERMS + 1)) / m
        return h0, h1, h1 / m, p1
    em1 = dist.mgf_minus_one(lam)
    if not math.isfinite(em1):
        raise DivergenceDetectedError(f"moment generating function diverges at {lam:g}")
    h0 = 1.0 + em1
    h1 = em1 / lam
    p0 = h1 / m
    p1 = (p0 - 1.0) / lam
    return h0, h1, p0, p1


def _expect_eigen(A, a, dist, timer=True):
    """Closed MGF route; None when A is not real-diagonalizable and invertible."""
    if not dist.has_closed_mgf:
        return None
    ev, V = np.linalg.eig(A)
    if np.any(np.abs(ev.imag) > 1e-12 * max(1.0, np.abs(ev).max())):
        return None
    ev = ev.real
    V = V.real
    if np.linalg.cond(V) > EIGVEC_COND_MAX:
        return None
    if np.any(np.abs(ev) <= 1e-14 * max(1.0, np.abs(A).max())):
        return None
    vals = np.array([_eig_functions(lam, dist) for lam in ev])
    Vinv = np.linalg.inv(V)
    fn = lambda col: V @ np.diag(col) @ Vinv  # noqa: E731
    n = A.shape[0]

    def build(f0, f1):
        E = np.eye(n + 1)
        E[:n, :n] = fn(f0)
        E[:n, n] = fn(f1) @ a
        return E

    E_s = build(vals[:, 0], vals[:, 1])
    E_t = build(vals[:, 2], vals[:, 3]) if timer else None
    return _Expectations(E_s, E_t, "invertible_A_closed")


def _expect_polynomial(G, dist, timer=True):
    """exp(G t) is a finite power series when G is nilpotent (A = 0)."""
    N = G.shape[0]
    powers = [np.eye(N)]
    while True:
        nxt = powers[-1] @ G
        if not np.any(nxt):
            break
        powers.append(nxt)
        if len(powers) > N + 1:
            return None
    E_s = np.zeros((N, N))
    E_t = np.zeros((N, N)) if timer else None
    for j, P in enumerate(powers):
        mj = dist.interevent_moment(j)
        if not math.isfinite(mj):
            raise DivergentMomentError(f"<tau_s^{j}>")
        E_s += P * mj / math.factorial(j)
        if timer:
            E_t += P * dist.timer_moment(j) / math.factorial(j)
    return _Expectations(E_s, E_t, "A_zero_closed")


def _expectations(A, a, dist, method, a_is_zero_drift, timer=True):
    """Pick the cheapest exact route for <exp(G tau_s)> and <exp(G tau)>."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    G = augment(A, a)
    if method in ("auto", "closed"):
        if a_is_zero_drift:
            res = _expect_polynomial(G, dist, timer)
            if res is not None:
                return res
        res = _expect_eigen(A, a, dist, timer)
        if res is not None:
            return res
        if method == "closed":
            raise NoClosedFormError(
                f"no closed form for this model under {dist.describe()}; use method='general'"
            )
    return _expect_general(G, dist, timer)


# -- stationary solve ----------------------------------------------------------
def _solve(M, rhs, warnings):
    lu = sla.lu_factor(M, check_finite=True)
    x = sla.lu_solve(lu, rhs)
    resid = np.linalg.norm(M @ x - rhs)
    if resid > RESIDUAL_TOL * max(np.linalg.norm(rhs), 1e-300):
        warnings.append(f"linear solve residual {resid:.3g} exceeds tolerance")
    return x


def _stationary(ex, J_aug, warnings):
    N = J_aug.shape[0] - 1
    P = J_aug @ ex.E_s
    x_plus = _solve(np.eye(N) - P[:N, :N], P[:N, N], warnings)
    xbar = ex.E_t[:N, :N] @ x_plus + ex.E_t[:N, N]
    return xbar, x_plus, P


# -- public API ----------------------------------------------------------------
def _require_lti(model):
    if model.mode != "LTI":
        if model.all_constant:
            return model.as_lti()
        raise ValueError("timer-dependent model; use the ttshs.ltv functions")
    return model


def _verdict_from(P_mean, P_second, n, margin, mgf_finite=True, shortcut=False):
    rho1 = spectral_radius(P_mean[:n, :n]) if P_mean is not None else math.inf
    if P_second is not None:
        rho2 = spectral_radius(P_second[n:-1, n:-1])
    else:
        rho2 = math.inf
    return StabilityVerdict(
        classify_radius(rho1, margin), classify_radius(rho2, margin), float(rho1), float(rho2),
        bool(mgf_finite), bool(shortcut),
    )


def check_stability(model, dist, margin=MARGIN, method="auto"):
    """Spectral radii of the mean and second-moment recursions."""
    model = _require_lti(model)
    c = model.constants()
    n = model.dim
    shortcut = check_remark1_sufficiency(model).applies
    lm = lift(model)
    zero = not np.any(c["A"])
    try:
        ex = _expectations(lm.A_mu, lm.a_mu, dist, method, zero, timer=False)
    except DivergentMomentError:
        # a moment needed only by the forced response diverges; radii need exp(A tau) alone
        ex = _expectations(lm.A_mu, np.zeros_like(lm.a_mu), dist, method, zero, timer=False)
    except DivergenceDetectedError:
        return StabilityVerdict("no", "no", math.inf, math.inf, False, shortcut)
    P = reset_augment(lm.J_mu, lm.r_mu) @ ex.E_s
    return _verdict_from(P, P, n, margin, True, shortcut)


def _guard(verdict, need_second, force):
    if force:
        return
    if verdict.mean_stable != "yes":
        raise UnstableModelError(
            f"mean recursion is {_word(verdict.mean_stable)} "
            f"(spectral radius {verdict.mean_spectral_radius:.6g})", verdict)
    if need_second and verdict.second_stable != "yes":
        raise UnstableModelError(
            f"second-moment recursion is {_word(verdict.second_stable)} "
            f"(spectral radius {verdict.second_spectral_radius:.6g})", verdict)


def _word(state):
    return "marginal" if state == "marginal" else "unstable"


def is_noisy_reset(model):
    c = model.constants()
    n = model.dim
    return (np.array_equal(c["J"], np.eye(n)) and not np.any(c["Q"]) and not np.any(c["r_hat"])
            and is_hurwitz(c["A"]))


def steady_mean(model, dist, method="auto", force=False, margin=MARGIN):
    """Time-averaged steady-state mean; returns a report without second moments."""
    model = _require_lti(model)
    c = model.constants()
    n = model.dim
    warnings = []
    zero = not np.any(c["A"])
    shortcut = check_remark1_sufficiency(model).applies
    ex = _expectations(c["A"], c["a_hat"], dist, method, zero, timer=True)
    J_aug = reset_augment(c["J"], c["r_hat"])
    P = J_aug @ ex.E_s
    rho1 = spectral_radius(P[:n, :n])
    verdict = StabilityVerdict(classify_radius(rho1, margin), "not_computed", rho1, math.nan,
                               True, shortcut)
    _guard(verdict, False, force)
    xbar, _, _ = _stationary(ex, J_aug, warnings)
    return MomentReport(xbar, None, None, None, verdict, ex.path, ex.error, warnings)


def noisy_reset_second(model, dist, force=False, margin=MARGIN):
    """J = I, Q = 0, r = 0 with Hurwitz A: moments depend on dist only via <tau_s>."""
    model = _require_lti(model)
    if not is_noisy_reset(model):
        raise SubclassViolationError("noisy-reset formula needs J = I, Q = 0, r_hat = 0 and Hurwitz A")
    c = model.constants()
    n = model.dim
    m = dist.interevent_moment(1)
    A, a = c["A"], c["a_hat"]
    xbar = -np.linalg.solve(A, a)
    eye = np.eye(n)
    K = np.kron(eye, a[:, None]) + np.kron(a[:, None], eye)
    BC = np.kron(c["B"], c["c_hat"][:, None]) + np.kron(c["c_hat"][:, None], c["B"])
    rhs = (BC / m + K) @ xbar + vec(c["D"]) / m
    S = -np.linalg.solve(kron_sum(A), rhs).reshape((n, n), order="F")
    # the class is stable for every law (eigenvalues of <e^{A tau}> are <e^{lambda tau}>)
    verdict = StabilityVerdict("yes", "yes", math.nan, math.nan, True,
                               check_remark1_sufficiency(model).applies)
    return _report(xbar, S, verdict, "noisy_reset_closed", 0.0, [])


def _report(xbar, S, verdict, path, err, warnings):
    S = 0.5 * (S + S.T)
    cov = S - np.outer(xbar, xbar)
    cov = 0.5 * (cov + cov.T)
    lam_min = float(np.linalg.eigvalsh(cov).min()) if cov.size else 0.0
    if lam_min < -1e-8 * max(1.0, float(np.abs(S).max())):
        warnings.append(f"covariance has negative eigenvalue {lam_min:.3g}")
    with np.errstate(divide="ignore", invalid="ignore"):
        cv2 = np.where(xbar > 0, np.diag(cov) / xbar**2, np.nan)
    return MomentReport(xbar, S, cov, cv2, verdict, path, err, warnings)


def steady_second(model, dist, method="auto", force=False, margin=MARGIN):
    """Mean, second moment and covariance of the stationary state."""
    model = _require_lti(model)
    c = model.constants()
    n = model.dim
    if method in ("auto", "closed") and is_noisy_reset(model):
        rep = noisy_reset_second(model, dist, force, margin)
        # radii for the report (exact, cheap when a closed MGF exists)
        try:
            v = check_stability(model, dist, margin, "auto")
            rep.verdict = v
        except Exception:  # radii are informative only here
            pass
        return rep
    shortcut = check_remark1_sufficiency(model).applies
    lm = lift(model)
    zero = not np.any(c["A"])
    ex = _expectations(lm.A_mu, lm.a_mu, dist, method, zero, timer=True)
    J_aug = reset_augment(lm.J_mu, lm.r_mu)
    P = J_aug @ ex.E_s
    verdict = _verdict_from(P, P, n, margin, True, shortcut)
    _guard(verdict, True, force)
    warnings = []
    mu, _, _ = _stationary(ex, J_aug, warnings)
    xbar = mu[:n]
    S = mu[n:].reshape((n, n), order="F")
    return _report(xbar, S, verdict, ex.path, ex.error, warnings)


def steady_moments(model, dist, method="auto", force=False, margin=MARGIN, order=2):
    """Dispatch on model mode: LTI engine here, LTV engine for timer-dependent models."""
    if model.mode == "LTV":
        from . import ltv

        # the commuting fast path is the timer-dependent analogue of a closed form
        m = {"closed": "commuting"}.get(method, method)
        if order == 1:
            return ltv.steady_mean_ltv(model, dist, m, force, margin)
        return ltv.steady_second_ltv(model, dist, m, force, margin)
    if order == 1:
        return steady_mean(model, dist, method, force, margin)
    return steady_second(model, dist, method, force, margin)
