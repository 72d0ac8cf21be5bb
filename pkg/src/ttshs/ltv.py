"""Steady-state moments when the flow and reset depend on the timer.

The augmented fundamental matrix ``Psi_aug(tau) = [[Psi, v], [0, 1]]`` of
``dz/dtau = [[A(tau), a(tau)], [0, 0]] z`` carries both the state transition
``Psi(tau) = Phi(tau, 0)`` and the forced response ``v(tau)``.  With
``P_s = <J_aug(tau_s) Psi_aug(tau_s)>`` and ``P_t = <Psi_aug(tau)>_p`` the
stationary solve is identical to the time-invariant case.

Two ways to tabulate ``Psi_aug``: a DOP853 integration of the matrix ODE with
dense output (general), or, when the A(tau) commute, exponentials of the
running integral of A evaluated by panel quadrature (commuting).
"""

import math

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (DivergenceDetectedError, NoninvertiblePsiError, OdeFailureError, SubclassViolationError,
                     UnstableModelError)
from .linalg import spectral_radius
from .lti import MARGIN, _guard, _report, _solve, lift_coefficients
from .model import StabilityVerdict, TimerFunction, classify_radius, commutes_on_grid, validation_grid
from .quadrature import GAUSS_W, KRONROD_W, NODES
from . import _backend

ODE_RTOL = 1e-12
ODE_ATOL = 1e-12
COND_MAX = 1e12
BLOWUP = 1e250
LTV_METHODS = ("auto", "general", "commuting")

# 21-point Gauss-Legendre rule for the nested panel integrals
_GL_X, _GL_W = np.polynomial.legendre.leggauss(21)


class _OdeFlow:
    """Psi_aug by integrating the top n rows of the augmented matrix ODE."""

    interpolation_order = 7

    def __init__(self, A_fn, a_fn, n, rtol=ODE_RTOL, atol=ODE_ATOL):
        self.A_fn, self.a_fn, self.n = A_fn, a_fn, n
        self.rtol, self.atol = rtol, atol
        self.segments = []
        self.t_end = 0.0
        y0 = np.zeros((n, n + 1))
        y0[:, :n] = np.eye(n)
        self.y_end = y0.reshape(-1)
        self.steps = [0.0]

    def _rhs(self, t, y):
        n = self.n
        Y = y.reshape(n, n + 1)
        out = self.A_fn(np.array([t]))[0] @ Y
        out[:, n] += self.a_fn(np.array([t]))[0]
        return out.reshape(-1)

    def extend(self, t_new):
        if t_new <= self.t_end:
            return
        with np.errstate(over="ignore", invalid="ignore"):
            sol = solve_ivp(self._rhs, (self.t_end, t_new), self.y_end, method="DOP853",
                            rtol=self.rtol, atol=self.atol, dense_output=True)
        if sol.status != 0:
            raise OdeFailureError(f"flow integration failed at tau={sol.t[-1]:.6g}: {sol.message}")
        y_last = sol.y[:, -1]
        if not np.all(np.isfinite(y_last)) or np.max(np.abs(y_last)) > BLOWUP:
            raise DivergenceDetectedError(f"flow blows up before tau={t_new:.6g}")
        self.segments.append((self.t_end, t_new, sol.sol))
        self.steps.extend(sol.t[1:].tolist())
        self.t_end = t_new
        self.y_end = y_last

    def evaluate(self, taus):
        taus = np.asarray(taus, dtype=float).reshape(-1)
        n = self.n
        if taus.size and taus.max() > self.t_end:
            self.extend(max(taus.max(), 1.5 * self.t_end))
        out = np.zeros((taus.size, n + 1, n + 1))
        out[:, n, n] = 1.0
        done = np.zeros(taus.size, dtype=bool)
        for lo, hi, sol in self.segments:
            sel = (~done) & (taus <= hi)
            if np.any(sel):
                vals = sol(taus[sel]).T.reshape(-1, n, n + 1)
                out[sel, :n, :] = vals
                done |= sel
        at0 = taus == 0.0
        out[at0, :n, :n] = np.eye(n)
        out[at0, :n, n] = 0.0
        return out


class _CommutingFlow:
    """Psi(tau) = exp(IA(tau)), IA the running integral of A, for commuting A(tau).

    The forced response uses Phi(tau, l) = exp(IA(tau) - IA(l)) directly, so no
    matrix is ever inverted.  Integrals are built panel by panel with a
    21-point rule; panels are bisected until the Kronrod/Gauss difference is
    below tolerance; a panel whose integral of A exceeds 1 in norm must also
    give the same forced response as its two halves.
    """

    interpolation_order = 41

    def __init__(self, A_fn, a_fn, n, rtol=1e-13):
        self.A_fn, self.a_fn, self.n = A_fn, a_fn, n
        self.rtol = rtol
        self.knots = [0.0]
        self.IA = [np.zeros((n, n))]
        self.v = [np.zeros(n)]
        self.h = None
        self.t_end = 0.0

    @property
    def steps(self):
        return self.knots

    def _panel_ok(self, t0, h):
        x = t0 + h * 0.5 * (NODES + 1.0)
        Av = self.A_fn(x)
        av = self.a_fn(x)
        kA = 0.5 * h * np.einsum("j,jab->ab", KRONROD_W, Av)
        gA = 0.5 * h * np.einsum("j,jab->ab", GAUSS_W, Av)
        ka = 0.5 * h * KRONROD_W @ av
        ga = 0.5 * h * GAUSS_W @ av
        okA = np.max(np.abs(kA - gA)) <= self.rtol * (1.0 + np.max(np.abs(kA)))
        oka = np.max(np.abs(ka - ga)) <= self.rtol * (1.0 + np.max(np.abs(ka)) + np.max(np.abs(av)) * h)
        if not (okA and oka):
            return False
        if np.linalg.norm(kA, 1) <= 1.0:
            return True
        # large panel integral: the nested rule must agree with two half panels
        return self._halves_agree(t0, h)

    def _halves_agree(self, t0, h):
        k = len(self.knots) - 1
        _, v_full = self._advance(np.array([t0 + h]), np.array([k]))
        IA_mid, v_mid = self._advance(np.array([t0 + 0.5 * h]), np.array([k]))
        self.knots.append(t0 + 0.5 * h)
        self.IA.append(IA_mid[0])
        self.v.append(v_mid[0])
        try:
            _, v_two = self._advance(np.array([t0 + h]), np.array([k + 1]))
        finally:
            self.knots.pop()
            self.IA.pop()
            self.v.pop()
        scale = 1.0 + np.max(np.abs(v_two))
        return bool(np.max(np.abs(v_full - v_two)) <= 1e3 * self.rtol * scale)

    def extend(self, t_new):
        if self.h is None:
            self.h = max(t_new, 1e-300) / 16.0
        while self.t_end < t_new:
            t0 = self.t_end
            h = self.h
            for _ in range(200):
                if self._panel_ok(t0, h):
                    break
                h *= 0.5
            else:
                raise OdeFailureError(f"cannot resolve A(tau) near tau={t0:.6g}")
            t1 = t0 + h
            IA1, v1 = self._advance(np.array([t1]), np.array([len(self.knots) - 1]))
            if not np.all(np.isfinite(v1)) or np.max(np.abs(v1)) > BLOWUP:
                raise DivergenceDetectedError(f"flow blows up before tau={t1:.6g}")
            self.knots.append(t1)
            self.IA.append(IA1[0])
            self.v.append(v1[0])
            self.t_end = t1
            self.h = 2.0 * h

    def _integral_A(self, starts, ends):
        """int_{starts}^{ends} A by Gauss-Legendre; shapes (k,) -> (k, n, n)."""
        half = 0.5 * (ends - starts)
        x = (starts[:, None] + half[:, None] * (_GL_X[None, :] + 1.0)).reshape(-1)
        Av = self.A_fn(x).reshape(starts.size, _GL_X.size, self.n, self.n)
        return half[:, None, None] * np.einsum("j,kjab->kab", _GL_W, Av)

    def _advance(self, taus, idx):
        """IA and v at ``taus`` starting from knot ``idx``."""
        n = self.n
        t0 = np.asarray(self.knots)[idx]
        IA0 = np.stack([self.IA[i] for i in idx])
        v0 = np.stack([self.v[i] for i in idx])
        dIA = self._integral_A(t0, taus)
        IA = IA0 + dIA
        # inner nodes l_i on [t0, tau]; IA(tau) - IA(l_i) integrated directly
        # (a difference of two large integrals would cancel)
        half = 0.5 * (taus - t0)
        l = t0[:, None] + half[:, None] * (_GL_X[None, :] + 1.0)
        k = taus.size
        diff = self._integral_A(l.reshape(-1), np.repeat(taus, _GL_X.size)).reshape(k, _GL_X.size, n, n)
        with np.errstate(over="ignore", invalid="ignore"):
            Phi = _backend.expm_stack(diff.reshape(-1, n, n)).reshape(k, _GL_X.size, n, n)
            av = self.a_fn(l.reshape(-1)).reshape(k, _GL_X.size, n)
            forced = half[:, None] * np.einsum("j,kjab,kjb->ka", _GL_W, Phi, av)
            step = _backend.expm_stack(dIA)
            v = np.einsum("kab,kb->ka", step, v0) + forced
        return IA, v

    def evaluate(self, taus, chunk=256):
        taus = np.asarray(taus, dtype=float).reshape(-1)
        n = self.n
        if taus.size and taus.max() > self.t_end:
            self.extend(max(taus.max(), 1.5 * self.t_end))
        out = np.zeros((taus.size, n + 1, n + 1))
        out[:, n, n] = 1.0
        knots = np.asarray(self.knots)
        for s in range(0, taus.size, chunk):
            tt = taus[s:s + chunk]
            idx = np.clip(np.searchsorted(knots, tt, side="right") - 1, 0, knots.size - 1)
            IA, v = self._advance(tt, idx)
            with np.errstate(over="ignore", invalid="ignore"):
                out[s:s + chunk, :n, :n] = _backend.expm_stack(IA)
            out[s:s + chunk, :n, n] = v
        return out


class FundamentalMatrixTable:
    """Tabulated Psi_aug on [0, tau_max], extended on demand.

    ``grid`` holds the solver steps (or quadrature knots), ``psi`` the
    fundamental matrix there; ``evaluate`` gives Psi_aug anywhere.
    """

    def __init__(self, A_fn, a_fn, n, tau_max, method="general", rtol=ODE_RTOL):
        self.n = n
        self.method = method
        if method == "commuting":
            self._flow = _CommutingFlow(A_fn, a_fn, n)
            self.ode_tolerance = self._flow.rtol
        else:
            self._flow = _OdeFlow(A_fn, a_fn, n, rtol=rtol)
            self.ode_tolerance = rtol
        self.interpolation_order = self._flow.interpolation_order
        self._flow.extend(float(tau_max))

    @property
    def tau_max(self):
        return self._flow.t_end

    @property
    def grid(self):
        return np.asarray(self._flow.steps)

    @property
    def psi(self):
        return self.evaluate(self.grid)[:, : self.n, : self.n]

    def evaluate(self, taus):
        return self._flow.evaluate(taus)

    def fundamental(self, taus):
        return self.evaluate(taus)[:, : self.n, : self.n]

    def forced(self, taus):
        return self.evaluate(taus)[:, : self.n, self.n]

    def phi(self, tau, l):
        """State transition Psi(tau) Psi(l)^{-1}."""
        P = self.fundamental([tau, l])
        if np.linalg.cond(P[1]) > COND_MAX:
            raise NoninvertiblePsiError(f"Psi({l:.6g}) is numerically singular")
        return np.linalg.solve(P[1].T, P[0].T).T


def _as_fn(tf):
    return tf.at


def _commutes(A_fn, shape, grid):
    return commutes_on_grid(TimerFunction(lambda t: A_fn(np.array([t]))[0], shape), grid)


def _pick_method(method, hint, A_fn, n, grid):
    if method not in LTV_METHODS:
        raise ValueError(f"method must be one of {LTV_METHODS}")
    if method == "general":
        return method
    if method == "commuting":
        # exp(int A) is only the flow when the generator commutes with itself
        if not _commutes(A_fn, (n, n), grid):
            raise SubclassViolationError("commuting path requested but the generator does not commute "
                                         "across tau; use method 'general'")
        return method
    if hint in ("commuting", "drift_matrix_zero") and _commutes(A_fn, (n, n), grid):
        return "commuting"
    return "general"


def fundamental_matrix(model, tau_max, method="auto"):
    """Table of Psi_aug for the mean-level flow of ``model``."""
    n = model.dim
    grid = validation_grid(horizon=tau_max)
    A_fn = _as_fn(model.drift_matrix)
    m = _pick_method(method, model.ltv_structure_hint, A_fn, n, grid)
    return FundamentalMatrixTable(A_fn, _as_fn(model.drift_offset), n, tau_max, m)


def _horizon(dist):
    return dist.quantile(0.999) if dist.is_continuous else dist.quantile_cap


def _reset_aug_fn(J_fn, r_fn, N):
    def f(t):
        J = J_fn(t)
        out = np.zeros((J.shape[0], N + 1, N + 1))
        out[:, :N, :N] = J
        out[:, :N, N] = r_fn(t)
        out[:, N, N] = 1.0
        return out

    return f


def _expectations(table, Jaug_fn, dist):
    def at_event(t):
        return np.einsum("kab,kbc->kac", Jaug_fn(t), table.evaluate(t))

    P_s, err_s = dist.expect_interevent(at_event, vectorized=True, full_output=True)
    P_t, err_t = dist.expect_timer(table.evaluate, vectorized=True, full_output=True)
    return P_s, P_t, max(float(np.max(err_s)), float(np.max(err_t)))


def _stationary(P_s, P_t, warnings):
    N = P_s.shape[0] - 1
    x_plus = _solve(np.eye(N) - P_s[:N, :N], P_s[:N, N], warnings)
    return P_t[:N, :N] @ x_plus + P_t[:N, N]


def steady_mean_ltv(model, dist, method="auto", force=False, margin=MARGIN):
    """Timer-dependent stationary mean."""
    from .lti import MomentReport

    n = model.dim
    table = fundamental_matrix(model, _horizon(dist), method)
    r = model.reset
    P_s, P_t, err = _expectations(table, _reset_aug_fn(r.J.at, r.r_hat.at, n), dist)
    rho = spectral_radius(P_s[:n, :n])
    verdict = StabilityVerdict(classify_radius(rho, margin), "not_computed", rho, math.nan, True)
    _guard(verdict, False, force)
    warnings = []
    xbar = _stationary(P_s, P_t, warnings)
    return MomentReport(xbar, None, None, None, verdict, f"ltv_{table.method}", err, warnings)


def lifted_functions(model):
    """Vectorised tau -> (A_mu, a_mu, J_mu, r_mu) for the lifted LTV model."""
    c = model.coefficients()
    cache = {}

    def all_at(t):
        key = t.tobytes()
        if key not in cache:
            if len(cache) > 8:
                cache.clear()
            cache[key] = lift_coefficients(*(c[k].at(t) for k in
                                             ("A", "a_hat", "J", "r_hat", "Q", "B", "c_hat", "D")))
        return cache[key]

    return tuple((lambda t, i=i: all_at(np.asarray(t, dtype=float).reshape(-1))[i]) for i in range(4))


def steady_second_ltv(model, dist, method="auto", force=False, margin=MARGIN):
    """Timer-dependent stationary mean and second moments through the lifted flow."""
    n = model.dim
    N = n + n * n
    A_mu, a_mu, J_mu, r_mu = lifted_functions(model)
    tau_max = _horizon(dist)
    grid = validation_grid(horizon=tau_max)
    hint = model.ltv_structure_hint
    m = _pick_method(method, hint, A_mu, N, grid)
    table = FundamentalMatrixTable(A_mu, a_mu, N, tau_max, m)
    P_s, P_t, err = _expectations(table, _reset_aug_fn(J_mu, r_mu, N), dist)
    rho1 = spectral_radius(P_s[:n, :n])
    rho2 = spectral_radius(P_s[n:N, n:N])
    verdict = StabilityVerdict(classify_radius(rho1, margin), classify_radius(rho2, margin),
                               rho1, rho2, True)
    _guard(verdict, True, force)
    warnings = []
    mu = _stationary(P_s, P_t, warnings)
    S = mu[n:].reshape((n, n), order="F")
    return _report(mu[:n], S, verdict, f"ltv_{table.method}", err, warnings)


def check_stability_ltv(model, dist, margin=MARGIN, method="auto"):
    try:
        rep = steady_second_ltv(model, dist, method, force=True, margin=margin)
    except DivergenceDetectedError:
        return StabilityVerdict("no", "no", math.inf, math.inf, False)
    except UnstableModelError as exc:  # pragma: no cover - force=True never raises it
        return exc.verdict
    return rep.verdict


__all__ = [
    "FundamentalMatrixTable",
    "fundamental_matrix",
    "steady_mean_ltv",
    "steady_second_ltv",
    "check_stability_ltv",
    "lifted_functions",
]
