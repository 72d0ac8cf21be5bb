"""Event-driven Monte Carlo for a TTSHS.

All trajectories advance in lockstep, one event at a time, so every step is a
batched matrix exponential.  Along a segment the state z = [x, vec(x x^T), 1]
follows the deterministic lifted flow, which gives the segment integrals of x
and x x^T exactly (Van Loan block exponential for LTI, an ODE table for LTV).

Random streams: trajectory ``i`` owns ``Generator(Philox(key=seed + i * 2**64))``
(the 128-bit Philox key holds the master seed in its low word and the
trajectory id in its high word).  Each stream draws, in order: the
inter-event times, the uniform ages used by the timer-sampling estimator, then
the reset noise.  Results therefore do not depend on batch order or size.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.integrate import solve_ivp

from . import _backend
from .errors import OdeFailureError, ShapeMismatchError
from .lti import lift_coefficients
from .model import require_valid

ESTIMATORS = ("time_average", "timer_stationary_sampling")
CLIP_FRACTION = 1e-6
_SEED_MAX = 2**64


@dataclass(frozen=True)
class SimConfig:
    n_trajectories: int = 1000
    n_events_per_trajectory: int = 200
    burn_in_events: int = 50
    estimator: str = "time_average"
    master_seed: int = 0
    ltv_flow_tolerance: float = 1e-10
    initial_state: tuple = None

    def __post_init__(self):
        for name in ("n_trajectories", "n_events_per_trajectory"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.burn_in_events, (int, np.integer)) or self.burn_in_events < 0:
            raise ValueError("burn_in_events must be a non-negative integer")
        if self.burn_in_events >= self.n_events_per_trajectory:
            raise ValueError("burn_in_events must be smaller than n_events_per_trajectory")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if not 0 <= int(self.master_seed) < _SEED_MAX:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if not self.ltv_flow_tolerance > 0:
            raise ValueError("ltv_flow_tolerance must be positive")


@dataclass
class SimEstimate:
    mean_hat: np.ndarray
    second_hat: np.ndarray
    std_err_mean: np.ndarray
    std_err_second: np.ndarray
    n_effective: int
    covariance_hat: np.ndarray = None
    std_err_covariance: np.ndarray = None
    estimator: str = "time_average"
    n_aborted: int = 0
    aborted_trajectories: list = field(default_factory=list)
    clip_count: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def nonstationary(self):
        return (bool(self.diagnostics.get("flag", False)) or self.n_aborted > 0
                or self.diagnostics.get("analytic_stable") is False)

    def to_dict(self):
        return {
            "mean_hat": self.mean_hat.tolist(),
            "second_hat": self.second_hat.tolist(),
            "covariance_hat": self.covariance_hat.tolist(),
            "std_err_mean": self.std_err_mean.tolist(),
            "std_err_second": self.std_err_second.tolist(),
            "std_err_covariance": self.std_err_covariance.tolist(),
            "n_effective": self.n_effective,
            "estimator": self.estimator,
            "n_aborted": self.n_aborted,
            "aborted_trajectories": list(self.aborted_trajectories),
            "negative_covariance_clipped": self.clip_count,
            "nonstationary": self.nonstationary,
            "diagnostics": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.diagnostics.items()},
        }


def trajectory_rng(master_seed, traj_id):
    """The documented per-trajectory stream."""
    return np.random.Generator(np.random.Philox(key=int(master_seed) + int(traj_id) * _SEED_MAX))


# -- resets ----------------------------------------------------------------------
@dataclass
class _ClipCounter:
    count: int = 0


def _reset_cov(x, Q, B, c, D):
    Qx = np.einsum("kab,kb->ka", Q, x)
    Bx = np.einsum("kab,kb->ka", B, x)
    cov = Qx[:, :, None] * Qx[:, None, :] + Bx[:, :, None] * c[:, None, :] + c[:, :, None] * Bx[:, None, :] + D
    return 0.5 * (cov + np.swapaxes(cov, 1, 2))


def _gaussian(mean, cov, z, clips):
    w, V = np.linalg.eigh(cov)
    neg = np.clip(-w, 0.0, None).sum(axis=1)
    scale = np.maximum(np.abs(w).sum(axis=1), np.finfo(float).tiny)
    clips.count += int(np.count_nonzero(neg > CLIP_FRACTION * scale))
    root = np.sqrt(np.clip(w, 0.0, None))
    return mean + np.einsum("kab,kb->ka", V, root * z)


def _apply_reset(kernel, coeffs, x, noise, clips):
    J, r, Q, B, c, D = coeffs
    mean = np.einsum("kab,kb->ka", J, x) + r
    if kernel == "deterministic":
        return mean
    if kernel == "binomial_partition":
        trials = np.rint(np.clip(x[:, 0], 0.0, None))
        return stats.binom.ppf(noise[:, 0], trials, 0.5)[:, None]
    return _gaussian(mean, _reset_cov(x, Q, B, c, D), noise, clips)


def reset_sample(reset, x_minus, tau_elapsed, rng, clips=None):
    """One post-event state drawn from the reset kernel."""
    x = np.atleast_1d(np.asarray(x_minus, dtype=float))
    n = x.size
    coeffs = [f.at([tau_elapsed]) for f in reset.coefficients().values()]
    if coeffs[0].shape[1:] != (n, n):
        raise ShapeMismatchError(f"state has length {n} but J is {coeffs[0].shape[1:]}")
    clips = clips or _ClipCounter()
    if reset.kernel == "binomial_partition":
        noise = rng.random((1, 1))
    elif reset.kernel == "gaussian_matched":
        noise = rng.standard_normal((1, n))
    else:
        noise = None
    return _apply_reset(reset.kernel, coeffs, x[None, :], noise, clips)[0]


def sample_resets(reset, x_minus, tau_elapsed, rng, size):
    """``size`` independent draws for one pre-event state (for kernel checks)."""
    x = np.atleast_1d(np.asarray(x_minus, dtype=float))
    n = x.size
    coeffs = [np.repeat(f.at([tau_elapsed]), size, axis=0) for f in reset.coefficients().values()]
    if reset.kernel == "binomial_partition":
        noise = rng.random((size, 1))
    elif reset.kernel == "gaussian_matched":
        noise = rng.standard_normal((size, n))
    else:
        noise = None
    return _apply_reset(reset.kernel, coeffs, np.repeat(x[None, :], size, axis=0), noise, _ClipCounter())


# -- flows -----------------------------------------------------------------------
def _flow_generator(A, a):
    """Augmented lifted generator acting on [x, vec(x x^T), 1]."""
    n = A.shape[-1]
    zeros = np.zeros(A.shape[:-2] + (n,) * 2)
    A_mu, a_mu, _, _ = lift_coefficients(A, a, zeros, zeros[..., 0], zeros, zeros, zeros[..., 0], zeros)
    N = A_mu.shape[-1]
    G = np.zeros(A.shape[:-2] + (N + 1, N + 1))
    G[..., :N, :N] = A_mu
    G[..., :N, N] = a_mu
    return G


def _reach(M):
    """Entries of exp(M t) that are not structurally zero."""
    R = (M != 0) | np.eye(M.shape[0], dtype=bool)
    while True:
        R2 = (R.astype(np.int64) @ R.astype(np.int64)) > 0
        if np.array_equal(R2, R):
            return R
        R = R2


class _LtiFlow:
    # Rounding in structurally zero entries of the exponential would couple x to
    # the much larger x x^T entries, so those entries are masked back to zero.
    def __init__(self, A, a):
        self.G = _flow_generator(A, a)
        self.N = self.G.shape[0]
        N = self.N
        self.H = np.zeros((2 * N, 2 * N))
        self.H[:N, :N] = self.G
        self.H[N:, :N] = np.eye(N)
        self.mask_G = _reach(self.G)
        self.mask_H = _reach(self.H)

    def segment(self, taus, Z0):
        N = self.N
        if not np.any(self.G):
            return Z0.copy(), taus[:, None] * Z0
        with np.errstate(over="ignore", invalid="ignore"):
            E = _backend.expm_stack(self.H[None] * taus[:, None, None]) * self.mask_H
            return np.einsum("kab,kb->ka", E[:, :N, :N], Z0), np.einsum("kab,kb->ka", E[:, N:, :N], Z0)

    def at_age(self, ages, Z0):
        if not np.any(self.G):
            return Z0.copy()
        with np.errstate(over="ignore", invalid="ignore"):
            E = _backend.expm_stack(self.G[None] * ages[:, None, None]) * self.mask_G
            return np.einsum("kab,kb->ka", E, Z0)


class _LtvFlow:
    """Dense DOP853 table of the lifted Psi and its running integral."""

    def __init__(self, model, tau_max, tol):
        A_tf, a_tf = model.drift_matrix, model.drift_offset

        def gen(t):
            return _flow_generator(A_tf.at([t]), a_tf.at([t]))[0]

        N = gen(0.0).shape[0]
        self.N = N

        def rhs(t, y):
            P = y[: N * N].reshape(N, N)
            return np.concatenate([(gen(t) @ P).ravel(), P.ravel()])

        y0 = np.concatenate([np.eye(N).ravel(), np.zeros(N * N)])
        sol = solve_ivp(rhs, (0.0, max(float(tau_max), 1e-12)), y0, method="DOP853", rtol=tol,
                        atol=tol * 1e-3, dense_output=True)
        if not sol.success:
            raise OdeFailureError(f"flow integration failed: {sol.message}")
        self._sol = sol.sol

    def _table(self, taus):
        N = self.N
        Y = self._sol(np.asarray(taus, dtype=float)).T
        return Y[:, : N * N].reshape(-1, N, N), Y[:, N * N:].reshape(-1, N, N)

    def segment(self, taus, Z0):
        P, W = self._table(taus)
        return np.einsum("kab,kb->ka", P, Z0), np.einsum("kab,kb->ka", W, Z0)

    def at_age(self, ages, Z0):
        P, _ = self._table(ages)
        return np.einsum("kab,kb->ka", P, Z0)


def _lift_state(x):
    k, n = x.shape
    outer = x[:, :, None] * x[:, None, :]
    return np.concatenate([x, np.swapaxes(outer, 1, 2).reshape(k, n * n), np.ones((k, 1))], axis=1)


# -- estimation ------------------------------------------------------------------
def _ratio(num, den):
    """Pooled ratio sum(num)/sum(den) and per-trajectory influence values."""
    total = den.sum()
    est = num.sum(axis=0) / total
    shape = (-1,) + (1,) * (num.ndim - 1)
    infl = (num - est * den.reshape(shape)) / den.mean()
    return est, infl


def _se(infl):
    k = infl.shape[0]
    if k < 2:
        return np.full(infl.shape[1:], np.nan)
    return np.sqrt(np.sum((infl - infl.mean(axis=0)) ** 2, axis=0) / (k * (k - 1)))


def estimate_convergence(history, threshold=3.0):
    """First-half versus second-half comparison of batch means.

    ``history`` is (n_batches, d) batch means, or (n_batches, n_replicates, d)
    with independent replicates per batch; in the latter case the standard
    error comes from the between-replicate spread of the half differences.
    """
    H = np.asarray(history, dtype=float)
    if H.ndim == 1:
        H = H[:, None]
    nb = H.shape[0]
    if nb < 2:
        raise ValueError("need at least 2 batches")
    h = nb // 2
    first, second = H[:h], H[nb - h:]
    if H.ndim == 3:
        diff = second.mean(axis=0) - first.mean(axis=0)
        ok = np.all(np.isfinite(diff), axis=1)
        diff = diff[ok]
        delta = diff.mean(axis=0)
        se = diff.std(axis=0, ddof=1) / math.sqrt(diff.shape[0]) if diff.shape[0] > 1 else np.full(delta.shape, np.nan)
    else:
        delta = second.mean(axis=0) - first.mean(axis=0)
        if h < 2:
            se = np.abs(first[0] - second[-1]) * np.nan
        else:
            se = np.sqrt(first.var(axis=0, ddof=1) / h + second.var(axis=0, ddof=1) / h)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, delta / se, np.where(delta == 0, 0.0, np.inf))
    z = np.where(np.isnan(z), 0.0, z)
    max_z = float(np.max(np.abs(z))) if z.size else 0.0
    return {"flag": bool(max_z > threshold), "z": z, "max_abs_z": max_z, "threshold": threshold}


# -- driver ----------------------------------------------------------------------
def _draws(dist, kernel, n, config):
    K, E = config.n_trajectories, config.n_events_per_trajectory
    taus = np.empty((K, E))
    ages = np.empty((K, E))
    width = {"gaussian_matched": n, "binomial_partition": 1}.get(kernel, 0)
    noise = np.empty((K, E, width))
    for i in range(K):
        rng = trajectory_rng(config.master_seed, i)
        taus[i] = dist.sample_interevent(rng, E)
        ages[i] = rng.random(E)
        if kernel == "binomial_partition":
            noise[i] = rng.random((E, 1))
        elif width:
            noise[i] = rng.standard_normal((E, width))
    return taus, ages, noise


N_BATCHES = 10


def simulate(model, dist, config=None, dump_path=None):
    """Monte Carlo estimate of the stationary first and second moments."""
    # diverging trajectories overflow by design; they are aborted and reported
    with np.errstate(over="ignore", invalid="ignore"):
        return _simulate(model, dist, config, dump_path)


def _simulate(model, dist, config, dump_path):
    config = config or SimConfig()
    require_valid(model, dist)
    n = model.dim
    K, E, burn = config.n_trajectories, config.n_events_per_trajectory, config.burn_in_events
    kernel = model.reset.kernel
    taus, ages, noise = _draws(dist, kernel, n, config)

    if model.all_constant:
        c = model.constants()
        flow = _LtiFlow(c["A"], c["a_hat"])
    else:
        flow = _LtvFlow(model, float(np.max(taus)), config.ltv_flow_tolerance)
    reset_fns = list(model.reset.coefficients().values())

    x0 = np.zeros(n) if config.initial_state is None else np.asarray(config.initial_state, dtype=float).reshape(-1)
    if x0.shape != (n,):
        raise ShapeMismatchError(f"initial_state must have length {n}")
    x = np.repeat(x0[None, :], K, axis=0)
    alive = np.ones(K, dtype=bool)
    clips = _ClipCounter()
    nz = n + n * n
    acc = np.zeros((K, nz))
    weight = np.zeros(K)
    batch_edges = np.linspace(burn, E, min(N_BATCHES, E - burn) + 1).astype(int)
    batch_acc = np.zeros((len(batch_edges) - 1, K, nz))
    batch_w = np.zeros((len(batch_edges) - 1, K))
    t_now = np.zeros(K)
    # accumulate relative to the initial lifted state; a state that never moves sums to exact zeros
    z_ref = _lift_state(x0[None, :])[0, :nz]
    writer = None
    fh = None
    if dump_path is not None:
        fh = open(dump_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["trajectory_id", "event_index", "t", "tau_drawn"]
                        + [f"x_minus_{i}" for i in range(n)] + [f"x_plus_{i}" for i in range(n)])
    try:
        for j in range(E):
            tau = taus[:, j]
            Z0 = _lift_state(x)
            Z1, I1 = flow.segment(tau, Z0)
            x_minus = Z1[:, :n]
            if j >= burn:
                b = np.searchsorted(batch_edges, j, side="right") - 1
                if config.estimator == "time_average":
                    contrib, w = I1[:, :nz], tau
                else:
                    contrib, w = flow.at_age(ages[:, j] * tau, Z0)[:, :nz] * tau[:, None], tau
                contrib = contrib - tau[:, None] * z_ref
                acc += contrib
                weight += w
                batch_acc[b] += contrib
                batch_w[b] += w
            coeffs = [f.at(tau) for f in reset_fns]
            x_plus = _apply_reset(kernel, coeffs, x_minus, noise[:, j], clips)
            bad = alive & ~(np.all(np.isfinite(x_plus), axis=1) & np.all(np.isfinite(acc), axis=1))
            alive &= ~bad
            t_now += tau
            if writer is not None:
                for i in range(K):
                    writer.writerow([i, j, _g(t_now[i]), _g(tau[i])] + [_g(v) for v in x_minus[i]]
                                    + [_g(v) for v in x_plus[i]])
            x = np.where(alive[:, None], x_plus, 0.0)
    finally:
        if fh is not None:
            fh.close()

    keep = alive
    acc, weight = acc[keep], weight[keep]
    est, infl = _ratio(acc, weight)
    est = est + z_ref
    mean = est[:n]
    second = _unvec(est[n:], n)
    infl_x = infl[:, :n]
    infl_S = infl[:, n:].reshape(-1, n, n).transpose(0, 2, 1)
    infl_C = infl_S - infl_x[:, :, None] * mean[None, None, :] - mean[None, :, None] * infl_x[:, None, :]
    second = 0.5 * (second + second.T)
    cov = second - np.outer(mean, mean)

    with np.errstate(divide="ignore", invalid="ignore"):
        bm = batch_acc[:, keep] / batch_w[:, keep][:, :, None] + z_ref
    diag_idx = n + np.arange(n) * (n + 1)
    diagnostics = estimate_convergence(bm[:, :, np.r_[np.arange(n), diag_idx]]) if bm.shape[0] >= 2 and keep.sum() > 1 else {}
    stable = _analytic_stable(model, dist)
    if stable is not None:
        diagnostics = dict(diagnostics, analytic_stable=stable)
    aborted = np.flatnonzero(~alive).tolist()
    return SimEstimate(
        mean_hat=mean,
        second_hat=second,
        std_err_mean=_se(infl_x),
        std_err_second=_se(infl_S),
        n_effective=int(keep.sum()),
        covariance_hat=cov,
        std_err_covariance=_se(infl_C),
        estimator=config.estimator,
        n_aborted=len(aborted),
        aborted_trajectories=aborted,
        clip_count=clips.count,
        diagnostics=diagnostics,
    )


def _analytic_stable(model, dist):
    """Second-moment verdict of the analytic engine; None if it cannot be evaluated.

    Batch means miss explosive growth whose spread grows as fast as its
    level, so a model the recursion calls unstable is always flagged.
    """
    from .errors import TtshsError
    from .lti import check_stability
    from .ltv import check_stability_ltv

    try:
        if model.all_constant:
            v = check_stability(model.as_lti(), dist)
        else:
            v = check_stability_ltv(model, dist)
    except (TtshsError, ValueError, ArithmeticError):
        return None
    return "no" not in (v.mean_stable, v.second_stable)


def _unvec(v, n):
    return np.asarray(v).reshape(n, n).T.copy()


def _g(v):
    return format(float(v), ".17g")
