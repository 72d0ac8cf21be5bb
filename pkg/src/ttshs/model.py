"""TTSHS model types: linear flow between events plus a moment-specified reset.

Between events ``dx/dt = A(tau) x + a(tau)`` where ``tau`` is the time since
the last event.  At an event the state jumps to ``x+`` with

    E[x+ | x-]   = J x- + r
    Cov[x+ | x-] = Q x- x-^T Q^T + B x- c^T + c x-^T B^T + D

All coefficients may depend on the timer value at the event (LTV mode).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ModelValidationError, ShapeMismatchError
from .expr import Expr
from .linalg import is_hurwitz, matrix_exponential

MODES = ("LTI", "LTV")
HINTS = ("general", "commuting", "drift_matrix_zero")
KERNELS = ("gaussian_matched", "binomial_partition", "deterministic")
VALIDATION_POINTS = 64
COMMUTE_TOL = 1e-8


class TimerFunction:
    """A vector/matrix valued function of tau, possibly constant.

    ``value`` is either an array (constant), a callable ``f(tau)`` returning
    an array of ``shape``, or an object array mixing numbers and ``Expr``.
    """

    def __init__(self, value, shape, name=""):
        self.shape = tuple(shape)
        self.name = name
        self._const = None
        self._entries = None
        self._func = None
        if callable(value) and not isinstance(value, Expr):
            self._func = value
            return
        arr = np.asarray(value, dtype=object)
        if arr.size == 1 and int(np.prod(self.shape)) == 1:
            arr = arr.reshape(self.shape)
        if arr.shape != self.shape:
            raise ShapeMismatchError(f"{name} must have shape {self.shape}, got {arr.shape}")
        if any(isinstance(v, Expr) for v in arr.flat):
            if any(isinstance(v, Expr) and v.uses_tau for v in arr.flat):
                self._entries = arr
                return
            arr = np.vectorize(lambda v: float(v(0.0)) if isinstance(v, Expr) else v, otypes=[object])(arr)
        self._const = np.asarray(arr, dtype=float)
        self._const.setflags(write=False)

    @property
    def is_constant(self):
        return self._const is not None

    @property
    def const(self):
        if self._const is None:
            raise ValueError(f"{self.name} depends on tau")
        return self._const

    def __call__(self, tau):
        if self._const is not None:
            return self._const.copy()
        return self.at(np.array([float(tau)]))[0]

    def at(self, taus):
        """Values at many tau, shape ``(len(taus), *shape)``."""
        taus = np.asarray(taus, dtype=float).reshape(-1)
        if self._const is not None:
            return np.broadcast_to(self._const, (taus.size,) + self.shape).copy()
        if self._entries is not None:
            out = np.empty((taus.size,) + self.shape)
            for idx, v in np.ndenumerate(self._entries):
                out[(slice(None),) + idx] = v(taus) if isinstance(v, Expr) else float(v)
            return out
        out = np.stack([np.asarray(self._func(float(t)), dtype=float).reshape(self.shape) for t in taus])
        return out

    def to_spec(self):
        if self._const is not None:
            return self._const.tolist()
        if self._entries is not None:
            return np.vectorize(
                lambda v: {"kind": "expr", "body": v.body} if isinstance(v, Expr) else float(v),
                otypes=[object],
            )(self._entries).tolist()
        return "<callable>"


def _tf(value, shape, name, default=0.0):
    if isinstance(value, TimerFunction):
        if value.shape != tuple(shape):
            raise ShapeMismatchError(f"{name} must have shape {tuple(shape)}, got {value.shape}")
        return value
    if value is None:
        value = np.full(shape, default)
    return TimerFunction(value, shape, name)


@dataclass(frozen=True, eq=False)
class ResetMap:
    J: TimerFunction
    r_hat: TimerFunction
    Q: TimerFunction
    B: TimerFunction
    c_hat: TimerFunction
    D: TimerFunction
    kernel: str = "gaussian_matched"

    @classmethod
    def build(cls, n, J=None, r_hat=None, Q=None, B=None, c_hat=None, D=None, kernel="gaussian_matched"):
        return cls(
            J=_tf(J, (n, n), "J"),
            r_hat=_tf(r_hat, (n,), "r_hat"),
            Q=_tf(Q, (n, n), "Q"),
            B=_tf(B, (n, n), "B"),
            c_hat=_tf(c_hat, (n,), "c_hat"),
            D=_tf(D, (n, n), "D"),
            kernel=kernel,
        )

    def coefficients(self):
        return {"J": self.J, "r_hat": self.r_hat, "Q": self.Q, "B": self.B, "c_hat": self.c_hat, "D": self.D}

    @property
    def is_constant(self):
        return all(c.is_constant for c in self.coefficients().values())


@dataclass(frozen=True, eq=False)
class TtshsModel:
    """Continuous dynamics plus reset map.  Build with ``lti`` or ``ltv``."""

    dim: int
    drift_matrix: TimerFunction
    drift_offset: TimerFunction
    reset: ResetMap
    mode: str = "LTI"
    ltv_structure_hint: str = "general"

    @classmethod
    def lti(cls, A, a_hat=None, J=None, r_hat=None, Q=None, B=None, c_hat=None, D=None,
            kernel="gaussian_matched"):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[0]
        reset = ResetMap.build(n, J, r_hat, Q, B, c_hat, D, kernel)
        return cls(n, _tf(A, (n, n), "A"), _tf(a_hat, (n,), "a_hat"), reset, "LTI", "general")

    @classmethod
    def ltv(cls, n, A=None, a_hat=None, J=None, r_hat=None, Q=None, B=None, c_hat=None, D=None,
            kernel="gaussian_matched", hint="general"):
        reset = ResetMap.build(n, J, r_hat, Q, B, c_hat, D, kernel)
        return cls(n, _tf(A, (n, n), "A"), _tf(a_hat, (n,), "a_hat"), reset, "LTV", hint)

    @property
    def A(self):
        return self.drift_matrix.const

    @property
    def a_hat(self):
        return self.drift_offset.const

    def coefficients(self):
        out = {"A": self.drift_matrix, "a_hat": self.drift_offset}
        out.update(self.reset.coefficients())
        return out

    @property
    def all_constant(self):
        return all(c.is_constant for c in self.coefficients().values())

    def as_lti(self):
        """The LTI model with the same (constant) coefficients."""
        if not self.all_constant:
            raise ValueError("model has timer-dependent coefficients")
        if self.mode == "LTI":
            return self
        r = self.reset
        return TtshsModel.lti(self.A, self.a_hat, r.J.const, r.r_hat.const, r.Q.const, r.B.const,
                              r.c_hat.const, r.D.const, r.kernel)

    def constants(self):
        """All coefficients as arrays (LTI only)."""
        return {k: v.const for k, v in self.coefficients().items()}


@dataclass(frozen=True)
class Violation:
    code: str
    field: str
    message: str


@dataclass(frozen=True)
class StabilityVerdict:
    mean_stable: str
    second_stable: str
    mean_spectral_radius: float
    second_spectral_radius: float
    mgf_finite: bool
    sufficiency_shortcut_used: bool = False

    @property
    def stable(self):
        return self.mean_stable == "yes" and self.second_stable == "yes"

    def to_dict(self):
        return {
            "mean_stable": self.mean_stable,
            "second_stable": self.second_stable,
            "mean_spectral_radius": self.mean_spectral_radius,
            "second_spectral_radius": self.second_spectral_radius,
            "mgf_finite": self.mgf_finite,
            "sufficiency_shortcut_used": self.sufficiency_shortcut_used,
        }


def classify_radius(rho, margin):
    if not np.isfinite(rho):
        return "no"
    if abs(rho - 1.0) <= margin:
        return "marginal"
    return "yes" if rho < 1.0 else "no"


def validation_grid(dist=None, horizon=None, points=VALIDATION_POINTS):
    """64 tau values on [0, q_0.999(f)] (or [0, horizon])."""
    if horizon is None:
        horizon = dist.quantile(0.999) if dist is not None else 1.0
    return np.linspace(0.0, float(horizon), points)


def _close(a, b, tol=1e-12):
    return np.allclose(a, b, rtol=0.0, atol=tol)


def validate_model(model, dist=None, horizon=None):
    """Every invariant violation as a list of ``Violation``; empty when valid."""
    out = []
    n = model.dim
    if not isinstance(n, (int, np.integer)) or n < 1:
        return [Violation("shape_mismatch", "dim", f"dim must be a positive integer, got {n!r}")]
    if model.mode not in MODES:
        out.append(Violation("invalid_mode", "mode", f"mode must be one of {MODES}"))
    if model.ltv_structure_hint not in HINTS:
        out.append(Violation("invalid_hint", "ltv_structure_hint", f"hint must be one of {HINTS}"))
    if model.reset.kernel not in KERNELS:
        out.append(Violation("invalid_kernel", "reset.kernel", f"kernel must be one of {KERNELS}"))

    grid = validation_grid(dist, horizon)
    coeffs = model.coefficients()
    expected = {"A": (n, n), "a_hat": (n,), "J": (n, n), "r_hat": (n,), "Q": (n, n), "B": (n, n),
                "c_hat": (n,), "D": (n, n)}
    values = {}
    for name, tf in coeffs.items():
        if tf.shape != expected[name]:
            out.append(Violation("shape_mismatch", name, f"expected {expected[name]}, got {tf.shape}"))
            continue
        try:
            vals = tf.at(grid)
        except Exception as exc:  # user callables may fail arbitrarily
            out.append(Violation("evaluation_error", name, str(exc)))
            continue
        if vals.shape != (grid.size,) + expected[name]:
            out.append(Violation("shape_mismatch", name, f"evaluates to shape {vals.shape[1:]}"))
            continue
        if not np.all(np.isfinite(vals)):
            out.append(Violation("nonfinite_value", name, "non-finite value on the validation grid"))
            continue
        values[name] = vals
        if model.mode == "LTI" and not tf.is_constant:
            out.append(Violation("mode_violation", name, "LTI models need constant coefficients"))
    if len(values) < len(expected):
        return out

    D = values["D"]
    if not all(_close(d, d.T, 1e-10 * max(1.0, np.abs(d).max())) for d in D):
        out.append(Violation("psd_violation", "D", "D must be symmetric"))
    else:
        for d in D:
            ev = np.linalg.eigvalsh(0.5 * (d + d.T))
            tol = 1e-10 * np.linalg.norm(d, 2)
            if ev.min() < -tol:
                out.append(Violation("psd_violation", "D", f"D has eigenvalue {ev.min():.6g} < 0"))
                break

    kernel = model.reset.kernel
    if kernel == "deterministic":
        for name in ("Q", "B", "D", "c_hat"):
            if not _close(values[name], 0.0):
                out.append(Violation("kernel_contract_violation", name,
                                     f"deterministic kernel requires {name} = 0"))
    elif kernel == "binomial_partition":
        need = {"J": 0.5, "Q": 0.0, "c_hat": 0.5, "B": 0.25, "D": 0.0, "r_hat": 0.0}
        if n != 1:
            out.append(Violation("kernel_contract_violation", "dim", "binomial_partition needs dim = 1"))
        else:
            for name, v in need.items():
                if not _close(values[name], v):
                    out.append(Violation("kernel_contract_violation", name,
                                         f"binomial_partition requires {name} = {v}"))

    hint = model.ltv_structure_hint
    if hint == "drift_matrix_zero" and not _close(values["A"], 0.0):
        out.append(Violation("commuting_violation", "A", "hint drift_matrix_zero but A(tau) != 0"))
    elif hint == "commuting" and not commutes_on_grid(model.drift_matrix, grid):
        out.append(Violation("commuting_violation", "A",
                             "A(tau) does not commute with exp(int_0^tau A) on the grid"))
    return out


def commutes_on_grid(drift, grid, tol=COMMUTE_TOL):
    """Check A(t) exp(IA(t)) == exp(IA(t)) A(t) with IA the running integral."""
    if drift.is_constant:
        return True
    from .quadrature import integrate

    vals = drift.at(grid)
    prev = 0.0
    acc = np.zeros(drift.shape)
    for i, t in enumerate(grid):
        if t > prev:
            acc = acc + integrate(lambda x: drift.at(x), prev, t).value
            prev = t
        E = matrix_exponential(acc)
        lhs = vals[i] @ E
        rhs = E @ vals[i]
        scale = max(1.0, np.linalg.norm(vals[i]) * np.linalg.norm(E))
        if np.max(np.abs(lhs - rhs)) > tol * scale:
            return False
    return True


def require_valid(model, dist=None):
    violations = validate_model(model, dist)
    if violations:
        raise ModelValidationError(violations)


@dataclass(frozen=True)
class Remark1Result:
    applies: bool
    mean_applies: bool
    second_applies: bool
    reason: str
    notes: list = field(default_factory=list)


def _contractive_diag(M, tol=0.0):
    """Diagonal with entries in (0, 1): positive definite, inside the unit disc."""
    off = M - np.diag(np.diag(M))
    d = np.diag(M)
    return bool(np.all(np.abs(off) <= tol) and np.all(d > 0) and np.all(d < 1))


def check_remark1_sufficiency(model, dist=None, horizon=None):
    """Distribution-free sufficient condition for mean and second-moment stability.

    Requires the flow to be contractive in the Euclidean norm (symmetric part
    of A negative definite; for Hurwitz but non-normal A the condition can
    fail) together with diagonal contractive resets.
    """
    notes = ["A is tested through its symmetric part (A + A^T)/2 < 0"]
    if model.mode == "LTI" or model.all_constant:
        A_list = [model.drift_matrix.at([0.0])[0]]
        J_list = [model.reset.J.at([0.0])[0]]
        Q_list = [model.reset.Q.at([0.0])[0]]
    else:
        grid = validation_grid(dist, horizon)
        A_list = model.drift_matrix.at(grid)
        J_list = model.reset.J.at(grid)
        Q_list = model.reset.Q.at(grid)

    for A in A_list:
        if not is_hurwitz(A):
            return Remark1Result(False, False, False, "A is not Hurwitz", notes)
        if np.linalg.eigvalsh(0.5 * (A + A.T)).max() >= 0:
            return Remark1Result(False, False, False,
                                 "symmetric part of A is not negative definite", notes)
    for J in J_list:
        if not _contractive_diag(J):
            return Remark1Result(False, False, False,
                                 "J is not diagonal with eigenvalues in (0, 1)", notes)
    for J, Q in zip(J_list, Q_list):
        if np.any(np.abs(Q - np.diag(np.diag(Q))) > 0):
            return Remark1Result(False, True, False, "Q is not diagonal", notes)
        M = np.kron(J, J) + np.kron(Q, Q)
        if not _contractive_diag(M):
            return Remark1Result(False, True, False,
                                 "J(x)J + Q(x)Q has eigenvalues outside (0, 1)", notes)
    return Remark1Result(True, True, True, "sufficient conditions hold", notes)
