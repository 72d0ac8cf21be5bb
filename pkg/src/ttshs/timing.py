"""Inter-event time laws, their hazard and stationary timer law, and expectations.

The stationary timer (time since the last event) has density
``p(tau) = survival(tau) / <tau_s>``.  Expectations of matrix-valued functions
of either variable go through adaptive quadrature; the sample-based
``empirical`` family and the point-mass ``deterministic`` family are handled
exactly.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .errors import (
    DivergenceDetectedError,
    DivergentMomentError,
    ModelParseError,
    SurvivalExhaustedError,
)
from .quadrature import integrate, quad_tol

EPS_TAIL = 1e-12
BULK_QUANTILE = 0.999
MAX_NONDECAY = 8
MAX_TAIL_PIECES = 80
SERIES_MAX = 1e-2  # |s| <tau_s> below this tries the moment series for the MGF

FAMILIES = ("exponential", "gamma", "weibull", "lognormal", "lomax", "deterministic", "empirical")
# families whose scalar MGF has a closed form
CLOSED_MGF = ("exponential", "gamma", "deterministic", "empirical")


@dataclass(frozen=True, eq=False)
class EventTimeDistribution:
    """Law of the time between consecutive events.

    Build instances with the classmethod constructors; ``params`` holds the
    family parameters by name.
    """

    family: str
    params: dict = field(default_factory=dict)
    samples: np.ndarray = None

    # -- constructors -----------------------------------------------------
    @classmethod
    def exponential(cls, mean):
        _positive(mean=mean)
        return cls("exponential", {"mean": float(mean)})

    @classmethod
    def gamma(cls, shape, scale):
        _positive(shape=shape, scale=scale)
        return cls("gamma", {"shape": float(shape), "scale": float(scale)})

    @classmethod
    def weibull(cls, k, lam):
        _positive(k=k, lam=lam)
        return cls("weibull", {"k": float(k), "lam": float(lam)})

    @classmethod
    def lognormal(cls, mu_log, sigma_log):
        _positive(sigma_log=sigma_log)
        return cls("lognormal", {"mu_log": float(mu_log), "sigma_log": float(sigma_log)})

    @classmethod
    def lomax(cls, alpha, scale):
        """Pareto type II; moments of order >= alpha are infinite."""
        _positive(alpha=alpha, scale=scale)
        if alpha <= 1:
            raise ValueError("lomax needs alpha > 1 for a finite mean")
        return cls("lomax", {"alpha": float(alpha), "scale": float(scale)})

    @classmethod
    def deterministic(cls, T):
        _positive(T=T)
        return cls("deterministic", {"T": float(T)})

    @classmethod
    def empirical(cls, samples):
        s = np.sort(np.asarray(samples, dtype=float).reshape(-1))
        if s.size == 0 or not np.all(np.isfinite(s)) or s[0] <= 0:
            raise ValueError("empirical samples must be finite and positive")
        s.setflags(write=False)
        return cls("empirical", {}, s)

    @classmethod
    def gamma_from_mean_cv2(cls, mean, cv2):
        """Gamma with a given mean and CV^2; CV^2 = 0 gives the point mass."""
        if cv2 < 0:
            raise ValueError("cv2 must be non-negative")
        if cv2 == 0 or not math.isfinite(1.0 / cv2):
            # an infinite shape is the point mass
            return cls.deterministic(mean)
        return cls.gamma(1.0 / cv2, mean * cv2)

    @classmethod
    def from_spec(cls, spec, base_dir=None):
        """Build from a model-file style mapping such as ``{"family": "gamma", ...}``."""
        if not isinstance(spec, dict) or "family" not in spec:
            raise ModelParseError("distribution must be an object with a 'family' key")
        fam = spec["family"]
        try:
            if fam == "exponential":
                return cls.exponential(spec["mean"])
            if fam == "gamma":
                if "mean" in spec:
                    return cls.gamma_from_mean_cv2(spec["mean"], spec["cv2"])
                return cls.gamma(spec["shape"], spec["scale"])
            if fam == "weibull":
                return cls.weibull(spec["k"], spec.get("lam", spec.get("lambda")))
            if fam == "lognormal":
                return cls.lognormal(spec["mu_log"], spec["sigma_log"])
            if fam == "lomax":
                return cls.lomax(spec["alpha"], spec["scale"])
            if fam == "deterministic":
                return cls.deterministic(spec["T"])
            if fam == "empirical":
                if "samples" in spec:
                    return cls.empirical(spec["samples"])
                import os

                path = spec["path"]
                if base_dir is not None and not os.path.isabs(path):
                    path = os.path.join(base_dir, path)
                return cls.empirical(np.loadtxt(path, delimiter=",", ndmin=1))
        except KeyError as exc:
            raise ModelParseError(f"distribution '{fam}' is missing parameter {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ModelParseError(f"bad distribution parameters: {exc}") from None
        raise ModelParseError(f"unknown distribution family '{fam}'")

    def to_spec(self):
        if self.family == "empirical":
            return {"family": "empirical", "samples": self.samples.tolist()}
        return {"family": self.family, **self.params}

    # -- scipy frozen law ---------------------------------------------------
    @property
    def _law(self):
        p = self.params
        if self.family == "exponential":
            return stats.expon(scale=p["mean"])
        if self.family == "gamma":
            return stats.gamma(p["shape"], scale=p["scale"])
        if self.family == "weibull":
            return stats.weibull_min(p["k"], scale=p["lam"])
        if self.family == "lognormal":
            return stats.lognorm(p["sigma_log"], scale=math.exp(p["mu_log"]))
        if self.family == "lomax":
            return stats.lomax(p["alpha"], scale=p["scale"])
        return None

    @property
    def is_continuous(self):
        return self.family not in ("deterministic", "empirical")

    def pdf(self, tau):
        if not self.is_continuous:
            raise ValueError(f"{self.family} law has no density")
        return self._law.pdf(tau)

    def survival(self, tau):
        tau = np.asarray(tau, dtype=float)
        if self.family == "deterministic":
            return np.where(tau < self.params["T"], 1.0, 0.0)
        if self.family == "empirical":
            s = self.samples
            return (s.size - np.searchsorted(s, tau, side="right")) / s.size
        return self._law.sf(tau)

    def quantile(self, q):
        if self.family == "deterministic":
            return self.params["T"]
        if self.family == "empirical":
            return float(np.quantile(self.samples, q))
        return float(self._law.ppf(q))

    @property
    def quantile_cap(self):
        """tau_max, the (1 - 1e-12) quantile used to truncate tails."""
        if self.family == "deterministic":
            return self.params["T"]
        if self.family == "empirical":
            return float(self.samples[-1])
        return float(self._law.isf(EPS_TAIL))

    @property
    def mean_interevent(self):
        return self.interevent_moment(1)

    @property
    def cv2(self):
        m = self.interevent_moment(1)
        return self.interevent_moment(2) / m**2 - 1.0

    # -- hazard and moments ---------------------------------------------------
    def hazard_rate(self, tau):
        """f(tau) / (1 - F(tau))."""
        tau = np.asarray(tau, dtype=float)
        if np.any(tau < 0):
            raise ValueError("tau must be non-negative")
        if self.family == "exponential":
            return np.full(tau.shape, 1.0 / self.params["mean"])[()]
        if np.any(self.survival(tau) <= EPS_TAIL):
            raise SurvivalExhaustedError(f"survival below {EPS_TAIL:g} at tau={np.max(tau):g}")
        if self.family == "deterministic":
            return np.zeros(tau.shape)[()]
        if self.family == "empirical":
            # hazard of the piecewise-linear interpolant of the sample survival
            knots = np.concatenate([[0.0], self.samples])
            surv = np.concatenate([[1.0], self.survival(self.samples)])
            idx = np.clip(np.searchsorted(knots, tau, side="right") - 1, 0, knots.size - 2)
            width = knots[idx + 1] - knots[idx]
            slope = np.where(width > 0, (surv[idx] - surv[idx + 1]) / np.where(width > 0, width, 1.0), 0.0)
            s_here = surv[idx] - slope * (tau - knots[idx])
            return (slope / s_here)[()]
        law = self._law
        return np.exp(law.logpdf(tau) - law.logsf(tau))[()]

    def interevent_moment(self, i):
        """<tau_s^i>; returns inf when the moment diverges."""
        if i < 0 or int(i) != i:
            raise ValueError("moment order must be a non-negative integer")
        i = int(i)
        if i == 0:
            return 1.0
        p = self.params
        f = self.family
        if f == "exponential":
            return math.factorial(i) * p["mean"] ** i
        if f == "gamma":
            # scale^i Gamma(k+i)/Gamma(k) as a product; stays finite for huge shapes
            k, th = p["shape"], p["scale"]
            return math.prod(k * th + j * th for j in range(i))
        if f == "weibull":
            return p["lam"] ** i * special.gamma(1.0 + i / p["k"])
        if f == "lognormal":
            return math.exp(i * p["mu_log"] + 0.5 * (i * p["sigma_log"]) ** 2)
        if f == "lomax":
            a = p["alpha"]
            if i >= a:
                return math.inf
            return p["scale"] ** i * math.factorial(i) * math.exp(special.gammaln(a - i) - special.gammaln(a))
        if f == "deterministic":
            return p["T"] ** i
        return float(np.mean(self.samples**i))

    def moment_finite(self, i):
        return math.isfinite(self.interevent_moment(i))

    def timer_moment(self, i):
        """<tau^i> = <tau_s^(i+1)> / ((i+1) <tau_s>)."""
        num = self.interevent_moment(i + 1)
        if not math.isfinite(num):
            raise DivergentMomentError(f"<tau_s^{i + 1}>")
        return num / ((i + 1) * self.interevent_moment(1))

    # -- scalar transforms ----------------------------------------------------
    @property
    def has_closed_mgf(self):
        return self.family in CLOSED_MGF

    def mgf_minus_one(self, s):
        """<e^{s tau_s}> - 1 without cancellation; inf when the MGF diverges."""
        s = float(s)
        if s == 0:
            return 0.0
        p = self.params
        f = self.family
        if f == "exponential":
            m = p["mean"]
            return math.inf if s * m >= 1 else s * m / (1.0 - s * m)
        if f == "gamma":
            th = p["scale"]
            return math.inf if s * th >= 1 else math.expm1(-p["shape"] * math.log1p(-s * th))
        if f == "deterministic":
            return math.expm1(s * p["T"])
        if f == "empirical":
            with np.errstate(over="ignore"):
                return float(np.mean(np.expm1(s * self.samples)))
        if s > 0 and (f in ("lognormal", "lomax") or (f == "weibull" and p["k"] < 1)):
            return math.inf  # subexponential tail: no MGF to the right of 0
        if f == "weibull" and p["k"] == 1:
            lam = p["lam"]
            return math.inf if s * lam >= 1 else s * lam / (1.0 - s * lam)
        if abs(s) * self.interevent_moment(1) < SERIES_MAX:
            val = self._mgf_series(s)
            if val is not None:
                return val
        try:
            with np.errstate(over="ignore"):
                val = self.expect_interevent(lambda t: np.expm1(s * t), vectorized=True)
        except DivergenceDetectedError:
            return math.inf
        return float(val)

    def _mgf_series(self, s):
        """sum_j s^j <tau_s^j> / j!, or None when the terms stop shrinking.

        Quadrature of expm1(s tau) is only good to its absolute tolerance; the
        series keeps full relative accuracy for small s, which the gene-noise
        formulas need (they divide by (gamma <tau_s>)^2).
        """
        total = 0.0
        prev = math.inf
        for j in range(1, 80):
            try:
                m = self.interevent_moment(j)
                term = s**j * m / math.factorial(j)
            except OverflowError:
                return None
            if not math.isfinite(term):
                return None
            if not abs(term) < abs(prev):
                return None
            total += term
            if abs(term) <= 1e-17 * abs(total):
                return total
            prev = term
        return None

    def mgf(self, s):
        """<e^{s tau_s}>."""
        return 1.0 + self.mgf_minus_one(s)

    def timer_mgf(self, s):
        """<e^{s tau}> under the stationary timer law."""
        s = float(s)
        if s == 0:
            return 1.0
        return self.mgf_minus_one(s) / (s * self.interevent_moment(1))

    def laplace_complement(self, s):
        """1 - <e^{-s tau_s}> for s >= 0, accurate for small s."""
        return -self.mgf_minus_one(-s)

    # -- expectations -------------------------------------------------------
    def expect_interevent(self, g, vectorized=False, full_output=False):
        """E[g(tau_s)] for a scalar- or array-valued g."""
        G = _batched(g, vectorized)
        if self.family == "deterministic":
            val = G(np.array([self.params["T"]]))[0]
            err = np.zeros_like(val)
        elif self.family == "empirical":
            val = _chunked_mean(G, self.samples)
            err = np.zeros_like(val)
        else:
            law = self._law
            val, err = _expect_continuous(self, law.pdf, G)
        return (val, err) if full_output else val

    def expect_timer(self, g, vectorized=False, full_output=False):
        """E[g(tau)] with tau drawn from the stationary timer law."""
        G = _batched(g, vectorized)
        m = self.interevent_moment(1)
        tol = quad_tol() * m
        if self.family == "deterministic":
            T = self.params["T"]
            res = integrate(G, 0.0, T, atol=tol)
            val, err = res.value / T, res.error / T
        elif self.family == "empirical":
            s = self.samples
            knots = np.unique(s)

            def weighted(x):
                return _weight(self.survival(x), G(x))

            res = integrate(weighted, 0.0, float(knots[-1]), atol=tol, breakpoints=knots[:-1],
                            limit=4000 + knots.size)
            val, err = res.value / m, res.error / m
        else:
            sf = self._law.sf
            val, err = _expect_continuous(self, lambda x: sf(x) / m, G)
        return (val, err) if full_output else val

    # -- sampling -------------------------------------------------------------
    def sample_interevent(self, rng, size=None):
        """Draw inter-event times from a numpy Generator."""
        p = self.params
        f = self.family
        if f == "exponential":
            return rng.exponential(p["mean"], size)
        if f == "gamma":
            return rng.gamma(p["shape"], p["scale"], size)
        if f == "weibull":
            return p["lam"] * rng.weibull(p["k"], size)
        if f == "lognormal":
            return rng.lognormal(p["mu_log"], p["sigma_log"], size)
        if f == "lomax":
            return p["scale"] * rng.pareto(p["alpha"], size)
        if f == "deterministic":
            return p["T"] if size is None else np.full(size, p["T"])
        return rng.choice(self.samples, size)

    def describe(self):
        if self.family == "empirical":
            return f"empirical(n={self.samples.size})"
        inner = ", ".join(f"{k}={v:g}" for k, v in self.params.items())
        return f"{self.family}({inner})"

    def __repr__(self):
        return f"EventTimeDistribution.{self.describe()}"


@dataclass(frozen=True)
class TimerLaw:
    """Stationary law of the time elapsed since the last event."""

    parent: EventTimeDistribution

    def pdf(self, tau):
        return self.parent.survival(tau) / self.parent.mean_interevent

    def moment(self, i):
        return self.parent.timer_moment(i)

    def expect(self, g, vectorized=False):
        return self.parent.expect_timer(g, vectorized=vectorized)


def _positive(**kw):
    for name, v in kw.items():
        if not (isinstance(v, (int, float, np.floating, np.integer)) and math.isfinite(v) and v > 0):
            raise ValueError(f"{name} must be a positive finite number, got {v!r}")


def _batched(g, vectorized):
    if vectorized:
        return lambda x: np.asarray(g(x), dtype=float)

    def loop(x):
        return np.stack([np.asarray(g(float(t)), dtype=float) for t in x])

    return loop


def _weight(w, y):
    """w * y broadcast over trailing axes, with 0 * inf treated as 0."""
    w = np.asarray(w, dtype=float).reshape((-1,) + (1,) * (y.ndim - 1))
    bad = ~np.isfinite(y) & (w > 0)
    if np.any(bad):
        raise DivergenceDetectedError("integrand is not finite where the weight is positive")
    with np.errstate(invalid="ignore", over="ignore"):
        out = w * y
    return np.where(w > 0, out, 0.0)


def _chunked_mean(G, xs, chunk=4096):
    total = None
    for start in range(0, xs.size, chunk):
        part = G(xs[start:start + chunk]).sum(axis=0)
        total = part if total is None else total + part
    return total / xs.size


def _expect_continuous(dist, weight, G):
    """Integrate weight*G over [0, q_0.999] then over doubling tail pieces."""
    tol = quad_tol()

    def integrand(x):
        return _weight(weight(x), G(x))

    q_bulk = dist.quantile(BULK_QUANTILE)
    cap = dist.quantile_cap
    brk = [dist.quantile(q) for q in (0.01, 0.25, 0.5, 0.75, 0.99)]
    res = integrate(integrand, 0.0, q_bulk, atol=tol, breakpoints=brk)
    value = res.value
    error = res.error
    lo = q_bulk
    prev = None
    nondecay = 0
    for _ in range(MAX_TAIL_PIECES):
        hi = 2.0 * lo
        piece = integrate(integrand, lo, hi, atol=tol)
        value = value + piece.value
        error = error + piece.error
        size = float(np.max(np.abs(piece.value))) if piece.value.size else 0.0
        ratio = size / prev if prev else 0.0
        if prev is not None and size >= prev and size > 0:
            nondecay += 1
            if nondecay >= MAX_NONDECAY:
                raise DivergenceDetectedError(
                    "integrand does not decay in the tail; the expectation does not exist"
                )
        else:
            nondecay = 0
        prev = size
        lo = hi
        # geometric bound on everything beyond the last piece
        rest = size * ratio / (1.0 - ratio) if ratio < 1 else math.inf
        if lo >= cap and rest <= 1e-3 * tol:
            break
        if float(np.max(weight(np.array([lo])))) == 0.0:
            rest = 0.0
            break
    else:
        raise DivergenceDetectedError("tail integration did not terminate")
    return value, error + rest
