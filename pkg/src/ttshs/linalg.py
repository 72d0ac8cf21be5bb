"""Dense linear-algebra primitives used by the moment formulas.

Matrix exponentials come from the batched kernel selected in ``_backend``;
everything else is thin numpy.
"""

from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import EigensolverFailure, ExpmOverflowError, ShapeMismatchError


def _square(M, name="M"):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeMismatchError(f"{name} must be square, got shape {M.shape}")
    return M


def matrix_exponential(M):
    """exp(M) by scaling and squaring with a Pade approximant."""
    M = _square(M)
    if not np.all(np.isfinite(M)):
        raise ExpmOverflowError("matrix has non-finite entries")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _backend.expm_stack(M[None])[0]
    if not np.all(np.isfinite(out)):
        raise ExpmOverflowError("exp(M) is not representable in double precision")
    return out


def expm_batch(M, taus):
    """exp(M*tau) for an array of tau values; shape (k, n, n)."""
    M = _square(M)
    with np.errstate(over="ignore", invalid="ignore"):
        return _backend.expm_batch(M, np.asarray(taus, dtype=float))


def augment(A, a_hat):
    """The (n+1)x(n+1) generator [[A, a],[0, 0]] of the affine flow."""
    A = _square(A, "A")
    a_hat = np.asarray(a_hat, dtype=float).reshape(-1)
    n = A.shape[0]
    if a_hat.shape != (n,):
        raise ShapeMismatchError(f"a_hat must have length {n}, got {a_hat.shape}")
    G = np.zeros((n + 1, n + 1))
    G[:n, :n] = A
    G[:n, n] = a_hat
    return G


@dataclass(frozen=True)
class FlowSegment:
    """Flow of dx/dt = A x + a over an interval of length tau.

    ``x(tau) = state_transition @ x(0) + forced_response``.
    """

    state_transition: np.ndarray
    forced_response: np.ndarray


def flow_segment(A, a_hat, tau):
    """One augmented exponential gives both e^{A tau} and the forced response.

    Works for singular A (the forced response of A = 0 is tau * a).
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    G = augment(A, a_hat)
    n = G.shape[0] - 1
    E = matrix_exponential(G * tau)
    return FlowSegment(E[:n, :n].copy(), E[:n, n].copy())


def kron(M1, M2):
    return np.kron(np.atleast_2d(M1), np.atleast_2d(M2))


def vec(M):
    """Column-stacking vectorisation."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return M.reshape(-1, order="F")


def unvec(v, n):
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != n * n:
        raise ShapeMismatchError(f"cannot unvec length {v.size} into {n}x{n}")
    return v.reshape((n, n), order="F")


def spectral_radius(M):
    """max |eigenvalue| (LAPACK geev: balancing + Hessenberg QR)."""
    M = _square(M)
    if not np.all(np.isfinite(M)):
        return float("inf")
    try:
        ev = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise EigensolverFailure(str(exc)) from exc
    return float(np.max(np.abs(ev))) if ev.size else 0.0


def kron_sum(A):
    """I (x) A + A (x) I, the generator of vec(x x^T) under dx/dt = A x."""
    A = _square(A)
    eye = np.eye(A.shape[0])
    return np.kron(eye, A) + np.kron(A, eye)


def is_hurwitz(A, margin=0.0):
    ev = np.linalg.eigvals(_square(A))
    return bool(np.all(ev.real < -margin))
