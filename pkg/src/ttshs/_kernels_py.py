"""Pure-numpy batched matrix exponential (fallback for the compiled core).

Same algorithm as ``_kernels.pyx``: Pade approximants of degree 3, 5, 7, 9
or 13 with scaling and squaring (Al-Mohy and Higham, SIAM J. Matrix Anal.
Appl. 31, 2009).  The degree and the number of squarings come from
d_k = ||A^k||_1^(1/k) rather than ||A||_1, plus a backward-error correction,
so strongly non-normal matrices are not over-scaled.
"""

import numpy as np

# (degree, 1-norm threshold)
THETA = (
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
)
THETA13 = 4.25
# leading coefficients of the Pade backward-error series, for ell()
ELL_C = {3: 100800.0, 5: 10059033600.0, 7: 4487938430976000.0, 9: 5914384781877411840000.0,
         13: 113250775606021113483283660800000000.0}
UNIT_ROUNDOFF = 2.0**-53

PADE_COEFFS = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
         16380.0, 182.0, 1.0),
}


def _norm1(X):
    return np.abs(X).sum(axis=-2).max(axis=-1)


def _ell(A, m):
    """Extra squarings needed so the degree-m approximant is accurate, per matrix.

    ||abs(A)^(2m+1)||_1 is accumulated in log2 so it cannot overflow.
    """
    absA = np.abs(A)
    v = np.ones(A.shape[:-1])
    lognum = np.zeros(A.shape[0])
    for _ in range(2 * m + 1):
        v = np.einsum("ki,kij->kj", v, absA)
        top = v.max(axis=-1)
        pos = top > 0
        with np.errstate(invalid="ignore"):
            v[pos] /= top[pos, None]
        with np.errstate(divide="ignore"):
            lognum += np.log2(top)
    den = _norm1(A) * ELL_C[m]
    out = np.zeros(A.shape[0], dtype=int)
    ok = np.isfinite(lognum) & (den > 0)
    if np.any(ok):
        val = np.ceil((lognum[ok] - np.log2(den[ok]) - np.log2(UNIT_ROUNDOFF)) / (2 * m))
        out[ok] = np.maximum(val, 0).astype(int)
    return out


def select_degree(Ms):
    """(degree, squarings) per matrix of the stack ``Ms``."""
    k = Ms.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):
        A2 = Ms @ Ms
        A4 = A2 @ A2
        A6 = A4 @ A2
        A8 = A4 @ A4
        A10 = A8 @ A2
        d4, d6, d8, d10 = (np.nan_to_num(_norm1(P), nan=np.inf) ** (1.0 / e)
                           for P, e in ((A4, 4), (A6, 6), (A8, 8), (A10, 10)))
    eta1 = np.maximum(d4, d6)
    eta3 = np.maximum(d6, d8)
    eta5 = np.minimum(eta3, np.maximum(d8, d10))
    # d_k <= ||A||_1 always; also keeps eta5 finite when powers overflow
    eta5 = np.minimum(eta5, _norm1(Ms))
    eta5[~np.isfinite(eta5)] = 0.0
    degree = np.full(k, 13)
    squarings = np.zeros(k, dtype=int)
    todo = np.ones(k, dtype=bool)
    for deg, theta, eta in ((3, THETA[0][1], eta1), (5, THETA[1][1], eta1), (7, THETA[2][1], eta3),
                            (9, THETA[3][1], eta3)):
        cand = np.flatnonzero(todo & (eta <= theta))
        if cand.size:
            hit = cand[_ell(Ms[cand], deg) == 0]
            degree[hit] = deg
            todo[hit] = False
    rest = np.flatnonzero(todo)
    if rest.size:
        e5 = eta5[rest]
        s = np.zeros(rest.size, dtype=int)
        pos = e5 > 0
        with np.errstate(divide="ignore"):
            s[pos] = np.maximum(np.ceil(np.log2(e5[pos] / THETA13)), 0).astype(int)
        s += _ell(Ms[rest] * np.ldexp(1.0, -s)[:, None, None], 13)
        squarings[rest] = s
    return degree, squarings


def _pade(A, degree):
    b = PADE_COEFFS[degree]
    n = A.shape[-1]
    ident = np.broadcast_to(np.eye(n), A.shape)
    A2 = A @ A
    if degree == 13:
        A4 = A2 @ A2
        A6 = A4 @ A2
        U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
                 + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
        V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
             + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident)
    else:
        powers = [ident, A2]
        for _ in range(2, degree // 2 + 1):
            powers.append(powers[-1] @ A2)
        U = sum(b[2 * j + 1] * powers[j] for j in range(degree // 2 + 1))
        U = A @ U
        V = sum(b[2 * j] * powers[j] for j in range(degree // 2 + 1))
    return np.linalg.solve(V - U, V + U)


def expm_stack(Ms):
    """Exponentials of a stack of square matrices, shape (N, m, m)."""
    Ms = np.ascontiguousarray(Ms, dtype=float)
    out = np.empty_like(Ms)
    if Ms.shape[0] == 0:
        return out
    degree, squarings = select_degree(Ms)
    keys = {}
    for i, key in enumerate(zip(degree.tolist(), squarings.tolist())):
        keys.setdefault(key, []).append(i)
    for (degree, s), idx in keys.items():
        idx = np.asarray(idx)
        A = Ms[idx] * np.ldexp(1.0, -s) if s else Ms[idx]
        X = _pade(A, degree)
        for _ in range(s):
            X = X @ X
        out[idx] = X
    return out


def expm_batch(M, taus):
    """``exp(M * tau)`` for every tau, shape (len(taus), m, m)."""
    M = np.asarray(M, dtype=float)
    taus = np.asarray(taus, dtype=float).reshape(-1)
    return expm_stack(taus[:, None, None] * M[None, :, :])
