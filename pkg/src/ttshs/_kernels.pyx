# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled batched matrix exponential.

Mirrors ``_kernels_py.expm_stack`` step for step, including the order of
every product and the left solve, so both backends round the same way (this
matters for strongly non-normal matrices).  Buffers are row-major; BLAS and
LAPACK see them as transposes, which ``_mm`` and ``_solve`` undo.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, ceil, log2, ldexp, pow, INFINITY
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemm
from scipy.linalg.cython_lapack cimport dgesv

cnp.import_array()

cdef double[14] B13
cdef double[10] B9
cdef double[8] B7
cdef double[6] B5
cdef double[4] B3

B13[:] = [64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
          1187353796428800.0, 129060195264000.0, 10559470521600.0,
          670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
          16380.0, 182.0, 1.0]
B9[:] = [17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
         2162160.0, 110880.0, 3960.0, 90.0, 1.0]
B7[:] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0]
B5[:] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0]
B3[:] = [120.0, 60.0, 12.0, 1.0]

cdef double TH3 = 1.495585217958292e-2
cdef double TH5 = 2.539398330063230e-1
cdef double TH7 = 9.504178996162932e-1
cdef double TH9 = 2.097847961257068e0
cdef double TH13 = 4.25
cdef double LOG2_U = -53.0
cdef double ELL3 = 100800.0
cdef double ELL5 = 10059033600.0
cdef double ELL7 = 4487938430976000.0
cdef double ELL9 = 5914384781877411840000.0
cdef double ELL13 = 113250775606021113483283660800000000.0


cdef inline void _mm(double *a, double *b, double *c, int n) nogil:
    """c = a @ b for row-major buffers (column-major b^T a^T = (ab)^T)."""
    cdef double one = 1.0, zero = 0.0
    cdef char nt = b'N'
    dgemm(&nt, &nt, &n, &n, &n, &one, b, &n, a, &n, &zero, c, &n)


cdef inline void _transpose(double *src, double *dst, int n) nogil:
    cdef int i, j
    for i in range(n):
        for j in range(n):
            dst[j * n + i] = src[i * n + j]


cdef inline void _copy(double *src, double *dst, int nn) nogil:
    cdef int i
    for i in range(nn):
        dst[i] = src[i]


cdef inline double _norm1(double *A, int n) nogil:
    cdef int i, j
    cdef double best = 0.0, colsum
    for j in range(n):
        colsum = 0.0
        for i in range(n):
            colsum += fabs(A[i * n + j])
        if colsum > best:
            best = colsum
    return best


cdef inline double _root(double x, double k) nogil:
    if x != x:
        return INFINITY
    return pow(x, 1.0 / k)


cdef int _ell(double *A, int n, int m, double c, double scale_log2, double *v, double *w) nogil:
    """Extra squarings for the degree-m approximant of 2^scale_log2 * A.

    ||abs(A)^(2m+1)||_1 is accumulated in log2 so it cannot overflow.
    """
    cdef int i, j, p
    cdef double lognum = 0.0, top, den, val
    for j in range(n):
        v[j] = 1.0
    for p in range(2 * m + 1):
        top = 0.0
        for j in range(n):
            w[j] = 0.0
            for i in range(n):
                w[j] += v[i] * fabs(A[i * n + j])
            if w[j] > top:
                top = w[j]
        if top == 0.0:
            return 0
        for j in range(n):
            v[j] = w[j] / top
        lognum += log2(top)
    den = _norm1(A, n)
    if den == 0.0:
        return 0
    # alpha(cA) = c^(2m) alpha(A)
    val = ceil((lognum - log2(den * c) + 2 * m * scale_log2 - LOG2_U) / (2 * m))
    return <int>val if val > 0 else 0


cdef int _plan(double *A, int n, double *work, int *s_out) nogil:
    """Pade degree for ``A`` (returned) and squarings (in ``s_out``).

    Leaves A^2, A^4, A^6, A^8 of the unscaled matrix in the work buffers.
    """
    cdef int nn = n * n
    cdef double *A2 = work
    cdef double *A4 = work + nn
    cdef double *A6 = work + 2 * nn
    cdef double *A8 = work + 6 * nn
    cdef double *A10 = work + 7 * nn
    cdef double *v = work + 8 * nn
    cdef double *w = v + n
    cdef int s = 0, degree
    cdef double d4, d6, d8, d10, eta1, eta3, eta5, scale

    _mm(A, A, A2, n)
    _mm(A2, A2, A4, n)
    _mm(A4, A2, A6, n)
    _mm(A4, A4, A8, n)
    _mm(A8, A2, A10, n)
    d4 = _root(_norm1(A4, n), 4.0)
    d6 = _root(_norm1(A6, n), 6.0)
    d8 = _root(_norm1(A8, n), 8.0)
    d10 = _root(_norm1(A10, n), 10.0)
    eta1 = d4 if d4 > d6 else d6
    eta3 = d6 if d6 > d8 else d8
    eta5 = d8 if d8 > d10 else d10
    if eta3 < eta5:
        eta5 = eta3
    # d_k <= ||A||_1 always; also keeps eta5 finite when powers overflow
    scale = _norm1(A, n)
    if scale < eta5:
        eta5 = scale
    if eta5 != eta5 or eta5 == INFINITY:
        eta5 = 0.0

    if eta1 <= TH3 and _ell(A, n, 3, ELL3, 0.0, v, w) == 0:
        degree = 3
    elif eta1 <= TH5 and _ell(A, n, 5, ELL5, 0.0, v, w) == 0:
        degree = 5
    elif eta3 <= TH7 and _ell(A, n, 7, ELL7, 0.0, v, w) == 0:
        degree = 7
    elif eta3 <= TH9 and _ell(A, n, 9, ELL9, 0.0, v, w) == 0:
        degree = 9
    else:
        degree = 13
        if eta5 > 0.0:
            s = <int>ceil(log2(eta5 / TH13))
            if s < 0:
                s = 0
        s += _ell(A, n, 13, ELL13, -s, v, w)
    s_out[0] = s
    return degree


cdef int _expm_one(double *A, double *out, int n, double *work, int *ipiv) nogil:
    """exp(A) into ``out``; ``A`` is overwritten.  Returns LAPACK info."""
    cdef int nn = n * n
    cdef double *A2 = work
    cdef double *A4 = work + nn
    cdef double *A6 = work + 2 * nn
    cdef double *T1 = work + 3 * nn
    cdef double *U = work + 4 * nn
    cdef double *V = work + 5 * nn
    cdef double *A8 = work + 6 * nn
    cdef int i, j, s = 0, degree, info = 0
    cdef double scale
    cdef double *b

    degree = _plan(A, n, work, &s)
    if s > 0:
        scale = ldexp(1.0, -s)
        for i in range(nn):
            A[i] *= scale
        _mm(A, A, A2, n)
        _mm(A2, A2, A4, n)
        _mm(A4, A2, A6, n)

    if degree == 13:
        b = B13
        for i in range(nn):
            T1[i] = b[13] * A6[i] + b[11] * A4[i] + b[9] * A2[i]
        _mm(A6, T1, U, n)
        for i in range(nn):
            U[i] += b[7] * A6[i] + b[5] * A4[i] + b[3] * A2[i]
        for i in range(n):
            U[i * n + i] += b[1]
        _copy(U, T1, nn)
        _mm(A, T1, U, n)
        for i in range(nn):
            T1[i] = b[12] * A6[i] + b[10] * A4[i] + b[8] * A2[i]
        _mm(A6, T1, V, n)
        for i in range(nn):
            V[i] += b[6] * A6[i] + b[4] * A4[i] + b[2] * A2[i]
        for i in range(n):
            V[i * n + i] += b[0]
    else:
        if degree == 3:
            b = B3
        elif degree == 5:
            b = B5
        elif degree == 7:
            b = B7
        else:
            b = B9
        # T1 accumulates the odd part, V the even part; A4.. hold powers of A2
        for i in range(nn):
            T1[i] = b[3] * A2[i]
            V[i] = b[2] * A2[i]
        for i in range(n):
            T1[i * n + i] += b[1]
            V[i * n + i] += b[0]
        if degree >= 5:
            for i in range(nn):
                T1[i] += b[5] * A4[i]
                V[i] += b[4] * A4[i]
        if degree >= 7:
            for i in range(nn):
                T1[i] += b[7] * A6[i]
                V[i] += b[6] * A6[i]
        if degree >= 9:
            for i in range(nn):
                T1[i] += b[9] * A8[i]
                V[i] += b[8] * A8[i]
        _mm(A, T1, U, n)

    # solve (V - U) X = V + U; transposed copies are the column-major operands
    for i in range(nn):
        A8[i] = V[i] - U[i]
        V[i] = V[i] + U[i]
    _transpose(A8, T1, n)
    _transpose(V, U, n)
    dgesv(&n, &n, T1, &n, ipiv, U, &n, &info)
    if info != 0:
        return info
    _transpose(U, out, n)
    for j in range(s):
        _copy(out, T1, nn)
        _mm(T1, T1, out, n)
    return 0


def expm_stack(Ms):
    """Exponentials of a stack of square matrices, shape (N, m, m)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3] src = np.array(Ms, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t count = src.shape[0]
    cdef int n = <int>src.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.empty_like(src)
    if count == 0 or n == 0:
        return out
    cdef int nn = n * n
    cdef double *work = <double *>malloc((8 * nn + 2 * n) * sizeof(double))
    cdef int *ipiv = <int *>malloc(n * sizeof(int))
    cdef double *sp = &src[0, 0, 0]
    cdef double *op = &out[0, 0, 0]
    cdef Py_ssize_t k
    cdef int info = 0
    if work == NULL or ipiv == NULL:
        free(work)
        free(ipiv)
        raise MemoryError()
    try:
        with nogil:
            for k in range(count):
                info = _expm_one(sp + k * nn, op + k * nn, n, work, ipiv)
                if info != 0:
                    break
    finally:
        free(work)
        free(ipiv)
    if info != 0:
        raise np.linalg.LinAlgError("singular Pade denominator (info=%d)" % info)
    return out


def select_degree(Ms):
    """(degree, squarings) per matrix of the stack ``Ms``."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3] src = np.array(Ms, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t count = src.shape[0], k
    cdef int n = <int>src.shape[1]
    cdef int nn = n * n
    cdef int s = 0
    degree = np.zeros(count, dtype=np.int64)
    squarings = np.zeros(count, dtype=np.int64)
    if count == 0 or n == 0:
        return degree, squarings
    cdef double *work = <double *>malloc((8 * nn + 2 * n) * sizeof(double))
    if work == NULL:
        raise MemoryError()
    try:
        for k in range(count):
            degree[k] = _plan(&src[k, 0, 0], n, work, &s)
            squarings[k] = s
    finally:
        free(work)
    return degree, squarings


def expm_batch(M, taus):
    """``exp(M * tau)`` for every tau, shape (len(taus), m, m)."""
    M = np.asarray(M, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64).reshape(-1)
    return expm_stack(taus[:, None, None] * M[None, :, :])
