"""Dense linear-algebra helpers.

Two numeric modes are supported:

* float64 arrays go through LAPACK (Cholesky with a condition estimate,
  triangular solves via ``trsm``);
* object arrays of ``gmpy2.mpfr`` go through plain substitution loops.  This
  extended-precision mode exists so that divergent SGD runs can still be
  compared against their closed forms to an absolute tolerance.
"""

from contextlib import contextmanager

import gmpy2
import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .errors import NumericalError

COND_LIMIT = 1e12
DEFAULT_BITS = 512


@contextmanager
def extended_precision(bits=DEFAULT_BITS):
    """Set the gmpy2 working precision for the duration of the block."""
    with gmpy2.context(gmpy2.get_context(), precision=bits):
        yield


def working_precision():
    return gmpy2.get_context().precision


def extended(a):
    """Lift a float array to an object array of mpfr (exact conversion)."""
    a = np.asarray(a, dtype=float)
    out = np.empty(a.shape, dtype=object)
    flat = out.reshape(-1)
    for i, v in enumerate(a.reshape(-1)):
        flat[i] = gmpy2.mpfr(float(v))
    return out


def to_float(a):
    return np.asarray(a, dtype=object).astype(float) if is_extended(a) else np.asarray(a, dtype=float)


def is_extended(*arrays):
    return any(isinstance(a, np.ndarray) and a.dtype == object for a in arrays)


def lift(value, *like):
    """Return ``value`` as an mpfr if any of ``like`` is extended, else float."""
    if is_extended(*like):
        return gmpy2.mpfr(value)
    return float(value)


def eye(n, like=None):
    if like is not None and is_extended(like):
        out = np.zeros((n, n), dtype=object)
        for i in range(n):
            out[i, i] = gmpy2.mpfr(1)
        return out
    return np.eye(n)


def solve_triangular(T, B, lower=False):
    """Solve ``T x = B`` for triangular ``T`` by back/forward substitution."""
    if T.shape[0] == 0:
        return np.zeros(B.shape, dtype=B.dtype)
    if is_extended(T, B):
        return _substitute(T, B, lower)
    return scipy.linalg.solve_triangular(T, B, lower=lower, check_finite=False)


def _substitute(T, B, lower):
    n = T.shape[0]
    vec = B.ndim == 1
    Bm = B.reshape(n, -1)
    x = np.empty(Bm.shape, dtype=object)
    order = range(n) if lower else range(n - 1, -1, -1)
    for i in order:
        if lower:
            acc = Bm[i] - T[i, :i] @ x[:i] if i else Bm[i].copy()
        else:
            acc = Bm[i] - T[i, i + 1:] @ x[i + 1:] if i < n - 1 else Bm[i].copy()
        x[i] = acc / T[i, i]
    return x.reshape(-1) if vec else x


def rsolve_triangular(B, T, lower=False):
    """Return ``B T^{-1}`` (row-vector convention) without forming the inverse."""
    return solve_triangular(T.T, B.T, lower=not lower).T


def _cholesky_extended(A, what):
    n = A.shape[0]
    L = np.empty((n, n), dtype=object)
    L[...] = gmpy2.mpfr(0)
    for j in range(n):
        d = A[j, j] - (L[j, :j] @ L[j, :j] if j else 0)
        if not d > 0:
            raise NumericalError(f"{what} is not positive definite (pivot {float(d):.3e})", condition=np.inf)
        L[j, j] = gmpy2.sqrt(d)
        if j + 1 < n:
            L[j + 1:, j] = (A[j + 1:, j] - (L[j + 1:, :j] @ L[j, :j] if j else 0)) / L[j, j]
    return L


def cho_factor(A, cond_limit=COND_LIMIT, what="matrix"):
    """Cholesky-factor a symmetric positive-definite matrix.

    Raises NumericalError when the factorization fails or the reciprocal
    condition estimate from LAPACK ``pocon`` puts the condition number
    above ``cond_limit``.  Extended arrays get a plain lower factor and no
    condition guard (that is what the extra precision is for).
    """
    if is_extended(A):
        return (_cholesky_extended(A, what), True)
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if n == 0:
        return (A.copy(), True)
    try:
        c, low = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite: {exc}", condition=np.inf) from exc
    cond = condition_estimate((c, low), A)
    if not np.isfinite(cond) or cond > cond_limit:
        raise NumericalError(
            f"{what} is too ill-conditioned (condition estimate {cond:.3e} > {cond_limit:.0e})",
            condition=cond,
        )
    return (c, low)


def condition_estimate(factor, A):
    c, low = factor
    anorm = np.abs(A).sum(axis=0).max()
    rcond, info = lapack.dpocon(c, anorm, uplo="L" if low else "U")
    if info != 0 or rcond <= 0:
        return np.inf
    return 1.0 / rcond


def cho_solve(factor, B):
    c, low = factor
    if c.shape[0] == 0:
        return np.zeros(np.shape(B))
    if is_extended(c, B):
        L = c if is_extended(c) else extended(np.tril(c) if low else np.triu(c).T)
        return _substitute(L.T, _substitute(L, np.asarray(B), True), False)
    return scipy.linalg.cho_solve((c, low), B, check_finite=False)


def solve(A, B):
    """General square solve ``A x = B`` (LU with partial pivoting)."""
    if not is_extended(A, B):
        try:
            return scipy.linalg.solve(A, B, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"singular system: {exc}", condition=np.inf) from exc
    n = A.shape[0]
    vec = np.ndim(B) == 1
    M = np.array(A, dtype=object)
    R = np.array(np.reshape(B, (n, -1)), dtype=object)
    for j in range(n):
        piv = j + int(np.argmax([abs(v) for v in M[j:, j]]))
        if M[piv, j] == 0:
            raise NumericalError("singular system", condition=np.inf)
        if piv != j:
            M[[j, piv]] = M[[piv, j]]
            R[[j, piv]] = R[[piv, j]]
        f = M[j + 1:, j] / M[j, j]
        M[j + 1:] = M[j + 1:] - np.outer(f, M[j])
        R[j + 1:] = R[j + 1:] - np.outer(f, R[j])
    x = _substitute(M, R, False)
    return x.reshape(-1) if vec else x


def spd_solve(A, B, cond_limit=COND_LIMIT, what="matrix"):
    return cho_solve(cho_factor(A, cond_limit, what), B)
