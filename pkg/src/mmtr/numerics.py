"""Dense linear-algebra kernels shared by the trace-regression code.

Conventions used throughout the package:

* matrices are ``numpy`` float64 arrays,
* ``vec`` stacks columns (so ``vec(P @ Q @ R.T) == kron(R, P) @ vec(Q)``),
* PSD square roots come from symmetric eigendecompositions, which handle
  rank-deficient inputs uniformly.
"""

import numpy as np
from dataclasses import dataclass


class NotSymmetric(ValueError):
    """Matrix handed to psd_sqrt is not symmetric within tolerance."""


class NotPsd(ValueError):
    """Matrix handed to psd_sqrt has an eigenvalue below -tol * scale."""


class ZeroRow(ValueError):
    """Row chosen for Householder normalization has (numerically) zero norm."""


# relative tolerance for the symmetry check in psd_sqrt
_SYM_RTOL = 1e-8


def vec(m):
    """Column-stacking vectorization of a matrix."""
    return np.asarray(m, dtype=float).reshape(-1, order="F")


def unvec(v, rows, cols):
    """Inverse of vec: reshape a vector into a rows x cols matrix column-wise."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size != rows * cols:
        raise ValueError(
            "cannot unvec length-%d vector into %dx%d matrix" % (v.size, rows, cols)
        )
    return v.reshape((rows, cols), order="F")


def kron(a, b):
    """Kronecker product with block structure a[i, j] * b."""
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def vec_transpose_perm(rows, cols):
    """Permutation p with vec(M.T) == vec(M)[p] for any rows x cols matrix M."""
    idx = np.arange(rows * cols).reshape((rows, cols), order="F")
    return idx.T.reshape(-1, order="F")


@dataclass
class PsdSqrt:
    """Square-root factor of a PSD matrix: factor @ factor.T reproduces it."""

    factor: np.ndarray  # (d, rank), columns are eigvec * sqrt(eigval)
    rank: int
    tolerance_used: float


def psd_sqrt(a, tol=1e-10):
    """Eigendecomposition-based square root of a symmetric PSD matrix.

    Eigenvalues in [-tol*s, tol*s] (s = spectral scale) are truncated to
    zero; anything below -tol*s raises NotPsd.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("psd_sqrt expects a square matrix, got %r" % (a.shape,))
    d = a.shape[0]
    if d == 0:
        return PsdSqrt(factor=np.zeros((0, 0)), rank=0, tolerance_used=0.0)
    scale = max(1.0, float(np.max(np.abs(a))))
    asym = float(np.max(np.abs(a - a.T)))
    if asym > _SYM_RTOL * scale:
        raise NotSymmetric("asymmetry %.3e exceeds %.3e" % (asym, _SYM_RTOL * scale))
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    s = float(np.max(np.abs(w)))
    cut = tol * s
    if float(w[0]) < -cut:
        raise NotPsd("eigenvalue %.3e below -%.3e" % (float(w[0]), cut))
    keep = w > cut
    factor = v[:, keep] * np.sqrt(w[keep])
    return PsdSqrt(factor=factor, rank=int(np.count_nonzero(keep)), tolerance_used=cut)


def pinv_factor(s):
    """Moore-Penrose pseudoinverse of a PsdSqrt factor.

    The factor's columns are mutually orthogonal (eigvec * sqrt(eigval)), so
    the pseudoinverse is diag(1/col_norms**2) @ factor.T.
    """
    f = s.factor
    if s.rank == 0:
        return np.zeros((0, f.shape[0]))
    colsq = np.einsum("ij,ij->j", f, f)
    return (f / colsq).T


def householder_normalize(l, j):
    """Rotate and rescale so row j of the factor becomes the first basis vector.

    Returns (c * l @ Q.T, c) with Q orthonormal and c = 1/||l[j]||; the Gram
    matrix of the output equals c**2 times the Gram of the input.
    """
    l = np.asarray(l, dtype=float)
    if l.ndim != 2:
        raise ValueError("householder_normalize expects a matrix")
    if not 0 <= j < l.shape[0]:
        raise ValueError("row index %d out of range" % j)
    row = l[j].copy()
    nrm = float(np.linalg.norm(row))
    fro = float(np.linalg.norm(l))
    if nrm <= np.finfo(float).eps * max(1.0, fro):
        raise ZeroRow("row %d has norm %.3e" % (j, nrm))
    # Reflect row onto -/+ e1 away from cancellation, then flip the sign of the
    # first output coordinate if needed so the row lands exactly on +e1.  When
    # the row already lies on +e1 this composes to the identity matrix.
    alpha = -nrm if row[0] >= 0 else nrm
    v = row.copy()
    v[0] -= alpha
    q = np.eye(l.shape[1]) - (2.0 / float(v @ v)) * np.outer(v, v)
    if alpha < 0:
        q[0] *= -1.0
    out = (l @ q.T) / nrm
    out[j] = 0.0
    out[j, 0] = 1.0  # exact by construction; avoid residual roundoff
    return out, 1.0 / nrm


def nearest_kron(sigma, q1, q2, max_iter=500, tol=1e-14):
    """Closest (Frobenius) Kronecker factorization sigma ~ s2 kron s1.

    Rearranges sigma so separable inputs become rank one, then extracts the
    leading singular pair by deterministic power iteration.  Returns
    (s1, s2) with s1 q1 x q1 and s2 q2 x q2.  Diagnostic only: the factors
    are not forced to be PSD.
    """
    sigma = np.asarray(sigma, dtype=float)
    d = q1 * q2
    if sigma.shape != (d, d):
        raise ValueError("nearest_kron expects a %dx%d matrix, got %r" % (d, d, sigma.shape))
    # r[b*q2 + a, jj*q1 + i] = sigma[a*q1 + i, b*q1 + jj] = s2[a,b] * s1[i,jj]
    r = sigma.reshape(q2, q1, q2, q1).transpose(2, 0, 3, 1).reshape(q2 * q2, q1 * q1)
    v = np.full(q1 * q1, 1.0 / q1)
    for _ in range(max_iter):
        u = r @ v
        un = float(np.linalg.norm(u))
        if un == 0.0:
            return np.zeros((q1, q1)), np.zeros((q2, q2))
        u /= un
        v_new = r.T @ u
        vn = float(np.linalg.norm(v_new))
        if vn == 0.0:
            break
        v_new /= vn
        if min(np.linalg.norm(v_new - v), np.linalg.norm(v_new + v)) < tol:
            v = v_new
            break
        v = v_new
    u = r @ v
    sval = float(np.linalg.norm(u))
    if sval == 0.0:
        return np.zeros((q1, q1)), np.zeros((q2, q2))
    u /= sval
    root = np.sqrt(sval)
    s1 = unvec(v * root, q1, q1)
    s2 = unvec(u * root, q2, q2)
    if np.trace(s1) < 0:
        s1, s2 = -s1, -s2
    return s1, s2
