"""Dense symmetric-matrix primitives for small dimensions.

Everything downstream (estimating-equation solves, correlation handling,
diagnostics) funnels through this module.  Matrices here are tiny (cluster
size and covariate dimension, both well under ~50), so the eigensolver is a
cyclic Jacobi iteration: unconditionally symmetric, deterministic, and with a
sign convention that makes golden tests stable.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NotPositiveDefiniteError

JACOBI_SWEEP_CAP = 100


def _as_matrix(a):
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
        raise InvalidInputError(f"expected a square matrix, got shape {arr.shape}")
    return arr


class SymMatrix:
    """Square matrix stored exactly symmetric; construction symmetrizes."""

    __slots__ = ("a",)

    def __init__(self, entries):
        arr = _as_matrix(entries)
        self.a = 0.5 * (arr + arr.T)

    @property
    def dim(self):
        return self.a.shape[0]

    def __repr__(self):
        return f"SymMatrix(dim={self.dim})"


def _sym_array(S):
    """Accept SymMatrix or array-like; return the symmetrized ndarray."""
    if isinstance(S, SymMatrix):
        return S.a
    arr = _as_matrix(S)
    return 0.5 * (arr + arr.T)


def _require_finite(a):
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix has non-finite entries")


def pd_tolerance(a):
    """Eigenvalue floor below which a matrix is treated as not SPD.

    Scaled by trace/dim so well-conditioned problems in natural units are
    never falsely rejected.
    """
    a = _sym_array(a)
    return 1e-12 * max(1.0, float(np.trace(a)) / a.shape[0])


@dataclass(frozen=True)
class EigenDecomposition:
    values: np.ndarray   # nondecreasing
    vectors: np.ndarray  # orthonormal columns, vectors[:, k] <-> values[k]


def sym_eigen(S):
    """Eigendecomposition of a symmetric matrix via cyclic Jacobi sweeps.

    Eigenvalues are returned in nondecreasing order (stable sort).  Each
    eigenvector's largest-magnitude component is made positive so the output
    is deterministic up to exact ties.
    """
    a = _sym_array(S).copy()
    _require_finite(a)
    d = a.shape[0]
    v = np.eye(d)
    norm = np.linalg.norm(a)
    threshold = 1e-14 * max(norm, 1e-300)

    for _ in range(JACOBI_SWEEP_CAP):
        off = np.sqrt(np.sum(np.square(a - np.diag(np.diag(a)))))
        if off <= threshold:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) == 0.0:
                    continue
                # classic Jacobi rotation zeroing a[p, q]
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rot_p = a[:, p].copy()
                rot_q = a[:, q].copy()
                a[:, p] = c * rot_p - s * rot_q
                a[:, q] = s * rot_p + c * rot_q
                rot_p = a[p, :].copy()
                rot_q = a[q, :].copy()
                a[p, :] = c * rot_p - s * rot_q
                a[q, :] = s * rot_p + c * rot_q
                rot_p = v[:, p].copy()
                rot_q = v[:, q].copy()
                v[:, p] = c * rot_p - s * rot_q
                v[:, q] = s * rot_p + c * rot_q

    values = np.diag(a).copy()
    order = np.argsort(values, kind="stable")
    values = values[order]
    vectors = v[:, order]
    for k in range(d):
        col = vectors[:, k]
        j = int(np.argmax(np.abs(col)))
        if col[j] < 0:
            vectors[:, k] = -col
    return EigenDecomposition(values=values, vectors=vectors)


def _check_spd(eig, a):
    tol = pd_tolerance(a)
    lam_min = float(eig.values[0])
    if lam_min <= tol:
        raise NotPositiveDefiniteError(
            f"matrix is not positive definite (lambda_min={lam_min:.6g}, tol={tol:.6g})",
            lambda_min=lam_min,
        )


def sym_sqrt_pair(S):
    """Return (S^{1/2}, S^{-1/2}) for SPD S, both as SymMatrix."""
    a = _sym_array(S)
    _require_finite(a)
    eig = sym_eigen(a)
    _check_spd(eig, a)
    root = np.sqrt(eig.values)
    half = (eig.vectors * root) @ eig.vectors.T
    inv_half = (eig.vectors / root) @ eig.vectors.T
    return SymMatrix(half), SymMatrix(inv_half)


def spd_inverse(S):
    """Inverse of an SPD matrix, as an ndarray."""
    a = _sym_array(S)
    _require_finite(a)
    eig = sym_eigen(a)
    _check_spd(eig, a)
    return (eig.vectors / eig.values) @ eig.vectors.T


def solve_spd(S, b):
    """Solve S x = b for SPD S."""
    a = _sym_array(S)
    _require_finite(a)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != a.shape[0]:
        raise InvalidInputError(
            f"right-hand side length {b.shape[0]} does not match dim {a.shape[0]}"
        )
    eig = sym_eigen(a)
    _check_spd(eig, a)
    return eig.vectors @ ((eig.vectors.T @ b) / eig.values)


@dataclass(frozen=True)
class MatrixStats:
    spectral_norm: float
    det: float
    trace: float
    lambda_min: float
    lambda_max: float


def matrix_stats(S):
    a = _sym_array(S)
    _require_finite(a)
    eig = sym_eigen(a)
    lam_min = float(eig.values[0])
    lam_max = float(eig.values[-1])
    return MatrixStats(
        spectral_norm=max(abs(lam_min), abs(lam_max)),
        det=float(np.prod(eig.values)),
        trace=float(np.trace(a)),
        lambda_min=lam_min,
        lambda_max=lam_max,
    )
