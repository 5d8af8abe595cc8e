"""Small dense linear algebra used by the problem definitions and the oracles.

Vectors and matrices are plain float64 numpy arrays. The helpers here only add
validation (finite entries, matching shapes) and a direct solve that refuses
near-singular systems instead of returning garbage.
"""
import numpy as np
import scipy.linalg


class DimensionError(ValueError):
    pass


class SingularMatrixError(ArithmeticError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def as_vector(data, name="vector"):
    """Copy ``data`` into a finite, non-empty 1-D float64 array."""
    v = np.array(data, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise DimensionError(f"{name} must be non-empty")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return v


def as_matrix(data, name="matrix"):
    m = np.array(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.size == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return m


def dot(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"dot of shapes {a.shape} and {b.shape}")
    return float(np.dot(a, b))


def matvec(m, v):
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec of shapes {m.shape} and {v.shape}")
    return m @ v


def dense_solve(m, rhs):
    """Solve ``m x = rhs`` by LU with partial pivoting.

    Raises SingularMatrixError when a pivot falls below ``1e-12 * max|m|``.
    """
    m = np.asarray(m, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"dense_solve needs a square matrix, got {m.shape}")
    if rhs.ndim != 1 or rhs.shape[0] != m.shape[0]:
        raise DimensionError(f"rhs of shape {rhs.shape} for matrix {m.shape}")
    scale = np.max(np.abs(m))
    if scale == 0.0:
        raise SingularMatrixError("zero matrix")
    lu, piv = scipy.linalg.lu_factor(m, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if np.min(pivots) < 1e-12 * scale:
        raise SingularMatrixError(
            f"pivot {np.min(pivots):.3e} below 1e-12 * max|entry| ({scale:.3e})"
        )
    x = scipy.linalg.lu_solve((lu, piv), rhs)
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("solve produced non-finite values")
    return x


def is_spd(m, sym_tol=1e-12):
    """True when ``m`` is symmetric within ``sym_tol`` and Cholesky succeeds."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False
    if np.max(np.abs(m - m.T)) > sym_tol * max(1.0, np.max(np.abs(m))):
        return False
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return False
    return True
