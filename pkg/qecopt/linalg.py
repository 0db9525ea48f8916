"""Dense complex linear algebra on numpy arrays.

Every matrix in the package is a two-dimensional complex128 ``numpy.ndarray``.
Eigendecomposition is done here with cyclic Jacobi rotations so results are
deterministic and ordered the same way on every platform.
"""
import logging
import math

import numpy as np

from qecopt.config import get_policy

logger = logging.getLogger(__name__)

MAX_SWEEPS = 100
EPS = float(np.finfo(np.float64).eps)


class DimensionError(ValueError):
    """Raised when matrix shapes are incompatible with an operation."""


class NotHermitianError(ValueError):
    """Raised when a matrix expected to be Hermitian is not, within tolerance."""


class DegenerateSolutionError(RuntimeError):
    """Raised when a constrained linear solve is inconsistent or not unique."""


def as_matrix(m):
    arr = np.asarray(m, dtype=np.complex128)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got array of shape {arr.shape}")
    return arr


def dagger(m):
    return np.conj(np.swapaxes(m, -1, -2))


def hermitize(m):
    return 0.5 * (m + dagger(m))


def check_square(m, name="matrix"):
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got {m.shape[0]}x{m.shape[1]}")


def hermitian_defect(m):
    return float(np.max(np.abs(m - dagger(m)))) if m.size else 0.0


def is_hermitian(m, tol=None):
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        return False
    tol = get_policy().symmetry if tol is None else tol
    return hermitian_defect(m) <= tol * max(1.0, float(np.max(np.abs(m), initial=0.0)))


def require_hermitian(m, name="matrix"):
    m = as_matrix(m)
    check_square(m, name)
    if not is_hermitian(m):
        raise NotHermitianError(f"{name} is not Hermitian: max |M - M^H| = {hermitian_defect(m):.3e}")
    return hermitize(m)


def kron(a, b):
    return np.kron(as_matrix(a), as_matrix(b))


def partial_trace(m, dim_keep, dim_trace, traced_factor="last"):
    """Trace out one factor of a bipartite operator on C^dim_keep (x) C^dim_trace."""
    m = as_matrix(m)
    n = dim_keep * dim_trace
    if m.shape != (n, n):
        raise DimensionError(f"partial trace of {m.shape} matrix over {dim_keep}x{dim_trace} factors")
    if traced_factor == "last":
        return np.einsum("ajbj->ab", m.reshape(dim_keep, dim_trace, dim_keep, dim_trace))
    if traced_factor == "first":
        return np.einsum("jajb->ab", m.reshape(dim_trace, dim_keep, dim_trace, dim_keep))
    raise ValueError(f"traced_factor must be 'last' or 'first', got {traced_factor!r}")


def _off_norm(a):
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def _rotate(a, v, p, q):
    apq = a[p, q]
    mag = abs(apq)
    phase = np.conj(apq / mag)
    theta = 0.5 * math.atan2(2.0 * mag, a[q, q].real - a[p, p].real)
    c, s = math.cos(theta), math.sin(theta)
    g = np.array([[c, s], [-s * phase, c * phase]], dtype=np.complex128)
    idx = [p, q]
    a[:, idx] = a[:, idx] @ g
    a[idx, :] = dagger(g) @ a[idx, :]
    a[p, q] = a[q, p] = 0.0
    a[p, p] = a[p, p].real
    a[q, q] = a[q, q].real
    v[:, idx] = v[:, idx] @ g


def hermitian_eig(m):
    """Eigenvalues (descending) and unitary eigenvectors of a Hermitian matrix.

    Cyclic Jacobi: each rotation strips the phase of the pivot and then applies a
    real plane rotation. Sweeps stop once no off-diagonal entry exceeds
    eps·‖m‖_F / n. Ties keep their original diagonal order.
    """
    a = require_hermitian(m).copy()
    n = a.shape[0]
    v = np.eye(n, dtype=np.complex128)
    scale = float(np.linalg.norm(a))
    if n > 1 and scale > 0.0:
        pivot = EPS * scale / n
        for sweep in range(MAX_SWEEPS):
            rotated = False
            for p in range(n - 1):
                for q in range(p + 1, n):
                    if abs(a[p, q]) > pivot:
                        _rotate(a, v, p, q)
                        rotated = True
            if not rotated:
                break
        else:
            logger.warning(f"⚠️ Jacobi eigensolver stopped after {MAX_SWEEPS} sweeps, off-norm {_off_norm(a):.3e}")
    values = np.real(np.diag(a)).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], v[:, order]


def complete_columns(u, count):
    """Append orthonormal columns to `u` from the coordinate vectors, in index order."""
    rows = u.shape[0]
    cols = [u[:, j] for j in range(u.shape[1])]
    for j in range(rows):
        if len(cols) >= count:
            break
        e = np.zeros(rows, dtype=np.complex128)
        e[j] = 1.0
        for _ in range(2):
            for c in cols:
                e = e - c * np.vdot(c, e)
        norm = np.linalg.norm(e)
        if norm > 1e-6:
            cols.append(e / norm)
    return np.column_stack(cols) if cols else np.zeros((rows, 0), dtype=np.complex128)


def _orthogonalize(a, v, p, q, tol):
    """One-sided Jacobi rotation making columns p and q of `a` orthogonal."""
    alpha = float(np.vdot(a[:, p], a[:, p]).real)
    beta = float(np.vdot(a[:, q], a[:, q]).real)
    gamma = np.vdot(a[:, p], a[:, q])
    mag = abs(gamma)
    if mag == 0.0 or mag <= tol * math.sqrt(alpha * beta):
        return False
    zeta = (beta - alpha) / (2.0 * mag)
    t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
    c = 1.0 / math.sqrt(1.0 + t * t)
    s = c * t
    phase = np.conj(gamma) / mag
    g = np.array([[c, s], [-s * phase, c * phase]], dtype=np.complex128)
    idx = [p, q]
    a[:, idx] = a[:, idx] @ g
    v[:, idx] = v[:, idx] @ g
    return True


def svd(m):
    """Thin SVD m = U diag(s) V^H by one-sided Jacobi on the columns of m.

    Columns are rotated pairwise until every pair is orthogonal to working
    precision; their norms are the singular values and the normalized columns
    form U. Columns below 1e-13·s_max are replaced by an orthonormal completion.
    """
    m = as_matrix(m)
    rows, cols = m.shape
    k = min(rows, cols)
    if k == 0:
        return np.zeros((rows, 0), complex), np.zeros(0), np.zeros((cols, 0), complex)
    if rows < cols:
        v, s, u = svd(dagger(m))
        return u, s, v
    a = m.copy()
    v = np.eye(cols, dtype=np.complex128)
    tol = rows * EPS
    for sweep in range(MAX_SWEEPS):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                rotated = _orthogonalize(a, v, p, q, tol) or rotated
        if not rotated:
            break
    else:
        logger.warning(f"⚠️ one-sided Jacobi SVD stopped after {MAX_SWEEPS} sweeps")
    s = np.linalg.norm(a, axis=0)
    order = np.argsort(-s, kind="stable")
    s, v, a = s[order], v[:, order], a[:, order]
    kept = s > 1e-13 * s[0] if s[0] > 0.0 else np.zeros(cols, dtype=bool)
    u = complete_columns(a[:, kept] / s[kept], k)
    return u, np.where(kept, s, 0.0), v


def spectral_norm(m):
    m = as_matrix(m)
    if m.size == 0:
        return 0.0
    return float(svd(m)[1][0])


def expm_hermitian(h, scale=1.0):
    """exp(-i * scale * h) for Hermitian h."""
    values, vectors = hermitian_eig(h)
    return (vectors * np.exp(-1j * scale * values)) @ dagger(vectors)


def psd_sqrt_inv(m):
    """m^(-1/2) for a positive definite Hermitian m."""
    values, vectors = hermitian_eig(m)
    if values[-1] <= 1e-14 * max(values[0], 1e-300):
        raise DegenerateSolutionError(f"matrix is singular: smallest eigenvalue {values[-1]:.3e}")
    return (vectors / np.sqrt(values)) @ dagger(vectors)


def solve_constrained_nullspace(a, b, require_unique=False):
    """Least-squares solution of a vec(X) = b, reshaped to a square Hermitian X.

    `a` acts on the row-major vectorization of X. When the system is
    underdetermined the minimum-norm solution is returned, unless
    `require_unique` asks for an error instead. An inconsistent system
    raises DegenerateSolutionError.
    """
    a = as_matrix(a)
    b = np.asarray(b, dtype=np.complex128).reshape(-1)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"operator has {a.shape[0]} rows but right-hand side has {b.shape[0]}")
    n = math.isqrt(a.shape[1])
    if n * n != a.shape[1]:
        raise DimensionError(f"operator acts on {a.shape[1]} unknowns, not a square matrix")
    policy = get_policy()
    solution, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if require_unique and rank < a.shape[1]:
        raise DegenerateSolutionError(f"solution not unique: rank {rank} of {a.shape[1]} unknowns")
    x = hermitize(solution.reshape(n, n))
    residual = float(np.linalg.norm(a @ x.reshape(-1) - b))
    if residual > policy.linear_solve * max(1.0, float(np.linalg.norm(b))):
        raise DegenerateSolutionError(f"inconsistent constrained system: residual {residual:.3e}")
    return x
