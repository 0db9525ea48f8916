"""Fidelity measures of a composed channel against a target unitary, and the SDP data matrices.

Process matrices use X_ij = Σ_k c_ki conj(c_kj) for Kraus elements K_k = Σ_i c_ki B_i,
so with W_ij = Σ conj(g_i) g_j the matrix trace Tr(X W) is the average fidelity.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import NamedTuple

import numpy as np

from qecopt.channels import DensityMatrix, ShiftRegisterRandom, compose
from qecopt.config import get_policy
from qecopt.linalg import DimensionError, as_matrix, dagger, hermitian_eig, hermitize, is_hermitian

logger = logging.getLogger(__name__)

KINDS = ("recovery", "encoding")
SPHERE_ARMIJO = 0.1


class ConvergenceError(RuntimeError):
    """Raised when the conditional-gradient minimization hits its iteration cap."""


@dataclass(frozen=True, eq=False)
class BasisSet:
    """Orthonormal operator basis; recovery elements are ns x nc, encoding elements nc x ns."""

    elements: np.ndarray
    kind: str
    ns: int
    nc: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"basis kind must be one of {KINDS}, got {self.kind!r}")
        expected = (self.ns * self.nc, self.rows, self.cols)
        if self.elements.shape != expected:
            raise DimensionError(f"{self.kind} basis must have shape {expected}, got {self.elements.shape}")

    @property
    def rows(self):
        return self.ns if self.kind == "recovery" else self.nc

    @property
    def cols(self):
        return self.nc if self.kind == "recovery" else self.ns

    @property
    def size(self):
        return self.ns * self.nc

    @cached_property
    def gram(self):
        """G[i, j] = B_i^H B_j, each cols x cols."""
        return np.einsum("iba,jbc->ijac", np.conj(self.elements), self.elements)

    def overlaps(self):
        return np.einsum("iab,jab->ij", np.conj(self.elements), self.elements)

    def coefficients(self, kraus):
        """c_ki = Tr(B_i^H K_k) for a stack of Kraus elements."""
        return np.einsum("iab,kab->ki", np.conj(self.elements), np.asarray(kraus))

    def combine(self, coeffs):
        return np.einsum("ki,iab->kab", np.asarray(coeffs), self.elements)

    def process_matrix(self, channel):
        c = self.coefficients(channel.stacked())
        return np.einsum("ki,kj->ij", c, np.conj(c))


@lru_cache(maxsize=None)
def canonical_basis(ns, nc, shape):
    """Matrix units e_a e_b^T enumerated row-major, index = a * cols + b."""
    if ns < 1 or nc < 1:
        raise DimensionError(f"basis dimensions must be positive, got ns={ns}, nc={nc}")
    rows, cols = (ns, nc) if shape == "recovery" else (nc, ns)
    elements = np.eye(rows * cols, dtype=np.complex128).reshape(rows * cols, rows, cols)
    elements.setflags(write=False)
    return BasisSet(elements, shape, ns, nc)


@dataclass(frozen=True, eq=False)
class FidelityTensor:
    entries: np.ndarray
    ns: int
    nc: int

    def contract(self, x_r, x_c):
        return float(np.einsum("ij,kl,ijkl->", x_r, x_c, self.entries).real)

    def w_recovery(self, x_c):
        """Data matrix for the recovery step at a fixed encoding process matrix."""
        return np.einsum("kl,ijkl->ji", x_c, self.entries)

    def w_encoding(self, x_r):
        return np.einsum("ij,ijkl->lk", x_r, self.entries)


@dataclass(frozen=True, eq=False)
class SdpDataMatrix:
    w: np.ndarray
    kind: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        w = as_matrix(self.w)
        policy = get_policy()
        if w.shape[0] != w.shape[1]:
            raise DimensionError(f"data matrix must be square, got {w.shape}")
        if not is_hermitian(w):
            raise ValueError(f"{self.kind} data matrix is not Hermitian")
        w = hermitize(w)
        smallest = hermitian_eig(w)[0][-1]
        if smallest < -policy.psd * max(1.0, float(np.abs(w).max(initial=0.0))):
            raise ValueError(f"{self.kind} data matrix has negative eigenvalue {smallest:.3e}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def dim(self):
        return self.w.shape[0]


def _target(target, n):
    if target is None:
        return np.eye(n, dtype=np.complex128)
    target = as_matrix(target)
    if target.shape != (n, n):
        raise DimensionError(f"target must be {n}x{n}, got {target.shape}")
    return target


def _target_traces(s, target):
    if not s.is_square():
        raise DimensionError(f"fidelity needs a square channel, got {s.dim_out}x{s.dim_in}")
    ldag = dagger(_target(target, s.dim_in))
    return np.einsum("ab,kbc->kac", ldag, s.stacked())


def f_avg(s, target=None):
    """(1/n^2) Σ_k |Tr(L^H S_k)|^2."""
    t = _target_traces(s, target)
    n = s.dim_in
    return float(np.sum(np.abs(np.einsum("kaa->k", t)) ** 2).real / n**2)


def pipeline(recovery, error, encoding):
    return compose(recovery, compose(error, encoding))


def pipeline_f_avg(recovery, error, encoding, target=None):
    return f_avg(pipeline(recovery, error, encoding), target)


def _objective(t, rho):
    a = np.einsum("kab,ba->k", t, rho)
    return float(np.sum(np.abs(a) ** 2)), a


def _gradient(t, a):
    half = np.einsum("k,kab->ab", np.conj(a), t)
    return hermitize(half + dagger(half))


def _frank_wolfe(t):
    policy = get_policy()
    n = t.shape[1]
    rho = np.eye(n, dtype=np.complex128) / n
    value, a = _objective(t, rho)
    gap = np.inf
    for iteration in range(1, policy.fw_max_iterations + 1):
        grad = _gradient(t, a)
        values, vectors = hermitian_eig(grad)
        gap = float(np.trace(grad @ rho).real - values[-1])
        if gap <= policy.fw_gap:
            return value, rho, gap, iteration
        v = vectors[:, -1]
        vertex = np.outer(v, np.conj(v))
        d = np.einsum("kab,ba->k", t, vertex) - a
        denom = float(np.sum(np.abs(d) ** 2))
        if denom <= 0.0:
            return value, rho, gap, iteration
        step = float(np.clip(-np.sum((np.conj(a) * d).real) / denom, 0.0, 1.0))
        rho = rho + step * (vertex - rho)
        value, a = _objective(t, rho)
    raise ConvergenceError(f"f_mixed did not converge in {policy.fw_max_iterations} iterations (gap {gap:.3e})")


def f_mixed(s, target=None):
    """min over density matrices of Σ_k |Tr(L^H S_k ρ)|^2, by conditional gradient."""
    value, rho, gap, iterations = _frank_wolfe(_target_traces(s, target))
    logger.debug(f"f_mixed = {value:.10f} after {iterations} conditional-gradient steps, gap {gap:.2e}")
    return value, DensityMatrix(hermitize(rho) / np.trace(rho).real)


def _pure_value(t, psi):
    a = np.einsum("a,kab,b->k", np.conj(psi), t, psi)
    return float(np.sum(np.abs(a) ** 2)), a


def _sphere_descent(t, psi, max_steps=500):
    """Projected gradient descent on the unit sphere, backtracking from a unit step every iteration."""
    value, a = _pure_value(t, psi)
    for _ in range(max_steps):
        g = _gradient(t, a) @ psi
        riemannian = g - np.vdot(psi, g) * psi
        slope = float(np.vdot(riemannian, riemannian).real)
        if slope < 1e-20:
            break
        step = 1.0
        while step >= 1e-12:
            candidate = psi - step * riemannian
            candidate = candidate / np.linalg.norm(candidate)
            cand_value, cand_a = _pure_value(t, candidate)
            if cand_value <= value - SPHERE_ARMIJO * step * slope:
                break
            step *= 0.5
        else:
            break
        psi, value, a = candidate, cand_value, cand_a
    return value, psi


def f_pure_estimate(s, target=None, restarts=None, seed=0):
    """Lowest local minimum over seeded restarts; an upper bound on the true pure-state minimum."""
    t = _target_traces(s, target)
    restarts = get_policy().pure_restarts if restarts is None else restarts
    rng = ShiftRegisterRandom(seed)
    best = None
    for index in range(restarts):
        psi = rng.complex_normals((s.dim_in,))
        psi = psi / np.linalg.norm(psi)
        value, _ = _sphere_descent(t, psi)
        if best is None or value < best:
            best = value
    return float(best)


class FidelityBounds(NamedTuple):
    f_mixed: float
    f_pure: float
    f_avg: float
    eigenvalue_gap: float


def fidelity_bounds(s, target=None, restarts=None):
    """All three measures plus the eigenvalue gap of the minimizing density."""
    mixed, rho = f_mixed(s, target)
    return FidelityBounds(mixed, f_pure_estimate(s, target, restarts), f_avg(s, target), rho.eigenvalue_gap())


def _check_pipeline_dims(error, ns, nc):
    if error.dim_in != nc or error.dim_out != nc:
        raise DimensionError(f"error channel must act on the {nc}-dimensional codespace, got {error.dim_out}x{error.dim_in}")


def _w_from_gram_vectors(g):
    return np.einsum("ki,kj->ij", np.conj(g), g)


def build_f_tensor(error, target, basis_r, basis_c):
    """F_ijkl = Σ_e t_eik conj(t_ejl) with t_eik = Tr(L^H B_Ri E_e B_Ck) / ns."""
    if basis_r.kind != "recovery" or basis_c.kind != "encoding":
        raise ValueError("build_f_tensor needs a recovery basis and an encoding basis")
    if (basis_r.ns, basis_r.nc) != (basis_c.ns, basis_c.nc):
        raise DimensionError("recovery and encoding bases disagree on dimensions")
    ns, nc = basis_r.ns, basis_r.nc
    _check_pipeline_dims(error, ns, nc)
    ldag = dagger(_target(target, ns))
    t = np.einsum("ab,ibc,ecd,kda->eik", ldag, basis_r.elements, error.stacked(), basis_c.elements) / ns
    return FidelityTensor(np.einsum("eik,ejl->ijkl", t, np.conj(t)), ns, nc)


def assemble_w_recovery(error, encoding, target=None, basis_r=None):
    ns, nc = encoding.dim_in, encoding.dim_out
    _check_pipeline_dims(error, ns, nc)
    basis_r = basis_r or canonical_basis(ns, nc, "recovery")
    if basis_r.kind != "recovery" or (basis_r.ns, basis_r.nc) != (ns, nc):
        raise DimensionError(f"recovery basis for {basis_r.ns}x{basis_r.nc} does not match encoding {nc}x{ns}")
    ldag = dagger(_target(target, ns))
    tail = np.einsum("eab,cbd->ecad", error.stacked(), encoding.stacked()).reshape(-1, nc, ns)
    g = np.einsum("ab,ibc,kca->ki", ldag, basis_r.elements, tail) / ns
    return SdpDataMatrix(_w_from_gram_vectors(g), "recovery",
                         {"error": error.label, "encoding": encoding.label})


def assemble_w_encoding(error, recovery, target=None, basis_c=None):
    ns, nc = recovery.dim_out, recovery.dim_in
    _check_pipeline_dims(error, ns, nc)
    basis_c = basis_c or canonical_basis(ns, nc, "encoding")
    if basis_c.kind != "encoding" or (basis_c.ns, basis_c.nc) != (ns, nc):
        raise DimensionError(f"encoding basis for {basis_c.ns}x{basis_c.nc} does not match recovery {ns}x{nc}")
    ldag = dagger(_target(target, ns))
    head = np.einsum("ab,rbc,ecd->read", ldag, recovery.stacked(), error.stacked()).reshape(-1, ns, nc)
    g = np.einsum("kab,iba->ki", head, basis_c.elements) / ns
    return SdpDataMatrix(_w_from_gram_vectors(g), "encoding",
                         {"error": error.label, "recovery": recovery.label})
