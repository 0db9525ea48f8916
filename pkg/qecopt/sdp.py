"""Semidefinite programs of the form

    maximize Tr(X W)  subject to  X >= 0,  Σ_ij X_ij B_j^H B_i = I_m

and the dual  minimize Tr(Y)  subject to  K(Y) - W >= 0,  K(Y)_ij = Tr(Y B_i^H B_j).

Complex Hermitian blocks are embedded as real symmetric [[Re, -Im], [Im, Re]]
at the solver boundary; one log-barrier Newton method handles every variant.
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional, Tuple

import numpy as np

from qecopt.config import get_policy
from qecopt.fidelity import SdpDataMatrix
from qecopt.linalg import (
    DegenerateSolutionError,
    DimensionError,
    dagger,
    hermitian_eig,
    hermitize,
    psd_sqrt_inv,
    solve_constrained_nullspace,
    spectral_norm,
)

logger = logging.getLogger(__name__)

BARRIER_GROWTH = 20.0
ARMIJO = 0.01
BACKTRACK = 0.5
MIN_STEP = 1e-14
QUADRATIC_REGION = 0.0625
MAX_OUTER = 60


class SolverError(RuntimeError):
    """Raised on iteration caps, numerical breakdown or failed dual-to-primal recovery."""


@dataclass(frozen=True, eq=False)
class SdpProblem:
    w_list: Tuple[SdpDataMatrix, ...]
    basis: object

    def __post_init__(self):
        if not self.w_list:
            raise ValueError("an SDP needs at least one data matrix")
        object.__setattr__(self, "w_list", tuple(self.w_list))
        for w in self.w_list:
            if w.dim != self.n:
                raise DimensionError(f"data matrix of size {w.dim} does not match basis cardinality {self.n}")

    @property
    def m(self):
        return self.basis.cols

    @property
    def r(self):
        return self.basis.rows

    @property
    def n(self):
        return self.basis.size

    @property
    def w(self):
        if len(self.w_list) != 1:
            raise ValueError(f"problem carries {len(self.w_list)} data matrices, expected one")
        return self.w_list[0].w

    def constraint_map(self, x):
        """A(X) = Σ_ij X_ij B_j^H B_i."""
        return np.einsum("ij,jiab->ab", x, self.basis.gram)

    def dual_map(self, y):
        """K(Y)_ij = Tr(Y B_i^H B_j); the adjoint of constraint_map."""
        return np.einsum("ab,ijba->ij", y, self.basis.gram)


@dataclass(frozen=True, eq=False)
class SdpSolution:
    x: np.ndarray
    y: np.ndarray
    primal_value: float
    dual_value: float
    gap: float
    iterations: int
    t: Optional[float] = None
    weights: Optional[Tuple[float, ...]] = None
    path: str = "dual"


class CertificateReport(NamedTuple):
    gap: float
    slackness_residual: float
    equality_residual: float
    primal_psd_margin: float
    dual_psd_margin: float
    epigraph_violation: float
    tolerance: float
    passed: bool


def hermitian_basis(n):
    """Orthonormal real basis of n x n Hermitian matrices under Re Tr(A B)."""
    mats = []
    for k in range(n):
        e = np.zeros((n, n), dtype=np.complex128)
        e[k, k] = 1.0
        mats.append(e)
    for k in range(n):
        for l in range(k + 1, n):
            e = np.zeros((n, n), dtype=np.complex128)
            e[k, l] = e[l, k] = 1.0 / math.sqrt(2.0)
            mats.append(e)
            e = np.zeros((n, n), dtype=np.complex128)
            e[k, l] = 1j / math.sqrt(2.0)
            e[l, k] = -1j / math.sqrt(2.0)
            mats.append(e)
    return np.stack(mats)


def embed(h):
    """[[Re, -Im], [Im, Re]] over the trailing two axes."""
    re, im = np.real(h), np.imag(h)
    top = np.concatenate([re, -im], axis=-1)
    bottom = np.concatenate([im, re], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def fold(e):
    n = e.shape[-1] // 2
    return e[..., :n, :n] + 1j * e[..., n:, :n]


class _Operators(NamedTuple):
    herm_m: np.ndarray
    herm_n: np.ndarray
    k_images: np.ndarray
    k_real: np.ndarray
    nullspace: np.ndarray
    x0: np.ndarray


@lru_cache(maxsize=32)
def _operators(basis):
    m, n, r = basis.cols, basis.size, basis.rows
    herm_m = hermitian_basis(m)
    herm_n = hermitian_basis(n)
    gram = basis.gram
    k_images = np.einsum("pab,ijba->pij", herm_m, gram)
    images = np.einsum("qij,jiab->qab", herm_n, gram)
    a_real = np.einsum("pba,qab->pq", herm_m, images).real
    _, sv, vt = np.linalg.svd(a_real)
    rank = int(np.sum(sv > 1e-10 * sv[0]))
    null = vt[rank:]
    nullspace = np.einsum("jq,qab->jab", null, herm_n)
    k_real = np.stack([np.concatenate([k.real.reshape(-1), k.imag.reshape(-1)]) for k in k_images], axis=1)
    x0 = np.eye(n, dtype=np.complex128) / r
    return _Operators(herm_m, herm_n, k_images, k_real, nullspace, x0)


def _coordinates(h, herm):
    return np.einsum("pab,ba->p", herm, h).real


def _block_values(y, blocks):
    return [f0 + np.tensordot(y, fi, axes=1) for f0, fi in blocks]


def _log_barrier(y, blocks):
    total = 0.0
    for f in _block_values(y, blocks):
        total -= 2.0 * float(np.sum(np.log(np.diag(np.linalg.cholesky(f)))))
    return total


def _newton_system(y, c, t, blocks):
    grad = t * c
    hess = np.zeros((len(y), len(y)))
    for f, (_, fi) in zip(_block_values(y, blocks), blocks):
        linv = np.linalg.inv(np.linalg.cholesky(f))
        scaled = linv @ fi @ linv.T
        grad = grad - np.einsum("iaa->i", scaled)
        hess += np.einsum("iab,jab->ij", scaled, scaled)
    try:
        direction = np.linalg.solve(hess, -grad)
    except np.linalg.LinAlgError:
        direction = np.linalg.lstsq(hess, -grad, rcond=None)[0]
    return direction, float(-grad @ direction)


def _barrier_minimize(c, blocks, y0, trace=None, label="sdp"):
    """Minimize c.y subject to F0_b + Σ y_i F_ib > 0 for every block b (real symmetric).

    Damped Newton with Armijo backtracking on the barrier difference; pure Newton
    steps once the decrement is inside the quadratic region. Returns the final
    iterate, the last barrier parameter and the Newton count.
    """
    policy = get_policy()
    size = sum(f0.shape[0] for f0, _ in blocks)
    y = np.array(y0, dtype=np.float64)
    try:
        barrier = _log_barrier(y, blocks)
    except np.linalg.LinAlgError:
        raise SolverError(f"{label}: starting point is not strictly feasible")
    t = 1.0
    total = 0
    for outer in range(MAX_OUTER):
        previous = np.inf
        for newton in range(policy.max_newton_iterations):
            direction, decrement = _newton_system(y, c, t, blocks)
            total += 1
            if decrement <= 2.0 * policy.newton_decrement:
                break
            quadratic = decrement < QUADRATIC_REGION
            if quadratic and decrement >= previous:
                logger.debug(f"{label}: Newton decrement stagnated at {decrement:.3e}, t={t:.3e}")
                break
            previous = decrement
            step = 1.0
            while step >= MIN_STEP:
                candidate = y + step * direction
                try:
                    cand_barrier = _log_barrier(candidate, blocks)
                except np.linalg.LinAlgError:
                    step *= BACKTRACK
                    continue
                if quadratic:
                    break
                change = t * step * float(c @ direction) + cand_barrier - barrier
                if change <= -ARMIJO * step * decrement:
                    break
                step *= BACKTRACK
            if trace is not None:
                trace({"solver": label, "iteration": total, "objective": float(c @ y),
                       "duality_measure": size / t, "step": step})
            if step < MIN_STEP:
                logger.debug(f"{label}: line search stalled at t={t:.3e}, accepting centering")
                break
            y, barrier = candidate, cand_barrier
        else:
            raise SolverError(f"{label}: centering exceeded {policy.max_newton_iterations} Newton iterations at t={t:.3e}")
        if size / t <= policy.duality_measure:
            return y, t, total
        t *= BARRIER_GROWTH
    raise SolverError(f"{label}: duality measure {size / t:.3e} still above {policy.duality_measure} after {MAX_OUTER} barrier updates")


def _dual_from_slack(p, w_eff, slack):
    """Least-squares Y with K(Y) = w_eff + slack, slack estimated from the central path.

    Y is then shifted along the identity until K(Y) - w_eff is positive
    semidefinite, so the returned Y is always dual feasible.
    """
    ops = _operators(p.basis)
    target = hermitize(w_eff + slack)
    rhs = np.concatenate([target.real.reshape(-1), target.imag.reshape(-1)])
    coords = np.linalg.lstsq(ops.k_real, rhs, rcond=None)[0]
    y = hermitize(np.tensordot(coords, ops.herm_m, axes=1))
    smallest = hermitian_eig(hermitize(p.dual_map(y) - w_eff))[0][-1]
    if smallest < 0.0:
        identity_image = hermitian_eig(hermitize(p.dual_map(np.eye(p.m))))[0][-1]
        shift = -smallest / identity_image
        logger.debug(f"dual slack eigenvalue {smallest:.3e}, shifting Y by {shift:.3e} I")
        y = y + shift * np.eye(p.m)
    return y


def enforce_constraint(p, x):
    """Congruence X -> T X T^H with T right multiplication by A(X)^(-1/2) in basis coordinates.

    Keeps X positive semidefinite and makes A(X) = I to round-off.
    """
    correction = psd_sqrt_inv(hermitize(p.constraint_map(x)))
    e = p.basis.elements
    t = np.einsum("iab,jac,cb->ij", np.conj(e), e, correction)
    return hermitize(t @ x @ dagger(t))


def _central_slack(x, t):
    """(2 / t) X^(-1): the dual slack paired with X on the barrier's central path."""
    values, vectors = hermitian_eig(hermitize(x))
    values = np.maximum(values, 1e-300)
    return (vectors * (2.0 / (t * values))) @ dagger(vectors)


def solve_dual(p, trace=None):
    """Minimize Tr Y over K(Y) >= W, then recover X from complementary slackness."""
    w = p.w
    ops = _operators(p.basis)
    lam_max = hermitian_eig(w)[0][0]
    y0 = _coordinates((lam_max + 1.0) * np.eye(p.m), ops.herm_m)
    c = np.einsum("paa->p", ops.herm_m).real
    blocks = [(embed(-w), embed(ops.k_images))]
    coords, t, iterations = _barrier_minimize(c, blocks, y0, trace, label=f"dual-{p.basis.kind}")
    y = hermitize(np.tensordot(coords, ops.herm_m, axes=1))
    x = dual_to_primal(p, y)
    primal = float(np.trace(x @ w).real)
    dual = float(np.trace(y).real)
    logger.debug(f"dual {p.basis.kind} SDP: Tr Y = {dual:.10f}, Tr XW = {primal:.10f}, {iterations} Newton steps")
    return SdpSolution(x, y, primal, dual, abs(dual - primal), iterations, path="dual")


def _recover_in_nullspace(p, s, cutoff):
    ops = _operators(p.basis)
    values, vectors = hermitian_eig(s)
    positive = vectors[:, values > cutoff]
    if positive.shape[1] == p.n:
        raise DegenerateSolutionError("slack matrix has no null space")
    s_trunc = (positive * values[values > cutoff]) @ dagger(positive)
    n = p.n
    eye = np.eye(n)
    constraint = p.basis.gram.transpose(1, 0, 2, 3).reshape(n * n, p.m * p.m).T
    a = np.vstack([np.kron(s_trunc, eye), np.kron(eye, s_trunc.T), constraint])
    b = np.concatenate([np.zeros(2 * n * n), np.eye(p.m).reshape(-1)])
    return solve_constrained_nullspace(a, b)


def dual_to_primal(p, y):
    """Primal X supported on the near-null eigenspace of K(Y) - W with A(X) = I."""
    policy = get_policy()
    s = hermitize(p.dual_map(y) - p.w)
    scale = max(spectral_norm(p.w), 1.0)
    x = None
    for cutoff in (policy.nullspace_cutoff, policy.nullspace_cutoff_widened):
        try:
            x = _recover_in_nullspace(p, s, cutoff * scale)
            break
        except DegenerateSolutionError as e:
            logger.debug(f"dual-to-primal at cutoff {cutoff:.0e} failed ({e}), widening")
    if x is None:
        raise SolverError("dual-to-primal recovery failed: null space too small for the equality constraint")
    values, vectors = hermitian_eig(x)
    trace = max(float(np.sum(values)), 1.0)
    if values[-1] < -policy.certificate * trace:
        raise SolverError(f"recovered primal is not positive semidefinite (eigenvalue {values[-1]:.3e})")
    x = hermitize((vectors * np.maximum(values, 0.0)) @ dagger(vectors))
    try:
        return enforce_constraint(p, x)
    except DegenerateSolutionError as e:
        raise SolverError(f"recovered primal cannot be normalized to the trace constraint: {e}")


def _primal_blocks(ops):
    return embed(ops.x0), embed(ops.nullspace)


def solve_primal(p, trace=None):
    """Log-det barrier directly on X = X0 + Σ z_j N_j, with N_j spanning the constraint null space."""
    w = p.w
    ops = _operators(p.basis)
    f0, fi = _primal_blocks(ops)
    c = -np.einsum("jab,ba->j", ops.nullspace, w).real
    z, t, iterations = _barrier_minimize(c, [(f0, fi)], np.zeros(len(c)), trace, label=f"primal-{p.basis.kind}")
    x = hermitize(ops.x0 + np.tensordot(z, ops.nullspace, axes=1))
    y = _dual_from_slack(p, w, _central_slack(x, t))
    x = enforce_constraint(p, x)
    primal = float(np.trace(x @ w).real)
    dual = float(np.trace(y).real)
    return SdpSolution(x, y, primal, dual, abs(dual - primal), iterations, path="primal")


def solve_robust(p, trace=None):
    """Maximize τ subject to Tr(X W_α) >= τ for every α, X >= 0, A(X) = I."""
    if len(p.w_list) < 2:
        raise ValueError("robust solve needs at least two data matrices")
    ops = _operators(p.basis)
    ws = np.stack([w.w for w in p.w_list])
    count = len(p.w_list)
    dim = len(ops.nullspace)
    f0_x, fi_x = _primal_blocks(ops)
    fi_x = np.concatenate([fi_x, np.zeros((1,) + f0_x.shape)])
    base = np.einsum("aij,ji->a", ws, ops.x0).real
    slopes = np.einsum("aij,qji->qa", ws, ops.nullspace).real
    f0_s = np.diag(base)
    fi_s = np.stack([np.diag(row) for row in slopes] + [-np.eye(count)])
    c = np.zeros(dim + 1)
    c[-1] = -1.0
    y0 = np.zeros(dim + 1)
    y0[-1] = float(base.min()) - 1.0
    coords, t, iterations = _barrier_minimize(c, [(f0_x, fi_x), (f0_s, fi_s)], y0, trace,
                                              label=f"robust-{p.basis.kind}")
    x = hermitize(ops.x0 + np.tensordot(coords[:dim], ops.nullspace, axes=1))
    tau = float(coords[-1])
    values = np.einsum("aij,ji->a", ws, x).real
    weights = 1.0 / (t * np.maximum(values - tau, 1e-300))
    w_eff = np.tensordot(weights, ws, axes=1)
    y = _dual_from_slack(p, w_eff, _central_slack(x, t))
    # Scaling the dual pair keeps K(Y) - Σ λ W ⪰ 0 and puts λ on the simplex.
    total = float(weights.sum())
    weights, y = weights / total, y / total
    x = enforce_constraint(p, x)
    values = np.einsum("aij,ji->a", ws, x).real
    dual = float(np.trace(y).real)
    worst = float(values.min())
    logger.debug(f"robust {p.basis.kind} SDP: tau = {tau:.10f}, per-matrix values {np.round(values, 10).tolist()}")
    return SdpSolution(x, y, worst, dual, abs(dual - worst), iterations, t=tau,
                       weights=tuple(float(v) for v in weights), path="robust")


def certify(sol, p, tolerance=None):
    """Duality gap, complementary slackness, feasibility and PSD margins of a solution."""
    tolerance = get_policy().certificate if tolerance is None else tolerance
    if sol.weights is not None:
        w_eff = np.tensordot(np.asarray(sol.weights), np.stack([w.w for w in p.w_list]), axes=1)
        primal = float(min(np.trace(sol.x @ w.w).real for w in p.w_list))
        epigraph = max(0.0, float(sol.t) - primal) if sol.t is not None else 0.0
    else:
        w_eff = p.w
        primal = float(np.trace(sol.x @ w_eff).real)
        epigraph = 0.0
    slack = hermitize(p.dual_map(sol.y) - w_eff)
    gap = abs(float(np.trace(sol.y).real) - primal)
    slackness = spectral_norm(slack @ sol.x)
    equality = spectral_norm(p.constraint_map(sol.x) - np.eye(p.m))
    primal_margin = float(hermitian_eig(hermitize(sol.x))[0][-1])
    dual_margin = float(hermitian_eig(slack)[0][-1])
    passed = (gap <= tolerance and slackness <= tolerance and equality <= tolerance
              and primal_margin >= -tolerance and dual_margin >= -tolerance and epigraph <= tolerance)
    return CertificateReport(gap, slackness, equality, primal_margin, dual_margin, epigraph, tolerance, passed)


FLOP_MODES = ("primal_recovery", "primal_encoding", "dual_recovery", "dual_encoding")


def _dimensions(qubits_sys, qubits_anc, mode):
    if qubits_sys < 0 or qubits_anc < 0:
        raise ValueError("qubit counts must be nonnegative")
    ns, nca = 2**qubits_sys, 2**qubits_anc
    nc = ns * nca
    return (ns, nc) if mode.endswith("recovery") else (nc, ns)


def flop_estimate(qubits_sys, qubits_anc, mode):
    """Flops per interior-point iteration: r^2 (r^2 - 1)^2 m^6 primal, r^2 m^6 dual."""
    if mode == "dual":
        mode = "dual_recovery"
    if mode not in FLOP_MODES:
        raise ValueError(f"mode must be one of {FLOP_MODES}, got {mode!r}")
    r, m = _dimensions(qubits_sys, qubits_anc, mode)
    if mode.startswith("primal"):
        return float(r**2 * (r**2 - 1) ** 2 * m**6)
    return float(r**2 * m**6)


class FlopRow(NamedTuple):
    problem: str
    r: int
    m: int
    primal: float
    dual: float
    conversion: float
    speedup: float
    out_of_model: bool


def flop_table(qubits_sys, qubits_anc):
    rows = []
    for problem in ("recovery", "encoding"):
        r, m = _dimensions(qubits_sys, qubits_anc, problem)
        primal = flop_estimate(qubits_sys, qubits_anc, f"primal_{problem}")
        dual = flop_estimate(qubits_sys, qubits_anc, f"dual_{problem}")
        rows.append(FlopRow(problem, r, m, primal, dual, float(r**2 * m**2), primal / dual, r <= 1))
    return rows
