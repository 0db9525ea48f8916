"""Encoding and recovery design by alternating convex steps.

Each half-step fixes one channel, assembles the data matrix of the other, solves
the relaxed SDP and extracts Kraus elements from the optimal process matrix.
"""
import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np

from qecopt.channels import QuantumChannel, channel_from_dict, channel_to_dict, matrix_from_json, matrix_to_json, project_to_tp
from qecopt.config import get_policy
from qecopt.fidelity import (
    assemble_w_encoding,
    assemble_w_recovery,
    canonical_basis,
    f_mixed,
    pipeline,
    pipeline_f_avg,
)
from qecopt.linalg import (
    DimensionError,
    as_matrix,
    complete_columns,
    dagger,
    hermitian_eig,
    hermitize,
    is_hermitian,
    spectral_norm,
    svd,
)
from qecopt.sdp import SdpProblem, SdpSolution, SolverError, certify, solve_dual, solve_robust

logger = logging.getLogger(__name__)

ORDERS = ("encoding-first", "recovery-first")
ISOMETRY_ROUNDING = 1e-2


class ProcessMatrixError(ValueError):
    """Raised when a process matrix violates Hermiticity, positivity or the trace constraint."""


class DesignError(RuntimeError):
    """A solver failure inside the design loop; `partial` holds the iterations completed so far."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True, eq=False)
class ProcessMatrix:
    x: np.ndarray
    basis: object
    kind: str

    def __post_init__(self):
        x = as_matrix(self.x)
        if x.shape != (self.basis.size, self.basis.size):
            raise DimensionError(f"process matrix of shape {x.shape} for a basis of {self.basis.size} elements")
        if self.kind != self.basis.kind:
            raise ProcessMatrixError(f"{self.kind} process matrix expressed in a {self.basis.kind} basis")
        if not is_hermitian(x, get_policy().reconstruction):
            raise ProcessMatrixError(f"{self.kind} process matrix is not Hermitian")
        x = hermitize(x)
        smallest = hermitian_eig(x)[0][-1]
        if smallest < -1e-9:
            raise ProcessMatrixError(f"{self.kind} process matrix has eigenvalue {smallest:.3e}")
        residual = self.equality_residual(x)
        if residual > get_policy().certificate:
            raise ProcessMatrixError(f"{self.kind} process matrix violates the trace constraint by {residual:.3e}")
        object.__setattr__(self, "x", x)

    def equality_residual(self, x=None):
        x = self.x if x is None else x
        lhs = np.einsum("ij,jiab->ab", x, self.basis.gram)
        return spectral_norm(lhs - np.eye(self.basis.cols))


class TraceEntry(NamedTuple):
    iteration: int
    f_after_recovery_step: float
    f_after_encoding_step: float


@dataclass(frozen=True, eq=False)
class HalfStep:
    channel: QuantumChannel
    process: ProcessMatrix
    solution: SdpSolution
    fidelity: float


@dataclass(frozen=True, eq=False)
class DesignResult:
    encoding: Optional[QuantumChannel]
    recovery: QuantumChannel
    fidelity_trace: Tuple[TraceEntry, ...]
    final_f_avg: Optional[float]
    bounds: Optional[Tuple[float, float]] = None
    robust_worst_case: Optional[float] = None
    per_error_f_avg: Tuple[float, ...] = ()
    process_matrices: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    snapshots: Dict[str, Tuple[QuantumChannel, QuantumChannel]] = field(default_factory=dict)
    dominant_ranks: Dict[str, int] = field(default_factory=dict)
    certificates: Dict[str, float] = field(default_factory=dict)
    converged: bool = False
    provenance: dict = field(default_factory=dict)

    @property
    def iterations(self):
        return len(self.fidelity_trace)

    def to_dict(self):
        return {
            "schema_version": 1,
            "encoding": channel_to_dict(self.encoding) if self.encoding is not None else None,
            "recovery": channel_to_dict(self.recovery),
            "fidelity_trace": [entry._asdict() for entry in self.fidelity_trace],
            "final_f_avg": self.final_f_avg,
            "bounds": list(self.bounds) if self.bounds is not None else None,
            "robust_worst_case": self.robust_worst_case,
            "per_error_f_avg": list(self.per_error_f_avg),
            "process_matrices": {
                kind: {"x": matrix_to_json(x), "y": matrix_to_json(y)}
                for kind, (x, y) in self.process_matrices.items()
            },
            "snapshots": {
                stage: {"recovery": channel_to_dict(r), "encoding": channel_to_dict(c)}
                for stage, (r, c) in self.snapshots.items()
            },
            "dominant_ranks": self.dominant_ranks,
            "certificates": self.certificates,
            "converged": self.converged,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            encoding=channel_from_dict(data["encoding"]) if data.get("encoding") else None,
            recovery=channel_from_dict(data["recovery"]),
            fidelity_trace=tuple(TraceEntry(**entry) for entry in data.get("fidelity_trace", [])),
            final_f_avg=data.get("final_f_avg"),
            bounds=tuple(data["bounds"]) if data.get("bounds") else None,
            robust_worst_case=data.get("robust_worst_case"),
            per_error_f_avg=tuple(data.get("per_error_f_avg", [])),
            process_matrices={
                kind: (matrix_from_json(pair["x"]), matrix_from_json(pair["y"]))
                for kind, pair in data.get("process_matrices", {}).items()
            },
            snapshots={
                stage: (channel_from_dict(pair["recovery"]), channel_from_dict(pair["encoding"]))
                for stage, pair in data.get("snapshots", {}).items()
            },
            dominant_ranks=dict(data.get("dominant_ranks", {})),
            certificates=dict(data.get("certificates", {})),
            converged=bool(data.get("converged", False)),
            provenance=dict(data.get("provenance", {})),
        )

    def write_trace_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(TraceEntry._fields)
            for entry in self.fidelity_trace:
                writer.writerow([entry.iteration, repr(entry.f_after_recovery_step), repr(entry.f_after_encoding_step)])


def kraus_from_process(pm):
    """K_k = sqrt(s_k) Σ_i V_ik B_i for every eigenvalue above the cutoff."""
    policy = get_policy()
    values, vectors = hermitian_eig(pm.x)
    if values[-1] < -1e-9:
        raise ProcessMatrixError(f"cannot extract Kraus elements: eigenvalue {values[-1]:.3e}")
    cutoff = policy.kraus_cutoff * float(np.sum(values))
    keep = values > cutoff
    if not np.any(keep):
        raise ProcessMatrixError("process matrix has no eigenvalue above the Kraus cutoff")
    coeffs = (vectors[:, keep] * np.sqrt(values[keep])).T
    kraus = pm.basis.combine(coeffs)
    return QuantumChannel.from_kraus(list(kraus), label=pm.kind)


def process_from_kraus(channel, basis):
    return ProcessMatrix(basis.process_matrix(channel), basis, basis.kind)


def partial_trace_recovery(ns, nca):
    """Kraus R_r[i, i * nca + r] = 1: discard the ancilla, the last tensor factor of the codespace."""
    if ns < 1 or nca < 1:
        raise DimensionError(f"dimensions must be positive, got ns={ns}, nca={nca}")
    kraus = []
    for r in range(nca):
        k = np.zeros((ns, ns * nca), dtype=np.complex128)
        k[np.arange(ns), np.arange(ns) * nca + r] = 1.0
        kraus.append(k)
    return QuantumChannel.from_kraus(kraus, label="R0")


def dominant_rank(x, ratio=None):
    """Smallest k with s_(k+1) / s_1 below `ratio`."""
    ratio = get_policy().dominance_ratio if ratio is None else ratio
    values = hermitian_eig(hermitize(as_matrix(x)))[0]
    if values[0] <= 0.0:
        return 0
    k = 1
    while k < len(values) and values[k] / values[0] >= ratio:
        k += 1
    return k


def _half_step(kind, error_list, fixed, target, trace):
    if kind == "recovery":
        ns, nc = fixed.dim_in, fixed.dim_out
        basis = canonical_basis(ns, nc, "recovery")
        data = [assemble_w_recovery(e, fixed, target, basis) for e in error_list]
    else:
        ns, nc = fixed.dim_out, fixed.dim_in
        basis = canonical_basis(ns, nc, "encoding")
        data = [assemble_w_encoding(e, fixed, target, basis) for e in error_list]
    problem = SdpProblem(tuple(data), basis)
    solution = solve_robust(problem, trace) if len(data) > 1 else solve_dual(problem, trace)
    report = certify(solution, problem)
    if not report.passed:
        logger.warning(f"⚠️ {kind} certificate above tolerance: gap {report.gap:.2e}, slackness {report.slackness_residual:.2e}, "
                       f"dual margin {report.dual_psd_margin:.2e}")
    pm = ProcessMatrix(solution.x, basis, kind)
    channel = project_to_tp(kraus_from_process(pm))
    channel = QuantumChannel(channel.kraus, channel.dim_in, channel.dim_out, kind, {})
    if kind == "recovery":
        achieved = [pipeline_f_avg(channel, e, fixed, target) for e in error_list]
    else:
        achieved = [pipeline_f_avg(fixed, e, channel, target) for e in error_list]
    relaxed = solution.primal_value
    if abs(min(achieved) - relaxed) > get_policy().relaxation_looseness:
        logger.warning(f"⚠️ {kind} relaxation looseness: extracted {min(achieved):.8f} vs relaxed {relaxed:.8f}")
    return HalfStep(channel, pm, solution, min(achieved)), achieved, report


def optimize_recovery(error, encoding, target=None, trace=None):
    """Best recovery for a fixed encoding: (channel, process matrix, SDP solution)."""
    step, _, _ = _half_step("recovery", [error], encoding, target, trace)
    return step.channel, step.process, step.solution


def optimize_encoding(error, recovery, target=None, trace=None):
    step, _, _ = _half_step("encoding", [error], recovery, target, trace)
    return step.channel, step.process, step.solution


def _initial_fidelity(error_list, recovery, encoding, target):
    if recovery is None or encoding is None:
        return None
    return min(pipeline_f_avg(recovery, e, encoding, target) for e in error_list)


def _alternate(error_list, initial_recovery, target, epsilon, max_iters, order, initial_encoding, trace):
    policy = get_policy()
    epsilon = policy.design_epsilon if epsilon is None else epsilon
    max_iters = policy.design_max_iters if max_iters is None else max_iters
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}, got {order!r}")
    if order == "recovery-first" and initial_encoding is None:
        raise ValueError("recovery-first order needs an initial encoding")
    if not initial_recovery.is_trace_preserving(policy.tp_ingest):
        raise ValueError(f"initial recovery is not trace preserving (residual {initial_recovery.tp_residual():.3e})")
    dims = {(e.dim_in, e.dim_out) for e in error_list}
    if len(dims) != 1:
        raise DimensionError(f"error channels disagree on dimensions: {sorted(dims)}")

    recovery, encoding = initial_recovery, initial_encoding
    steps = {}
    entries = []
    snapshots = {}
    worst = {"gap": 0.0, "slackness": 0.0, "failures": 0}
    previous = _initial_fidelity(error_list, recovery, encoding, target)
    converged = False
    sequence = ("encoding", "recovery") if order == "encoding-first" else ("recovery", "encoding")

    def partial(message):
        result = DesignResult(encoding, recovery, tuple(entries), previous, snapshots=dict(snapshots),
                              certificates=dict(worst))
        return DesignError(message, result)

    for iteration in range(1, max_iters + 1):
        values = {}
        for kind in sequence:
            fixed = recovery if kind == "encoding" else encoding
            try:
                step, achieved, report = _half_step(kind, error_list, fixed, target, trace)
            except (SolverError, ProcessMatrixError, ArithmeticError, np.linalg.LinAlgError) as e:
                raise partial(f"{kind} step of iteration {iteration} failed: {e}") from e
            worst["gap"] = max(worst["gap"], report.gap)
            worst["slackness"] = max(worst["slackness"], report.slackness_residual)
            worst["failures"] += 0 if report.passed else 1
            steps[kind] = step
            if kind == "encoding":
                encoding = step.channel
            else:
                recovery = step.channel
            if previous is not None and step.fidelity < previous - policy.monotonicity_slack:
                logger.warning(f"⚠️ iteration {iteration}: {kind} step lowered fidelity {previous:.10f} -> {step.fidelity:.10f}")
            values[kind] = step.fidelity
            previous = step.fidelity
            if iteration == 1 and kind == sequence[0] and kind == "encoding":
                snapshots["encoding_1"] = (recovery, encoding)
        entries.append(TraceEntry(iteration, values["recovery"], values["encoding"]))
        if iteration == 1:
            snapshots["iteration_1"] = (recovery, encoding)
        delta = values[sequence[1]] - values[sequence[0]]
        logger.info(f"Iteration {iteration}: f_avg after encoding {values['encoding']:.6f}, "
                    f"after recovery {values['recovery']:.6f}, change {delta:.2e}")
        if delta < epsilon:
            converged = True
            break
    snapshots["final"] = (recovery, encoding)
    return recovery, encoding, steps, tuple(entries), snapshots, worst, converged


def _finish(error_list, recovery, encoding, steps, entries, snapshots, worst, converged, target, robust):
    per_error = tuple(pipeline_f_avg(recovery, e, encoding, target) for e in error_list)
    final = min(per_error)
    lower = min(f_mixed(pipeline(recovery, e, encoding), target)[0] for e in error_list)
    process_matrices = {kind: (step.process.x, step.solution.y) for kind, step in steps.items()}
    ranks = {kind: dominant_rank(step.process.x) for kind, step in steps.items()}
    return DesignResult(
        encoding=encoding,
        recovery=recovery,
        fidelity_trace=entries,
        final_f_avg=final,
        bounds=(lower, final),
        robust_worst_case=final if robust else None,
        per_error_f_avg=per_error,
        process_matrices=process_matrices,
        snapshots=snapshots,
        dominant_ranks=ranks,
        certificates=worst,
        converged=converged,
        provenance={"errors": [e.label for e in error_list]},
    )


def biconvex_design(error, initial_recovery, target=None, epsilon=None, max_iters=None,
                    order="encoding-first", initial_encoding=None, trace=None):
    """Alternate encoding and recovery SDPs until the per-iteration gain drops below epsilon."""
    run = _alternate([error], initial_recovery, target, epsilon, max_iters, order, initial_encoding, trace)
    return _finish([error], *run, target=target, robust=False)


def robust_design(errors, initial_recovery, target=None, epsilon=None, max_iters=None,
                  order="encoding-first", initial_encoding=None, trace=None):
    """Alternation on the worst case over a set of error channels."""
    errors = list(errors)
    if len(errors) < 2:
        raise ValueError(f"robust design needs at least two error channels, got {len(errors)}")
    run = _alternate(errors, initial_recovery, target, epsilon, max_iters, order, initial_encoding, trace)
    return _finish(errors, *run, target=target, robust=True)


def decoherence_resistant_encoding(error, ns, target=None, trace=None):
    """Best encoding when the recovery only discards the ancilla."""
    nc = error.dim_in
    if nc % ns:
        raise DimensionError(f"codespace dimension {nc} is not a multiple of {ns}")
    recovery = partial_trace_recovery(ns, nc // ns)
    encoding, _, _ = optimize_encoding(error, recovery, target, trace)
    return encoding, pipeline_f_avg(recovery, error, encoding, target)


def complete_isometry_to_unitary(c1, rounding=ISOMETRY_ROUNDING):
    """Square unitary [c1 c2] with c2 from coordinate vectors orthonormalized against c1, by index.

    Columns that are orthonormal only to within `rounding`, as printed data is,
    are first replaced by the polar factor of c1.
    """
    c1 = as_matrix(c1)
    rows, cols = c1.shape
    if cols > rows:
        raise ValueError(f"a {rows}x{cols} matrix cannot have orthonormal columns")
    defect = spectral_norm(dagger(c1) @ c1 - np.eye(cols)) if cols else 0.0
    if defect > rounding:
        raise ValueError(f"input does not have orthonormal columns (defect {defect:.3e})")
    if defect > get_policy().unitary:
        logger.info(f"Re-orthonormalizing {rows}x{cols} isometry with defect {defect:.3e}")
        u, _, v = svd(c1)
        c1 = u @ dagger(v)
    return complete_columns(c1, rows)


def recovery_to_unitary(recovery):
    """U_R = [R_1; R_2; ...], completed to a square unitary when the stack is not square."""
    stacked = np.vstack(recovery.kraus)
    return complete_isometry_to_unitary(stacked)
