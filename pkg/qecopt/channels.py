"""Quantum channels in operator-sum (Kraus) form and the seeded error-channel generator."""
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from qecopt.config import DATA_DIR, get_policy
from qecopt.linalg import (
    DegenerateSolutionError,
    DimensionError,
    as_matrix,
    dagger,
    expm_hermitian,
    hermitian_eig,
    hermitize,
    is_hermitian,
    psd_sqrt_inv,
    spectral_norm,
)

logger = logging.getLogger(__name__)

CHANNEL_FORMAT = "qecopt-channel"
CHANNEL_FORMAT_VERSION = 1
MASK64 = (1 << 64) - 1


class ChannelError(ValueError):
    """Raised for malformed channels, channel files or invalid channel parameters."""


def _frozen(m):
    m = np.array(m, dtype=np.complex128)
    m.setflags(write=False)
    return m


@dataclass(frozen=True, eq=False)
class QuantumChannel:
    kraus: Tuple[np.ndarray, ...]
    dim_in: int
    dim_out: int
    label: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.kraus:
            raise ChannelError("a channel needs at least one Kraus element")
        shapes = {k.shape for k in self.kraus}
        if shapes != {(self.dim_out, self.dim_in)}:
            raise ChannelError(f"Kraus elements must all be {self.dim_out}x{self.dim_in}, got {sorted(shapes)}")

    @classmethod
    def from_kraus(cls, kraus, label="", provenance=None):
        mats = [as_matrix(k) for k in kraus]
        if not mats:
            raise ChannelError("a channel needs at least one Kraus element")
        dim_out, dim_in = mats[0].shape
        return cls(tuple(_frozen(k) for k in mats), dim_in, dim_out, label, dict(provenance or {}))

    @property
    def size(self):
        return len(self.kraus)

    def stacked(self):
        return np.stack(self.kraus)

    def normalization(self):
        stack = self.stacked()
        return hermitize(np.einsum("kji,kjl->il", np.conj(stack), stack))

    def tp_residual(self):
        return spectral_norm(self.normalization() - np.eye(self.dim_in))

    def is_trace_preserving(self, tol=None):
        tol = get_policy().tp_internal if tol is None else tol
        return self.tp_residual() <= tol

    def is_square(self):
        return self.dim_in == self.dim_out

    def __repr__(self):
        return f"QuantumChannel({self.label or 'unnamed'}: {self.size} Kraus, {self.dim_out}x{self.dim_in})"


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    mat: np.ndarray
    checked: bool = True

    def __post_init__(self):
        mat = as_matrix(self.mat)
        if mat.shape[0] != mat.shape[1]:
            raise DimensionError(f"density matrix must be square, got {mat.shape}")
        object.__setattr__(self, "mat", _frozen(mat))
        if self.checked:
            policy = get_policy()
            if not is_hermitian(mat, policy.reconstruction):
                raise ChannelError("density matrix is not Hermitian")
            trace = np.trace(mat).real
            if abs(trace - 1.0) > policy.reconstruction:
                raise ChannelError(f"density matrix trace is {trace:.12f}, expected 1")
            smallest = hermitian_eig(hermitize(mat))[0][-1]
            if smallest < -policy.psd:
                raise ChannelError(f"density matrix has negative eigenvalue {smallest:.3e}")

    @property
    def dim(self):
        return self.mat.shape[0]

    @classmethod
    def from_vector(cls, psi):
        psi = np.asarray(psi, dtype=np.complex128).reshape(-1)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, np.conj(psi)))

    @classmethod
    def maximally_mixed(cls, n):
        return cls(np.eye(n, dtype=np.complex128) / n)

    def eigenvalue_gap(self):
        values = hermitian_eig(hermitize(self.mat))[0]
        return float(values[0] - values[1]) if len(values) > 1 else float(values[0])


def apply(ch, rho):
    """Σ_k K ρ K^H; the result is validated as a state only for trace-preserving channels."""
    if not isinstance(rho, DensityMatrix):
        rho = DensityMatrix(rho)
    if rho.dim != ch.dim_in:
        raise DimensionError(f"state of dimension {rho.dim} fed to channel with input dimension {ch.dim_in}")
    stack = ch.stacked()
    out = np.einsum("kab,bc,kdc->ad", stack, rho.mat, np.conj(stack))
    return DensityMatrix(hermitize(out), checked=ch.is_trace_preserving(get_policy().tp_ingest))


def compose(outer, inner):
    """Channel `outer` after `inner`; Kraus set {O_i I_j}, outer index major."""
    if inner.dim_out != outer.dim_in:
        raise DimensionError(f"cannot compose: inner output {inner.dim_out} != outer input {outer.dim_in}")
    products = np.einsum("iab,jbc->ijac", outer.stacked(), inner.stacked())
    kraus = products.reshape(-1, outer.dim_out, inner.dim_in)
    label = f"{outer.label or '?'}*{inner.label or '?'}"
    return QuantumChannel.from_kraus(kraus, label=label)


def identity_channel(n):
    return QuantumChannel.from_kraus([np.eye(n)], label=f"identity{n}")


def unitary_channel(u, label="unitary"):
    u = as_matrix(u)
    if u.shape[0] != u.shape[1] or spectral_norm(dagger(u) @ u - np.eye(u.shape[0])) > get_policy().unitary:
        raise ChannelError("unitary channel needs a unitary matrix")
    return QuantumChannel.from_kraus([u], label=label)


def tp_residual(ch):
    return ch.tp_residual()


def from_unitary_bath(u, dim_sys, bath_state_index, dim_bath):
    """Kraus elements E_e = (I ⊗ <e|) U (I ⊗ |bath_state_index>), bath as the last factor."""
    u = as_matrix(u)
    n = dim_sys * dim_bath
    if u.shape != (n, n):
        raise DimensionError(f"unitary of shape {u.shape} does not act on {dim_sys}x{dim_bath}")
    if not 0 <= bath_state_index < dim_bath:
        raise ChannelError(f"bath state index {bath_state_index} outside 0..{dim_bath - 1}")
    defect = spectral_norm(dagger(u) @ u - np.eye(n))
    if defect > get_policy().unitary:
        raise ChannelError(f"bath model matrix is not unitary (defect {defect:.3e})")
    blocks = u.reshape(dim_sys, dim_bath, dim_sys, dim_bath)
    kraus = [blocks[:, e, :, bath_state_index] for e in range(dim_bath)]
    return QuantumChannel.from_kraus(kraus, label="unitary-bath")


class ShiftRegisterRandom:
    """xorshift64* generator seeded through splitmix64, with Box-Muller normals.

    state ^= state >> 12; state ^= state << 25; state ^= state >> 27 (mod 2^64),
    output = state * 0x2545F4914F6CDD1D (mod 2^64). Uniforms take the top 53 bits.
    """

    def __init__(self, seed):
        z = (int(seed) + 0x9E3779B97F4A7C15) & MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        z ^= z >> 31
        self.state = z or 0x9E3779B97F4A7C15
        self._spare = None

    def next_u64(self):
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def uniform(self):
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def normal(self):
        if self._spare is not None:
            value, self._spare = self._spare, None
            return value
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        radius = math.sqrt(-2.0 * math.log(u1))
        self._spare = radius * math.sin(2.0 * math.pi * u2)
        return radius * math.cos(2.0 * math.pi * u2)

    def normals(self, count):
        return np.array([self.normal() for _ in range(count)], dtype=np.float64)

    def complex_normals(self, shape):
        count = int(np.prod(shape))
        re = self.normals(count)
        im = self.normals(count)
        return (re + 1j * im).reshape(shape)


def random_hermitian(rng, n, norm):
    a = rng.complex_normals((n, n))
    h = hermitize(a)
    return h * (norm / spectral_norm(h))


def random_error_channel(seed, delta_e, dim_sys, dim_bath):
    """Error channel from a random bath Hamiltonian H with ||H|| = delta_e, U = exp(-iH)."""
    if delta_e <= 0:
        raise ChannelError(f"delta_e must be positive, got {delta_e}")
    rng = ShiftRegisterRandom(seed)
    h = random_hermitian(rng, dim_sys * dim_bath, delta_e)
    ch = from_unitary_bath(expm_hermitian(h, 1.0), dim_sys, 0, dim_bath)
    provenance = {"generator": "random_error_channel", "seed": int(seed), "delta_e": float(delta_e),
                  "dim_sys": int(dim_sys), "dim_bath": int(dim_bath)}
    return QuantumChannel(ch.kraus, ch.dim_in, ch.dim_out, f"random-{seed}", provenance)


def project_to_tp(ch):
    """K_k <- K_k (Σ K^H K)^(-1/2)."""
    try:
        correction = psd_sqrt_inv(ch.normalization())
    except DegenerateSolutionError as e:
        raise ChannelError(f"cannot project {ch!r} to trace-preserving form: {e}")
    kraus = [k @ correction for k in ch.kraus]
    return QuantumChannel.from_kraus(kraus, label=ch.label, provenance={**ch.provenance, "projected": True})


def matrix_to_json(m):
    return [[[float(z.real), float(z.imag)] for z in row] for row in as_matrix(m)]


def matrix_from_json(rows):
    try:
        arr = np.array(rows, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ChannelError(f"matrix entries must be [re, im] pairs: {e}")
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ChannelError(f"matrix entries must be [re, im] pairs, got array of shape {arr.shape}")
    return arr[:, :, 0] + 1j * arr[:, :, 1]


def channel_to_dict(ch):
    return {
        "format": CHANNEL_FORMAT,
        "version": CHANNEL_FORMAT_VERSION,
        "label": ch.label,
        "dim_in": ch.dim_in,
        "dim_out": ch.dim_out,
        "kraus": [matrix_to_json(k) for k in ch.kraus],
        "provenance": ch.provenance,
    }


def channel_from_dict(data):
    if data.get("format") != CHANNEL_FORMAT:
        raise ChannelError(f"not a channel document (format={data.get('format')!r})")
    kraus = [matrix_from_json(k) for k in data.get("kraus", [])]
    ch = QuantumChannel.from_kraus(kraus, label=data.get("label", ""), provenance=data.get("provenance"))
    if (ch.dim_in, ch.dim_out) != (data.get("dim_in"), data.get("dim_out")):
        raise ChannelError(f"declared dims {data.get('dim_out')}x{data.get('dim_in')} do not match Kraus shape")
    return ch


def file_sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def load_channel(path):
    """Read a channel file. The raw channel is returned; its TP residual is logged, not enforced."""
    if not os.path.exists(path):
        raise ChannelError(f"channel file not found: {path}")
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ChannelError(f"channel file {path} is not valid JSON: line {e.lineno}, column {e.colno}: {e.msg}")
    ch = channel_from_dict(data)
    residual = ch.tp_residual()
    ch.provenance.setdefault("file", os.path.basename(path))
    ch.provenance["sha256"] = file_sha256(path)
    if residual > get_policy().tp_ingest:
        logger.info(f"⚠️ {path}: trace-preservation residual {residual:.3e}, projection required")
    return ch


def save_channel(ch, path, provenance=None):
    data = channel_to_dict(ch)
    if provenance:
        data["provenance"] = {**data["provenance"], **provenance}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2)
    logger.info(f"✅ Saved channel {ch.label or 'unnamed'} to {path}")


def load_shipped_channel(name):
    """(raw, projected) forms of a shipped channel such as 'error_a'."""
    raw = load_channel(os.path.join(DATA_DIR, f"{name}.json"))
    return raw, project_to_tp(raw)
