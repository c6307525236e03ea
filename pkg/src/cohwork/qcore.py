"""Dense density-operator toolkit: tensor products, partial traces, dephasing,
entropies and distances.

Energies are measured in units of the qubit gap and entropies in nats.
Everything here works on explicit complex matrices and serves as the
reference layer that the faster ladder code is checked against.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import unitary_group

from .errors import ContractViolation, ResourceLimitError

STATE_TOL = 1e-12
EIG_CLAMP = 1e-12
ENERGY_DECIMALS = 9
DEFAULT_MAX_DIM = 1 << 20


def max_dim() -> int:
    """Window/dimension cap, overridable through ``COHWORK_MAX_DIM``."""
    raw = os.environ.get("COHWORK_MAX_DIM")
    if raw is None:
        return DEFAULT_MAX_DIM
    try:
        value = int(raw)
    except ValueError as exc:
        raise ContractViolation(f"COHWORK_MAX_DIM must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ContractViolation("COHWORK_MAX_DIM must be positive")
    return value


def check_dim(dim: int, what: str = "dimension") -> None:
    cap = max_dim()
    if dim > cap:
        raise ResourceLimitError(
            f"{what} {dim} exceeds the configured maximum {cap} "
            "(raise COHWORK_MAX_DIM to allow it)"
        )


@dataclass(frozen=True, eq=False)
class DensityOperator:
    """A normalized, Hermitian, positive semidefinite matrix with an energy
    label for each basis vector.

    ``factor_energies`` records the tensor factorization (one energy array per
    subsystem) when the operator was built by :func:`tensor`; it is what
    :func:`partial_trace` relies on.
    """

    matrix: np.ndarray
    basis_energies: np.ndarray
    factor_energies: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        e = np.asarray(self.basis_energies, dtype=float).ravel()
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ContractViolation(f"density matrix must be square, got shape {m.shape}")
        if e.shape[0] != m.shape[0]:
            raise ContractViolation(
                f"{e.shape[0]} basis energies given for a {m.shape[0]}-dimensional state"
            )
        if self.factor_energies is not None:
            factors = tuple(np.asarray(f, dtype=float).ravel() for f in self.factor_energies)
            if int(np.prod([f.size for f in factors])) != m.shape[0]:
                raise ContractViolation("factor dimensions do not multiply to the state dimension")
            object.__setattr__(self, "factor_energies", factors)
        m.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "basis_energies", e)
        _validate_state(m)

    @classmethod
    def trusted(cls, matrix, basis_energies, factor_energies=None) -> "DensityOperator":
        """Build without the eigenvalue check, for internally produced states."""
        obj = object.__new__(cls)
        m = np.array(matrix, dtype=complex)
        e = np.array(basis_energies, dtype=float).ravel()
        m.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(obj, "matrix", m)
        object.__setattr__(obj, "basis_energies", e)
        if factor_energies is not None:
            factor_energies = tuple(np.asarray(f, dtype=float).ravel() for f in factor_energies)
        object.__setattr__(obj, "factor_energies", factor_energies)
        return obj

    @classmethod
    def from_ket(cls, ket, basis_energies) -> "DensityOperator":
        ket = np.asarray(ket, dtype=complex).ravel()
        norm = np.linalg.norm(ket)
        if norm == 0:
            raise ContractViolation("zero vector is not a state")
        ket = ket / norm
        return cls(np.outer(ket, ket.conj()), basis_energies)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        if self.factor_energies is None:
            return (self.dim,)
        return tuple(f.size for f in self.factor_energies)

    def populations(self) -> np.ndarray:
        return np.clip(np.real(np.diag(self.matrix)), 0.0, None)

    def mean_energy(self) -> float:
        return float(np.real(np.diag(self.matrix)) @ self.basis_energies)


def _validate_state(m: np.ndarray) -> None:
    tr = np.trace(m)
    if abs(tr - 1.0) > STATE_TOL * max(1, m.shape[0]):
        raise ContractViolation(f"trace must be 1, got {tr:.15g}")
    if np.max(np.abs(m - m.conj().T), initial=0.0) > STATE_TOL:
        raise ContractViolation("density matrix is not Hermitian")
    evals = np.linalg.eigvalsh(m)
    if evals.size and evals[0] < -EIG_CLAMP * max(1, m.shape[0]):
        raise ContractViolation(f"density matrix has negative eigenvalue {evals[0]:.3g}")


def qubit_energies() -> np.ndarray:
    """Energies of the system qubit with H_S = |1><1|."""
    return np.array([0.0, 1.0])


def basis_state(index: int, energies) -> DensityOperator:
    energies = np.asarray(energies, dtype=float)
    ket = np.zeros(energies.size, dtype=complex)
    ket[index] = 1.0
    return DensityOperator.from_ket(ket, energies)


def maximally_mixed(energies) -> DensityOperator:
    energies = np.asarray(energies, dtype=float)
    d = energies.size
    return DensityOperator(np.eye(d, dtype=complex) / d, energies)


def tensor(a: DensityOperator, b: DensityOperator) -> DensityOperator:
    """Product state ``a ⊗ b``; the total Hamiltonian is the sum of the parts."""
    dim = a.dim * b.dim
    check_dim(dim, "tensor dimension")
    fa = a.factor_energies or (a.basis_energies,)
    fb = b.factor_energies or (b.basis_energies,)
    energies = np.add.outer(a.basis_energies, b.basis_energies).ravel()
    return DensityOperator.trusted(np.kron(a.matrix, b.matrix), energies, fa + fb)


def partial_trace(joint: DensityOperator, keep: int | Sequence[int]) -> DensityOperator:
    """Trace out every factor not listed in ``keep``.

    ``keep`` indexes the factors recorded when ``joint`` was built with
    :func:`tensor` (0 is the leftmost factor).
    """
    if joint.factor_energies is None:
        raise ContractViolation("state carries no tensor factorization to trace over")
    dims = joint.dims
    keep = sorted({keep} if isinstance(keep, (int, np.integer)) else set(keep))
    n = len(dims)
    if not keep or any(k < 0 or k >= n for k in keep):
        raise ContractViolation(f"keep={keep} is not a subset of factors 0..{n - 1}")
    traced = [i for i in range(n) if i not in keep]
    t = joint.matrix.reshape(dims + dims)
    # contract each traced factor's ket index with its bra index
    letters = "abcdefghijklmnopqrstuvwxyz"
    ket = list(letters[:n])
    bra = list(letters[n:2 * n])
    for i in traced:
        bra[i] = ket[i]
    out = "".join(ket[i] for i in keep) + "".join(bra[i] for i in keep)
    reduced = np.einsum("".join(ket) + "".join(bra) + "->" + out, t)
    d_keep = int(np.prod([dims[i] for i in keep]))
    reduced = reduced.reshape(d_keep, d_keep)
    factors = tuple(joint.factor_energies[i] for i in keep)
    if len(factors) == 1:
        return DensityOperator.trusted(reduced, factors[0])
    energies = factors[0]
    for f in factors[1:]:
        energies = np.add.outer(energies, f).ravel()
    return DensityOperator.trusted(reduced, energies, factors)


@dataclass(frozen=True)
class EnergyBasisProjectors:
    """Partition of basis indices into equal-energy groups."""

    groups: tuple[tuple[int, ...], ...]

    @classmethod
    def from_energies(cls, energies) -> "EnergyBasisProjectors":
        keys = np.round(np.asarray(energies, dtype=float), ENERGY_DECIMALS)
        groups: dict[float, list[int]] = {}
        for i, k in enumerate(keys):
            groups.setdefault(float(k), []).append(i)
        return cls(tuple(tuple(g) for _, g in sorted(groups.items())))

    def labels(self, dim: int) -> np.ndarray:
        lab = np.empty(dim, dtype=int)
        for gi, g in enumerate(self.groups):
            lab[list(g)] = gi
        return lab


def dephase(rho: DensityOperator, proj: EnergyBasisProjectors | None = None) -> DensityOperator:
    """Remove coherence between different energy eigenspaces, i.e. apply
    ``sum_i Pi_i rho Pi_i``."""
    if proj is None:
        proj = EnergyBasisProjectors.from_energies(rho.basis_energies)
    lab = proj.labels(rho.dim)
    mask = lab[:, None] == lab[None, :]
    return DensityOperator.trusted(np.where(mask, rho.matrix, 0.0), rho.basis_energies,
                                   rho.factor_energies)


def is_incoherent(rho: DensityOperator, tol: float = 1e-10) -> bool:
    return coherence_measure(rho) < tol


def _xlogx_sum(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    p = np.where((p < 0) & (p >= -EIG_CLAMP), 0.0, p)
    if np.any(p < 0):
        raise ContractViolation(f"negative probability {p.min():.3g}")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def shannon_entropy(probs) -> float:
    """Shannon entropy in nats with 0 log 0 = 0."""
    val = _xlogx_sum(probs)
    return 0.0 if val == 0 else val


def binary_entropy(x: float) -> float:
    """h2(x) = -x log x - (1-x) log(1-x), natural log."""
    x = float(x)
    if x < -EIG_CLAMP or x > 1 + EIG_CLAMP:
        raise ContractViolation(f"binary entropy argument {x} outside [0, 1]")
    x = min(max(x, 0.0), 1.0)
    return shannon_entropy([x, 1.0 - x])


def matrix_entropy(matrix: np.ndarray) -> float:
    """Von Neumann entropy of a raw Hermitian matrix."""
    return _xlogx_sum(np.linalg.eigvalsh(matrix))


def von_neumann_entropy(rho: DensityOperator) -> float:
    return matrix_entropy(rho.matrix)


def energy_distribution(rho: DensityOperator) -> np.ndarray:
    """Probabilities of the outcomes of an energy measurement, aggregated over
    degenerate levels and ordered by increasing energy."""
    proj = EnergyBasisProjectors.from_energies(rho.basis_energies)
    pops = np.real(np.diag(rho.matrix))
    return np.array([pops[list(g)].sum() for g in proj.groups])


def energy_measurement_entropy(rho: DensityOperator) -> float:
    return shannon_entropy(energy_distribution(rho))


def coherence_measure(rho: DensityOperator) -> float:
    """Relative entropy of coherence S(rho || D(rho)) = S(D(rho)) - S(rho)."""
    val = von_neumann_entropy(dephase(rho)) - von_neumann_entropy(rho)
    return max(val, 0.0)


def trace_norm(a: np.ndarray) -> float:
    """Sum of absolute eigenvalues of a Hermitian matrix."""
    return float(np.sum(np.abs(np.linalg.eigvalsh(a))))


def _as_matrix(x) -> np.ndarray:
    return x.matrix if isinstance(x, DensityOperator) else np.asarray(x, dtype=complex)


def trace_distance(rho, sigma) -> float:
    """Half the trace norm of ``rho - sigma`` (1 for orthogonal pure states)."""
    return 0.5 * trace_norm_distance(rho, sigma)


def trace_norm_distance(rho, sigma) -> float:
    """Full trace norm ``||rho - sigma||_1`` (2 for orthogonal pure states)."""
    a, b = _as_matrix(rho), _as_matrix(sigma)
    if a.shape != b.shape:
        raise ContractViolation(f"dimension mismatch {a.shape} vs {b.shape}")
    return trace_norm(a - b)


def apply_kraus(rho: np.ndarray, kraus: Sequence[np.ndarray]) -> np.ndarray:
    out = np.zeros_like(rho, dtype=complex)
    for k in kraus:
        out += k @ rho @ k.conj().T
    return out


def commutes_with_energy(unitary: np.ndarray, energies, tol: float = 1e-12) -> bool:
    e = np.asarray(energies, dtype=float)
    h = np.diag(e)
    return float(np.max(np.abs(unitary @ h - h @ unitary))) < tol


def random_conserving_unitary(energies, rng: np.random.Generator) -> np.ndarray:
    """Haar-random unitary inside each equal-energy eigenspace, which is the
    general form of a unitary commuting with ``diag(energies)``."""
    energies = np.asarray(energies, dtype=float)
    u = np.zeros((energies.size, energies.size), dtype=complex)
    for g in EnergyBasisProjectors.from_energies(energies).groups:
        idx = np.array(g)
        if idx.size == 1:
            u[idx[0], idx[0]] = np.exp(2j * np.pi * rng.uniform())
        else:
            u[np.ix_(idx, idx)] = unitary_group.rvs(idx.size, random_state=rng)
    return u


def conserving_channel(unitary: np.ndarray, ancilla: DensityOperator,
                       system_energies) -> Callable[[DensityOperator], DensityOperator]:
    """Channel rho -> tr_A[U (rho ⊗ ancilla) U^dag] on the system."""
    system_energies = np.asarray(system_energies, dtype=float)
    total = np.add.outer(system_energies, ancilla.basis_energies).ravel()
    if not commutes_with_energy(unitary, total):
        raise ContractViolation("joint unitary does not conserve total energy")

    def channel(rho: DensityOperator) -> DensityOperator:
        joint = tensor(rho, ancilla)
        evolved = DensityOperator.trusted(unitary @ joint.matrix @ unitary.conj().T,
                                          joint.basis_energies, joint.factor_energies)
        return partial_trace(evolved, 0)

    return channel


def random_density(energies, rng: np.random.Generator, rank: int | None = None) -> DensityOperator:
    """Random mixed state of the given rank (full rank by default)."""
    energies = np.asarray(energies, dtype=float)
    d = energies.size
    rank = d if rank is None else rank
    g = rng.normal(size=(d, rank)) + 1j * rng.normal(size=(d, rank))
    m = g @ g.conj().T
    return DensityOperator(m / np.trace(m), energies)


def random_pure(energies, rng: np.random.Generator) -> DensityOperator:
    energies = np.asarray(energies, dtype=float)
    ket = rng.normal(size=energies.size) + 1j * rng.normal(size=energies.size)
    return DensityOperator.from_ket(ket, energies)


@dataclass(frozen=True)
class PureQubit:
    """|psi> = sqrt(1 - p)|0> + e^{i phi} sqrt(p)|1>."""

    p: float
    phi: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise ContractViolation(f"excited-state weight must lie in [0, 1], got {self.p}")
        if not np.isfinite(self.phi):
            raise ContractViolation("phase must be finite")

    @classmethod
    def coherent_gibbs(cls, r: float) -> "PureQubit":
        """|gamma>: populations of the thermal qubit with zero relative phase."""
        return cls(r, 0.0)

    def ket(self) -> np.ndarray:
        return np.array([np.sqrt(1.0 - self.p), np.exp(1j * self.phi) * np.sqrt(self.p)])

    def density(self) -> DensityOperator:
        k = self.ket()
        return DensityOperator.trusted(np.outer(k, k.conj()), qubit_energies())

    def canonical(self) -> "PureQubit":
        """Same weights with phi = 0, reached by a z-rotation at zero work cost."""
        return PureQubit(self.p, 0.0)
