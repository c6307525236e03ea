"""Thermal states, free energies and the incoherent work formulas.

Energies are in units of the qubit gap, k_B = 1, and every logarithm is
natural, so kT log Z is simply ``log(Z) / beta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import qcore
from .errors import ContractViolation, ResourceLimitError, WorkLockingError
from .qcore import DensityOperator

INCOHERENCE_TOL = 1e-10
SUBSET_SEARCH_MAX_DIM = 20
SINGLE_SHOT_SLACK = 1e-12


@dataclass(frozen=True)
class Bath:
    beta: float

    def __post_init__(self):
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise ContractViolation(f"inverse temperature must be positive and finite, got {self.beta}")

    @property
    def kT(self) -> float:
        return 1.0 / self.beta


@dataclass(frozen=True)
class SingleShotSpec:
    epsilon: float

    def __post_init__(self):
        if not (0.0 <= self.epsilon < 1.0):
            raise ContractViolation(f"failure probability must lie in [0, 1), got {self.epsilon}")


def log_partition(energies, bath: Bath) -> float:
    return float(logsumexp(-bath.beta * np.asarray(energies, dtype=float)))


def thermal_state(energies, bath: Bath) -> tuple[DensityOperator, float]:
    """Gibbs state for ``diag(energies)`` together with its partition function."""
    energies = np.asarray(energies, dtype=float)
    if not np.all(np.isfinite(energies)):
        raise ContractViolation("energies must be finite")
    logz = log_partition(energies, bath)
    pops = np.exp(-bath.beta * energies - logz)
    return DensityOperator.trusted(np.diag(pops).astype(complex), energies), float(np.exp(logz))


def thermal_qubit_excitation(bath: Bath) -> float:
    """Thermal excited-state occupation r = 1 / (1 + e^beta)."""
    return float(1.0 / (1.0 + np.exp(bath.beta)))


def qubit_log_partition(bath: Bath) -> float:
    """log Z_S for H_S = |1><1|."""
    return float(np.log1p(np.exp(-bath.beta)))


def free_energy(rho: DensityOperator, bath: Bath) -> float:
    """F(rho) = tr(rho H) - kT S(rho)."""
    return rho.mean_energy() - bath.kT * qcore.von_neumann_entropy(rho)


def equilibrium_free_energy(energies, bath: Bath) -> float:
    """F(gamma) = -kT log Z."""
    return -bath.kT * log_partition(energies, bath)


def _require_incoherent(rho: DensityOperator) -> None:
    a = qcore.coherence_measure(rho)
    if a >= INCOHERENCE_TOL:
        raise WorkLockingError(
            f"state carries coherence A = {a:.3g} nats; dephase it before extracting work"
        )


def average_work_incoherent(rho: DensityOperator, bath: Bath) -> float:
    """Average extractable work F(rho) - F(gamma) of an incoherent state."""
    _require_incoherent(rho)
    return free_energy(rho, bath) - equilibrium_free_energy(rho.basis_energies, bath)


@dataclass(frozen=True)
class SingleShotResult:
    work: float
    z_epsilon: float
    subset: tuple[int, ...]
    success_probability: float
    at_boundary: bool


def min_partition_subset(probs, energies, bath: Bath, epsilon: float) -> SingleShotResult:
    """Exhaustive minimization of Z(Lambda) over index subsets whose
    probability exceeds 1 - epsilon.

    The strict inequality is evaluated with a 1e-12 slack so that the
    epsilon = 0 case (which needs the whole support) and subsets sitting
    exactly on the boundary are admitted; ``at_boundary`` flags the latter.
    """
    probs = np.asarray(probs, dtype=float)
    energies = np.asarray(energies, dtype=float)
    n = probs.size
    if n > SUBSET_SEARCH_MAX_DIM:
        raise ResourceLimitError(
            f"exact subset search is limited to {SUBSET_SEARCH_MAX_DIM} levels, got {n}"
        )
    masks = ((np.arange(1, 2 ** n)[:, None] >> np.arange(n)) & 1).astype(float)
    mass = masks @ probs
    shift = energies.min()
    weights = np.exp(-bath.beta * (energies - shift))
    z = masks @ weights
    allowed = mass > (1.0 - epsilon) - SINGLE_SHOT_SLACK
    z_allowed = np.where(allowed, z, np.inf)
    best = int(np.argmin(z_allowed))
    tie = np.isclose(z_allowed, z_allowed[best], rtol=1e-13, atol=0.0)
    # among equal Z prefer the subset with more probability
    best = int(np.flatnonzero(tie)[np.argmax(mass[tie])])
    subset = tuple(int(i) for i in np.flatnonzero(masks[best]))
    log_z_eps = float(np.log(z[best])) - bath.beta * shift
    work = -bath.kT * log_z_eps - equilibrium_free_energy(energies, bath)
    at_boundary = bool(abs(mass[best] - (1.0 - epsilon)) <= SINGLE_SHOT_SLACK)
    return SingleShotResult(work, float(np.exp(log_z_eps)), subset, float(mass[best]), at_boundary)


def single_shot_work(rho: DensityOperator, bath: Bath, spec: SingleShotSpec) -> float:
    """Sharp work F_0^eps(rho) - F(gamma) extractable with failure probability eps."""
    return single_shot_details(rho, bath, spec).work


def single_shot_details(rho: DensityOperator, bath: Bath, spec: SingleShotSpec) -> SingleShotResult:
    _require_incoherent(rho)
    return min_partition_subset(rho.populations(), rho.basis_energies, bath, spec.epsilon)


def coherence_work_bound(rho: DensityOperator, bath: Bath) -> float:
    """kT A(rho): the free energy stored in coherence."""
    return bath.kT * qcore.coherence_measure(rho)


@dataclass(frozen=True)
class WorkLockingReport:
    average_work: float
    single_shot_work: float
    epsilon: float
    locked_free_energy: float

    def same_extraction(self, other: "WorkLockingReport") -> bool:
        return (self.average_work == other.average_work
                and self.single_shot_work == other.single_shot_work)


def reference_free_work(rho: DensityOperator, bath: Bath,
                        spec: SingleShotSpec) -> tuple[float, float]:
    """Best average and single-shot work from ``rho`` without a coherence
    source: thermal operations commute with dephasing, so the optimum is
    reached on ``dephase(rho)``."""
    d = qcore.dephase(rho)
    return average_work_incoherent(d, bath), single_shot_work(d, bath, spec)


def work_locking_check(rho: DensityOperator, bath: Bath,
                       spec: SingleShotSpec = SingleShotSpec(0.0)) -> WorkLockingReport:
    avg, ss = reference_free_work(rho, bath, spec)
    locked = coherence_work_bound(rho, bath)
    return WorkLockingReport(avg, ss, spec.epsilon, locked)


def qubit_state(q: float) -> DensityOperator:
    """Incoherent qubit diag(1 - q, q)."""
    if not (-1e-15 <= q <= 1 + 1e-15):
        raise ContractViolation(f"excited population {q} outside [0, 1]")
    q = min(max(q, 0.0), 1.0)
    return DensityOperator.trusted(np.diag([1.0 - q, q]).astype(complex), qcore.qubit_energies())


def qubit_work(q: float, bath: Bath) -> float:
    """Closed-form F(diag(1-q, q)) - F(gamma_S) = q - kT h2(q) + kT log Z."""
    return q - bath.kT * qcore.binary_entropy(q) + bath.kT * qubit_log_partition(bath)
