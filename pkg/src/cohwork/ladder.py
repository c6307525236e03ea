"""The ladder reference: truncated states, quality parameters, the joint
pre-processing unitary, its Kraus back-reaction, repumping and the
restoration measurement.

The reference Hamiltonian is H_R = sum_n n|n><n| and the shift operator is
Delta = sum_n |n+1><n|, so Delta^dag Delta = I and Delta Delta^dag = I - |0><0|.
A ``LadderState`` only stores a window [offset, offset + dim) of the ladder.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy import fft as sfft
from scipy.special import gammaln

from . import qcore
from .errors import ContractViolation, DegenerateBranchError, TruncationError
from .qcore import DensityOperator, PureQubit

GUARD = 1e-9
OCCUPANCY = 1e-12
PRUNE = 1e-15
NORM_TOL = 1e-12
DENSE_ORACLE_MAX = 64
STATE_FORMAT = "cohwork.ladder/1"

_FAULTS: set[str] = set()
KNOWN_FAULTS = ("kraus_sign",)


@contextlib.contextmanager
def inject_fault(name: str):
    """Deliberately corrupt the fast Kraus path (mutation testing only)."""
    if name not in KNOWN_FAULTS:
        raise ContractViolation(f"unknown fault {name!r}; known: {KNOWN_FAULTS}")
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


# ---------------------------------------------------------------- states


@dataclass(frozen=True, eq=False)
class LadderState:
    """Reference state on the window [offset, offset + dim).

    ``kind`` is ``"dense"`` (``data`` is a dim x dim matrix) or
    ``"branches"`` (``data`` is a K x dim array of unit vectors with
    probabilities ``weights``).
    """

    offset: int
    kind: str
    data: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        if int(self.offset) != self.offset or self.offset < 0:
            raise ContractViolation(f"window offset must be a non-negative integer, got {self.offset}")
        object.__setattr__(self, "offset", int(self.offset))
        data = np.asarray(self.data, dtype=complex)
        if self.kind == "dense":
            if data.ndim != 2 or data.shape[0] != data.shape[1]:
                raise ContractViolation("dense ladder data must be square")
            tr = np.real(np.trace(data))
            if abs(tr - 1.0) > NORM_TOL * max(1, data.shape[0]):
                raise ContractViolation(f"ladder state trace must be 1, got {tr:.15g}")
        elif self.kind == "branches":
            if data.ndim != 2:
                raise ContractViolation("branch data must be a K x dim array")
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (data.shape[0],) or np.any(w < 0):
                raise ContractViolation("branch weights must be non-negative, one per branch")
            if abs(w.sum() - 1.0) > NORM_TOL * max(1, w.size):
                raise ContractViolation(f"branch weights must sum to 1, got {w.sum():.15g}")
            norms = np.linalg.norm(data, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-10):
                raise ContractViolation("branch vectors must be normalized")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)
        else:
            raise ContractViolation(f"unknown representation {self.kind!r}")
        qcore.check_dim(self.offset + data.shape[1], "ladder window top")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    # construction helpers
    @classmethod
    def dense(cls, matrix, offset: int) -> "LadderState":
        return cls(offset, "dense", matrix)

    @classmethod
    def pure(cls, amplitudes, offset: int) -> "LadderState":
        a = np.asarray(amplitudes, dtype=complex).ravel()
        n = np.linalg.norm(a)
        if n == 0:
            raise ContractViolation("zero amplitude vector")
        return cls(offset, "branches", (a / n)[None, :], np.ones(1))

    @classmethod
    def ensemble(cls, vectors, weights, offset: int) -> "LadderState":
        v = np.atleast_2d(np.asarray(vectors, dtype=complex))
        w = np.asarray(weights, dtype=float)
        norms = np.linalg.norm(v, axis=1)
        keep = (w > 0) & (norms > 0)
        v, w, norms = v[keep], w[keep], norms[keep]
        if w.size == 0:
            raise DegenerateBranchError("ensemble has no branch with positive weight")
        return cls(offset, "branches", v / norms[:, None], w / w.sum())

    # basic properties
    @property
    def dim(self) -> int:
        return self.data.shape[-1]

    @property
    def levels(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + self.dim)

    @property
    def n_branches(self) -> int:
        return 1 if self.kind == "dense" else self.data.shape[0]

    def matrix(self) -> np.ndarray:
        if self.kind == "dense":
            return np.array(self.data)
        v = self.data * np.sqrt(self.weights)[:, None]
        return v.T @ v.conj()

    def to_dense(self) -> "LadderState":
        return self if self.kind == "dense" else LadderState(self.offset, "dense", self.matrix())

    def density_operator(self) -> DensityOperator:
        return DensityOperator.trusted(self.matrix(), self.levels.astype(float))

    def populations(self) -> np.ndarray:
        if self.kind == "dense":
            return np.clip(np.real(np.diag(self.data)), 0.0, None)
        return self.weights @ (np.abs(self.data) ** 2)

    def trace(self) -> float:
        return float(self.populations().sum())

    def mean_energy(self) -> float:
        return float(self.populations() @ self.levels)

    def delta_bar(self) -> float:
        """Re sum_n <n+1|rho|n> over the window."""
        if self.kind == "dense":
            return float(np.real(np.trace(self.data, offset=-1)))
        inner = np.sum(self.data[:, 1:] * self.data[:, :-1].conj(), axis=1)
        return float(self.weights @ np.real(inner))

    def element(self, i: int, j: int) -> complex:
        """<i|rho|j> for absolute levels i, j (0 outside the window)."""
        a, b = i - self.offset, j - self.offset
        if not (0 <= a < self.dim and 0 <= b < self.dim):
            return 0j
        if self.kind == "dense":
            return complex(self.data[a, b])
        return complex(self.weights @ (self.data[:, a] * self.data[:, b].conj()))

    def entropy(self) -> float:
        if self.kind == "dense":
            return qcore.matrix_entropy(self.data)
        v = self.data * np.sqrt(self.weights)[:, None]
        return qcore.matrix_entropy(v.conj() @ v.T)

    def lowest_level(self, occupancy: float = OCCUPANCY) -> int | None:
        occ = np.flatnonzero(self.populations() > occupancy)
        return None if occ.size == 0 else int(self.offset + occ[0])

    def highest_level(self, occupancy: float = OCCUPANCY) -> int | None:
        occ = np.flatnonzero(self.populations() > occupancy)
        return None if occ.size == 0 else int(self.offset + occ[-1])

    # window management
    def shifted(self, k: int) -> "LadderState":
        """Relabel the window k levels up; this is Delta^k rho Delta^dag^k."""
        if self.offset + k < 0:
            raise ContractViolation("cannot shift the window below the ground level")
        return LadderState(self.offset + k, self.kind, self.data, self.weights)

    def padded(self, below: int = 0, above: int = 0) -> "LadderState":
        below = min(int(below), self.offset)
        above = int(above)
        if below == 0 and above == 0:
            return self
        if self.kind == "dense":
            d = self.dim + below + above
            m = np.zeros((d, d), dtype=complex)
            m[below:below + self.dim, below:below + self.dim] = self.data
            return LadderState(self.offset - below, "dense", m)
        v = np.zeros((self.data.shape[0], self.dim + below + above), dtype=complex)
        v[:, below:below + self.dim] = self.data
        return LadderState(self.offset - below, "branches", v, self.weights)

    def with_margins(self, below: int = 2, above: int = 3, edge: float = 1e-30) -> "LadderState":
        """Grow the window until the top ``above`` levels carry less than
        ``edge`` population and the bottom ``below`` levels (above the
        ground) carry none.

        The lower edge is exact because the lowest occupied level is a
        quality parameter: a tail lowered out of the window would change it.
        """
        pops = self.populations()
        need_above = 0
        top = pops[-above:] if above else pops[:0]
        if top.size and top.max() > edge:
            occ = np.flatnonzero(pops > edge)
            need_above = above - (self.dim - 1 - occ[-1])
        need_below = 0
        if self.offset > 0 and below:
            bot = pops[:below]
            if bot.max() > 0.0:
                occ = np.flatnonzero(pops > 0.0)
                need_below = below - occ[0]
        return self.padded(max(need_below, 0), max(need_above, 0))

    def check_guard(self, threshold: float = GUARD) -> None:
        """Raise if the support is close enough to the window edge for one
        pre-processing step to leak population out of the window."""
        pops = self.populations()
        top = pops[-2:].sum()
        if top >= threshold:
            raise TruncationError(
                f"population {top:.3g} in the top two window levels exceeds guard {threshold:g}"
            )
        if self.offset > 0 and pops[0] >= threshold:
            raise TruncationError(
                f"population {pops[0]:.3g} at the bottom window level {self.offset} "
                f"exceeds guard {threshold:g}"
            )

    # serialization
    def to_json(self) -> str:
        d = {
            "format": STATE_FORMAT,
            "offset": self.offset,
            "dim": self.dim,
            "repr": self.kind,
            "data": {"re": np.real(self.data).tolist(), "im": np.imag(self.data).tolist()},
        }
        if self.kind == "branches":
            d["weights"] = self.weights.tolist()
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "LadderState":
        d = json.loads(text)
        if d.get("format") != STATE_FORMAT:
            raise ContractViolation(f"not a ladder state document (format={d.get('format')!r})")
        data = np.asarray(d["data"]["re"]) + 1j * np.asarray(d["data"]["im"])
        if data.shape[-1] != d["dim"]:
            raise ContractViolation("stored dim does not match the data")
        return cls(d["offset"], d["repr"], data, d.get("weights"))


def make_uniform_reference(offset: int, L: int, dim: int | None = None,
                           window_offset: int | None = None, theta: float = 0.0,
                           kind: str = "branches") -> LadderState:
    """(1/sqrt L) sum_{n=offset}^{offset+L-1} e^{i n theta}|n>.

    With theta = 0 this has <Delta_bar> = (L - 1)/L; in general
    (L - 1)/L cos(theta). The window defaults to a few empty levels on each
    side of the support.
    """
    if L < 1:
        raise ContractViolation("L must be at least 1")
    if offset < 0:
        raise ContractViolation("offset must be non-negative")
    if dim is None:
        below = min(offset, 4) if window_offset is None else offset - window_offset
        dim = L + below + 4
    if window_offset is None:
        window_offset = offset - min(offset, max((dim - L) // 2, 0))
    if window_offset > offset or window_offset + dim < offset + L:
        raise TruncationError(f"window [{window_offset}, {window_offset + dim}) cannot hold "
                              f"levels [{offset}, {offset + L})")
    amp = np.zeros(dim, dtype=complex)
    n = np.arange(offset, offset + L)
    amp[offset - window_offset:offset - window_offset + L] = np.exp(1j * theta * n) / np.sqrt(L)
    state = LadderState.pure(amp, window_offset)
    return state.to_dense() if kind == "dense" else state


def make_fock(level: int, dim: int | None = None, window_offset: int | None = None,
              kind: str = "branches") -> LadderState:
    return make_uniform_reference(level, 1, dim, window_offset, kind=kind)


def reference_with_delta_bar(target: float, L: int, offset: int, **kw) -> LadderState:
    """Uniform-modulus reference whose <Delta_bar> equals ``target`` exactly,
    obtained by a phase gradient; needs target <= (L - 1)/L."""
    top = (L - 1) / L
    if target > top + 1e-15 or target < -top - 1e-15:
        raise ContractViolation(f"<Delta_bar> = {target} is not reachable with L = {L}")
    theta = 0.0 if top == 0 else float(np.arccos(np.clip(target / top, -1.0, 1.0)))
    return make_uniform_reference(offset, L, theta=theta, **kw)


# ---------------------------------------------------------------- quality


@dataclass(frozen=True)
class QualityParams:
    delta_bar: float
    m_lowest: int
    r00: float = 0.0
    r01: complex = 0j

    def same_as(self, other: "QualityParams", tol: float = 1e-12) -> bool:
        return (self.m_lowest == other.m_lowest
                and abs(self.delta_bar - other.delta_bar) <= tol
                and abs(self.r00 - other.r00) <= tol)


def quality(state: LadderState, occupancy: float = OCCUPANCY) -> QualityParams:
    low = state.lowest_level(occupancy)
    if low is None:
        raise DegenerateBranchError("no occupied level above the occupancy threshold")
    if state.offset == 0:
        r00 = float(state.populations()[0])
        r01 = state.element(0, 1)
    else:
        r00, r01 = 0.0, 0j
    return QualityParams(state.delta_bar(), low, r00, r01)


# ---------------------------------------------------------------- dynamics


@dataclass(frozen=True)
class RotationSpec:
    """The qubit rotation U with U|psi_p> = |1>."""

    p: float

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise ContractViolation(f"rotation weight must lie in [0, 1], got {self.p}")

    def matrix(self) -> np.ndarray:
        a, b = np.sqrt(self.p), np.sqrt(1.0 - self.p)
        return np.array([[a, -b], [b, a]], dtype=complex)


@dataclass(frozen=True)
class KrausCoefficients:
    """A0 = c_id I + c_ground |0><0| + c_up Delta,  A1 = d_id I + d_down Delta^dag."""

    c_id: complex
    c_ground: complex
    c_up: complex
    d_id: complex
    d_down: complex


def kraus_coefficients(sys: PureQubit, rot: RotationSpec) -> KrausCoefficients:
    """Reference operators <k|V(U)|psi>, read off the block structure of V(U)."""
    u = rot.matrix()
    alpha, beta = sys.ket()
    c = KrausCoefficients(
        c_id=alpha * u[0, 0],
        c_ground=alpha * (1.0 - u[0, 0]),
        c_up=beta * u[0, 1],
        d_id=beta * u[1, 1],
        d_down=alpha * u[1, 0],
    )
    if "kraus_sign" in _FAULTS:
        c = KrausCoefficients(c.c_id, c.c_ground, c.c_up, c.d_id, -c.d_down)
    return c


def published_kraus(p: float) -> KrausCoefficients:
    """The printed A0/A1 for |psi> with phase 0 and the matching U."""
    s = np.sqrt(p * (1.0 - p))
    return KrausCoefficients(s, (1.0 - np.sqrt(p)) * np.sqrt(1.0 - p), -s, p, 1.0 - p)


def _up(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    out[..., 1:] = x[..., :-1]
    return out


def _down(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    out[..., :-1] = x[..., 1:]
    return out


def _apply_vec(x: np.ndarray, which: int, c: KrausCoefficients, offset: int) -> np.ndarray:
    """Apply A_which to the vectors on the last axis of ``x`` (window coordinates)."""
    if which == 0:
        out = c.c_id * x + c.c_up * _up(x)
        if offset == 0:
            out[..., 0] += c.c_ground * x[..., 0]
        return out
    return c.d_id * x + c.d_down * _down(x)


def _sandwich(m: np.ndarray, left: int, right: int, c: KrausCoefficients, offset: int) -> np.ndarray:
    """A_left m A_right^dag for a window matrix m."""
    z = _apply_vec(m.T, left, c, offset).T
    # (A_right z^dag)^dag with z = A_left m
    return _apply_vec(z.conj(), right, c, offset).conj()


def kraus_operator(which: int, c: KrausCoefficients, offset: int, dim: int) -> np.ndarray:
    """Explicit window matrix of A0 or A1."""
    return _apply_vec(np.eye(dim, dtype=complex), which, c, offset).T


def kraus_apply(state: LadderState, which: int, p: float,
                guard: float = GUARD) -> tuple[LadderState, float]:
    """Normalized A_which rho A_which^dag and its probability, for the
    canonical |psi_p> and rotation U_p."""
    if which not in (0, 1):
        raise ContractViolation("which must be 0 (A0) or 1 (A1)")
    state.check_guard(guard)
    c = kraus_coefficients(PureQubit(p), RotationSpec(p))
    if state.kind == "dense":
        m = _sandwich(state.data, which, which, c, state.offset)
        w = float(np.real(np.trace(m)))
        if w <= 0:
            raise DegenerateBranchError(f"Kraus A{which} has zero weight on this state")
        return LadderState(state.offset, "dense", m / w), w
    v = _apply_vec(state.data, which, c, state.offset)
    bw = state.weights * np.sum(np.abs(v) ** 2, axis=1)
    w = float(bw.sum())
    if w <= 0:
        raise DegenerateBranchError(f"Kraus A{which} has zero weight on this state")
    return LadderState.ensemble(v, bw / w, state.offset), w


def predicted_q(p: float, qp: QualityParams) -> float:
    """Excited population after pre-processing."""
    return 1.0 - 2.0 * p * (1.0 - p) * (1.0 - qp.delta_bar) - (1.0 - p) ** 2 * qp.r00


def p_one(p: float, delta_bar: float) -> float:
    """Probability of the A1 branch on a state without ground population."""
    return 1.0 - 2.0 * p * (1.0 - p) * (1.0 - delta_bar)


def predicted_delta_quality(p: float, qp: QualityParams) -> float:
    """Change of <Delta_bar> under pre-processing in the printed form
    (1-p)[(1 + sqrt p - 2p) Re R01 - sqrt p R00].

    The printed coefficient of Re R01 does not follow from the Kraus pair;
    :func:`backreaction_delta_quality` gives the value the dynamics produce.
    Both vanish when R00 = R01 = 0.
    """
    sp = np.sqrt(p)
    return (1.0 - p) * ((1.0 + sp - 2.0 * p) * np.real(qp.r01) - sp * qp.r00)


def backreaction_delta_quality(p: float, qp: QualityParams) -> float:
    """Change of <Delta_bar> under pre-processing, derived from A0 and A1:
    (1-p)[(sqrt p - 1) Re R01 - sqrt p R00]."""
    sp = np.sqrt(p)
    return (1.0 - p) * ((sp - 1.0) * np.real(qp.r01) - sp * qp.r00)


def _check_phase(sys: PureQubit) -> None:
    if abs(np.angle(np.exp(1j * sys.phi))) > 1e-12:
        raise ContractViolation("rotate the system to phi = 0 before pre-processing "
                                "(use PureQubit.canonical)")


def apply_preprocessing(sys: PureQubit, state: LadderState, rot: RotationSpec | None = None,
                        guard: float = GUARD) -> tuple[DensityOperator, LadderState]:
    """One use of V(U): returns the system marginal and the reference marginal
    A0 rho A0^dag + A1 rho A1^dag."""
    _check_phase(sys)
    rot = rot or RotationSpec(sys.p)
    state.check_guard(guard)
    c = kraus_coefficients(sys, rot)
    off = state.offset
    if state.kind == "dense":
        m = state.data
        r0 = _sandwich(m, 0, 0, c, off)
        r1 = _sandwich(m, 1, 1, c, off)
        cross = np.trace(_sandwich(m, 0, 1, c, off))
        s00, s11 = np.real(np.trace(r0)), np.real(np.trace(r1))
        ref = LadderState(off, "dense", (r0 + r1) / (s00 + s11))
    else:
        v0 = _apply_vec(state.data, 0, c, off)
        v1 = _apply_vec(state.data, 1, c, off)
        w = state.weights
        n0 = np.sum(np.abs(v0) ** 2, axis=1)
        n1 = np.sum(np.abs(v1) ** 2, axis=1)
        s00, s11 = float(w @ n0), float(w @ n1)
        cross = complex(w @ np.sum(v0 * v1.conj(), axis=1))
        vecs = np.concatenate([v0, v1])
        bw = np.concatenate([w * n0, w * n1])
        keep = bw >= PRUNE * bw.sum()
        ref = LadderState.ensemble(vecs[keep], bw[keep], off)
    rho_s = np.array([[s00, cross], [np.conj(cross), s11]], dtype=complex)
    rho_s /= s00 + s11
    return DensityOperator.trusted(rho_s, qcore.qubit_energies()), ref


def joint_unitary(u: np.ndarray, offset: int, dim: int) -> np.ndarray:
    """Dense V(U) on qubit (x) window, ordered as kron(qubit, window).

    Blocks of total energy l couple |0, l> and |1, l-1>. A block with only one
    of its two states inside the window is completed by the identity so the
    matrix stays exactly unitary; the truncation guard keeps such edge states
    unpopulated.
    """
    if dim > DENSE_ORACLE_MAX * 4:
        qcore.check_dim(2 * dim, "joint oracle dimension")
    u = np.asarray(u, dtype=complex)
    d2 = 2 * dim
    v = np.zeros((d2, d2), dtype=complex)

    def idx(n, level):
        j = level - offset
        return n * dim + j if 0 <= j < dim else None

    for l in range(offset, offset + dim + 1):
        if l == 0:
            i = idx(0, 0)
            v[i, i] = 1.0
            continue
        a, b = idx(0, l), idx(1, l - 1)
        if a is not None and b is not None:
            v[a, a], v[a, b] = u[0, 0], u[0, 1]
            v[b, a], v[b, b] = u[1, 0], u[1, 1]
        else:
            for i in (a, b):
                if i is not None:
                    v[i, i] = 1.0
    return v


def repump(state: LadderState, strict: bool = True) -> LadderState:
    """Delta rho Delta^dag, implemented by relabeling the window one level up.

    ``strict`` enforces the no-ground-population precondition. The
    weight-assisted unitary sigma_- (x) Delta + sigma_+ (x) Delta^dag + |00><00|
    realises the shift even with ground population when the weight starts
    in |1>, so callers that knowingly repump a ground-populated state pass
    ``strict=False``.
    """
    if strict and state.offset == 0 and state.populations()[0] > 0:
        raise ContractViolation("repumping requires no population in the reference ground state")
    return state.shifted(1)


@dataclass(frozen=True)
class MeasurementResult:
    outcome: str
    state: LadderState
    p_above: float
    erasure_entropy: float

    def erasure_cost(self, kT: float) -> float:
        return kT * self.erasure_entropy


def split_at(state: LadderState, level: int) -> tuple[LadderState | None, LadderState | None, float]:
    """Normalized projections onto levels >= ``level`` and < ``level``, and
    the probability of the upper part."""
    cut = int(np.clip(level - state.offset, 0, state.dim))
    pops = state.populations()
    p_above = float(pops[cut:].sum() / pops.sum())

    def part(lo, hi, prob):
        if prob <= 0:
            return None
        if state.kind == "dense":
            m = np.zeros_like(state.data)
            m[lo:hi, lo:hi] = state.data[lo:hi, lo:hi]
            return LadderState(state.offset, "dense", m / np.real(np.trace(m)))
        v = np.zeros_like(state.data)
        v[:, lo:hi] = state.data[:, lo:hi]
        bw = state.weights * np.sum(np.abs(v) ** 2, axis=1)
        return LadderState.ensemble(v, bw, state.offset)

    return part(cut, state.dim, p_above), part(0, cut, 1.0 - p_above), p_above


def restoration_measurement(state: LadderState, M: int,
                            rng: np.random.Generator) -> MeasurementResult:
    """Two-outcome measurement {levels < M, levels >= M} sampled with ``rng``."""
    above, below, p_above = split_at(state, M)
    outcome = "above" if rng.uniform() < p_above else "below"
    post = above if outcome == "above" else below
    return MeasurementResult(outcome, post, p_above, qcore.binary_entropy(p_above))


# ------------------------------------------------- batched binomial branches


@dataclass
class BranchSummary:
    """Aggregates of the M-round reference state, accumulated branch by branch."""

    base: int
    populations: np.ndarray
    delta_num: float = 0.0
    delta_num_above: float = 0.0
    delta_num_below: float = 0.0
    p_above: float = 0.0
    n_branches: int = 0
    pruned_weight: float = 0.0
    weights: list = field(default_factory=list)


def _fft_window(state: LadderState, rounds: int):
    low = state.lowest_level(0.0)
    if low is None:
        raise DegenerateBranchError("empty reference")
    if low < rounds:
        raise ContractViolation(
            f"reference occupies level {low} < {rounds}: the branch expansion needs "
            "no support in the first M levels"
        )
    high = state.highest_level(0.0)
    lo, hi = low - state.offset, high - state.offset + 1
    L = hi - lo
    W = L + 2 * rounds
    N = sfft.next_fast_len(W)
    qcore.check_dim(N, "branch FFT length")
    return lo, hi, low - rounds, W, N


def binomial_branches(sys: PureQubit, state: LadderState, rounds: int,
                      chunk: int | None = None) -> Iterator[tuple[int, np.ndarray, int, np.ndarray]]:
    """Yield (input_branch, ks, base, amplitudes) chunks for the reference
    after ``rounds`` pre-processing steps.

    With no ground population during the rounds, A0 and A1 are commuting
    polynomials in Delta and Delta^dag, so the rounds collapse to C(M, k)
    copies of A0^k A1^(M-k): M + 1 branches per input branch. Each is
    evaluated in Fourier space, where Delta is multiplication by
    exp(-2 pi i f / N); magnitudes are combined in log form so the binomial
    factors never overflow. Row i of ``amplitudes`` is the unnormalized
    branch k = ks[i] on levels base, base + 1, ...; it already carries
    sqrt(C(M, k)) and the square root of the input branch weight.
    """
    _check_phase(sys)
    c = kraus_coefficients(sys, RotationSpec(sys.p))
    lo, hi, base, W, N = _fft_window(state, rounds)
    if chunk is None:
        chunk = int(np.clip(2_000_000 // N, 1, 256))
    omega = np.exp(-2j * np.pi * np.fft.fftfreq(N))
    a0 = c.c_id + c.c_up * omega
    a1 = c.d_id + c.d_down * np.conj(omega)
    z0, z1 = np.abs(a0) == 0, np.abs(a1) == 0
    la0 = np.log(np.where(z0, 1.0, np.abs(a0)))
    la1 = np.log(np.where(z1, 1.0, np.abs(a1)))
    M = rounds
    d_log, m_log = la0 - la1, M * la1
    d_ph, m_ph = np.angle(a0) - np.angle(a1), M * np.angle(a1)
    kk = np.arange(M + 1)
    half_logc = 0.5 * (gammaln(M + 1) - gammaln(kk + 1) - gammaln(M - kk + 1))
    if state.kind == "dense":
        evals, evecs = np.linalg.eigh(state.data)
        keep = evals > PRUNE
        vecs, wts = evecs[:, keep].T, evals[keep]
    else:
        vecs, wts = state.data, state.weights
    for b, (vec, wt) in enumerate(zip(vecs, wts)):
        x = np.zeros(N, dtype=complex)
        x[rounds:rounds + (hi - lo)] = vec[lo:hi] * np.sqrt(wt)
        xf = sfft.fft(x)
        for k0 in range(0, M + 1, chunk):
            ks = kk[k0:k0 + chunk]
            col = ks[:, None]
            mag = np.multiply(col, d_log)
            mag += m_log
            mag += half_logc[ks][:, None]
            ph = np.multiply(col, d_ph)
            ph += m_ph
            factor = np.empty(mag.shape, dtype=complex)
            # columns where a0 or a1 vanishes may overflow here; they are reset below
            with np.errstate(over="ignore", invalid="ignore"):
                np.exp(mag, out=mag)
                factor.real = np.cos(ph) * mag
                factor.imag = np.sin(ph) * mag
            if z0.any():
                factor[np.ix_(ks > 0, z0)] = 0.0
            if z1.any():
                factor[np.ix_(ks < M, z1)] = 0.0
            factor *= xf
            yield b, ks, base, sfft.ifft(factor, axis=1, overwrite_x=True)[:, :W]


def summarize_branches(sys: PureQubit, state: LadderState, rounds: int, shift: int,
                       threshold: int, chunk: int | None = None) -> BranchSummary:
    """Stream the M-round branches, relabel them ``shift`` levels up and
    accumulate populations, <Delta_bar> numerators and the weight on levels
    >= ``threshold``."""
    summary = None
    for _, _, base, amps in binomial_branches(sys, state, rounds, chunk):
        if summary is None:
            summary = BranchSummary(base + shift, np.zeros(amps.shape[1]))
        pops = amps.real ** 2 + amps.imag ** 2
        summary.populations += pops.sum(axis=0)
        weight = pops.sum(axis=1)
        summary.weights.extend(weight.tolist())
        summary.n_branches += amps.shape[0]
        summary.pruned_weight += float(weight[weight < PRUNE].sum())
        cut = int(np.clip(threshold - summary.base, 0, amps.shape[1]))
        pair = np.real(amps[:, 1:] * amps[:, :-1].conj()).sum(axis=0)
        summary.delta_num += float(pair.sum())
        summary.delta_num_above += float(pair[cut:].sum())
        summary.delta_num_below += float(pair[:max(cut - 1, 0)].sum())
        summary.p_above += float(pops[:, cut:].sum())
    return summary


def materialize_branches(sys: PureQubit, state: LadderState, rounds: int,
                         prune: float = PRUNE) -> LadderState:
    """The M-round reference as an explicit branch ensemble (small sizes)."""
    vecs, wts, base = [], [], None
    for _, _, base, amps in binomial_branches(sys, state, rounds):
        w = np.sum(np.abs(amps) ** 2, axis=1)
        keep = w >= prune
        vecs.append(amps[keep])
        wts.append(w[keep])
    if base < 0:
        raise ContractViolation("branch window extends below the ground level")
    return LadderState.ensemble(np.concatenate(vecs), np.concatenate(wts), base)


def dense_rounds(sys: PureQubit, state: LadderState, rounds: int) -> tuple[LadderState, list[float]]:
    """Apply the pre-processing channel ``rounds`` times with dense matrices,
    growing the window as needed; also returns each round's excited population."""
    cur = state.to_dense()
    qs = []
    for _ in range(rounds):
        cur = cur.with_margins(below=2, above=3)
        rho_s, cur = apply_preprocessing(sys, cur)
        qs.append(float(np.real(rho_s.matrix[1, 1])))
    return cur, qs
