"""Executable checks: the entropy-fluctuation demo, the dephasing-covariance
test, the dense pre-processing oracle and the validation suite behind
``cohwork validate``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import ladder, protocol, qcore, thermo
from .errors import ContractViolation
from .ladder import LadderState, RotationSpec
from .qcore import DensityOperator, PureQubit
from .thermo import Bath

# ---------------------------------------------------------------- fluctuations


@dataclass(frozen=True)
class FluctuationReport:
    """Energy-measurement entropy H, von Neumann entropy S and coherence A of
    the ancilla before and after the interaction."""

    h_before: float
    h_after: float
    s_before: float
    s_after: float
    a_before: float
    a_after: float

    @property
    def decomposition_error(self) -> float:
        return max(abs(self.h_before - self.s_before - self.a_before),
                   abs(self.h_after - self.s_after - self.a_after))

    def to_dict(self) -> dict:
        return asdict(self)


def fluctuation_report(before: DensityOperator, after: DensityOperator) -> FluctuationReport:
    return FluctuationReport(
        h_before=qcore.energy_measurement_entropy(before),
        h_after=qcore.energy_measurement_entropy(after),
        s_before=qcore.von_neumann_entropy(before),
        s_after=qcore.von_neumann_entropy(after),
        a_before=qcore.coherence_measure(before),
        a_after=qcore.coherence_measure(after),
    )


def appendix_b_unitary(m: int, margin: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Conserving unitary on (levels 0,1,2) (x) ladder window with
    |0,m> <-> |1,m-1> and |2,m> <-> |1,m+1>, identity elsewhere.

    Returns the unitary, the system energies and the ancilla window levels.
    """
    if m < 1:
        raise ContractViolation("the demo needs m >= 1 so that level m - 1 exists")
    if margin < 1:
        raise ContractViolation("the ancilla window must include levels m - 1 .. m + 1")
    levels = np.arange(max(0, m - margin), m + margin + 1)
    sys_e = np.array([0.0, 1.0, 2.0])
    da = levels.size
    u = np.eye(3 * da, dtype=complex)

    def idx(s, level):
        return s * da + int(level - levels[0])

    for a, b in ((idx(0, m), idx(1, m - 1)), (idx(2, m), idx(1, m + 1))):
        u[[a, b]] = u[[b, a]]
    return u, sys_e, levels.astype(float)


def appendix_b_demo(m: int, margin: int = 1) -> FluctuationReport:
    """(|0> + |2>)/sqrt 2 (x) |m>  ->  |1> (x) (|m-1> + |m+1>)/sqrt 2."""
    u, sys_e, anc_e = appendix_b_unitary(m, margin)
    total = np.add.outer(sys_e, anc_e).ravel()
    if not qcore.commutes_with_energy(u, total):
        raise AssertionError("demo unitary does not conserve energy")
    psi02 = DensityOperator.from_ket(np.array([1.0, 0.0, 1.0]), sys_e)
    anc = qcore.basis_state(int(m - anc_e[0]), anc_e)
    joint = qcore.tensor(psi02, anc)
    out = DensityOperator.trusted(u @ joint.matrix @ u.conj().T, joint.basis_energies,
                                  joint.factor_energies)
    return fluctuation_report(anc, qcore.partial_trace(out, 1))


# ---------------------------------------------------------------- covariance


Channel = Callable[[DensityOperator], DensityOperator]


def covariance_check(channel: Channel, energies, samples: int, rng: np.random.Generator) -> float:
    """max over random inputs of the trace distance between D(E(rho)) and E(D(rho))."""
    energies = np.asarray(energies, dtype=float)
    worst = 0.0
    for i in range(samples):
        rho = qcore.random_pure(energies, rng) if i % 2 else qcore.random_density(energies, rng)
        a = qcore.dephase(channel(rho))
        b = channel(qcore.dephase(rho))
        worst = max(worst, qcore.trace_distance(a, b))
    return worst


def thermal_operation_channel(system_energies, ancilla_energies, bath: Bath,
                              rng: np.random.Generator) -> Channel:
    """Thermal ancilla plus a random conserving unitary, ancilla traced out."""
    gamma, _ = thermo.thermal_state(ancilla_energies, bath)
    total = np.add.outer(np.asarray(system_energies, float), gamma.basis_energies).ravel()
    u = qcore.random_conserving_unitary(total, rng)
    return qcore.conserving_channel(u, gamma, system_energies)


def incoherent_ancilla_channel(system_energies, ancilla: DensityOperator,
                               rng: np.random.Generator) -> Channel:
    if not qcore.is_incoherent(ancilla):
        raise ContractViolation("ancilla carries coherence")
    total = np.add.outer(np.asarray(system_energies, float), ancilla.basis_energies).ravel()
    return qcore.conserving_channel(qcore.random_conserving_unitary(total, rng), ancilla,
                                    system_energies)


def ladder_channel(p: float, reference: LadderState) -> Channel:
    """The qubit channel induced by V(U_p) with a ladder ancilla."""
    ref = reference.to_dense()
    u = ladder.joint_unitary(RotationSpec(p).matrix(), ref.offset, ref.dim)
    return qcore.conserving_channel(u, ref.density_operator(), qcore.qubit_energies())


def identity_channel(rho: DensityOperator) -> DensityOperator:
    return rho


# ---------------------------------------------------------------- dense oracle


def dense_preprocessing(sys: PureQubit, reference: LadderState,
                        rot: RotationSpec | None = None) -> tuple[DensityOperator, DensityOperator]:
    """System and reference marginals of V(U)(|psi><psi| (x) rho_R)V(U)^dag,
    built from the explicit joint matrix."""
    rot = rot or RotationSpec(sys.p)
    ref = reference.to_dense()
    u = ladder.joint_unitary(rot.matrix(), ref.offset, ref.dim)
    joint = qcore.tensor(sys.density(), ref.density_operator())
    out = DensityOperator.trusted(u @ joint.matrix @ u.conj().T, joint.basis_energies,
                                  joint.factor_energies)
    return qcore.partial_trace(out, 0), qcore.partial_trace(out, 1)


def random_reference(rng: np.random.Generator, dim: int = 64, max_L: int = 16,
                     max_offset: int = 24, kind: str = "dense") -> LadderState:
    L = int(rng.integers(2, max_L + 1))
    off = int(rng.integers(0, max_offset + 1))
    theta = float(rng.uniform(-0.5, 0.5))
    return ladder.make_uniform_reference(off, L, dim=dim, theta=theta, kind=kind)


def random_ground_reference(rng: np.random.Generator, dim: int = 64, max_L: int = 16) -> LadderState:
    """Mixed reference with support starting at the ground level."""
    L = int(rng.integers(2, max_L + 1))
    a = rng.normal(size=(L, 3)) + 1j * rng.normal(size=(L, 3))
    m = np.zeros((dim, dim), dtype=complex)
    m[:L, :L] = a @ a.conj().T
    return LadderState.dense(m / np.trace(m), 0)


# ---------------------------------------------------------------- validation


@dataclass
class ValidationItem:
    name: str
    passed: bool
    deviation: float
    tolerance: float
    gating: bool = True
    note: str = ""


def _item(name, deviation, tolerance, gating=True, note="", passed=None) -> ValidationItem:
    ok = bool(deviation <= tolerance) if passed is None else bool(passed)
    return ValidationItem(name, ok, float(deviation), float(tolerance), gating, note)


def run_validation(seed: int = 0, fault: str | None = None) -> list[ValidationItem]:
    """The invariant suite: oracle-vs-formula, conservation and bound checks."""
    if fault is not None:
        with ladder.inject_fault(fault):
            return _validation(seed)
    return _validation(seed)


def _validation(seed: int) -> list[ValidationItem]:
    rng = np.random.default_rng(seed)
    items: list[ValidationItem] = []
    for block in (_oracle_block, _repump_block, _theorem1_block, _closed_form_block,
                  _locking_block, _fluctuation_block, _covariance_block, _repeatability_block):
        try:
            items += block(rng, seed)
        except Exception as exc:  # a crash inside a block is a failed item, not a crashed suite
            items.append(ValidationItem(block.__name__.strip("_"), False, float("inf"), 0.0,
                                        True, f"{type(exc).__name__}: {exc}"))
    return items


def _oracle_block(rng, seed) -> list[ValidationItem]:
    q_fast = q_oracle = kraus = cons = exact = printed = unit = 0.0
    for i in range(20):
        p = float(rng.uniform(0.02, 0.98))
        sys = PureQubit(p)
        ref = random_ground_reference(rng) if i % 4 == 3 else random_reference(rng)
        qp = ladder.quality(ref)
        rho_s, ref_fast = ladder.apply_preprocessing(sys, ref)
        s_dense, r_dense = dense_preprocessing(sys, ref)
        q_pred = ladder.predicted_q(p, qp)
        q_fast = max(q_fast, abs(np.real(rho_s.matrix[1, 1]) - q_pred))
        q_oracle = max(q_oracle, abs(np.real(s_dense.matrix[1, 1]) - q_pred))
        kraus = max(kraus, float(np.max(np.abs(ref_fast.data - r_dense.matrix))))
        d_obs = float(np.real(np.trace(r_dense.matrix, offset=-1))) - qp.delta_bar
        if qp.r00 == 0:
            cons = max(cons, abs(d_obs))
        exact = max(exact, abs(d_obs - ladder.backreaction_delta_quality(p, qp)))
        printed = max(printed, abs(d_obs - ladder.predicted_delta_quality(p, qp)))
        u = ladder.joint_unitary(RotationSpec(p).matrix(), ref.offset, ref.dim)
        unit = max(unit, float(np.max(np.abs(u @ u.conj().T - np.eye(u.shape[0])))))
    return [
        _item("q_formula_vs_kraus_path", q_fast, 1e-10),
        _item("q_formula_vs_dense_oracle", q_oracle, 1e-10),
        _item("kraus_marginal_vs_dense_oracle", kraus, 1e-12),
        _item("delta_bar_conserved_without_ground", cons, 1e-12),
        _item("delta_bar_change_vs_derived_formula", exact, 1e-10),
        _item("delta_bar_change_vs_printed_formula", printed, 1e-10, gating=False,
              note="printed Re R01 coefficient differs from the Kraus-derived one"),
        _item("joint_unitary_is_unitary", unit, 1e-12),
    ]


def _repump_block(rng, seed) -> list[ValidationItem]:
    # V(X) with the weight in |1> acts on the reference as Delta rho Delta^dag
    ref = random_reference(rng, dim=24, max_L=8, max_offset=6)
    vx = ladder.joint_unitary(np.array([[0, 1], [1, 0]], dtype=complex), ref.offset, ref.dim)
    joint = np.kron(np.diag([0.0, 1.0]).astype(complex), ref.data)
    out = (vx @ joint @ vx.conj().T).reshape(2, ref.dim, 2, ref.dim)
    shifted = np.zeros_like(ref.data)
    shifted[1:, 1:] = ref.data[:-1, :-1]
    return [_item("repump_unitary_realises_shift",
                  float(np.max(np.abs(out[0, :, 0, :] - shifted))), 1e-12)]


def _theorem1_block(rng, seed) -> list[ValidationItem]:
    cfg = protocol.ProtocolConfig("theorem1", 1.0, copies=50, confidence_s=2.0, seed=seed)
    rep = protocol.run_theorem1(cfg, PureQubit(0.5), ladder.make_uniform_reference(50, 512))
    dense = protocol.theorem1_dense_check(PureQubit(0.5), ladder.make_uniform_reference(8, 16),
                                          8, 0.5)
    ms = [10 ** k for k in range(3, 7)]
    fit = protocol.fit_loglog(ms, [protocol.analytic_deficit(0.5, m, 2.0) for m in ms])
    return [
        _item("theorem1_success_bound", rep.p_succ_bound - rep.p_succ_observed, 0.0),
        _item("theorem1_delta_bar_bound",
              abs(rep.delta_quality_observed) - rep.delta_quality_bound, protocol.ROUNDOFF),
        _item("gentle_measurement_dense", dense.gentle_distance - dense.gentle_bound,
              protocol.ROUNDOFF),
        _item("analytic_deficit_slope", abs(fit.slope + 1.0 / 3.0), 1e-6),
    ]


def _closed_form_block(rng, seed) -> list[ValidationItem]:
    grid = np.linspace(0.01, 0.99, 25)
    return [
        _item("average_yield_unbounded_limit",
              abs(protocol.average_yield_for(0.5, 1.0, 1.0) - math.log1p(math.exp(-1))), 1e-12),
        _item("delta_epsilon_full_quality",
              max(abs(protocol.delta_epsilon(r, 1.0) - r) for r in grid), 1e-15),
    ]


def _locking_block(rng, seed) -> list[ValidationItem]:
    bath = Bath(1.0)
    lock = 0.0
    for _ in range(10):
        rho = qcore.random_density(qcore.qubit_energies(), rng)
        a = thermo.work_locking_check(rho, bath, thermo.SingleShotSpec(0.1))
        b = thermo.work_locking_check(qcore.dephase(rho), bath, thermo.SingleShotSpec(0.1))
        lock = max(lock, abs(a.average_work - b.average_work),
                   abs(a.single_shot_work - b.single_shot_work))
    return [_item("work_locking", lock, 0.0)]


def _fluctuation_block(rng, seed) -> list[ValidationItem]:
    reports = [appendix_b_demo(m) for m in range(1, 11)]
    dev = max(abs(r.h_after - r.h_before - math.log(2)) for r in reports)
    return [_item("appendix_b_entropy_gain", dev, 1e-12,
                  passed=dev <= 1e-12 and all(r.h_after > r.h_before for r in reports))]


def _covariance_block(rng, seed) -> list[ValidationItem]:
    bath = Bath(1.0)
    cov_inc = max(covariance_check(thermal_operation_channel(qcore.qubit_energies(),
                                                             np.arange(4.0), bath, rng),
                                   qcore.qubit_energies(), 5, rng) for _ in range(10))
    coh = covariance_check(ladder_channel(0.5, ladder.make_uniform_reference(2, 4, dim=10)),
                           qcore.qubit_energies(), 10, rng)
    return [
        _item("covariance_incoherent_ancilla", cov_inc, 1e-10),
        _item("covariance_detects_coherent_ancilla", coh, 1e-3, passed=coh > 1e-3,
              note="deviation must exceed the tolerance"),
    ]


def _repeatability_block(rng, seed) -> list[ValidationItem]:
    bath = Bath(1.0)
    r = thermo.thermal_qubit_excitation(bath)
    ref0 = ladder.make_uniform_reference(1, 16)
    led = protocol.run_average(protocol.ProtocolConfig("average", 1.0, runs=100, seed=seed),
                               PureQubit.coherent_gibbs(r), ref0)
    restored = all(rec.quality_restored for rec in led.records)
    q_spread = float(np.ptp([rec.q for rec in led.records]))
    fe = protocol.free_energy_ledger_check(led, ref0, bath)
    alt = protocol.run_average(protocol.ProtocolConfig("average", 1.0, runs=5, seed=seed + 1),
                               PureQubit.coherent_gibbs(r), ref0)
    return [
        _item("repeatability_quality_restored", q_spread, 1e-12,
              passed=restored and q_spread <= 1e-12),
        _item("reference_free_energy_bound", fe.cumulative_drawn - fe.bound, 1e-8),
        _item("analytic_mode_seed_independent",
              float(np.max(np.abs(alt.net_values() - led.net_values()[:5]))), 0.0),
    ]


def summarize(items: list[ValidationItem]) -> dict:
    failed = [i.name for i in items if i.gating and not i.passed]
    return {"passed": not failed, "failed": failed, "items": [asdict(i) for i in items]}
