"""End-to-end protocol runners with resource accounting.

Three variants share one pre-processing step: the perfectly repeatable
average protocol (repump after every copy), the single-shot protocol, and
the batched protocol that processes M copies, repumps in bulk and restores
the reference with a two-outcome measurement.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.special import erf

from . import ladder, qcore, thermo
from .errors import ContractViolation
from .ladder import LadderState, QualityParams
from .qcore import PureQubit
from .thermo import Bath

VARIANTS = ("average", "single_shot", "theorem1")
MODES = ("analytic", "sampled")
REGIME_MIN = 10.0
ROUNDOFF = 1e-12


@dataclass(frozen=True)
class ProtocolConfig:
    variant: str
    beta: float
    copies: int = 1
    confidence_s: float = 2.0
    seed: int = 0
    mode: str = "analytic"
    runs: int = 1
    track_runs: int = 500

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.copies < 1 or self.runs < 1:
            raise ContractViolation("copies and runs must be at least 1")
        if not self.confidence_s > 0:
            raise ContractViolation("confidence parameter s must be positive")
        Bath(self.beta)

    @property
    def bath(self) -> Bath:
        return Bath(self.beta)

    def regime_flags(self, p: float) -> list[str]:
        flags = []
        if self.copies * p < REGIME_MIN:
            flags.append(f"M*p = {self.copies * p:.3g} is not >> 1")
        if self.copies * (1.0 - p) < REGIME_MIN:
            flags.append(f"M*(1-p) = {self.copies * (1.0 - p):.3g} is not >> 1")
        return flags


@dataclass(frozen=True)
class UnboundedReference:
    """Idealised reference with fixed <Delta_bar> and no ground population,
    unchanged by every run. With delta_bar = 1 its entropy is constant, so
    its free energy gain per run equals its energy gain."""

    delta_bar: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.delta_bar <= 1.0):
            raise ContractViolation("delta_bar must lie in [0, 1]")

    def quality(self) -> QualityParams:
        return QualityParams(self.delta_bar, 1 << 62, 0.0, 0j)


# ---------------------------------------------------------------- ledger


@dataclass
class RunRecord:
    index: int
    work_extracted: float
    repump_spend: float
    erasure_spend: float
    net: float
    q: float
    success: bool = True
    ref_free_energy_gain: float | None = None
    quality_restored: bool | None = None

    @property
    def ref_drawn(self) -> float | None:
        """Free energy taken out of the reference, -(F_after - F_before)."""
        g = self.ref_free_energy_gain
        return None if g is None else -g


@dataclass
class WorkLedger:
    records: list[RunRecord] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    advances: list[dict] = field(default_factory=list)
    final_state: LadderState | None = None

    def add(self, rec: RunRecord) -> None:
        if abs(rec.net - (rec.work_extracted - rec.repump_spend - rec.erasure_spend)) > 1e-12:
            raise ContractViolation("run record does not balance")
        self.records.append(rec)

    def log(self, kind: str, **info) -> None:
        self.events.append({"kind": kind, **info})

    def _col(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def runs(self) -> int:
        return len(self.records)

    @property
    def total_extracted(self) -> float:
        return float(self._col("work_extracted").sum())

    @property
    def total_repump(self) -> float:
        return float(self._col("repump_spend").sum())

    @property
    def total_erasure(self) -> float:
        return float(self._col("erasure_spend").sum())

    @property
    def total_net(self) -> float:
        return float(self._col("net").sum())

    @property
    def mean_net(self) -> float:
        return self.total_net / self.runs

    def net_values(self) -> np.ndarray:
        return self._col("net")

    def failure_frequency(self) -> float:
        return float(np.mean([not r.success for r in self.records]))

    def ref_drawn(self) -> np.ndarray | None:
        vals = [r.ref_drawn for r in self.records]
        if any(v is None for v in vals):
            return None
        return np.array(vals, dtype=float)

    def to_dict(self) -> dict:
        return {
            "runs": self.runs,
            "total_extracted": self.total_extracted,
            "total_repump": self.total_repump,
            "total_erasure": self.total_erasure,
            "total_net": self.total_net,
            "records": [asdict(r) for r in self.records],
            "events": self.events,
            "advances": self.advances,
        }


# ---------------------------------------------------------------- closed forms


def coherence_penalty(p: float, delta_bar: float) -> float:
    return 2.0 * p * (1.0 - p) * (1.0 - delta_bar)


def mean_work_tilde(p: float, delta_bar: float, beta: float) -> float:
    """Average work from one dephased pre-processed copy, before repumping."""
    bath = Bath(beta)
    x = coherence_penalty(p, delta_bar)
    return 1.0 + bath.kT * thermo.qubit_log_partition(bath) - x - bath.kT * qcore.binary_entropy(x)


def pure_state_free_energy(p: float, beta: float) -> float:
    """Delta F(|psi>) = p + kT log Z_S."""
    bath = Bath(beta)
    return p + bath.kT * thermo.qubit_log_partition(bath)


def mean_work_net(p: float, delta_bar: float, beta: float) -> float:
    """Per-copy yield in the many-copy limit, after the (1 - p) repump cost."""
    bath = Bath(beta)
    x = coherence_penalty(p, delta_bar)
    return pure_state_free_energy(p, beta) - x - bath.kT * qcore.binary_entropy(x)


def average_yield(q: float, beta: float) -> float:
    """<W> = q + kT (log Z_S - h2(q)) - 1 for the repump-every-run protocol."""
    return thermo.qubit_work(q, Bath(beta)) - 1.0


def average_yield_for(r: float, delta_bar: float, beta: float) -> float:
    return average_yield(1.0 - coherence_penalty(r, delta_bar), beta)


def critical_delta_bar_average(r: float, beta: float) -> float:
    """Smallest <Delta_bar> with non-negative average yield, nan if none.

    The yield rises with <Delta_bar> whenever q >= 1/2, which always holds
    since 2r(1 - r) <= 1/2, so a single sign change is bracketed on [0, 1].
    """
    f = lambda d: average_yield_for(r, d, beta)
    lo, hi = f(0.0), f(1.0)
    if lo >= 0:
        return 0.0
    if hi < 0:
        return float("nan")
    return float(optimize.brentq(f, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps))


def delta_epsilon(r: float, delta_bar: float) -> float:
    """Reduction r - (1 - q) of the failure probability for extracting kT log Z_S."""
    if not (0.0 <= r <= 1.0) or not (0.0 <= delta_bar <= 1.0):
        raise ContractViolation("r and delta_bar must lie in [0, 1]")
    return r - coherence_penalty(r, delta_bar)


def critical_delta_bar_single_shot(r: float) -> float:
    """<Delta_bar> above which delta_epsilon > 0: 1 - 1 / (2 (1 - r))."""
    if r <= 0.0 or r >= 1.0:
        return float("nan")
    return max(0.0, 1.0 - 1.0 / (2.0 * (1.0 - r)))


def thermal_beta(r: float) -> float:
    """beta at which |gamma> has excited weight r."""
    if not (0.0 < r < 0.5):
        raise ContractViolation("a thermal qubit at positive temperature has 0 < r < 1/2")
    return float(np.log((1.0 - r) / r))


def success_bound(p: float, delta_bar: float, M: int, s: float) -> float:
    """p1^M E_s(M^(1/6)) with E_s(x) = erf(s x / sqrt 2)."""
    return ladder.p_one(p, delta_bar) ** M * confidence_factor(s, M)


def confidence_factor(s: float, M: int) -> float:
    return float(erf(s * M ** (1.0 / 6.0) / np.sqrt(2.0)))


def repump_count(M: int, p: float, s: float) -> int:
    """ceil(M(1-p) + s sigma_M^(4/3)) with sigma_M = sqrt(M p (1-p))."""
    sigma = math.sqrt(M * p * (1.0 - p))
    return int(math.ceil(M * (1.0 - p) + s * sigma ** (4.0 / 3.0) - 1e-9))


def analytic_deficit(p: float, M: int, s: float) -> float:
    """s (p(1-p))^(2/3) M^(-1/3): the excess repump cost per copy."""
    return s * (p * (1.0 - p)) ** (2.0 / 3.0) * M ** (-1.0 / 3.0)


# ---------------------------------------------------------------- helpers


def _canonical(sys: PureQubit, ledger: WorkLedger) -> PureQubit:
    if sys.phi != 0.0:
        ledger.log("z_rotation", angle=-sys.phi, work=0.0)
    return sys.canonical()


def _free_energy(state: LadderState, bath: Bath) -> float:
    return state.mean_energy() - bath.kT * state.entropy()


def ladder_thermal_free_energy(bath: Bath) -> float:
    """F(gamma_R) = kT log(1 - e^-beta) for the semi-infinite ladder."""
    return bath.kT * float(np.log1p(-np.exp(-bath.beta)))


def _sampled_work(q: float, bath: Bath, rng: np.random.Generator) -> float:
    """One draw of the incoherent extraction from diag(1-q, q): outcome i
    yields kT log(p_i / gamma_i), whose mean is the free energy difference."""
    gamma, _ = thermo.thermal_state(qcore.qubit_energies(), bath)
    g = np.real(np.diag(gamma.matrix))
    i = int(rng.uniform() < q)
    pi = q if i == 1 else 1.0 - q
    return bath.kT * float(np.log(pi / g[i]))


def _require_no_ground(state: LadderState) -> QualityParams:
    qp = ladder.quality(state, occupancy=0.0)
    if qp.r00 != 0.0:
        raise ContractViolation("perfect repeatability needs a reference without ground population")
    return qp


# ---------------------------------------------------------------- average


def run_average(cfg: ProtocolConfig, sys: PureQubit, rho_R) -> WorkLedger:
    """Pre-process, dephase, extract Delta F on average, repump; ``cfg.runs`` times."""
    bath = cfg.bath
    rng = np.random.default_rng(cfg.seed)
    ledger = WorkLedger()
    sys = _canonical(sys, ledger)
    if isinstance(rho_R, UnboundedReference):
        q = ladder.predicted_q(sys.p, rho_R.quality())
        for n in range(cfg.runs):
            w = _extract_average(q, bath, cfg.mode, rng)
            gain = 1.0 + sys.p - q if rho_R.delta_bar == 1.0 else None
            ledger.add(RunRecord(n, w, 1.0, 0.0, w - 1.0, q, True, gain, True))
        return ledger

    qp0 = _require_no_ground(rho_R)
    state = rho_R.to_dense()
    f_prev = _free_energy(state, bath)
    for n in range(cfg.runs):
        state = state.with_margins()
        rho_s, state = ladder.apply_preprocessing(sys, state)
        dephased = qcore.dephase(rho_s)
        q = float(np.real(dephased.matrix[1, 1]))
        if cfg.mode == "analytic":
            w = thermo.average_work_incoherent(dephased, bath)
        else:
            w = _sampled_work(q, bath, rng)
        state = ladder.repump(state, strict=False)
        f_now = _free_energy(state, bath)
        restored = ladder.quality(state, occupancy=0.0).same_as(qp0)
        ledger.add(RunRecord(n, w, 1.0, 0.0, w - 1.0, q, True, f_now - f_prev, restored))
        f_prev = f_now
    ledger.final_state = state
    return ledger


def _extract_average(q: float, bath: Bath, mode: str, rng) -> float:
    if mode == "analytic":
        return thermo.qubit_work(q, bath)
    return _sampled_work(q, bath, rng)


# ---------------------------------------------------------------- single shot


def run_single_shot(cfg: ProtocolConfig, sys: PureQubit, rho_R) -> WorkLedger:
    """Epsilon-deterministic extraction of 1 + kT log Z_S with success
    probability q, followed by a unit repump whatever the outcome.

    The reference is evolved explicitly for the first ``cfg.track_runs``
    runs, which shows that its quality and hence q return to the same values
    every run; later runs reuse that q. The tracked state is the reference
    marginal averaged over extraction outcomes.
    """
    bath = cfg.bath
    rng = np.random.default_rng(cfg.seed)
    ledger = WorkLedger()
    sys = _canonical(sys, ledger)
    gain_per_success = 1.0 + bath.kT * thermo.qubit_log_partition(bath)

    qs: list[float] = []
    gains: list[float | None] = []
    restored: list[bool | None] = []
    if isinstance(rho_R, UnboundedReference):
        q = ladder.predicted_q(sys.p, rho_R.quality())
        qs = [q] * cfg.runs
        g = 1.0 + sys.p - q if rho_R.delta_bar == 1.0 else None
        gains = [g] * cfg.runs
        restored = [True] * cfg.runs
    else:
        qp0 = _require_no_ground(rho_R)
        state = rho_R.to_dense()
        f_prev = _free_energy(state, bath)
        for _ in range(min(cfg.runs, cfg.track_runs)):
            state = state.with_margins()
            rho_s, state = ladder.apply_preprocessing(sys, state)
            qs.append(float(np.real(qcore.dephase(rho_s).matrix[1, 1])))
            state = ladder.repump(state, strict=False)
            f_now = _free_energy(state, bath)
            gains.append(f_now - f_prev)
            restored.append(ladder.quality(state, occupancy=0.0).same_as(qp0))
            f_prev = f_now
        ledger.final_state = state
        extra = cfg.runs - len(qs)
        qs += [qs[-1]] * extra
        gains += [None] * extra
        restored += [None] * extra

    if qs[0] > 0:
        detail = thermo.single_shot_details(
            thermo.qubit_state(qs[0]), bath, thermo.SingleShotSpec(min(1.0 - qs[0], 1 - 1e-15)))
        ledger.log("single_shot_target", work=detail.work, subset=list(detail.subset),
                   at_boundary=detail.at_boundary)
    u = rng.uniform(size=cfg.runs)
    for n in range(cfg.runs):
        ok = bool(u[n] < qs[n])
        w = gain_per_success if ok else 0.0
        ledger.add(RunRecord(n, w, 1.0, 0.0, w - 1.0, qs[n], ok, gains[n], restored[n]))
    return ledger


# ---------------------------------------------------------------- many-copy study


@dataclass
class Theorem1Report:
    M: int
    p: float
    delta_bar: float
    p_succ_observed: float
    p_succ_bound: float
    success: bool
    mean_work_per_copy: float
    net_per_copy: float
    deficit_per_copy: float
    deficit_analytic: float
    erasure_cost: float
    delta_quality_observed: float
    delta_quality_bound: float
    delta_quality_conservation: float
    delta_M: int
    m_lowest_after: int
    repump_count: int
    advance: float
    pruned_weight: float
    n_branches: int
    flags: list[str] = field(default_factory=list)

    @property
    def bounds_hold(self) -> bool:
        return (self.p_succ_observed >= self.p_succ_bound
                and abs(self.delta_quality_observed) <= self.delta_quality_bound + ROUNDOFF)

    def to_dict(self) -> dict:
        return asdict(self)


def run_theorem1(cfg: ProtocolConfig, sys: PureQubit, rho_R: LadderState) -> Theorem1Report:
    """M copies without repumping, a bulk repump, then the restoration measurement.

    The M-round reference is the binomial branch ensemble of
    :func:`ladder.binomial_branches`; nothing of size (M+1) x window is held
    in memory at once. The post-measurement lowest level is read off the
    exact support of the ensemble, [m - M + R, ...), rather than thresholded
    floating-point populations.
    """
    bath = cfg.bath
    rng = np.random.default_rng(cfg.seed)
    M, s = cfg.copies, cfg.confidence_s
    ledger = WorkLedger()
    sys = _canonical(sys, ledger)
    p = sys.p
    flags = cfg.regime_flags(p)
    qp = ladder.quality(rho_R, occupancy=0.0)
    if qp.m_lowest < M:
        raise ContractViolation(
            f"reference lowest level {qp.m_lowest} is below the copy count {M}")

    q = ladder.predicted_q(p, qp)
    w_tilde = thermo.qubit_work(q, bath)
    if cfg.mode == "analytic":
        extracted = M * w_tilde
    else:
        extracted = float(sum(_sampled_work(q, bath, rng) for _ in range(M)))
    R = repump_count(M, p, s)
    advance = max(0.0, R - extracted)
    if advance > 0:
        ledger.advances.append({"repumps": R, "available": extracted, "advance": advance})
        flags.append(f"repump budget short by {advance:.6g}")

    summ = ladder.summarize_branches(sys, rho_R, M, shift=R, threshold=M)
    total = float(summ.populations.sum())
    p_succ = min(summ.p_above / total, 1.0)
    conservation = summ.delta_num / total - qp.delta_bar
    delta_after = summ.delta_num_above / summ.p_above if summ.p_above > 0 else float("nan")
    dq = delta_after - qp.delta_bar
    w_e = bath.kT * qcore.binary_entropy(p_succ)
    success = bool(rng.uniform() < p_succ)
    m_after = max(M, qp.m_lowest - M + R)
    net = (extracted - R - w_e) / M
    return Theorem1Report(
        M=M, p=p, delta_bar=qp.delta_bar,
        p_succ_observed=p_succ,
        p_succ_bound=success_bound(p, qp.delta_bar, M, s),
        success=success,
        mean_work_per_copy=extracted / M,
        net_per_copy=net,
        deficit_per_copy=mean_work_net(p, qp.delta_bar, cfg.beta) - net,
        deficit_analytic=analytic_deficit(p, M, s),
        erasure_cost=w_e,
        delta_quality_observed=dq,
        delta_quality_bound=2.0 * math.sqrt(max(1.0 - p_succ, 0.0)),
        delta_quality_conservation=conservation,
        delta_M=m_after - qp.m_lowest,
        m_lowest_after=m_after,
        repump_count=R,
        advance=advance,
        pruned_weight=summ.pruned_weight,
        n_branches=summ.n_branches,
        flags=flags,
    )


@dataclass(frozen=True)
class DenseTheorem1Check:
    p_succ: float
    gentle_distance: float
    gentle_distance_halved: float
    gentle_bound: float
    delta_quality: float
    round_qs: tuple[float, ...]

    @property
    def gentle_holds(self) -> bool:
        return self.gentle_distance <= self.gentle_bound + ROUNDOFF

    @property
    def delta_holds(self) -> bool:
        return abs(self.delta_quality) <= self.gentle_bound + ROUNDOFF


def theorem1_dense_check(sys: PureQubit, rho_R: LadderState, M: int, s: float) -> DenseTheorem1Check:
    """Dense-matrix replay of the batched protocol for small windows, used to
    test the gentle-measurement inequality ||rho'' - P(rho^(M))||_1 <= 2 sqrt(1 - p_succ)."""
    sys = sys.canonical()
    qp = ladder.quality(rho_R, occupancy=0.0)
    if qp.m_lowest < M:
        raise ContractViolation("reference must have no support below level M")
    evolved, qs = ladder.dense_rounds(sys, rho_R, M)
    pumped = evolved.shifted(repump_count(M, sys.p, s))
    above, _, p_succ = ladder.split_at(pumped, M)
    dist = qcore.trace_norm_distance(above.data, pumped.data)
    return DenseTheorem1Check(
        p_succ=p_succ,
        gentle_distance=dist,
        gentle_distance_halved=0.5 * dist,
        gentle_bound=2.0 * math.sqrt(max(1.0 - p_succ, 0.0)),
        delta_quality=above.delta_bar() - qp.delta_bar,
        round_qs=tuple(qs),
    )


# ---------------------------------------------------------------- scaling


@dataclass(frozen=True)
class LogLogFit:
    slope: float
    intercept: float
    stderr: float
    ci_low: float
    ci_high: float


def fit_loglog(x, y, confidence: float = 0.95) -> LogLogFit:
    """Least-squares slope of log y against log x with a t-based interval."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    res = stats.linregress(lx, ly)
    dof = max(lx.size - 2, 1)
    half = float(stats.t.ppf(0.5 + confidence / 2, dof) * res.stderr)
    return LogLogFit(float(res.slope), float(res.intercept), float(res.stderr),
                     float(res.slope) - half, float(res.slope) + half)


# ---------------------------------------------------------------- free energy ledger


@dataclass(frozen=True)
class FreeEnergyLedgerReport:
    runs: int
    cumulative_drawn: float
    bound: float
    bound_holds: bool
    running_average: tuple[float, ...]
    early_magnitude: float
    late_magnitude: float
    trend_decreasing: bool
    gains_nonnegative: bool


def free_energy_ledger_check(ledger: WorkLedger, rho_R_initial, bath: Bath) -> FreeEnergyLedgerReport:
    """Check sum_n (F_before - F_after) <= F(rho_R) - F(gamma_R) + 1e-8 and
    the drift of the running average toward zero."""
    drawn = ledger.ref_drawn()
    if drawn is None:
        raise ContractViolation("ledger lacks reference free-energy entries for some runs")
    if drawn.size < 100:
        raise ContractViolation("the free-energy ledger check needs at least 100 runs")
    if isinstance(rho_R_initial, UnboundedReference):
        bound = float("inf")
    else:
        bound = _free_energy(rho_R_initial, bath) - ladder_thermal_free_energy(bath)
    cum = np.cumsum(drawn)
    running = cum / np.arange(1, drawn.size + 1)
    k = max(drawn.size // 10, 1)
    early = float(np.mean(np.abs(running[:k])))
    late = float(np.mean(np.abs(running[-k:])))
    return FreeEnergyLedgerReport(
        runs=int(drawn.size),
        cumulative_drawn=float(cum[-1]),
        bound=bound,
        bound_holds=bool(np.all(cum <= bound + 1e-8)),
        running_average=tuple(float(v) for v in running),
        early_magnitude=early,
        late_magnitude=late,
        trend_decreasing=late < early,
        gains_nonnegative=bool(np.all(-drawn >= -1e-12)),
    )
