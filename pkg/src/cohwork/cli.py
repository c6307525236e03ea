"""Command-line driver: parameter sweeps, scaling studies, validation and the
entropy-fluctuation demo.

Every run takes one JSON config document (``--config``); flags override the
seed and extraction mode. CSV files start with a versioned schema comment and
the fully resolved config, and all floats are written with 12 significant
digits so that repeated runs are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import checks, ladder, protocol
from .errors import CohworkError, ContractViolation
from .qcore import PureQubit

log = logging.getLogger("cohwork")

SCHEMA_VERSION = 1
SWEEP_VARIANTS = ("average", "single_shot")
SIG_DIGITS = 12


# ---------------------------------------------------------------- formatting


def fmt(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    x = float(value)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if x == 0.0:
        x = 0.0  # drop the sign of negative zero
    return f"{x:.{SIG_DIGITS}g}"


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


def dump_json(obj: Any) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def render_csv(kind: str, config: dict, columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(f"# cohwork-csv v{SCHEMA_VERSION} {kind}\n")
    buf.write("# config: " + json.dumps(_jsonable(config), sort_keys=True) + "\n")
    buf.write(f"# seed: {config.get('seed')}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    Path(out).write_text(text)


# ---------------------------------------------------------------- config


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ContractViolation("the config must be a JSON object")
    return cfg


def _require(cfg: dict, key: str) -> Any:
    if key not in cfg:
        raise ContractViolation(f"config is missing the required key {key!r}")
    return cfg[key]


def _grid(raw: Any, name: str) -> list[float]:
    """A list of numbers, or {"start", "stop", "num"} for an inclusive linspace."""
    if isinstance(raw, dict):
        try:
            values = np.linspace(float(raw["start"]), float(raw["stop"]), int(raw["num"]))
        except KeyError as exc:
            raise ContractViolation(f"{name}: a range needs start, stop and num") from exc
        return [float(v) for v in values]
    if not isinstance(raw, list):
        raise ContractViolation(f"{name} must be a list or a start/stop/num range")
    return [float(v) for v in raw]


@dataclass(frozen=True)
class SweepSpec:
    r_grid: tuple[float, ...]
    delta_bar_grid: tuple[float, ...]
    beta: float | str
    variant: str

    def __post_init__(self):
        if self.variant not in SWEEP_VARIANTS:
            raise ContractViolation(f"sweep variant must be one of {SWEEP_VARIANTS}")
        for name, g in (("r_grid", self.r_grid), ("delta_bar_grid", self.delta_bar_grid)):
            if len(g) == 0:
                raise ContractViolation(f"{name} is empty")
            if any(b < a for a, b in zip(g, g[1:])):
                raise ContractViolation(f"{name} must be sorted")
            if g[0] < 0.0 or g[-1] > 1.0:
                raise ContractViolation(f"{name} values must lie in [0, 1]")
        if self.beta == "thermal":
            if self.r_grid[0] <= 0.0 or self.r_grid[-1] >= 0.5:
                raise ContractViolation("beta = 'thermal' needs every r in (0, 1/2)")
        elif isinstance(self.beta, str) or not (self.beta > 0 and math.isfinite(self.beta)):
            raise ContractViolation("beta must be a positive number or 'thermal'")

    def beta_for(self, r: float) -> float:
        return protocol.thermal_beta(r) if self.beta == "thermal" else float(self.beta)

    @classmethod
    def from_config(cls, cfg: dict) -> "SweepSpec":
        beta = _require(cfg, "beta")
        if not isinstance(beta, str):
            beta = float(beta)
        return cls(tuple(_grid(_require(cfg, "r_grid"), "r_grid")),
                   tuple(_grid(_require(cfg, "delta_bar_grid"), "delta_bar_grid")),
                   beta, str(_require(cfg, "variant")))


@dataclass(frozen=True)
class SimulationSpec:
    """Finite reference used for the simulated sweep column."""

    L: int
    offset: int
    runs: int
    track_runs: int = 20

    @classmethod
    def from_config(cls, cfg: dict) -> "SimulationSpec":
        sim = _require(cfg, "simulation")
        out = cls(int(_require(sim, "L")), int(_require(sim, "offset")), int(_require(sim, "runs")),
                  int(sim.get("track_runs", cls.track_runs)))
        if out.L < 2 or out.offset < 1 or out.runs < 1:
            raise ContractViolation("simulation needs L >= 2, offset >= 1 and runs >= 1")
        return out


def _resolve(cfg: dict, args: argparse.Namespace) -> dict:
    out = dict(cfg)
    if args.seed is not None:
        out["seed"] = args.seed
    out.setdefault("seed", 0)
    if args.mode is not None:
        out["mode"] = args.mode
    out.setdefault("mode", "analytic")
    out["simulate"] = bool(args.simulate or cfg.get("simulate", False))
    return out


def _workers(cfg: dict) -> int:
    return int(cfg.get("workers", min(8, os.cpu_count() or 1)))


# ---------------------------------------------------------------- sweep


SWEEP_COLUMNS = ("r", "delta_bar", "beta", "value", "threshold", "above_threshold")


def sweep_point(spec: SweepSpec, r: float, d: float) -> tuple:
    beta = spec.beta_for(r)
    if spec.variant == "average":
        value = protocol.average_yield_for(r, d, beta)
        crit = protocol.critical_delta_bar_average(r, beta)
    else:
        value = protocol.delta_epsilon(r, d)
        crit = protocol.critical_delta_bar_single_shot(r)
    # the closed forms are monotone in <Delta_bar>, so this flag equals value > 0 up to roundoff
    above = bool(not math.isnan(crit) and d > crit)
    return r, d, beta, value, crit, above


def simulate_point(spec: SweepSpec, sim: SimulationSpec, r: float, d: float,
                   seed: int, mode: str) -> float:
    """The same surface point from explicit protocol runs with a finite
    reference; nan when <Delta_bar> is out of reach for the given L."""
    if d > (sim.L - 1) / sim.L + 1e-15 or r in (0.0, 1.0):
        return float("nan")
    ref = ladder.reference_with_delta_bar(d, sim.L, sim.offset, kind="dense")
    beta = spec.beta_for(r)
    sys_ = PureQubit(r)
    if spec.variant == "average":
        cfg = protocol.ProtocolConfig("average", beta, seed=seed, mode=mode, runs=sim.runs)
        return protocol.run_average(cfg, sys_, ref).mean_net
    cfg = protocol.ProtocolConfig("single_shot", beta, seed=seed, mode=mode, runs=sim.runs,
                                  track_runs=sim.track_runs)
    return r - protocol.run_single_shot(cfg, sys_, ref).failure_frequency()


def cmd_sweep(spec: SweepSpec, out: str | None, config: dict,
              sim: SimulationSpec | None = None) -> str:
    points = [(r, d) for r in spec.r_grid for d in spec.delta_bar_grid]
    columns = list(SWEEP_COLUMNS)
    with ThreadPoolExecutor(max_workers=_workers(config)) as pool:
        rows = list(pool.map(lambda rd: sweep_point(spec, *rd), points))
        if sim is not None:
            columns.append("simulated")
            seed, mode = int(config["seed"]), str(config["mode"])
            simulated = list(pool.map(lambda rd: simulate_point(spec, sim, *rd, seed, mode), points))
            rows = [row + (s,) for row, s in zip(rows, simulated)]
    text = render_csv(f"sweep-{spec.variant}", config, columns, rows)
    _emit(text, out)
    return text


# ---------------------------------------------------------------- many-copy study


THEOREM1_COLUMNS = ("M", "p_succ_bound", "p_succ_observed", "deficit_per_copy",
                    "deficit_analytic", "delta_quality_observed", "delta_quality_bound",
                    "repump_count", "bounds_hold")


@dataclass(frozen=True)
class Theorem1Study:
    p: float
    L: int
    M_grid: tuple[int, ...]
    config: protocol.ProtocolConfig
    simulate: bool

    @classmethod
    def from_config(cls, cfg: dict) -> "Theorem1Study":
        grid = tuple(int(m) for m in _require(cfg, "M_grid"))
        if not grid or any(m < 1 for m in grid) or list(grid) != sorted(set(grid)):
            raise ContractViolation("M_grid must be a non-empty, strictly increasing list of positive integers")
        pc = protocol.ProtocolConfig("theorem1", float(_require(cfg, "beta")),
                                     confidence_s=float(_require(cfg, "confidence_s")),
                                     seed=int(cfg["seed"]), mode=str(cfg["mode"]))
        p = float(_require(cfg, "p"))
        if not 0.0 < p < 1.0:
            raise ContractViolation("p must lie in (0, 1)")
        L = int(_require(cfg, "L"))
        if L < 1:
            raise ContractViolation("L must be positive")
        return cls(p, L, grid, pc, bool(cfg["simulate"]))


def theorem1_row(study: Theorem1Study, M: int) -> tuple:
    s = study.config.confidence_s
    delta_bar = (study.L - 1) / study.L
    if not study.simulate:
        bound = protocol.success_bound(study.p, delta_bar, M, s)
        d = protocol.analytic_deficit(study.p, M, s)
        return (M, bound, None, d, d, None, None, protocol.repump_count(M, study.p, s), None)
    cfg = protocol.ProtocolConfig("theorem1", study.config.beta, copies=M, confidence_s=s,
                                  seed=study.config.seed + M, mode=study.config.mode)
    ref = ladder.make_uniform_reference(M, study.L)
    rep = protocol.run_theorem1(cfg, PureQubit(study.p), ref)
    return (M, rep.p_succ_bound, rep.p_succ_observed, rep.deficit_per_copy, rep.deficit_analytic,
            rep.delta_quality_observed, rep.delta_quality_bound, rep.repump_count, rep.bounds_hold)


def cmd_theorem1(study: Theorem1Study, out: str | None, config: dict) -> tuple[str, dict]:
    """Per-M rows plus a JSON report with the fitted log-log slope of the deficit."""
    with ThreadPoolExecutor(max_workers=_workers(config)) as pool:
        rows = list(pool.map(lambda m: theorem1_row(study, m), study.M_grid))
    text = render_csv("theorem1", config, THEOREM1_COLUMNS, rows)
    report: dict[str, Any] = {"schema": f"cohwork.theorem1/{SCHEMA_VERSION}", "config": config,
                              "rows": [dict(zip(THEOREM1_COLUMNS, r)) for r in rows]}
    deficits = [r[3] for r in rows]
    if len(rows) >= 2 and all(d > 0 for d in deficits):
        fit = protocol.fit_loglog(study.M_grid, deficits)
        report["fit"] = asdict(fit)
        report["expected_slope"] = -1.0 / 3.0
    else:
        report["fit"] = None
    _emit(text, out)
    if out not in (None, "-"):
        Path(out).with_suffix(".json").write_text(dump_json(report))
    return text, report


# ---------------------------------------------------------------- validate / demo


def cmd_validate(seed: int, fault: str | None = None) -> tuple[int, dict]:
    items = checks.run_validation(seed, fault)
    summary = checks.summarize(items)
    summary["seed"] = seed
    summary["fault"] = fault
    return (0 if not summary["failed"] else 1), summary


DEMO_COLUMNS = ("m", "h_before", "h_after", "h_gain", "s_before", "s_after",
                "a_before", "a_after", "decomposition_error")


def cmd_demo(levels: Sequence[int], out: str | None, config: dict) -> str:
    rows = []
    for m in levels:
        r = checks.appendix_b_demo(int(m))
        rows.append((m, r.h_before, r.h_after, r.h_after - r.h_before, r.s_before, r.s_after,
                     r.a_before, r.a_after, r.decomposition_error))
    text = render_csv("demo-appendix-b", config, DEMO_COLUMNS, rows)
    _emit(text, out)
    return text


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cohwork", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required):
        p.add_argument("--config", required=config_required, help="JSON config document")
        p.add_argument("--out", default=None, help="output path (stdout when omitted)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--mode", choices=protocol.MODES, default=None)
        p.add_argument("--simulate", action="store_true")

    common(sub.add_parser("sweep", help="closed-form boost surfaces"), True)
    common(sub.add_parser("theorem1", help="many-copy scaling study"), True)
    v = sub.add_parser("validate", help="run the invariant suite")
    common(v, False)
    v.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    common(sub.add_parser("demo-appendix-b", help="entropy-fluctuation example"), False)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(load_config(args.config), args)
        if args.command == "sweep":
            spec = SweepSpec.from_config(cfg)
            sim = SimulationSpec.from_config(cfg) if cfg["simulate"] else None
            cmd_sweep(spec, args.out, cfg, sim)
        elif args.command == "theorem1":
            _, report = cmd_theorem1(Theorem1Study.from_config(cfg), args.out, cfg)
            if report["fit"] is not None:
                log.info("deficit slope %.6f", report["fit"]["slope"])
        elif args.command == "validate":
            status, summary = cmd_validate(int(cfg["seed"]), args.inject_fault)
            _emit(dump_json(summary), args.out)
            for name in summary["failed"]:
                print(f"validation failed: {name}", file=sys.stderr)
            return status
        else:
            cmd_demo(cfg.get("levels", list(range(1, 11))), args.out, cfg)
    except (CohworkError, ValueError, OSError) as exc:
        print(f"cohwork: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
