"""Batch runs: instances and scenarios in, result rows and tables out.

Scenario draws use numpy's PCG64 generator seeded from the run
configuration, so plans are reproducible across platforms.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .bnb import BnbConfig, Thresholds, run as run_bnb
from .chordal import decompose
from .local import initial_shunt_state, rounding_baseline, three_step
from .matpower import Network, load_case
from .network import (
    Candidate,
    GenMoves,
    MaxKMoves,
    MaxKShunts,
    RopfProblem,
    SOLVED_GAP,
    evaluate_candidate,
    relative_gap,
)
from .relaxation import solve_relaxation

__all__ = [
    "VARIANTS",
    "RunConfig",
    "ResultRow",
    "generate_genmoves_scenarios",
    "run_experiment",
    "format_table",
    "to_csv",
    "write_outputs",
    "revalidate",
]

log = logging.getLogger(__name__)

VARIANTS = ("MAXkshunts", "MAXkmoves", "GENmoves")
RESERVE = 1.02  # generation margin over the total real load


@dataclass
class RunConfig:
    cases: list[str]
    variant: str = "MAXkshunts"
    k: int = 4
    u0: str = "relaxation"  # relaxation | zeros | ones
    seed: int = 42
    scenarios: int = 5
    l: float | None = None
    u: float | None = None
    gap_tol: float = SOLVED_GAP
    sdp_tol: float = 1e-7
    time_limit_s: float = 3600.0
    k_max: int = 1
    min_k: bool = False
    timings: bool = True
    csv_path: str | None = None
    json_path: str | None = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.k < 0:
            raise ValueError("k must be nonnegative")
        if not self.time_limit_s > 0:
            raise ValueError("time limit must be positive")
        if self.u0 not in ("relaxation", "zeros", "ones"):
            raise ValueError(f"unknown u0 source {self.u0!r}")
        if self.scenarios < 1:
            raise ValueError("need at least one scenario")
        for name in ("l", "u"):
            x = getattr(self, name)
            if x is not None and not 0.0 <= x <= 1.0:
                raise ValueError(f"threshold {name} must lie in [0, 1]")
        if self.k_max < 0:
            raise ValueError("k_max must be nonnegative")

    def thresholds(self) -> Thresholds | None:
        if self.l is None and self.u is None:
            return None
        return Thresholds(self.l, self.u, strict=self.variant == "GENmoves")


@dataclass
class ResultRow:
    instance: str
    n_shunts: int | None = None
    k: str = ""  # k, or +/- for GENmoves
    ub: float = math.inf
    lb: float = math.nan
    gap: float = math.nan
    binvar: int | None = None
    nodes: int | None = None
    time_s: float | None = None
    bnb_ub: float | None = None
    bnb_gap: float | None = None
    rounding_ub: float = math.inf
    rounding_gap: float = math.nan
    note: str = ""
    candidate: Candidate | None = field(default=None, repr=False, compare=False)
    P0: dict[int, float] | None = field(default=None, repr=False, compare=False)
    u0: dict[int, int] | None = field(default=None, repr=False, compare=False)

    @property
    def best_ub(self) -> float:
        return self.bnb_ub if self.bnb_ub is not None else self.ub


COLUMNS = [f.name for f in fields(ResultRow) if f.name not in ("candidate", "P0", "u0")]
HEADERS = dict(
    instance="Instance", n_shunts="|S|", k="k", ub="UB", lb="LB", gap="Gap",
    binvar="#binvar", nodes="#nodes", time_s="Time(s)", bnb_ub="B&B UB", bnb_gap="B&B Gap",
    rounding_ub="Rounding UB", rounding_gap="Rounding Gap", note="Note",
)


def generate_genmoves_scenarios(net: Network, seed: int, count: int = 5) -> list[dict[int, float]]:
    """Random generation plans covering the load with a 2% margin."""
    gens = sorted(net.generators)
    pmin = np.array([net.generators[g].pmin for g in gens])
    pmax = np.array([net.generators[g].pmax for g in gens])
    target = RESERVE * sum(b.load.real for b in net.buses.values())
    if pmax.sum() < target:
        raise ValueError("total Pmax cannot cover 1.02 times the load")
    rng = np.random.Generator(np.random.PCG64(seed))
    plans = []
    for _ in range(count):
        P = pmin + rng.random(len(gens)) * (pmax - pmin)
        missing = target - P.sum()
        if missing > 0:
            room = pmax - P
            # every generator covers the same share of its headroom
            alpha = min(1.0, missing / room.sum()) if room.sum() > 0 else 0.0
            P = np.minimum(P + alpha * room, pmax)
            missing = target - P.sum()
            for i in rng.permutation(len(gens)):
                if missing <= 0:
                    break
                step = min(pmax[i] - P[i], missing)
                P[i] += step
                missing -= step
            if target - P.sum() > 1e-9 * max(1.0, target):
                raise ValueError("could not reach the generation target")
            P = np.minimum(P, pmax)
        plans.append({g: float(x) for g, x in zip(gens, P)})
    return plans


def _problems(cfg: RunConfig, net: Network, k: int) -> list[tuple[RopfProblem, dict]]:
    if cfg.variant == "MAXkshunts":
        return [(RopfProblem(net, MaxKShunts(k)), {})]
    if cfg.variant == "MAXkmoves":
        if cfg.u0 == "relaxation":
            u0 = initial_shunt_state(net)
        else:
            u0 = {s: int(cfg.u0 == "ones") for s in net.shunt_buses}
        return [(RopfProblem(net, MaxKMoves(k, u0)), dict(u0=u0))]
    plans = generate_genmoves_scenarios(net, cfg.seed, cfg.scenarios)
    return [(RopfProblem(net, GenMoves(P0, "both")), dict(P0=P0)) for P0 in plans]


def _label(p: RopfProblem, cand: Candidate | None) -> str:
    if not isinstance(p.variant, GenMoves):
        return str(p.variant.k)
    if cand is None:
        return "-"
    return "+" if cand.delta_plus == 1 else "-"


def _solve_row(p: RopfProblem, name: str, extra: dict, deco, opts: RunConfig) -> ResultRow:
    row = ResultRow(name, len(p.shunts), **extra)
    rp = solve_relaxation(p, deco, tol=opts.sdp_tol)
    first = three_step(p)
    row.ub, row.candidate = first.objective, first.candidate
    if rp.status == "optimal":
        row.lb = rp.lower_bound
    elif rp.status == "infeasible":
        row.lb = math.inf
        row.note = "relaxation infeasible"
    else:
        row.note = "relaxation failed"
    row.gap = relative_gap(row.ub, row.lb) if rp.status == "optimal" else math.nan
    if rp.status == "optimal" and not row.gap <= SOLVED_GAP:
        res = run_bnb(
            p,
            BnbConfig(opts.thresholds(), opts.time_limit_s, opts.gap_tol, sdp_tol=opts.sdp_tol),
            root=rp,
            first=first,
            deco=deco,
        )
        row.binvar, row.nodes = res.free_vars, res.nodes
        row.time_s = res.time_s if opts.timings else None
        row.bnb_ub, row.bnb_gap = res.ub, relative_gap(res.ub, row.lb)
        if res.candidate is not None:
            row.candidate = res.candidate
        if res.timed_out:
            row.note = "time limit"
    if rp.status == "optimal":
        r = rounding_baseline(p, rp)
        row.rounding_ub = r.objective
        row.rounding_gap = relative_gap(r.objective, row.lb)
    row.k = _label(p, row.candidate)
    return row


def run_experiment(cfg: RunConfig) -> list[ResultRow]:
    """One row per (instance, scenario); failures become rows with a note."""
    rows: list[ResultRow] = []
    for case in cfg.cases:
        name = Path(case).stem
        try:
            net = load_case(case)
            deco = decompose(net, cfg.k_max)
        except Exception as exc:  # unreadable or invalid case: keep going
            log.warning("%s: %s", case, exc)
            rows.append(ResultRow(name, note=f"error: {exc}"))
            continue
        ks = [cfg.k]
        if cfg.min_k and cfg.variant != "GENmoves":
            ks = list(range(0, len(net.shunt_buses) + 1))
        try:
            probs = None
            for k in ks:
                probs = _problems(cfg, net, k)
                if len(ks) == 1 or math.isfinite(three_step(probs[0][0]).objective):
                    break
        except Exception as exc:
            log.warning("%s: %s", case, exc)
            rows.append(ResultRow(name, len(net.shunt_buses), note=f"error: {exc}"))
            continue
        for p, extra in probs:
            t0 = time.perf_counter()
            try:
                row = _solve_row(p, name, extra, deco, cfg)
            except Exception as exc:
                log.warning("%s: %s", case, exc)
                row = ResultRow(name, len(p.shunts), note=f"error: {exc}", **extra)
            log.info("%s done in %.1fs", name, time.perf_counter() - t0)
            rows.append(row)
    write_outputs(rows, cfg)
    return rows


def _money(x: float | None) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and math.isnan(x):
        return "-"
    if not math.isfinite(x):
        return "Inf" if x > 0 else "-Inf"
    return f"{x:.2f}"


def _pct(gap: float | None, ub: float | None = None) -> str:
    if gap is None:
        return ""
    if ub is not None and not math.isfinite(ub):
        return "-"
    if isinstance(gap, float) and (math.isnan(gap) or not math.isfinite(gap)):
        return "-"
    if gap <= SOLVED_GAP:
        return "0.00%"
    return f"{100.0 * gap:.2f}%"


def _cells(r: ResultRow) -> list[str]:
    return [
        r.instance,
        "" if r.n_shunts is None else str(r.n_shunts),
        r.k,
        _money(r.ub),
        _money(r.lb),
        _pct(r.gap, r.ub),
        "" if r.binvar is None else str(r.binvar),
        "" if r.nodes is None else str(r.nodes),
        "" if r.time_s is None else f"{r.time_s:.2f}",
        _money(r.bnb_ub),
        _pct(r.bnb_gap, r.bnb_ub),
        _money(r.rounding_ub),
        _pct(r.rounding_gap, r.rounding_ub),
        r.note,
    ]


def format_table(rows: list[ResultRow]) -> str:
    """Aligned text table, columns in ResultRow order."""
    head = [HEADERS[c] for c in COLUMNS]
    body = [_cells(r) for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(x.ljust(w) for x, w in zip(line, widths)).rstrip() for line in [head] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow(_cells(r))
    return buf.getvalue()


def _num(x):
    if x is None:
        return None
    return x if math.isfinite(x) else str(x)


def write_outputs(rows: list[ResultRow], cfg: RunConfig) -> None:
    if cfg.csv_path:
        Path(cfg.csv_path).write_text(to_csv(rows))
    if cfg.json_path:
        out = []
        for r in rows:
            d = {c: getattr(r, c) for c in COLUMNS}
            for c in ("ub", "lb", "gap", "bnb_ub", "bnb_gap", "rounding_ub", "rounding_gap"):
                d[c] = _num(d[c])
            d["candidate"] = r.candidate.to_json() if r.candidate is not None else None
            d["P0"] = {str(g): x for g, x in r.P0.items()} if r.P0 is not None else None
            d["u0"] = {str(s): x for s, x in r.u0.items()} if r.u0 is not None else None
            out.append(d)
        cfg_d = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
        Path(cfg.json_path).write_text(json.dumps(dict(config=cfg_d, rows=out), indent=1))


def revalidate(json_path: str, tol: float = 1e-6) -> list[bool]:
    """Re-check every stored candidate against its instance and variant."""
    data = json.loads(Path(json_path).read_text())
    cfg = data["config"]
    ok = []
    nets: dict[str, Network] = {}
    for d in data["rows"]:
        c = d.get("candidate")
        if c is None:
            ok.append(not isinstance(d["ub"], (int, float)))
            continue
        case = next(x for x in cfg["cases"] if Path(x).stem == d["instance"])
        net = nets.setdefault(case, load_case(case))
        cand = Candidate.from_json(c)
        k = int(d["k"]) if cfg["variant"] != "GENmoves" else 0
        if cfg["variant"] == "MAXkshunts":
            v = MaxKShunts(k)
        elif cfg["variant"] == "MAXkmoves":
            v = MaxKMoves(k, {int(s): x for s, x in d["u0"].items()})
        else:
            v = GenMoves({int(g): x for g, x in d["P0"].items()}, "both")
        rep = evaluate_candidate(RopfProblem(net, v), cand, tol)
        best = d["bnb_ub"] if d["bnb_ub"] is not None else d["ub"]
        ok.append(rep.feasible and abs(rep.objective - best) <= 1e-6 * max(1.0, abs(best)))
    return ok
