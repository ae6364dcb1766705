"""MATPOWER case file parsing.

Reads the ``mpc`` struct format (version 2) into a :class:`RawCase` holding the
tables exactly as written, merges co-located generators, and normalizes the
result to a per-unit :class:`Network`.

Column layouts follow the MATPOWER case format::

    bus:     bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
    gen:     bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin ...
    branch:  fbus tbus r x b rateA rateB rateC ratio angle status angmin angmax
    gencost: model startup shutdown n c(n-1) ... c0

Phase shifts follow MATPOWER's convention (the shift angle is applied to the
from-side tap, ``tap = ratio * exp(j*angle)``). The flow formulas used in
:mod:`ropf.network` carry the opposite sign on the angle, so ``theta`` is
stored as ``-radians(angle)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

__all__ = [
    "CaseFormatError",
    "RawCase",
    "Bus",
    "Generator",
    "Branch",
    "Network",
    "parse_case",
    "aggregate_generators",
    "to_network",
    "load_case",
    "builtin_case_path",
]

# bus columns
BUS_I, BUS_TYPE, PD, QD, GS, BS = 0, 1, 2, 3, 4, 5
VMAX, VMIN = 11, 12
# gen columns
GEN_BUS, QMAX, QMIN, GEN_STATUS, PMAX, PMIN = 0, 3, 4, 7, 8, 9
# branch columns
F_BUS, T_BUS, BR_R, BR_X, BR_B, RATE_A, TAP, SHIFT, BR_STATUS = 0, 1, 2, 3, 4, 5, 8, 9, 10

_TABLES = ("bus", "gen", "branch", "gencost")
_NUMBER = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?$|^[-+]?(Inf|inf|NaN|nan)$")


class CaseFormatError(ValueError):
    """Raised for malformed or unsupported case files."""


@dataclass
class RawCase:
    baseMVA: float
    bus_table: list[list[float]]
    gen_table: list[list[float]]
    branch_table: list[list[float]]
    gencost_table: list[list[float]]
    version: str = "2"

    def copy(self) -> "RawCase":
        return RawCase(
            self.baseMVA,
            [list(r) for r in self.bus_table],
            [list(r) for r in self.gen_table],
            [list(r) for r in self.branch_table],
            [list(r) for r in self.gencost_table],
            self.version,
        )


@dataclass(frozen=True)
class Bus:
    id: int
    load: complex
    vmin: float
    vmax: float
    shunt: complex | None = None  # g + j*b, per unit; None when the bus has no shunt
    kind: int = 1


@dataclass(frozen=True)
class Generator:
    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    cost: float  # linear cost per p.u. of active power
    const: float = 0.0


@dataclass(frozen=True)
class Branch:
    orig: int
    dest: int
    y: complex
    b: float  # charging susceptance at each end (half the MATPOWER total)
    tau: float = 1.0
    theta: float = 0.0
    imax: float = math.inf


@dataclass
class Network:
    """Per-unit network: buses keyed by id, generators keyed by bus id."""

    buses: dict[int, Bus]
    generators: dict[int, Generator]
    branches: list[Branch]
    baseMVA: float = 100.0
    name: str = ""
    bus_index: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.bus_index = {bid: k for k, bid in enumerate(self.buses)}
        for bus in self.buses.values():
            if bus.vmin > bus.vmax:
                raise CaseFormatError(f"bus {bus.id}: vmin > vmax")
        for gen in self.generators.values():
            if gen.bus not in self.buses:
                raise CaseFormatError(f"generator at unknown bus {gen.bus}")
            if gen.pmin > gen.pmax or gen.qmin > gen.qmax:
                raise CaseFormatError(f"generator at bus {gen.bus}: inverted bounds")
        for br in self.branches:
            if br.orig not in self.buses or br.dest not in self.buses:
                raise CaseFormatError(f"branch {br.orig}-{br.dest} references unknown bus")
            if br.tau <= 0:
                raise CaseFormatError(f"branch {br.orig}-{br.dest}: non-positive ratio")

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def shunt_buses(self) -> list[int]:
        return [b.id for b in self.buses.values() if b.shunt is not None]

    @property
    def gen_buses(self) -> list[int]:
        return list(self.generators)

    @property
    def reference_bus(self) -> int:
        for bus in self.buses.values():
            if bus.kind == 3:
                return bus.id
        if self.generators:
            return next(iter(self.generators))
        return next(iter(self.buses))


def _strip_comment(line: str) -> str:
    # '%' inside quoted strings only appears in name cells, which are skipped
    return line.split("%", 1)[0]


def parse_case(text: str) -> RawCase:
    """Parse MATPOWER case text into raw tables (no unit conversion)."""
    lines = text.splitlines()
    base_mva = None
    version = None
    tables: dict[str, list[list[float]]] = {}
    i = 0
    while i < len(lines):
        stmt = _strip_comment(lines[i]).strip()
        lineno = i + 1
        i += 1
        if not stmt:
            continue
        m = re.match(r"mpc\.version\s*=\s*'([^']*)'", stmt)
        if m:
            version = m.group(1)
            continue
        m = re.match(r"mpc\.baseMVA\s*=\s*([^;]+);?", stmt)
        if m:
            try:
                base_mva = float(m.group(1))
            except ValueError:
                raise CaseFormatError(f"line {lineno}: bad baseMVA {m.group(1)!r}") from None
            continue
        m = re.match(r"mpc\.(\w+)\s*=\s*\[(.*)$", stmt)
        if not m:
            continue
        name, rest = m.group(1), m.group(2)
        body: list[tuple[int, str]] = []
        closed = False
        chunk, chunk_line = rest, lineno
        while True:
            if "]" in chunk:
                body.append((chunk_line, chunk.split("]", 1)[0]))
                closed = True
                break
            body.append((chunk_line, chunk))
            if i >= len(lines):
                break
            chunk, chunk_line = _strip_comment(lines[i]), i + 1
            i += 1
        if not closed:
            raise CaseFormatError(f"line {lineno}: unterminated matrix mpc.{name}")
        if name in _TABLES:
            tables[name] = _parse_rows(body)

    if version is None:
        raise CaseFormatError("missing mpc.version")
    if version != "2":
        raise CaseFormatError(f"unsupported case version {version!r}")
    if base_mva is None or not base_mva > 0:
        raise CaseFormatError("missing or non-positive baseMVA")
    for name in _TABLES:
        if not tables.get(name):
            raise CaseFormatError(f"missing {name}")

    raw = RawCase(base_mva, tables["bus"], tables["gen"], tables["branch"], tables["gencost"], version)
    _check_references(raw)
    return raw


def _parse_rows(body: list[tuple[int, str]]) -> list[list[float]]:
    rows: list[list[float]] = []
    current: list[float] = []
    for lineno, text in body:
        for piece_no, piece in enumerate(text.split(";")):
            if piece_no > 0 and current:
                rows.append(current)
                current = []
            for tok in piece.replace(",", " ").split():
                if not _NUMBER.match(tok):
                    raise CaseFormatError(f"line {lineno}: unexpected token {tok!r}")
                current.append(float(tok))
        # a newline also terminates a row in MATLAB matrix literals
        if current:
            rows.append(current)
            current = []
    if rows:
        width = len(rows[0])
        for r in rows:
            if len(r) != width:
                raise CaseFormatError(f"ragged matrix row {r!r}")
    return rows


def _check_references(raw: RawCase) -> None:
    ids = {int(r[BUS_I]) for r in raw.bus_table}
    for r in raw.gen_table:
        if int(r[GEN_BUS]) not in ids:
            raise CaseFormatError(f"generator references unknown bus {int(r[GEN_BUS])}")
    for r in raw.branch_table:
        for col in (F_BUS, T_BUS):
            if int(r[col]) not in ids:
                raise CaseFormatError(f"branch references unknown bus {int(r[col])}")
    if len(raw.gencost_table) < len(raw.gen_table):
        raise CaseFormatError("missing gencost rows")


def aggregate_generators(raw: RawCase) -> RawCase:
    """Merge in-service generators sharing a bus.

    Power bounds are summed; the cost row of the group's last generator (file
    order) is kept. Out-of-service generators are dropped first.
    """
    out = raw.copy()
    groups: dict[int, list[int]] = {}
    for k, row in enumerate(raw.gen_table):
        if row[GEN_STATUS] > 0:
            groups.setdefault(int(row[GEN_BUS]), []).append(k)

    gens, costs = [], []
    for _, members in groups.items():
        last = members[-1]
        row = list(raw.gen_table[last])
        for col in (QMAX, QMIN, PMAX, PMIN, 1, 2):
            row[col] = sum(raw.gen_table[k][col] for k in members)
        gens.append(row)
        costs.append(list(raw.gencost_table[last]))
    out.gen_table = gens
    out.gencost_table = costs
    return out


def _linear_cost(row: list[float], base_mva: float, strict: bool) -> tuple[float, float]:
    model, ncoef = int(row[0]), int(row[3])
    if model != 2:
        raise CaseFormatError("piecewise-linear cost unsupported")
    coefs = row[4 : 4 + ncoef]
    higher = coefs[: max(ncoef - 3, 0)]  # cubic and above
    quad = coefs[ncoef - 3] if ncoef >= 3 else 0.0
    if any(c != 0.0 for c in higher) or (strict and quad != 0.0):
        raise CaseFormatError("nonlinear cost unsupported")
    c1 = coefs[-2] if ncoef >= 2 else 0.0
    c0 = coefs[-1] if ncoef >= 1 else 0.0
    # cost per MW -> cost per p.u.
    return c1 * base_mva, c0


def to_network(raw: RawCase, *, strict_costs: bool = False, name: str = "") -> Network:
    """Per-unit normalization of an aggregated :class:`RawCase`.

    Only the linear and constant cost terms are used. MATPOWER cases usually
    carry a quadratic coefficient as well; it is discarded unless
    ``strict_costs`` is set, in which case a nonzero value raises.
    ``rateA / baseMVA`` is taken as the per-unit current limit (0 = no limit).
    """
    base = raw.baseMVA
    gen_buses = [int(r[GEN_BUS]) for r in raw.gen_table]
    if len(set(gen_buses)) != len(gen_buses):
        raise CaseFormatError("several generators on one bus; aggregate first")

    buses: dict[int, Bus] = {}
    for r in raw.bus_table:
        bid, kind = int(r[BUS_I]), int(r[BUS_TYPE])
        if kind == 4:
            raise CaseFormatError(f"bus {bid} is isolated")
        shunt = None
        if r[GS] != 0.0 or r[BS] != 0.0:
            shunt = complex(r[GS] / base, r[BS] / base)
        buses[bid] = Bus(bid, complex(r[PD] / base, r[QD] / base), r[VMIN], r[VMAX], shunt, kind)

    gens: dict[int, Generator] = {}
    for r, cost in zip(raw.gen_table, raw.gencost_table):
        c1, c0 = _linear_cost(cost, base, strict_costs)
        bid = int(r[GEN_BUS])
        gens[bid] = Generator(bid, r[PMIN] / base, r[PMAX] / base, r[QMIN] / base, r[QMAX] / base, c1, c0)

    branches: list[Branch] = []
    for r in raw.branch_table:
        if r[BR_STATUS] <= 0:
            continue
        z = complex(r[BR_R], r[BR_X])
        if abs(z) == 0.0:
            raise CaseFormatError(f"branch {int(r[F_BUS])}-{int(r[T_BUS])}: zero impedance")
        tau = r[TAP] if r[TAP] != 0.0 else 1.0
        imax = r[RATE_A] / base if r[RATE_A] > 0 else math.inf
        branches.append(
            Branch(int(r[F_BUS]), int(r[T_BUS]), 1.0 / z, r[BR_B] / 2.0, tau, -math.radians(r[SHIFT]), imax)
        )
    return Network(buses, gens, branches, base, name)


def builtin_case_path(name: str) -> Path:
    """Path of a bundled case (``case14``, ``case30``, ``case57``, ``case118``, ...)."""
    fname = name if name.endswith(".m") else f"{name}.m"
    path = Path(str(resources.files("ropf") / "cases" / fname))
    if not path.exists():
        raise FileNotFoundError(f"no bundled case named {name!r}")
    return path


def load_case(path_or_name: str | Path, **kwargs) -> Network:
    """Parse, aggregate and normalize a case file or bundled case name."""
    path = Path(path_or_name)
    if not path.exists():
        path = builtin_case_path(str(path_or_name))
    raw = parse_case(path.read_text())
    return to_network(aggregate_generators(raw), name=path.stem, **kwargs)
