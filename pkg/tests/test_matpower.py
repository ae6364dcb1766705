import math
import re

import pytest
from hypothesis import given, settings, strategies as st

from ropf.matpower import (
    CaseFormatError,
    RawCase,
    aggregate_generators,
    builtin_case_path,
    load_case,
    parse_case,
    to_network,
)

import cache

MINI = """function mpc = mini
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	10	5	0	0	1	1	0	135	1	1.1	0.9;
	2	1	20	-4	0	19	1	1	0	135	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	50	-50	1	100	1	100	0	0	0	0	0	0	0	0	0	0	0	0;
];
mpc.branch = [
	1	2	0.01	0.1	0.02	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	2	30	7;
];
"""


def scan_rows(text: str) -> dict[str, int]:
    """Independent row count: numeric lines between ``mpc.X = [`` and ``]``."""
    counts, cur = {}, None
    for line in text.splitlines():
        line = line.split("%")[0].strip()
        m = re.match(r"mpc\.(\w+)\s*=\s*\[", line)
        if m:
            cur = m.group(1)
            counts[cur] = 0
            line = line[m.end():]
        if cur is None:
            continue
        body = line.split("]")[0]
        counts[cur] += sum(1 for part in body.split(";") if re.search(r"\d", part))
        if "]" in line:
            cur = None
    return counts


def test_case14_row_counts_match_text_scan():
    text = builtin_case_path("case14").read_text()
    raw = parse_case(text)
    scanned = scan_rows(text)
    assert (len(raw.bus_table), len(raw.gen_table), len(raw.branch_table)) == (14, 5, 20)
    assert scanned["bus"] == len(raw.bus_table)
    assert scanned["gen"] == len(raw.gen_table)
    assert scanned["branch"] == len(raw.branch_table)
    assert scanned["gencost"] == len(raw.gencost_table)
    assert raw.baseMVA == 100


@pytest.mark.parametrize("name", ["case30", "case57", "case118", "case300"])
def test_bundled_row_counts(name):
    text = builtin_case_path(name).read_text()
    raw = parse_case(text)
    scanned = scan_rows(text)
    for t in ("bus", "gen", "branch"):
        assert scanned[t] == len(getattr(raw, f"{t}_table"))


def test_missing_gencost():
    text = MINI.split("mpc.gencost")[0]
    with pytest.raises(CaseFormatError, match="missing gencost"):
        parse_case(text)


def test_unknown_bus_reference():
    text = MINI.replace("\t1\t2\t0.01", "\t1\t999\t0.01")
    with pytest.raises(CaseFormatError, match="999"):
        parse_case(text)


def test_syntax_error_reports_line():
    text = MINI.replace("1\t2\t0.01\t0.1", "1\t2\t0.0x1\t0.1")
    with pytest.raises(CaseFormatError, match=r"line 1\d"):
        parse_case(text)


def test_unsupported_version():
    with pytest.raises(CaseFormatError, match="version"):
        parse_case(MINI.replace("mpc.version = '2'", "mpc.version = '1'"))


def _raw_with_gens(rows, costs):
    base = parse_case(MINI)
    raw = base.copy()
    raw.gen_table = [list(r) for r in rows]
    raw.gencost_table = [list(c) for c in costs]
    return raw


def _gen(bus, pmax, pmin=0.0, qmax=10.0, qmin=-10.0, status=1):
    r = [0.0] * 21
    r[0], r[3], r[4], r[7], r[8], r[9] = bus, qmax, qmin, status, pmax, pmin
    return r


def test_aggregation_sums_bounds_and_keeps_last_cost():
    raw = _raw_with_gens([_gen(1, 100), _gen(1, 150)], [[2, 0, 0, 2, 2, 0], [2, 0, 0, 2, 5, 0]])
    agg = aggregate_generators(raw)
    assert len(agg.gen_table) == 1
    assert agg.gen_table[0][8] == 250
    assert agg.gen_table[0][3] == 20 and agg.gen_table[0][4] == -20
    assert agg.gencost_table[0][4] == 5


def test_aggregation_single_generator_unchanged():
    raw = _raw_with_gens([_gen(1, 100)], [[2, 0, 0, 2, 2, 0]])
    agg = aggregate_generators(raw)
    assert agg.gen_table == raw.gen_table
    assert agg.gencost_table == raw.gencost_table


def test_aggregation_drops_out_of_service():
    raw = _raw_with_gens(
        [_gen(1, 100), _gen(2, 50, status=0), _gen(2, 60, status=0)],
        [[2, 0, 0, 2, 2, 0]] * 3,
    )
    agg = aggregate_generators(raw)
    assert [int(r[0]) for r in agg.gen_table] == [1]
    net = to_network(agg)
    assert 2 not in net.generators


@given(
    st.lists(
        st.tuples(st.sampled_from([1, 2]), st.floats(0, 500), st.integers(0, 1), st.floats(0, 50)),
        min_size=1,
        max_size=6,
    )
)
def test_aggregation_idempotent(gens):
    rows = [_gen(b, p, status=s) for b, p, s, _ in gens]
    costs = [[2, 0, 0, 2, c, 1] for *_, c in gens]
    once = aggregate_generators(_raw_with_gens(rows, costs))
    twice = aggregate_generators(once)
    assert once.gen_table == twice.gen_table
    assert once.gencost_table == twice.gencost_table


def test_case14_network_sets():
    net = cache.net("case14")
    assert len(net.generators) == 5
    assert net.shunt_buses == [9]


def test_case30_shunts():
    assert len(cache.net("case30").shunt_buses) == 2


def test_rate_zero_means_unlimited():
    net = to_network(aggregate_generators(parse_case(MINI)))
    assert math.isinf(net.branches[0].imax)
    net = to_network(aggregate_generators(parse_case(MINI.replace("0.02\t0\t0\t0", "0.02\t90\t0\t0"))))
    assert net.branches[0].imax == pytest.approx(0.9)


def test_per_unit_and_shunt_detection():
    net = to_network(aggregate_generators(parse_case(MINI)))
    assert net.buses[2].load == pytest.approx(0.2 - 0.04j)
    assert net.buses[2].shunt == pytest.approx(0.19j)
    assert net.buses[1].shunt is None
    g = net.generators[1]
    assert g.cost == pytest.approx(3000.0)  # $/MWh -> $/p.u.
    assert g.const == pytest.approx(7.0)
    br = net.branches[0]
    assert br.y == pytest.approx(1 / (0.01 + 0.1j))
    assert br.b == pytest.approx(0.01)


def test_quadratic_cost_policy():
    text = MINI.replace("2\t0\t0\t2\t30\t7;", "2\t0\t0\t3\t0.1\t30\t7;")
    raw = aggregate_generators(parse_case(text))
    with pytest.raises(CaseFormatError, match="nonlinear cost unsupported"):
        to_network(raw, strict_costs=True)
    # default keeps only the linear part
    assert to_network(raw).generators[1].cost == pytest.approx(3000.0)


def test_zero_impedance_rejected():
    text = MINI.replace("0.01\t0.1\t0.02", "0\t0\t0.02")
    with pytest.raises(CaseFormatError, match="impedance"):
        to_network(aggregate_generators(parse_case(text)))


@pytest.mark.parametrize("name", ["case14", "case30", "case57", "case118"])
def test_roundtrip_counts_and_per_unit(name):
    raw = parse_case(builtin_case_path(name).read_text())
    net = cache.net(name)
    in_service = sum(1 for r in raw.branch_table if r[10] > 0)
    assert len(net.branches) == in_service
    for r in raw.bus_table:
        bus = net.buses[int(r[0])]
        for got, want in ((bus.load.real, r[2]), (bus.load.imag, r[3])):
            assert got * raw.baseMVA == pytest.approx(want, rel=1e-12, abs=1e-12)


@settings(max_examples=30)
@given(
    st.floats(-1e4, 1e4, allow_nan=False),
    st.floats(-1e4, 1e4, allow_nan=False),
    st.sampled_from([" ", "\t", "  \t "]),
)
def test_whitespace_and_numbers(pd, qd, sep):
    line = sep.join(["2", "1", repr(pd), repr(qd), "0", "0", "1", "1", "0", "135", "1", "1.1", "0.9"]) + ";"
    text = MINI.replace("\t2\t1\t20\t-4\t0\t19\t1\t1\t0\t135\t1\t1.1\t0.9;", line + " % trailing comment")
    raw = parse_case(text)
    assert raw.bus_table[1][2] == pd and raw.bus_table[1][3] == qd
    assert isinstance(raw, RawCase)


def test_load_case_by_name_and_path(tmp_path):
    p = tmp_path / "mini.m"
    p.write_text(MINI)
    assert load_case(p).name == "mini"
    assert load_case("case14").n == 14
    with pytest.raises(FileNotFoundError):
        load_case("no_such_case")
