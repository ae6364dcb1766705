"""Small hand-built MATPOWER cases used by the tests."""

import math


def radial_injection_case(limits=(70.0, 60.0, 80.0), gs=-100.0, load=(300.0, 50.0), cost=20.0) -> str:
    """A generator bus feeding a load, with one leaf per entry of ``limits``.

    Each leaf carries a shunt of conductance ``gs`` (MW at 1 p.u.; negative
    means injection) behind a line rated ``limits[i]`` MVA. With the leaf
    voltage pinned near 1 p.u. a fully switched shunt overloads its line, so
    the relaxation can only use a fraction of each one.
    """
    nb = 1 + len(limits)
    bus = [f"\t1\t3\t{load[0]}\t{load[1]}\t0\t0\t1\t1\t0\t135\t1\t1.1\t0.9;"]
    for i in range(len(limits)):
        bus.append(f"\t{i + 2}\t1\t0\t0\t{gs}\t0\t1\t1\t0\t135\t1\t1.01\t0.99;")
    branch = []
    for i, lim in enumerate(limits):
        rate = 0 if math.isinf(lim) else lim
        branch.append(f"\t1\t{i + 2}\t0.01\t0.05\t0\t{rate}\t{rate}\t{rate}\t0\t0\t1\t-360\t360;")
    return "\n".join([
        f"function mpc = radial{nb}",
        "mpc.version = '2';",
        "mpc.baseMVA = 100;",
        "mpc.bus = [", *bus, "];",
        "mpc.gen = [",
        "\t1\t0\t0\t300\t-300\t1\t100\t1\t500\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;",
        "];",
        "mpc.branch = [", *branch, "];",
        "mpc.gencost = [",
        f"\t2\t0\t0\t2\t{cost}\t0;",
        "];",
        "",
    ])
