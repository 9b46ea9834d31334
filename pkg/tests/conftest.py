from pathlib import Path

import pytest

from trafficlab.netcore import Link, Network, Node, load_network, load_trips

DATA = Path(__file__).resolve().parents[1] / "data" / "sioux_falls"
SF_NET = DATA / "SiouxFalls_net.tntp"
SF_TRIPS = DATA / "SiouxFalls_trips.tntp"


def make_network(n, edges, coords=None):
    """edges: (u, v, t0, cap[, b, p]) tuples with 0-based ids."""
    nodes = [Node(i, *((float(coords[i][0]), float(coords[i][1])) if coords is not None else (0.0, 0.0)))
             for i in range(n)]
    links = [Link(e[0], e[1], e[2], e[3], *e[4:]) for e in edges]
    return Network(tuple(nodes), tuple(links))


def two_parallel():
    """Two parallel o->d links: t0 = 1, capacities 1 and 2, BPR(0.15, 4)."""
    return make_network(2, [(0, 1, 1.0, 1.0, 0.15, 4.0), (0, 1, 1.0, 2.0, 0.15, 4.0)],
                        coords=[(0.0, 0.0), (1.0, 0.0)])


@pytest.fixture(scope="session")
def sioux_falls():
    return load_network(SF_NET), load_trips(SF_TRIPS)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
