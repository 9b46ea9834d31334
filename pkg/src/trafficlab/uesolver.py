"""Static user-equilibrium assignment by Frank-Wolfe, plus equilibrium audits."""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, InfeasibleError, NumericError
from .netcore import Network, ODMatrix, beckmann_objective, link_times


@dataclass(frozen=True)
class SolverOptions:
    convergence_threshold: float = 1e-5
    max_iterations: int = 10_000
    line_search_tol: float = 1e-8

    def __post_init__(self):
        if not self.convergence_threshold > 0:
            raise DomainError("convergence_threshold must be > 0")
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be >= 1")
        if not self.line_search_tol > 0:
            raise DomainError("line_search_tol must be > 0")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    beckmann: float
    rel_change: float
    rel_gap: float


@dataclass
class UESolution:
    flows: np.ndarray
    ratios: np.ndarray
    beckmann_value: float
    iterations: int
    final_rel_change: float
    converged: bool
    trace: list[TraceRow] = field(default_factory=list)

    @classmethod
    def from_flows(cls, network: Network, flows, **telemetry) -> UESolution:
        flows = np.asarray(flows, dtype=float)
        return cls(
            flows=flows,
            ratios=flows / network.capacity,
            beckmann_value=beckmann_objective(network, flows),
            iterations=telemetry.get("iterations", 0),
            final_rel_change=telemetry.get("final_rel_change", 0.0),
            converged=telemetry.get("converged", True),
            trace=telemetry.get("trace", []),
        )


@dataclass(frozen=True)
class Path_:
    """A simple path as an ordered tuple of link ids."""

    links: tuple[int, ...]
    nodes: tuple[int, ...]

    def cost(self, times: np.ndarray) -> float:
        return float(math.fsum(times[k] for k in self.links))


# --------------------------------------------------------------------------
# shortest paths


def _adjacency(network: Network) -> list[list[tuple[int, int]]]:
    adj = network.__dict__.get("_fw_adjacency")
    if adj is None:
        head = network.head.tolist()
        adj = [[(k, head[k]) for k in ks] for ks in network.out_index]
        network.__dict__["_fw_adjacency"] = adj
    return adj


def _dijkstra(network: Network, times, origin: int):
    """Heap-based label setting on plain lists (hot path of every FW iteration)."""
    n = network.n_nodes
    times = times.tolist() if isinstance(times, np.ndarray) else times
    inf = math.inf
    dist = [inf] * n
    pred = [-1] * n
    settled = [False] * n
    order: list[int] = []
    dist[origin] = 0.0
    heap = [(0.0, origin)]
    adj = _adjacency(network)
    zone_limit = network.first_thru_node
    pop, push = heapq.heappop, heapq.heappush
    while heap:
        d, u = pop(heap)
        if settled[u]:
            continue
        settled[u] = True
        order.append(u)
        if u < zone_limit and u != origin:
            continue  # zones are not through nodes
        for k, v in adj[u]:
            nd = d + times[k]
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = k
                push(heap, (nd, v))
    return dist, pred, order


def _check_times(times: np.ndarray, network: Network) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.shape != (network.n_links,):
        raise DomainError(f"expected {network.n_links} link times, got shape {times.shape}")
    if np.any(times < 0) or not np.all(np.isfinite(times)):
        raise DomainError("link times must be finite and >= 0")
    return times


def shortest_path_tree(network: Network, times, origin: int) -> tuple[np.ndarray, np.ndarray]:
    """Label-setting shortest paths from ``origin``.

    Returns per-node distance (``inf`` when unreachable) and the link id that
    reaches each node on the tree (``-1`` for the origin and unreachable nodes).
    Ties are resolved toward the smaller node id.
    """
    times = _check_times(times, network)
    dist, pred, _ = _dijkstra(network, times, origin)
    return np.array(dist), np.array(pred, dtype=np.int64)


def _demand_by_origin(od: ODMatrix) -> list[tuple[int, list[tuple[int, float]]]]:
    by_origin: dict[int, list[tuple[int, float]]] = {}
    for (o, d), q in od.items():
        by_origin.setdefault(o, []).append((d, q))
    return sorted(by_origin.items())


def _aon(network: Network, times: list[float], plan) -> np.ndarray:
    flows = [0.0] * network.n_links
    tail = network.__dict__.get("_fw_tail")
    if tail is None:
        tail = network.__dict__["_fw_tail"] = network.tail.tolist()
    for origin, dests in plan:
        dist, pred, order = _dijkstra(network, times, origin)
        pending = [0.0] * network.n_nodes
        for dest, q in dests:
            if dist[dest] == math.inf:
                raise InfeasibleError(origin, dest)
            pending[dest] += q
        # Push demand toward the root in reverse settlement order.
        for v in reversed(order):
            p = pending[v]
            if p == 0.0 or v == origin:
                continue
            k = pred[v]
            flows[k] += p
            pending[tail[k]] += p
    return np.array(flows)


def all_or_nothing(network: Network, times, od: ODMatrix) -> np.ndarray:
    times = _check_times(times, network)
    return _aon(network, times.tolist(), _demand_by_origin(od))


def shortest_path_costs(network: Network, times, od: ODMatrix) -> dict[tuple[int, int], float]:
    times = _check_times(times, network)
    out = {}
    for origin in od.origins():
        dist, _, _ = _dijkstra(network, times, origin)
        for (o, d) in od:
            if o == origin:
                out[(o, d)] = float(dist[d])
    return out


# --------------------------------------------------------------------------
# Frank-Wolfe


def _direction_derivative(network: Network, x: np.ndarray, d: np.ndarray, lam: float) -> float:
    f = np.maximum(x + lam * d, 0.0)
    t = network.free_flow_time * (1.0 + network.bpr_b * (f / network.capacity) ** network.bpr_power)
    return float(np.dot(t, d))


def bisection_line_search(network: Network, x, y, tol: float = 1e-8) -> float:
    """Exact step on the Beckmann objective along ``x + lam (y - x)``, lam in [0, 1]."""
    if not tol > 0:
        raise DomainError("tol must be > 0")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise DomainError("x and y differ in length")
    d = y - x
    if _direction_derivative(network, x, d, 0.0) >= 0:
        return 0.0
    if _direction_derivative(network, x, d, 1.0) <= 0:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _direction_derivative(network, x, d, mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def check_feasible(network: Network, od: ODMatrix) -> None:
    free = np.asarray(network.free_flow_time, dtype=float)
    for origin in od.origins():
        dist, _, _ = _dijkstra(network, free, origin)
        for (o, d) in od:
            if o == origin and dist[d] == math.inf:
                raise InfeasibleError(o, d)


def relative_gap(network: Network, flows: np.ndarray, od: ODMatrix) -> float:
    times = link_times(network, flows)
    tstt = float(np.dot(flows, times))
    if tstt == 0:
        return 0.0
    sptt = float(np.dot(all_or_nothing(network, times, od), times))
    return (tstt - sptt) / tstt


def solve_ue_frank_wolfe(
    network: Network, od: ODMatrix, opts: SolverOptions | None = None
) -> UESolution:
    opts = opts or SolverOptions()
    check_feasible(network, od)

    plan = _demand_by_origin(od)
    x = _aon(network, network.free_flow_time.tolist(), plan)
    trace: list[TraceRow] = []
    rel_change = math.inf
    converged = False
    it = 0
    for it in range(1, opts.max_iterations + 1):
        times = link_times(network, x)
        y = _aon(network, times.tolist(), plan)
        tstt = float(np.dot(x, times))
        rel_gap = (tstt - float(np.dot(y, times))) / tstt if tstt > 0 else 0.0
        lam = bisection_line_search(network, x, y, opts.line_search_tol)
        x_new = x + lam * (y - x)
        np.maximum(x_new, 0.0, out=x_new)
        total = float(np.sum(x))
        rel_change = float(np.sqrt(np.sum((x_new - x) ** 2)) / total) if total > 0 else 0.0
        x = x_new
        z = beckmann_objective(network, x)
        if not math.isfinite(z):
            raise NumericError(f"non-finite Beckmann objective at iteration {it}")
        trace.append(TraceRow(it, z, rel_change, rel_gap))
        if rel_change < opts.convergence_threshold:
            converged = True
            break
    return UESolution.from_flows(
        network, x, iterations=it, final_rel_change=rel_change, converged=converged, trace=trace
    )


# --------------------------------------------------------------------------
# path enumeration and Wardrop audit


def enumerate_paths(network: Network, origin: int, dest: int, max_paths: int = 16) -> list[Path_]:
    """Simple paths from ``origin`` to ``dest`` in nondecreasing free-flow time.

    Best-first search over partial simple paths with the exact remaining
    free-flow distance as heuristic, so complete paths pop in cost order.
    """
    if max_paths < 1:
        raise DomainError("max_paths must be >= 1")
    if origin == dest:
        return []
    t0 = np.asarray(network.free_flow_time, dtype=float)
    h = _distances_to(network, t0, dest)
    if not np.isfinite(h[origin]):
        return []
    found: list[Path_] = []
    counter = 0
    heap = [(h[origin], 0.0, counter, (), (origin,))]
    while heap and len(found) < max_paths:
        _, g, _, links, nodes = heapq.heappop(heap)
        u = nodes[-1]
        if u == dest:
            found.append(Path_(links, nodes))
            continue
        if u != origin and u < network.first_thru_node:
            continue
        for k in network.out_index[u]:
            v = int(network.head[k])
            if v in nodes or not np.isfinite(h[v]):
                continue
            counter += 1
            g2 = g + t0[k]
            heapq.heappush(heap, (g2 + h[v], g2, counter, links + (k,), nodes + (v,)))
    return found


def _distances_to(network: Network, times: np.ndarray, dest: int) -> np.ndarray:
    dist = np.full(network.n_nodes, np.inf)
    dist[dest] = 0.0
    heap = [(0.0, dest)]
    done = np.zeros(network.n_nodes, dtype=bool)
    while heap:
        d, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        for k in network.in_index[v]:
            u = int(network.tail[k])
            nd = d + times[k]
            if nd < dist[u]:
                dist[u] = nd
                heapq.heappush(heap, (nd, u))
    return dist


@dataclass
class WardropReport:
    per_od: dict[tuple[int, int], float]
    relative_gap: float
    max_od_gap: float


def wardrop_gap(
    network: Network, solution: UESolution, od: ODMatrix, max_paths: int = 16
) -> WardropReport:
    """Equilibrium audit of a link-flow solution.

    A path counts as used when every link on it carries flow.  Per OD pair the
    report holds (cheapest used path cost - cheapest path cost); ``nan`` when
    none of the ``max_paths`` enumerated paths is used.
    """
    flows = np.asarray(solution.flows, dtype=float)
    times = link_times(network, flows)
    eps = 1e-9 * max(od.total, 1.0)
    used = flows > eps
    sp = shortest_path_costs(network, times, od)
    per_od: dict[tuple[int, int], float] = {}
    for (o, d) in od:
        paths = enumerate_paths(network, o, d, max_paths)
        costs = [p.cost(times) for p in paths if all(used[k] for k in p.links)]
        per_od[(o, d)] = (min(costs) - sp[(o, d)]) if costs else math.nan
    tstt = float(np.dot(flows, times))
    spt = math.fsum(q * sp[k] for k, q in od.items())
    rel = (tstt - spt) / tstt if tstt > 0 else 0.0
    finite = [g for g in per_od.values() if math.isfinite(g)]
    return WardropReport(per_od, rel, max(finite) if finite else 0.0)


def aggregate_relative_gap(network: Network, flows, od: ODMatrix) -> float:
    """Aggregate relative gap alone (no path enumeration)."""
    flows = np.asarray(flows, dtype=float)
    times = link_times(network, flows)
    tstt = float(np.dot(flows, times))
    if tstt == 0:
        return 0.0
    sp = shortest_path_costs(network, times, od)
    return (tstt - math.fsum(q * sp[k] for k, q in od.items())) / tstt


def conservation_residuals(network: Network, flows, od: ODMatrix) -> np.ndarray:
    """Per node: inflow - outflow - (demand arriving - demand departing)."""
    flows = np.asarray(flows, dtype=float)
    n = network.n_nodes
    inflow = np.bincount(network.head, weights=flows, minlength=n)
    outflow = np.bincount(network.tail, weights=flows, minlength=n)
    return inflow - outflow - od.node_balance(n)


# --------------------------------------------------------------------------
# export


def write_solution_csv(path: str | Path, network: Network, solution: UESolution) -> None:
    times = link_times(network, solution.flows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link_id", "from", "to", "flow", "ratio", "travel_time"])
        for k, link in enumerate(network.links):
            w.writerow([k + 1, link.from_node + 1, link.to_node + 1,
                        repr(float(solution.flows[k])), repr(float(solution.ratios[k])),
                        repr(float(times[k]))])


def write_trace_csv(path: str | Path, solution: UESolution) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "beckmann", "rel_change", "rel_gap"])
        for row in solution.trace:
            w.writerow([row.iteration, repr(row.beckmann), repr(row.rel_change), repr(row.rel_gap)])
