"""Road network and demand types, the BPR link model, and TNTP file I/O.

Node ids are 0-based internally.  Every file format read or written here
uses 1-based ids, as TNTP does.
"""
from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, TextIO

import numpy as np

from .errors import DomainError, IntegrityError, StructuralError, TNTPParseError

DEFAULT_B = 0.15
DEFAULT_POWER = 4.0


@dataclass(frozen=True)
class Node:
    id: int
    x: float = 0.0
    y: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DomainError(f"node {self.id} has non-finite coordinates")


@dataclass(frozen=True)
class Link:
    from_node: int
    to_node: int
    free_flow_time: float
    capacity: float
    bpr_b: float = DEFAULT_B
    bpr_power: float = DEFAULT_POWER

    def __post_init__(self):
        if self.from_node == self.to_node:
            raise StructuralError(f"self-loop at node {self.from_node}")
        if not self.capacity > 0:
            raise DomainError(f"link {self.from_node}->{self.to_node}: capacity must be > 0")
        if self.free_flow_time < 0:
            raise DomainError(f"link {self.from_node}->{self.to_node}: negative free-flow time")
        if self.bpr_b < 0 or self.bpr_power < 1:
            raise DomainError(f"link {self.from_node}->{self.to_node}: invalid BPR parameters")


@dataclass(frozen=True)
class Network:
    """Immutable directed road graph.

    ``first_thru_node`` is 0-based: nodes with a smaller index are zones that
    shortest paths may start or end at but never pass through.
    """

    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    first_thru_node: int = 0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "links", tuple(self.links))
        if len(self.nodes) < 1:
            raise StructuralError("network needs at least one node")
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise StructuralError(f"node ids must be dense 0..n-1, got {node.id} at {i}")
        n = len(self.nodes)
        for k, link in enumerate(self.links):
            if not (0 <= link.from_node < n and 0 <= link.to_node < n):
                raise StructuralError(f"link {k} references a node outside 0..{n - 1}")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @cached_property
    def out_index(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in self.nodes]
        for k, link in enumerate(self.links):
            out[link.from_node].append(k)
        return tuple(tuple(ks) for ks in out)

    @cached_property
    def in_index(self) -> tuple[tuple[int, ...], ...]:
        inc: list[list[int]] = [[] for _ in self.nodes]
        for k, link in enumerate(self.links):
            inc[link.to_node].append(k)
        return tuple(tuple(ks) for ks in inc)

    # Vectorised per-link columns, read-only.
    @cached_property
    def tail(self) -> np.ndarray:
        return _frozen(np.array([l.from_node for l in self.links], dtype=np.int64))

    @cached_property
    def head(self) -> np.ndarray:
        return _frozen(np.array([l.to_node for l in self.links], dtype=np.int64))

    @cached_property
    def free_flow_time(self) -> np.ndarray:
        return _frozen(np.array([l.free_flow_time for l in self.links], dtype=float))

    @cached_property
    def capacity(self) -> np.ndarray:
        return _frozen(np.array([l.capacity for l in self.links], dtype=float))

    @cached_property
    def bpr_b(self) -> np.ndarray:
        return _frozen(np.array([l.bpr_b for l in self.links], dtype=float))

    @cached_property
    def bpr_power(self) -> np.ndarray:
        return _frozen(np.array([l.bpr_power for l in self.links], dtype=float))

    @cached_property
    def coords(self) -> np.ndarray:
        return _frozen(np.array([[nd.x, nd.y] for nd in self.nodes], dtype=float).reshape(-1, 2))

    def with_capacities(self, capacities: Iterable[float]) -> Network:
        caps = list(capacities)
        if len(caps) != self.n_links:
            raise StructuralError("capacity vector length differs from link count")
        links = tuple(replace(l, capacity=float(c)) for l, c in zip(self.links, caps))
        return Network(self.nodes, links, self.first_thru_node)

    def with_coordinates(self, coords: Mapping[int, tuple[float, float]] | np.ndarray) -> Network:
        if isinstance(coords, np.ndarray):
            coords = {i: (float(x), float(y)) for i, (x, y) in enumerate(coords)}
        nodes = tuple(
            Node(nd.id, *coords[nd.id]) if nd.id in coords else nd for nd in self.nodes
        )
        return Network(nodes, self.links, self.first_thru_node)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class ODMatrix(Mapping[tuple[int, int], float]):
    """Immutable origin-destination demand table.

    Diagonal and zero entries are dropped on construction; edits return new
    matrices.
    """

    __slots__ = ("_entries", "_total")

    def __init__(self, entries: Mapping[tuple[int, int], float] | Iterable = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        clean: dict[tuple[int, int], float] = {}
        for (o, d), q in items:
            q = float(q)
            if not math.isfinite(q) or q < 0:
                raise DomainError(f"demand for ({o}, {d}) must be finite and >= 0, got {q}")
            o, d = int(o), int(d)
            if o == d or q == 0.0:
                continue
            clean[(o, d)] = clean.get((o, d), 0.0) + q
        self._entries = dict(sorted(clean.items()))
        self._total = math.fsum(self._entries.values())

    def __getitem__(self, key):
        return self._entries[key]

    def get(self, key, default=0.0):
        return self._entries.get(key, default)

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __eq__(self, other):
        if isinstance(other, ODMatrix):
            return self._entries == other._entries
        return NotImplemented

    def __hash__(self):
        return hash(tuple(self._entries.items()))

    def __repr__(self):
        return f"ODMatrix({len(self)} pairs, total={self._total:g})"

    @property
    def total(self) -> float:
        return self._total

    @property
    def entries(self) -> dict[tuple[int, int], float]:
        return dict(self._entries)

    def origins(self) -> list[int]:
        return sorted({o for o, _ in self._entries})

    def with_entry(self, origin: int, destination: int, demand: float) -> ODMatrix:
        new = dict(self._entries)
        new[(origin, destination)] = demand
        return ODMatrix(new)

    def without(self, origin: int, destination: int) -> ODMatrix:
        new = dict(self._entries)
        new.pop((origin, destination), None)
        return ODMatrix(new)

    def scaled(self, factor: float) -> ODMatrix:
        return ODMatrix({k: q * factor for k, q in self._entries.items()})

    def dense(self, n: int) -> np.ndarray:
        m = np.zeros((n, n))
        for (o, d), q in self._entries.items():
            m[o, d] = q
        return m

    def node_balance(self, n: int) -> np.ndarray:
        """Per node: demand arriving minus demand departing."""
        bal = np.zeros(n)
        for (o, d), q in self._entries.items():
            bal[d] += q
            bal[o] -= q
        return bal


# --------------------------------------------------------------------------
# link performance


def bpr_time(link: Link, flow: float) -> float:
    if flow < 0:
        raise DomainError(f"flow must be >= 0, got {flow}")
    return link.free_flow_time * (1.0 + link.bpr_b * (flow / link.capacity) ** link.bpr_power)


def beckmann_link_integral(link: Link, flow: float) -> float:
    if flow < 0:
        raise DomainError(f"flow must be >= 0, got {flow}")
    p = link.bpr_power
    return link.free_flow_time * (
        flow + link.bpr_b * flow ** (p + 1) / ((p + 1) * link.capacity**p)
    )


def link_times(network: Network, flows: np.ndarray) -> np.ndarray:
    """Vectorised :func:`bpr_time` over every link."""
    flows = np.asarray(flows, dtype=float)
    if np.any(flows < 0):
        raise DomainError("negative link flow")
    return network.free_flow_time * (
        1.0 + network.bpr_b * (flows / network.capacity) ** network.bpr_power
    )


def beckmann_objective(network: Network, flows: np.ndarray) -> float:
    flows = np.asarray(flows, dtype=float)
    if np.any(flows < 0):
        raise DomainError("negative link flow")
    p = network.bpr_power
    terms = network.free_flow_time * (
        flows + network.bpr_b * flows ** (p + 1) / ((p + 1) * network.capacity**p)
    )
    return float(math.fsum(terms))


def normalize_demand(od: ODMatrix, target_total: float) -> ODMatrix:
    if od.total <= 0:
        raise DomainError("cannot normalise an OD matrix with zero total demand")
    if target_total <= 0:
        raise DomainError("target total must be > 0")
    return od.scaled(target_total / od.total)


def normalized_coords(network: Network) -> np.ndarray:
    """Node coordinates min-max scaled into the unit square (per axis)."""
    xy = np.array(network.coords, dtype=float)
    lo = xy.min(axis=0)
    span = xy.max(axis=0) - lo
    span[span == 0] = 1.0
    return (xy - lo) / span


def circle_layout(n: int) -> np.ndarray:
    ang = 2 * np.pi * np.arange(n) / max(n, 1)
    return np.column_stack([np.cos(ang), np.sin(ang)])


# --------------------------------------------------------------------------
# TNTP parsing

_META = re.compile(r"^<([^>]+)>\s*(.*)$")


def _read(text: str | TextIO) -> str:
    return text if isinstance(text, str) else text.read()


def _metadata_lines(lines: list[str]) -> tuple[dict[str, tuple[str, int]], int]:
    """Collect ``<TAG> value`` pairs; return them and the index after END OF METADATA."""
    meta: dict[str, tuple[str, int]] = {}
    for i, raw in enumerate(lines):
        line = raw.strip()
        if not line or line.startswith("~"):
            continue
        m = _META.match(line)
        if not m:
            raise TNTPParseError(f"expected metadata tag, got {line[:40]!r}", i + 1)
        tag = m.group(1).strip().upper()
        if tag == "END OF METADATA":
            return meta, i + 1
        meta[tag] = (m.group(2).strip(), i + 1)
    raise TNTPParseError("missing <END OF METADATA>", len(lines))


def _meta_number(meta, tag, cast=int, required=True):
    if tag not in meta:
        if required:
            raise TNTPParseError(f"missing <{tag}> metadata")
        return None
    value, lineno = meta[tag]
    try:
        return cast(float(value)) if cast is int else cast(value)
    except ValueError:
        raise TNTPParseError(f"<{tag}> is not numeric: {value!r}", lineno) from None


def parse_tntp_net(text: str | TextIO) -> Network:
    lines = _read(text).splitlines()
    meta, start = _metadata_lines(lines)
    n_nodes = _meta_number(meta, "NUMBER OF NODES")
    n_links = _meta_number(meta, "NUMBER OF LINKS")
    first_thru = _meta_number(meta, "FIRST THRU NODE", required=False) or 1
    if n_nodes < 1:
        raise TNTPParseError("<NUMBER OF NODES> must be >= 1", meta["NUMBER OF NODES"][1])

    links: list[Link] = []
    for i in range(start, len(lines)):
        line = lines[i].split("~", 1)[0].strip()
        if not line:
            continue
        fields = line.replace(";", " ").split()
        if len(fields) < 5:
            raise TNTPParseError(f"link row needs at least 5 columns, got {len(fields)}", i + 1)
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise TNTPParseError(f"non-numeric field ({exc})", i + 1) from None
        a, b = int(vals[0]), int(vals[1])
        if vals[0] != a or vals[1] != b:
            raise TNTPParseError("node ids must be integers", i + 1)
        if not (1 <= a <= n_nodes and 1 <= b <= n_nodes):
            raise StructuralError(
                f"line {i + 1}: link {a}->{b} references a node outside 1..{n_nodes}"
            )
        try:
            links.append(
                Link(
                    a - 1,
                    b - 1,
                    free_flow_time=vals[4],
                    capacity=vals[2],
                    bpr_b=vals[5] if len(vals) > 5 else DEFAULT_B,
                    bpr_power=vals[6] if len(vals) > 6 else DEFAULT_POWER,
                )
            )
        except (StructuralError, DomainError) as exc:
            raise type(exc)(f"line {i + 1}: {exc}") from None
    if len(links) != n_links:
        raise TNTPParseError(
            f"<NUMBER OF LINKS> declares {n_links} links but {len(links)} rows were found"
        )
    nodes = tuple(Node(i) for i in range(n_nodes))
    return Network(nodes, tuple(links), first_thru_node=first_thru - 1)


def serialize_tntp_net(network: Network) -> str:
    out = io.StringIO()
    out.write(f"<NUMBER OF ZONES> {network.n_nodes}\n")
    out.write(f"<NUMBER OF NODES> {network.n_nodes}\n")
    out.write(f"<FIRST THRU NODE> {network.first_thru_node + 1}\n")
    out.write(f"<NUMBER OF LINKS> {network.n_links}\n")
    out.write("<END OF METADATA>\n\n")
    out.write("~\tinit_node\tterm_node\tcapacity\tlength\tfree_flow_time\tb\tpower\tspeed\ttoll\tlink_type\t;\n")
    for l in network.links:
        out.write(
            f"\t{l.from_node + 1}\t{l.to_node + 1}\t{l.capacity!r}\t{l.free_flow_time!r}"
            f"\t{l.free_flow_time!r}\t{l.bpr_b!r}\t{l.bpr_power!r}\t0\t0\t1\t;\n"
        )
    return out.getvalue()


def parse_tntp_trips(text: str | TextIO, rel_tol: float = 1e-6) -> ODMatrix:
    lines = _read(text).splitlines()
    meta, start = _metadata_lines(lines)
    declared = _meta_number(meta, "TOTAL OD FLOW", cast=float, required=False)

    entries: dict[tuple[int, int], float] = {}
    raw_sum = 0.0
    origin: int | None = None
    for i in range(start, len(lines)):
        line = lines[i].split("~", 1)[0].strip()
        if not line:
            continue
        if line.lower().startswith("origin"):
            parts = line.split()
            if len(parts) != 2:
                raise TNTPParseError(f"malformed origin line {line!r}", i + 1)
            try:
                origin = int(parts[1]) - 1
            except ValueError:
                raise TNTPParseError(f"origin id is not an integer: {parts[1]!r}", i + 1) from None
            continue
        if origin is None:
            raise TNTPParseError("destination entries before any 'Origin' line", i + 1)
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            if ":" not in chunk:
                raise TNTPParseError(f"expected 'dest : demand', got {chunk!r}", i + 1)
            d_str, q_str = chunk.split(":", 1)
            try:
                dest = int(d_str) - 1
                q = float(q_str)
            except ValueError:
                raise TNTPParseError(f"non-numeric entry {chunk!r}", i + 1) from None
            raw_sum += q
            if q != 0 and dest != origin:
                entries[(origin, dest)] = entries.get((origin, dest), 0.0) + q
    od = ODMatrix(entries)
    if declared is not None:
        scale = max(abs(declared), abs(raw_sum), 1.0)
        if abs(declared - raw_sum) > rel_tol * scale:
            raise IntegrityError(
                f"<TOTAL OD FLOW> declares {declared} but entries sum to {raw_sum}"
            )
    return od


def serialize_tntp_trips(od: ODMatrix, n_zones: int) -> str:
    out = io.StringIO()
    out.write(f"<NUMBER OF ZONES> {n_zones}\n<TOTAL OD FLOW> {od.total!r}\n<END OF METADATA>\n\n")
    by_origin: dict[int, list[tuple[int, float]]] = {}
    for (o, d), q in od.items():
        by_origin.setdefault(o, []).append((d, q))
    for o in sorted(by_origin):
        out.write(f"Origin {o + 1}\n")
        out.write(" ".join(f"{d + 1} : {q!r};" for d, q in by_origin[o]) + "\n\n")
    return out.getvalue()


def parse_node_coords(text: str | TextIO) -> dict[int, tuple[float, float]]:
    """Read ``node_id x y`` rows (1-based ids; header and ``~`` lines skipped)."""
    coords: dict[int, tuple[float, float]] = {}
    for i, raw in enumerate(_read(text).splitlines()):
        line = raw.split("~", 1)[0].replace(";", " ").strip()
        if not line or not line[0].isdigit():
            continue
        parts = line.split()
        if len(parts) < 3:
            raise TNTPParseError("coordinate rows need 'node x y'", i + 1)
        try:
            coords[int(parts[0]) - 1] = (float(parts[1]), float(parts[2]))
        except ValueError:
            raise TNTPParseError(f"non-numeric coordinate row {line!r}", i + 1) from None
    return coords


def load_network(net_path: str | Path, node_path: str | Path | None = None) -> Network:
    """Parse a net file and attach coordinates.

    Looks for a sibling ``*_node.tntp`` when ``node_path`` is not given; falls
    back to a unit-circle layout.
    """
    net_path = Path(net_path)
    network = parse_tntp_net(net_path.read_text())
    if node_path is None:
        guess = net_path.with_name(net_path.name.replace("_net", "_node"))
        node_path = guess if guess.exists() and guess != net_path else None
    if node_path is not None:
        coords = parse_node_coords(Path(node_path).read_text())
        missing = [i for i in range(network.n_nodes) if i not in coords]
        if missing:
            raise StructuralError(f"coordinate file lacks nodes {[m + 1 for m in missing[:5]]}")
        return network.with_coordinates(coords)
    return network.with_coordinates(circle_layout(network.n_nodes))


def load_trips(path: str | Path) -> ODMatrix:
    return parse_tntp_trips(Path(path).read_text())
