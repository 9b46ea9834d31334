"""Perturbed scenario generation and the labelled-dataset file format."""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DomainError, GenerationError, IntegrityError, SchemaVersionError
from .netcore import Link, Network, Node, ODMatrix, normalize_demand
from .uesolver import SolverOptions, UESolution, solve_ue_frank_wolfe

SCHEMA_VERSION = 1
LEVEL_RANGES = {"L": (0.8, 1.0), "M": (0.5, 1.0), "H": (0.2, 1.0)}
MIXED = "LMH"


@dataclass
class ScenarioConfig:
    samples: int = 10
    seed: int = 0
    od_scale_low: float = 0.5
    od_scale_high: float = 1.5
    disruption_level: str = MIXED  # "L", "M", "H" or "LMH" (cycled)
    mask_ratio: float = 0.0
    target_total: float = 100.0
    # Scale capacities by the same factor as demand normalisation so ratios keep
    # the base network's congestion regime.
    rescale_capacity: bool = True
    split_fraction: float = 0.8
    topology_variants: int = 0
    n_add: int = 4
    n_remove: int = 4
    convergence_threshold: float = 1e-5
    max_iterations: int = 10_000

    def __post_init__(self):
        if not 0 < self.od_scale_low <= self.od_scale_high:
            raise DomainError("need 0 < od_scale_low <= od_scale_high")
        if not 0 <= self.mask_ratio <= 1:
            raise DomainError("mask_ratio must lie in [0, 1]")
        if self.disruption_level not in (*LEVEL_RANGES, MIXED):
            raise DomainError(f"unknown disruption level {self.disruption_level!r}")
        if self.samples < 0:
            raise DomainError("samples must be >= 0")

    def level_for(self, index: int) -> str:
        if self.disruption_level == MIXED:
            return MIXED[index % 3]
        return self.disruption_level


@dataclass
class Sample:
    network: Network
    od_true: ODMatrix
    od_observed: ODMatrix
    mask: frozenset
    solution: UESolution
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.network.n_nodes


@dataclass
class Dataset:
    samples: list[Sample]
    manifest: dict

    def __len__(self):
        return len(self.samples)

    @property
    def split_index(self) -> int:
        return self.manifest["split_index"]

    @property
    def train(self) -> list[Sample]:
        return self.samples[: self.split_index]

    @property
    def test(self) -> list[Sample]:
        return self.samples[self.split_index:]


# --------------------------------------------------------------------------
# perturbations


def scale_od(od: ODMatrix, rng: np.random.Generator, low: float = 0.5, high: float = 1.5) -> ODMatrix:
    if not 0 < low <= high:
        raise DomainError("need 0 < low <= high")
    keys = list(od)
    factors = rng.uniform(low, high, size=len(keys))
    return ODMatrix({k: od[k] * f for k, f in zip(keys, factors)})


def scale_capacities(
    network: Network, rng: np.random.Generator, level: str | tuple[float, float]
) -> Network:
    lo, hi = LEVEL_RANGES[level] if isinstance(level, str) else level
    factors = rng.uniform(lo, hi, size=network.n_links)
    return network.with_capacities(network.capacity * factors)


def mask_od(od: ODMatrix, mask_ratio: float, rng: np.random.Generator) -> tuple[ODMatrix, frozenset]:
    if not 0 <= mask_ratio <= 1:
        raise DomainError("mask_ratio must lie in [0, 1]")
    keys = list(od)
    count = int(math.floor(mask_ratio * len(keys) + 0.5))
    if count == 0:
        return od, frozenset()
    chosen = rng.choice(len(keys), size=count, replace=False)
    mask = frozenset(keys[i] for i in chosen)
    return ODMatrix({k: q for k, q in od.items() if k not in mask}), mask


# --------------------------------------------------------------------------
# topology generation


def is_strongly_connected(n: int, pairs: Iterable[tuple[int, int]]) -> bool:
    pairs = list(pairs)
    if n <= 1:
        return True
    if not pairs:
        return False
    rows, cols = zip(*pairs)
    g = csr_matrix((np.ones(len(pairs)), (rows, cols)), shape=(n, n))
    ncomp, _ = connected_components(g, directed=True, connection="strong")
    return ncomp == 1


def _sample_attributes(rng, count, t0_range=(1.0, 5.0), cap_range=(5.0, 20.0)):
    t0 = rng.uniform(*t0_range, size=count)
    cap = rng.uniform(*cap_range, size=count)
    return t0, cap


def gen_grid_random_network(target_nodes: int, rng: np.random.Generator,
                            extra_fraction: float = 0.1, max_tries: int = 10_000) -> Network:
    """Grid-derived random graph with exactly ``target_nodes`` nodes, strongly connected."""
    if target_nodes < 4:
        raise DomainError("target_nodes must be >= 4")
    side = math.isqrt(target_nodes - 1) + 1
    n = side * side

    def idx(r, c):
        return r * side + c

    pairs: set[tuple[int, int]] = set()
    for r in range(side):
        for c in range(side):
            if c + 1 < side:
                pairs |= {(idx(r, c), idx(r, c + 1)), (idx(r, c + 1), idx(r, c))}
            if r + 1 < side:
                pairs |= {(idx(r, c), idx(r + 1, c)), (idx(r + 1, c), idx(r, c))}
    n_extra = int(round(extra_fraction * len(pairs)))
    added = 0
    while added < n_extra:
        u, v = (int(a) for a in rng.choice(n, size=2, replace=False))
        if (u, v) not in pairs:
            pairs.add((u, v))
            added += 1

    alive = set(range(n))
    tries = 0
    while len(alive) > target_nodes:
        tries += 1
        if tries > max_tries:
            raise GenerationError("could not remove nodes while keeping strong connectivity")
        victim = int(rng.choice(sorted(alive)))
        keep = alive - {victim}
        remap = {v: i for i, v in enumerate(sorted(keep))}
        sub = [(remap[u], remap[v]) for u, v in pairs if u in keep and v in keep]
        if is_strongly_connected(len(keep), sub):
            alive = keep

    order = sorted(alive)
    remap = {v: i for i, v in enumerate(order)}
    kept_pairs = sorted((remap[u], remap[v]) for u, v in pairs if u in alive and v in alive)
    t0, cap = _sample_attributes(rng, len(kept_pairs))
    nodes = tuple(Node(remap[v], float(v % side), float(v // side)) for v in order)
    links = tuple(Link(u, v, float(a), float(c)) for (u, v), a, c in zip(kept_pairs, t0, cap))
    return Network(nodes, links)


def perturb_topology(network: Network, rng: np.random.Generator, n_add: int = 4,
                     n_remove: int = 4, max_retries: int = 1000) -> Network:
    """Remove then add random links, keeping the node set and strong connectivity.

    New links draw free-flow time and capacity uniformly within the range
    spanned by the existing links.
    """
    if not 0 <= n_remove < network.n_links:
        raise DomainError("n_remove must satisfy 0 <= n_remove < number of links")
    if n_add == 0 and n_remove == 0:
        return network
    links = list(network.links)
    n = network.n_nodes
    removed = 0
    retries = 0
    while removed < n_remove:
        k = int(rng.integers(len(links)))
        trial = links[:k] + links[k + 1:]
        if is_strongly_connected(n, [(l.from_node, l.to_node) for l in trial]):
            links = trial
            removed += 1
        else:
            retries += 1
            if retries > max_retries:
                raise GenerationError("link removal keeps breaking strong connectivity")
    existing = {(l.from_node, l.to_node) for l in links}
    if n * (n - 1) - len(existing) < n_add:
        raise GenerationError("not enough free node pairs to add links")
    t0_range = (float(network.free_flow_time.min()), float(network.free_flow_time.max()))
    cap_range = (float(network.capacity.min()), float(network.capacity.max()))
    added = 0
    while added < n_add:
        u, v = (int(a) for a in rng.choice(n, size=2, replace=False))
        if (u, v) in existing:
            continue
        t0, cap = _sample_attributes(rng, 1, t0_range, cap_range)
        links.append(Link(u, v, float(t0[0]), float(cap[0])))
        existing.add((u, v))
        added += 1
    out = Network(network.nodes, tuple(links), network.first_thru_node)
    if not is_strongly_connected(n, existing):
        raise GenerationError("perturbed network is not strongly connected")
    return out


def random_od(network: Network, rng: np.random.Generator, pair_fraction: float = 0.3,
              total: float = 100.0) -> ODMatrix:
    """Random demand on a fraction of ordered node pairs, normalised to ``total``."""
    n = network.n_nodes
    entries = {}
    for o in range(n):
        for d in range(n):
            if o != d and rng.random() < pair_fraction:
                entries[(o, d)] = rng.uniform(0.5, 1.5)
    if not entries:
        o, d = (int(a) for a in rng.choice(n, size=2, replace=False))
        entries[(o, d)] = 1.0
    return normalize_demand(ODMatrix(entries), total)


# --------------------------------------------------------------------------
# dataset generation


def coefficient_of_variation(values) -> float:
    v = np.asarray(list(values), dtype=float)
    if v.size == 0 or v.mean() == 0:
        return 0.0
    return float(v.std() / v.mean())


def _make_sample(args) -> Sample:
    base_network, variants, base_od, config, index, parent = args
    rng = np.random.default_rng([config.seed, index])
    level = config.level_for(index)
    network = variants[index % len(variants)] if variants else base_network
    if config.rescale_capacity:
        network = network.with_capacities(network.capacity * (config.target_total / base_od.total))
    network = scale_capacities(network, rng, level)
    od_true = normalize_demand(
        scale_od(base_od, rng, config.od_scale_low, config.od_scale_high), config.target_total
    )
    try:
        solution = solve_ue_frank_wolfe(
            network, od_true,
            SolverOptions(config.convergence_threshold, config.max_iterations),
        )
    except Exception as exc:
        raise GenerationError(f"sample {index}: {exc}") from exc
    solution.trace = []
    od_observed, mask = mask_od(od_true, config.mask_ratio, _mask_stream(config.seed, index))
    meta = {"index": index, "level": level, "seed": config.seed, "parent": parent}
    if variants:
        meta["variant"] = index % len(variants)
    return Sample(network, od_true, od_observed, mask, solution, meta)


def _mask_stream(seed: int, index: int) -> np.random.Generator:
    # separate from the perturbation stream so re-masking never re-solves
    return np.random.default_rng([seed, index, 1])


def remask_dataset(dataset: Dataset, mask_ratio: float) -> Dataset:
    """The dataset ``generate_dataset`` would give with a different mask ratio."""
    cfg = dict(dataset.manifest.get("config") or {})
    seed = int(cfg.get("seed", 0))
    samples = []
    for s in dataset.samples:
        od_observed, mask = mask_od(s.od_true, mask_ratio, _mask_stream(seed, s.meta["index"]))
        samples.append(replace(s, od_observed=od_observed, mask=mask))
    manifest = {**dataset.manifest, "config": {**cfg, "mask_ratio": mask_ratio}}
    return Dataset(samples, manifest)


def generate_dataset(base_network: Network, base_od: ODMatrix, config: ScenarioConfig,
                     parent: str = "network", workers: int = 1) -> Dataset:
    """Solve ``config.samples`` perturbed instances to user equilibrium.

    Every sample draws from its own stream seeded by ``(seed, index)``, so the
    output does not depend on ``workers``.
    """
    if not base_od.total > 0:
        raise DomainError("base OD matrix has zero total demand")
    variants: list[Network] = []
    if config.topology_variants > 0:
        trng = np.random.default_rng([config.seed, 1 << 20])
        variants = [perturb_topology(base_network, trng, config.n_add, config.n_remove)
                    for _ in range(config.topology_variants)]
    jobs = [(base_network, variants, base_od, config, i, parent) for i in range(config.samples)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(_make_sample, jobs, chunksize=4))
    else:
        samples = [_make_sample(j) for j in jobs]
    return Dataset(samples, build_manifest(samples, config, parent))


def build_manifest(samples: Sequence[Sample], config: ScenarioConfig | None, parent: str,
                   extra: dict | None = None) -> dict:
    levels: dict[str, int] = {}
    for s in samples:
        levels[s.meta.get("level", "?")] = levels.get(s.meta.get("level", "?"), 0) + 1
    split_fraction = config.split_fraction if config else 0.8
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "trafficlab-dataset",
        "parent": parent,
        "config": asdict(config) if config else {},
        "n_samples": len(samples),
        "split_index": int(len(samples) * split_fraction),
        "level_counts": dict(sorted(levels.items())),
        "cov_capacity": coefficient_of_variation(c for s in samples for c in s.network.capacity),
        "cov_demand": coefficient_of_variation(q for s in samples for q in s.od_true.values()),
    }
    if extra:
        manifest.update(extra)
    return manifest


# --------------------------------------------------------------------------
# persistence: JSON lines, 1-based ids, floats written with repr (exact)


def sample_to_record(sample: Sample) -> dict:
    net = sample.network
    sol = sample.solution
    return {
        "nodes": [{"id": nd.id + 1, "x": float(nd.x), "y": float(nd.y)} for nd in net.nodes],
        "links": [
            {"from": l.from_node + 1, "to": l.to_node + 1, "t0": float(l.free_flow_time),
             "cap": float(l.capacity), "b": float(l.bpr_b), "power": float(l.bpr_power)}
            for l in net.links
        ],
        "first_thru_node": net.first_thru_node + 1,
        "od_true": [[o + 1, d + 1, float(q)] for (o, d), q in sample.od_true.items()],
        "mask": [[o + 1, d + 1] for o, d in sorted(sample.mask)],
        "flows": [float(f) for f in sol.flows],
        "ratios": [float(r) for r in sol.ratios],
        "solver": {"iterations": sol.iterations, "converged": bool(sol.converged),
                   "final_rel_change": float(sol.final_rel_change),
                   "beckmann": float(sol.beckmann_value)},
        "meta": sample.meta,
    }


def sample_from_record(rec: dict) -> Sample:
    nodes = tuple(Node(nd["id"] - 1, nd["x"], nd["y"]) for nd in rec["nodes"])
    links = tuple(
        Link(l["from"] - 1, l["to"] - 1, l["t0"], l["cap"], l.get("b", 0.15), l.get("power", 4.0))
        for l in rec["links"]
    )
    network = Network(nodes, links, rec.get("first_thru_node", 1) - 1)
    od_true = ODMatrix({(o - 1, d - 1): q for o, d, q in rec["od_true"]})
    mask = frozenset((o - 1, d - 1) for o, d in rec["mask"])
    od_observed = ODMatrix({k: q for k, q in od_true.items() if k not in mask})
    solver = rec.get("solver", {})
    flows = np.array(rec["flows"], dtype=float)
    solution = UESolution(
        flows=flows,
        ratios=np.array(rec["ratios"], dtype=float),
        beckmann_value=solver.get("beckmann", math.nan),
        iterations=solver.get("iterations", 0),
        final_rel_change=solver.get("final_rel_change", math.nan),
        converged=solver.get("converged", True),
    )
    return Sample(network, od_true, od_observed, mask, solution, dict(rec.get("meta", {})))


def dumps_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_line(dataset.manifest) + "\n")
        for s in dataset.samples:
            fh.write(dumps_line(sample_to_record(s)) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise IntegrityError(f"{path}: empty dataset file")
    try:
        manifest = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: unreadable manifest ({exc})") from None
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: schema_version {version!r} unsupported (expected {SCHEMA_VERSION})"
        )
    samples = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            samples.append(sample_from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise IntegrityError(f"{path}: line {i} is corrupt or truncated ({exc})") from None
    if len(samples) != manifest.get("n_samples"):
        raise IntegrityError(
            f"{path}: manifest declares {manifest.get('n_samples')} samples, found {len(samples)}"
        )
    return Dataset(samples, manifest)


def serialize_network_bytes(network: Network) -> bytes:
    """Canonical byte form of a network (used for determinism checks)."""
    rec = {
        "nodes": [[nd.id + 1, float(nd.x), float(nd.y)] for nd in network.nodes],
        "links": [[l.from_node + 1, l.to_node + 1, float(l.free_flow_time), float(l.capacity),
                   float(l.bpr_b), float(l.bpr_power)] for l in network.links],
    }
    return dumps_line(rec).encode()
