"""Heterogeneous graph attention surrogate for UE link flows, plus an FCNN baseline.

Graphs are processed as a disjoint union so a whole mini-batch becomes one
record: node and edge arrays are concatenated with offsets and every
per-sample reduction is done with segment sums.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensorad as ad
from .errors import ContractError
from .netcore import Network, ODMatrix, normalized_coords
from .tensorad import Record, Tensor


@dataclass(frozen=True)
class ModelConfig:
    embed_size: int = 32
    heads: int = 8
    v_layers: int = 2
    r_layers: int = 2
    hidden_size: int = 64
    homogeneous_mode: bool = False
    reverse_virtual: bool = False
    w_alpha: float = 1.0
    w_flow: float = 0.005
    w_cons: float = 0.05
    fcnn_layers: int = 5

    def __post_init__(self):
        if self.heads < 1 or self.embed_size % self.heads:
            raise ContractError(f"embed_size {self.embed_size} not divisible by heads {self.heads}")
        if self.v_layers < 1 or self.r_layers < 1:
            raise ContractError("layer counts must be >= 1")
        if min(self.w_alpha, self.w_flow, self.w_cons) < 0:
            raise ContractError("loss weights must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.embed_size // self.heads

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.w_alpha, self.w_flow, self.w_cons)


@dataclass(frozen=True)
class EdgeScaler:
    """Min-max bounds for the real-link features (free-flow time, log capacity).

    Capacity is logged before scaling: ratios go as 1/c and capacities span
    more than an order of magnitude, so a linear scale crowds small links at 0.
    """

    t0_lo: float
    t0_hi: float
    cap_lo: float
    cap_hi: float

    @classmethod
    def fit(cls, networks: Iterable[Network]) -> EdgeScaler:
        t0 = np.concatenate([n.free_flow_time for n in networks])
        cap = np.log(np.concatenate([n.capacity for n in networks]))
        return cls(float(t0.min()), float(t0.max()), float(cap.min()), float(cap.max()))

    def transform(self, network: Network) -> np.ndarray:
        def mm(v, lo, hi):
            return (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)

        return np.stack([mm(network.free_flow_time, self.t0_lo, self.t0_hi),
                         mm(np.log(network.capacity), self.cap_lo, self.cap_hi)], axis=1)

    def as_array(self) -> np.ndarray:
        return np.array([self.t0_lo, self.t0_hi, self.cap_lo, self.cap_hi])

    @classmethod
    def from_array(cls, a) -> EdgeScaler:
        return cls(*(float(v) for v in np.asarray(a).reshape(4)))


@dataclass(frozen=True)
class HeteroGraph:
    """One graph, or a disjoint union of several (``n_graphs > 1``).

    ``features`` is X_n: per node the observed demands towards every node of
    its own graph, followed by the min-max normalised coordinates.
    """

    n_nodes: int
    real_src: np.ndarray
    real_dst: np.ndarray
    real_feat: np.ndarray
    capacity: np.ndarray
    virtual_src: np.ndarray
    virtual_dst: np.ndarray
    features: np.ndarray
    node_graph: np.ndarray
    edge_graph: np.ndarray
    n_graphs: int = 1

    @property
    def n_real(self) -> int:
        return len(self.real_src)

    @property
    def n_virtual(self) -> int:
        return len(self.virtual_src)

    @property
    def graph_sizes(self) -> np.ndarray:
        return np.bincount(self.node_graph, minlength=self.n_graphs)


def _ints(x) -> np.ndarray:
    return np.asarray(x, dtype=np.int64).reshape(-1)


def build_hetero_graph(network: Network, od_observed: ODMatrix, scaler: EdgeScaler | None = None,
                       reverse_virtual: bool = False, homogeneous: bool = False) -> HeteroGraph:
    n = network.n_nodes
    if n == 0:
        raise ContractError("network has no nodes")
    scaler = scaler or EdgeScaler.fit([network])
    pairs = [k for k, q in od_observed.items() if q > 0]
    if homogeneous:
        pairs = []
    vs = [o for o, _ in pairs]
    vd = [d for _, d in pairs]
    if reverse_virtual:
        vs, vd = vs + vd, vd + vs
    feats = np.concatenate([od_observed.dense(n), normalized_coords(network)], axis=1)
    return HeteroGraph(
        n_nodes=n,
        real_src=_ints(network.tail),
        real_dst=_ints(network.head),
        real_feat=scaler.transform(network),
        capacity=np.asarray(network.capacity, dtype=np.float64),
        virtual_src=_ints(vs),
        virtual_dst=_ints(vd),
        features=feats,
        node_graph=np.zeros(n, dtype=np.int64),
        edge_graph=np.zeros(network.n_links, dtype=np.int64),
    )


def union(graphs: Sequence[HeteroGraph]) -> HeteroGraph:
    """Disjoint union; all graphs must share the feature width."""
    if len(graphs) == 1:
        return graphs[0]
    widths = {g.features.shape[1] for g in graphs}
    if len(widths) != 1:
        raise ContractError(f"cannot batch graphs with feature widths {sorted(widths)}")
    offsets = np.cumsum([0] + [g.n_nodes for g in graphs[:-1]])
    return HeteroGraph(
        n_nodes=int(sum(g.n_nodes for g in graphs)),
        real_src=np.concatenate([g.real_src + o for g, o in zip(graphs, offsets)]),
        real_dst=np.concatenate([g.real_dst + o for g, o in zip(graphs, offsets)]),
        real_feat=np.concatenate([g.real_feat for g in graphs]),
        capacity=np.concatenate([g.capacity for g in graphs]),
        virtual_src=np.concatenate([g.virtual_src + o for g, o in zip(graphs, offsets)]),
        virtual_dst=np.concatenate([g.virtual_dst + o for g, o in zip(graphs, offsets)]),
        features=np.concatenate([g.features for g in graphs]),
        node_graph=np.concatenate([np.full(g.n_nodes, i) for i, g in enumerate(graphs)]),
        edge_graph=np.concatenate([np.full(g.n_real, i) for i, g in enumerate(graphs)]),
        n_graphs=len(graphs),
    )


def permute_nodes(graph: HeteroGraph, perm: Sequence[int]) -> HeteroGraph:
    """Relabel node ``u`` as ``perm[u]``; each node keeps its own feature row."""
    perm = _ints(perm)
    rows = np.empty_like(graph.features)
    rows[perm] = graph.features
    node_graph = np.empty_like(graph.node_graph)
    node_graph[perm] = graph.node_graph
    return HeteroGraph(graph.n_nodes, perm[graph.real_src], perm[graph.real_dst], graph.real_feat,
                       graph.capacity, perm[graph.virtual_src], perm[graph.virtual_dst], rows,
                       node_graph, graph.edge_graph, graph.n_graphs)


# --------------------------------------------------------------------------
# parameters


def _glorot(rng, shape) -> np.ndarray:
    fan_in, fan_out = shape[-2], shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _mlp_params(rng, prefix: str, sizes: Sequence[int]) -> dict[str, np.ndarray]:
    out = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out[f"{prefix}.w{i}"] = _glorot(rng, (a, b))
        out[f"{prefix}.b{i}"] = np.zeros(b)
    return out


def _encoder_params(rng, prefix: str, cfg: ModelConfig, with_beta: bool) -> dict[str, np.ndarray]:
    h, d, k = cfg.heads, cfg.head_dim, cfg.hidden_size
    p = {f"{prefix}.{name}": _glorot(rng, (h, d, d)) for name in ("wq", "wk", "wv")}
    if with_beta:
        p[f"{prefix}.beta_w0"] = _glorot(rng, (h, 2 * d, k))
        p[f"{prefix}.beta_b0"] = np.zeros((h, k))
        p[f"{prefix}.beta_w1"] = _glorot(rng, (h, k, 1))
        p[f"{prefix}.beta_b1"] = np.zeros((h, 1))
    p[f"{prefix}.z_w0"] = _glorot(rng, (h, d, k))
    p[f"{prefix}.z_b0"] = np.zeros((h, k))
    p[f"{prefix}.z_w1"] = _glorot(rng, (h, k, d))
    p[f"{prefix}.z_b1"] = np.zeros((h, d))
    p[f"{prefix}.ln_gain"] = np.ones((h, d))
    p[f"{prefix}.ln_offset"] = np.zeros((h, d))
    return p


def init_params(n_nodes: int, config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """HetGAT parameters for graphs with ``n_nodes`` nodes (input width n_nodes + 2)."""
    k, nv = config.hidden_size, config.embed_size
    params = _mlp_params(rng, "pre", [n_nodes + 2, k, k, nv])
    for layer in range(config.v_layers):
        params.update(_encoder_params(rng, f"v{layer}", config, with_beta=True))
    for layer in range(config.r_layers):
        params.update(_encoder_params(rng, f"r{layer}", config, with_beta=False))
    params.update(_mlp_params(rng, "head", [2 * nv + 2, k, k, 1]))
    return params


def init_fcnn_params(n_nodes: int, config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    k = config.hidden_size
    params = _mlp_params(rng, "fc", [n_nodes * (n_nodes + 2)] + [k] * config.fcnn_layers)
    params.update(_mlp_params(rng, "fchead", [k + 2, k, 1]))
    return params


# --------------------------------------------------------------------------
# forward pieces (Tensor level)


def _mlp(x: Tensor, P: Mapping[str, Tensor], prefix: str, n_layers: int, final_act: bool = False) -> Tensor:
    for i in range(n_layers):
        x = x @ P[f"{prefix}.w{i}"] + P[f"{prefix}.b{i}"]
        if i < n_layers - 1 or final_act:
            x = ad.leaky_relu(x)
    return x


def _head_ffn(x: Tensor, P: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Two-layer per-head FFN on (N, H, a) inputs."""
    hidden = ad.leaky_relu(ad.head_matmul(x, P[f"{prefix}_w0"]) + P[f"{prefix}_b0"])
    return ad.head_matmul(hidden, P[f"{prefix}_w1"]) + P[f"{prefix}_b1"]


def preprocess_embed(graph: HeteroGraph, P: Mapping[str, Tensor]) -> Tensor:
    w0 = P["pre.w0"]
    if graph.features.shape[1] != w0.shape[0]:
        raise ContractError(
            f"graph feature width {graph.features.shape[1]} does not match model input width {w0.shape[0]}")
    x = w0.record.constant(graph.features)
    return _mlp(x, P, "pre", 3)


def _segment_softmax(logits: Tensor, src: np.ndarray, n: int) -> Tensor:
    """Normalise exp(logits) over edges sharing a source node; logits are (E, H)."""
    shift = np.full((n, logits.shape[1]), -np.inf)
    np.maximum.at(shift, src, logits.data)
    s = ad.exp(logits - shift[src])
    denom = ad.scatter_add_rows(s, src, n)
    return s / ad.gather_rows(denom, src)


def _attention(x: Tensor, src, dst, P, prefix: str, cfg: ModelConfig, edge_beta: np.ndarray | None):
    """Return (per-head input slices, value projections, q.k / sqrt(d), beta, weights (E, H))."""
    h, d = cfg.heads, cfg.head_dim
    xh = ad.reshape(x, (x.shape[0], h, d))
    q = ad.head_matmul(xh, P[f"{prefix}.wq"])
    k = ad.head_matmul(xh, P[f"{prefix}.wk"])
    v = ad.head_matmul(xh, P[f"{prefix}.wv"])
    qk = ad.sum_(ad.gather_rows(q, src) * ad.gather_rows(k, dst), axis=2) * (1.0 / np.sqrt(d))
    if edge_beta is None:
        # FFN(x_u ⊕ x_v): first layer split into source/destination halves, applied per node
        w0 = P[f"{prefix}.beta_w0"]
        pre_u = ad.head_matmul(xh, w0[:, :d, :])
        pre_v = ad.head_matmul(xh, w0[:, d:, :])
        hidden = ad.leaky_relu(ad.gather_rows(pre_u, src) + ad.gather_rows(pre_v, dst) + P[f"{prefix}.beta_b0"])
        out = ad.head_matmul(hidden, P[f"{prefix}.beta_w1"]) + P[f"{prefix}.beta_b1"]
        beta = ad.reshape(out, (len(src), h))
    else:
        beta = edge_beta.sum(axis=1, keepdims=True)
    weights = _segment_softmax(qk * beta, src, x.shape[0])
    return xh, v, qk, beta, weights


def _encoder_layer(x: Tensor, src, dst, P, prefix: str, cfg: ModelConfig, edge_beta) -> Tensor:
    n = x.shape[0]
    if len(src) == 0:
        return x
    xh, v, _, _, w = _attention(x, src, dst, P, prefix, cfg, edge_beta)
    msg = ad.gather_rows(v, dst) * ad.reshape(w, (len(src), cfg.heads, 1))
    z = ad.scatter_add_rows(msg, src, n)
    upd = ad.layer_norm(_head_ffn(z, P, f"{prefix}.z"), P[f"{prefix}.ln_gain"], P[f"{prefix}.ln_offset"])
    has_out = np.zeros((n, 1, 1))
    has_out[src] = 1.0
    return ad.reshape(xh + upd * has_out, (n, cfg.embed_size))


def v_encoder_layer(x: Tensor, graph: HeteroGraph, P, layer: int, cfg: ModelConfig) -> Tensor:
    return _encoder_layer(x, graph.virtual_src, graph.virtual_dst, P, f"v{layer}", cfg, None)


def r_encoder_layer(x: Tensor, graph: HeteroGraph, P, layer: int, cfg: ModelConfig) -> Tensor:
    return _encoder_layer(x, graph.real_src, graph.real_dst, P, f"r{layer}", cfg, graph.real_feat)


def attention_terms(x: Tensor, graph: HeteroGraph, P, kind: str, layer: int, cfg: ModelConfig
                    ) -> dict[str, np.ndarray]:
    """Scaled q.k, edge weight beta and normalised attention (each (E, H)) of one layer."""
    if kind == "v":
        src, dst, beta = graph.virtual_src, graph.virtual_dst, None
    elif kind == "r":
        src, dst, beta = graph.real_src, graph.real_dst, graph.real_feat
    else:
        raise ValueError(f"kind must be 'v' or 'r', got {kind!r}")
    if len(src) == 0:
        empty = np.zeros((0, cfg.heads))
        return {"qk": empty, "beta": empty, "weights": empty}
    _, _, qk, b, w = _attention(x, src, dst, P, f"{kind}{layer}", cfg, beta)
    b = b.data if isinstance(b, Tensor) else np.broadcast_to(b, qk.shape).copy()
    return {"qk": qk.data, "beta": b, "weights": w.data}


def encode(graph: HeteroGraph, P, cfg: ModelConfig) -> Tensor:
    x = preprocess_embed(graph, P)
    if not cfg.homogeneous_mode:
        for layer in range(cfg.v_layers):
            x = v_encoder_layer(x, graph, P, layer, cfg)
    for layer in range(cfg.r_layers):
        x = r_encoder_layer(x, graph, P, layer, cfg)
    return x


def edge_head(o: Tensor, graph: HeteroGraph, P) -> Tensor:
    feat = o.record.constant(graph.real_feat)
    z = ad.concat([ad.gather_rows(o, graph.real_src), ad.gather_rows(o, graph.real_dst), feat])
    return ad.reshape(_mlp(z, P, "head", 3), (graph.n_real,))


def hetgat_alpha(graph: HeteroGraph, P, cfg: ModelConfig) -> Tensor:
    return edge_head(encode(graph, P, cfg), graph, P)


def fcnn_alpha(graph: HeteroGraph, P, cfg: ModelConfig) -> Tensor:
    rec = P["fc.w0"].record
    sizes = graph.graph_sizes
    if len(set(sizes.tolist())) != 1:
        raise ContractError("FCNN needs every graph in a batch to have the same node count")
    n = int(sizes[0])
    flat = graph.features.reshape(graph.n_graphs, n * (n + 2))
    if flat.shape[1] != P["fc.w0"].shape[0]:
        raise ContractError(f"FCNN input width {P['fc.w0'].shape[0]} does not fit a {n}-node graph")
    ctx = _mlp(rec.constant(flat), P, "fc", cfg.fcnn_layers, final_act=True)
    z = ad.concat([ad.gather_rows(ctx, graph.edge_graph), rec.constant(graph.real_feat)])
    return ad.reshape(_mlp(z, P, "fchead", 2), (graph.n_real,))


def forward_alpha(graph: HeteroGraph, P, cfg: ModelConfig, model: str = "hetgat") -> Tensor:
    if model == "fcnn":
        return fcnn_alpha(graph, P, cfg)
    return hetgat_alpha(graph, P, cfg)


# --------------------------------------------------------------------------
# predictions and losses


@dataclass(frozen=True)
class Prediction:
    alpha: np.ndarray
    flow: np.ndarray


def as_constants(params: Mapping[str, np.ndarray], record: Record | None = None) -> dict[str, Tensor]:
    record = record or Record()
    return {k: record.constant(v, name=k) for k, v in params.items()}


def predict_edge_ratios(o: Tensor, graph: HeteroGraph, P) -> Prediction:
    alpha = edge_head(o, graph, P).data
    return Prediction(alpha, alpha * graph.capacity)


def predict_graph(graph: HeteroGraph, params: Mapping[str, np.ndarray], cfg: ModelConfig,
                  model: str = "hetgat") -> Prediction:
    alpha = forward_alpha(graph, as_constants(params), cfg, model).data
    return Prediction(alpha, alpha * graph.capacity)


def model_forward(sample, params: Mapping[str, np.ndarray], cfg: ModelConfig,
                  scaler: EdgeScaler | None = None) -> Prediction:
    graph = build_hetero_graph(sample.network, sample.od_observed, scaler,
                               cfg.reverse_virtual, cfg.homogeneous_mode)
    return predict_graph(graph, params, cfg)


def fcnn_forward(sample, params: Mapping[str, np.ndarray], cfg: ModelConfig,
                 scaler: EdgeScaler | None = None) -> Prediction:
    graph = build_hetero_graph(sample.network, sample.od_observed, scaler, homogeneous=True)
    return predict_graph(graph, params, cfg, "fcnn")


@dataclass(frozen=True)
class Targets:
    """Ground truth aligned with a (possibly batched) graph."""

    alpha: np.ndarray
    flow: np.ndarray
    delta: np.ndarray  # arrivals minus departures of od_true, per node

    @classmethod
    def concat(cls, parts: Sequence[Targets]) -> Targets:
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("alpha", "flow", "delta")))


def sample_targets(sample) -> Targets:
    return Targets(np.asarray(sample.solution.ratios, dtype=np.float64),
                   np.asarray(sample.solution.flows, dtype=np.float64),
                   sample.od_true.node_balance(sample.network.n_nodes))


def loss_tensors(alpha: Tensor, graph: HeteroGraph, targets: Targets,
                 weights: tuple[float, float, float]) -> dict[str, Tensor]:
    """L_alpha, L_f, L_c and their weighted total, each averaged over graphs."""
    if alpha.shape != (graph.n_real,) or targets.alpha.shape != alpha.shape:
        raise ContractError("prediction and truth link counts differ")
    g = graph.n_graphs
    per_edge = 1.0 / (np.bincount(graph.edge_graph, minlength=g)[graph.edge_graph] * g)
    flow = alpha * graph.capacity
    l_alpha = ad.sum_(ad.abs_(alpha - targets.alpha) * per_edge)
    l_flow = ad.sum_(ad.abs_(flow - targets.flow) * per_edge)
    col = ad.reshape(flow, (graph.n_real, 1))
    net = (ad.scatter_add_rows(col, graph.real_dst, graph.n_nodes)
           - ad.scatter_add_rows(col, graph.real_src, graph.n_nodes))
    resid = net - targets.delta.reshape(-1, 1)
    l_cons = ad.sum_(ad.abs_(resid)) * (1.0 / g)
    wa, wf, wc = weights
    total = l_alpha * wa + l_flow * wf + l_cons * wc
    return {"alpha": l_alpha, "flow": l_flow, "cons": l_cons, "total": total, "residual": resid}


def supervised_loss(pred: Prediction, truth) -> tuple[float, float, float]:
    """(L_s, L_alpha, L_f) for a single graph."""
    a, ta = np.asarray(pred.alpha), np.asarray(truth.ratios)
    if a.shape != ta.shape:
        raise ContractError(f"prediction has {a.size} links, truth has {ta.size}")
    l_alpha = float(np.mean(np.abs(ta - a)))
    l_flow = float(np.mean(np.abs(np.asarray(truth.flows) - np.asarray(pred.flow))))
    return l_alpha + l_flow, l_alpha, l_flow


def conservation_loss(flows, od_true: ODMatrix, network: Network) -> tuple[float, np.ndarray]:
    """(L_c, per-node residual inflow - outflow - delta)."""
    f = np.asarray(flows, dtype=np.float64)
    n = network.n_nodes
    net = np.bincount(network.head, f, n) - np.bincount(network.tail, f, n)
    resid = net - od_true.node_balance(n)
    return float(np.sum(np.abs(resid))), resid


def total_loss(pred: Prediction, truth, od_true: ODMatrix, network: Network,
               weights: tuple[float, float, float] = (1.0, 0.005, 0.05)) -> float:
    if min(weights) < 0:
        raise ContractError("loss weights must be >= 0")
    _, l_alpha, l_flow = supervised_loss(pred, truth)
    l_cons, _ = conservation_loss(pred.flow, od_true, network)
    wa, wf, wc = weights
    return wa * l_alpha + wf * l_flow + wc * l_cons


# --------------------------------------------------------------------------
# persistence


def save_model(path, params: Mapping[str, np.ndarray], cfg: ModelConfig, scaler: EdgeScaler,
               model: str = "hetgat", extra: dict | None = None) -> None:
    meta = {"model": model, "config": asdict(cfg), "scaler": scaler.as_array().tolist(), **(extra or {})}
    ad.save_named_tensors(path, params, meta)


def load_model(path) -> tuple[dict[str, np.ndarray], ModelConfig, EdgeScaler, dict]:
    params, meta = ad.load_named_tensors(path)
    return params, ModelConfig(**meta["config"]), EdgeScaler.from_array(meta["scaler"]), meta


def write_prediction_csv(path, pred: Prediction, truth=None) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link_id", "alpha_pred", "flow_pred", "alpha_true", "flow_true"])
        for i in range(len(pred.alpha)):
            row = [i + 1, repr(float(pred.alpha[i])), repr(float(pred.flow[i]))]
            if truth is not None:
                row += [repr(float(truth.ratios[i])), repr(float(truth.flows[i]))]
            else:
                row += ["", ""]
            w.writerow(row)
