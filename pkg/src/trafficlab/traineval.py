"""Training loop, evaluation metrics, cross-validation, transfer and homogenized training."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import hetgat as hg
from . import tensorad as ad
from .errors import ContractError, NumericError
from .netcore import Network, Node, normalized_coords
from .scenario import Dataset, Sample

STRATEGIES = ("standard", "transfer", "homogenized")
ARCHITECTURES = ("hetgat", "fcnn")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    model: hg.ModelConfig = field(default_factory=hg.ModelConfig)
    strategy: str = "standard"
    architecture: str = "hetgat"
    eval_every: int = 1  # validation metrics every k epochs (and always on the last)

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ContractError("batch_size, epochs and eval_every must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if self.architecture not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {self.architecture!r}")

    @property
    def weights(self) -> tuple[float, float, float]:
        return self.model.weights


@dataclass(frozen=True)
class Metrics:
    mae_flow: float
    rmse_flow: float
    mae_ratio: float
    rmse_ratio: float
    lc_norm: float

    def as_row(self) -> list[float]:
        return [self.mae_flow, self.rmse_flow, self.mae_ratio, self.rmse_ratio, self.lc_norm]


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    l_alpha: float
    l_f: float
    l_c: float
    l_total: float
    val: Metrics | None


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.epochs])


@dataclass
class TrainedModel:
    params: dict[str, np.ndarray]
    config: hg.ModelConfig
    scaler: hg.EdgeScaler
    architecture: str = "hetgat"
    n_nodes: int = 0

    def save(self, path) -> None:
        hg.save_model(path, self.params, self.config, self.scaler, self.architecture,
                      {"n_nodes": self.n_nodes})

    @classmethod
    def load(cls, path) -> TrainedModel:
        params, cfg, scaler, meta = hg.load_model(path)
        return cls(params, cfg, scaler, meta.get("model", "hetgat"), int(meta.get("n_nodes", 0)))


# --------------------------------------------------------------------------
# graph preparation


def _graph(sample: Sample, model: TrainedModel) -> hg.HeteroGraph:
    homogeneous = model.architecture == "fcnn" or model.config.homogeneous_mode
    return hg.build_hetero_graph(sample.network, sample.od_observed, model.scaler,
                                 model.config.reverse_virtual, homogeneous)


def _check_sizes(samples: Sequence[Sample], n_nodes: int) -> None:
    bad = sorted({s.n_nodes for s in samples if s.n_nodes != n_nodes})
    if bad:
        raise ContractError(f"samples have node counts {bad}, model expects {n_nodes}")


def init_model(n_nodes: int, config: TrainConfig, scaler: hg.EdgeScaler) -> TrainedModel:
    rng = np.random.default_rng(config.seed)
    init = hg.init_fcnn_params if config.architecture == "fcnn" else hg.init_params
    return TrainedModel(init(n_nodes, config.model, rng), config.model, scaler, config.architecture, n_nodes)


def predict_samples(model: TrainedModel, samples: Sequence[Sample], batch_size: int = 32) -> list[hg.Prediction]:
    _check_sizes(samples, model.n_nodes)
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        graph = hg.union([_graph(s, model) for s in chunk])
        alpha = hg.forward_alpha(graph, hg.as_constants(model.params), model.config, model.architecture).data
        offsets = np.cumsum([0] + [s.network.n_links for s in chunk])
        for s, a, b in zip(chunk, offsets[:-1], offsets[1:]):
            out.append(hg.Prediction(alpha[a:b], alpha[a:b] * s.network.capacity))
    return out


def compute_metrics(samples: Sequence[Sample], preds: Sequence[hg.Prediction]) -> Metrics:
    if not samples:
        raise ContractError("cannot evaluate an empty split")
    dr = np.concatenate([p.alpha - s.solution.ratios for s, p in zip(samples, preds)])
    df = np.concatenate([p.flow - s.solution.flows for s, p in zip(samples, preds)])
    lc = [hg.conservation_loss(p.flow, s.od_true, s.network)[0] / s.od_true.total
          for s, p in zip(samples, preds)]
    return Metrics(
        mae_flow=float(np.mean(np.abs(df))),
        rmse_flow=float(np.sqrt(np.mean(df * df))),
        mae_ratio=float(np.mean(np.abs(dr))),
        rmse_ratio=float(np.sqrt(np.mean(dr * dr))),
        lc_norm=float(np.mean(lc)),
    )


def evaluate_metrics(model: TrainedModel, samples: Sequence[Sample]) -> Metrics:
    if not samples:
        raise ContractError("cannot evaluate an empty split")
    return compute_metrics(samples, predict_samples(model, samples))


# --------------------------------------------------------------------------
# training


def _batch_order(n: int, seed: int, epoch: int, batch_size: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def fit(model: TrainedModel, train: Sequence[Sample], val: Sequence[Sample], config: TrainConfig,
        trainable: Callable[[str], bool] | None = None,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[TrainedModel, History]:
    """Mini-batch Adam on L_total, starting from ``model``.

    Parameters for which ``trainable(name)`` is false are never updated.
    """
    if not train:
        raise ContractError("training split is empty")
    _check_sizes(list(train) + list(val), model.n_nodes)
    graphs = [_graph(s, model) for s in train]
    targets = [hg.sample_targets(s) for s in train]
    names = sorted(model.params)
    train_names = [k for k in names if trainable is None or trainable(k)]
    params = dict(model.params)
    state = ad.AdamState()
    history = History()
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(4)
        for b, idx in enumerate(_batch_order(len(train), config.seed, epoch, config.batch_size)):
            graph = hg.union([graphs[i] for i in idx])
            tgt = hg.Targets.concat([targets[i] for i in idx])
            rec = ad.Record()
            P = {k: rec.leaf(params[k], name=k, requires_grad=k in train_names) for k in names}
            alpha = hg.forward_alpha(graph, P, model.config, model.architecture)
            terms = hg.loss_tensors(alpha, graph, tgt, model.config.weights)
            vals = [float(terms[k].data) for k in ("alpha", "flow", "cons", "total")]
            if not all(math.isfinite(v) for v in vals):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = ad.backward(rec, terms["total"], [P[k] for k in train_names])
            params = ad.adam_step(params, {k: grads[P[k].id] for k in train_names}, state,
                                  config.learning_rate)
            sums += np.array(vals) * len(idx)
        sums /= len(train)
        current = replace(model, params=params)
        val_metrics = None
        if val and (epoch % config.eval_every == 0 or epoch == config.epochs):
            val_metrics = evaluate_metrics(current, val)
        row = EpochRecord(epoch, *map(float, sums), val_metrics)
        history.epochs.append(row)
        if on_epoch:
            on_epoch(row)
    return replace(model, params=params), history


def train(dataset: Dataset | Sequence[Sample], config: TrainConfig,
          val: Sequence[Sample] | None = None, **kw) -> tuple[TrainedModel, History]:
    """Train from scratch on the dataset's train split (validated on its test split)."""
    if isinstance(dataset, Dataset):
        train_s, val_s = dataset.train, dataset.test
        everything = dataset.samples
    else:
        train_s, val_s = list(dataset), []
        everything = list(dataset)
    if val is not None:
        val_s = list(val)
        everything = list(train_s) + val_s
    if not train_s:
        raise ContractError("dataset is empty")
    if config.strategy == "homogenized":
        n_max = max(s.n_nodes for s in everything)
        train_s = [homogenize_sample(s, n_max) for s in train_s]
        val_s = [homogenize_sample(s, n_max) for s in val_s]
        everything = list(train_s) + list(val_s)
    sizes = {s.n_nodes for s in everything}
    if len(sizes) != 1:
        raise ContractError(f"samples mix node counts {sorted(sizes)}; use the homogenized strategy")
    scaler = hg.EdgeScaler.fit([s.network for s in everything])
    model = init_model(sizes.pop(), config, scaler)
    return fit(model, train_s, val_s, config, **kw)


# --------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class CVResult:
    folds: list[Metrics]
    mean: Metrics
    std: Metrics


def fold_slices(n: int, k: int) -> list[range]:
    if k < 2:
        raise ContractError("k must be >= 2")
    if k > n:
        raise ContractError(f"k = {k} exceeds dataset size {n}")
    bounds = np.cumsum([0] + [len(a) for a in np.array_split(np.arange(n), k)])
    return [range(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def kfold_cv(dataset: Dataset | Sequence[Sample], k: int, config: TrainConfig) -> CVResult:
    samples = dataset.samples if isinstance(dataset, Dataset) else list(dataset)
    folds = []
    for r in fold_slices(len(samples), k):
        val = [samples[i] for i in r]
        tr = [s for i, s in enumerate(samples) if i not in r]
        model, _ = train(tr, config, val=val)
        folds.append(evaluate_metrics(model, val))
    table = np.array([m.as_row() for m in folds])
    return CVResult(folds, Metrics(*table.mean(axis=0)), Metrics(*table.std(axis=0)))


# --------------------------------------------------------------------------
# variable graph sizes

SIZE_DEPENDENT = ("pre.", "head.")


def is_size_dependent(name: str) -> bool:
    return name.startswith(SIZE_DEPENDENT)


def transfer_retrain(pretrained: TrainedModel, dataset: Dataset | Sequence[Sample], config: TrainConfig,
                     val: Sequence[Sample] | None = None) -> tuple[TrainedModel, History]:
    """Re-initialise and train preprocessing + edge head on a new graph size; encoders stay frozen."""
    if pretrained.architecture != "hetgat":
        raise ContractError("transfer applies to the HetGAT model only")
    if isinstance(dataset, Dataset):
        train_s, val_s = dataset.train, dataset.test
    else:
        train_s, val_s = list(dataset), []
    if val is not None:
        val_s = list(val)
    sizes = {s.n_nodes for s in list(train_s) + list(val_s)}
    if len(sizes) != 1:
        raise ContractError(f"transfer target mixes node counts {sorted(sizes)}")
    n = sizes.pop()
    fresh = hg.init_params(n, config.model, np.random.default_rng(config.seed))
    for k, v in pretrained.params.items():
        if is_size_dependent(k):
            continue
        if k not in fresh or fresh[k].shape != v.shape:
            raise ContractError(f"pretrained encoder tensor {k} does not fit the model config")
    params = {k: (v if is_size_dependent(k) else pretrained.params[k]) for k, v in fresh.items()}
    scaler = hg.EdgeScaler.fit([s.network for s in list(train_s) + list(val_s)])
    model = TrainedModel(params, config.model, scaler, "hetgat", n)
    return fit(model, train_s, val_s, config, trainable=is_size_dependent)


def homogenize_sample(sample: Sample, n_max: int) -> Sample:
    """Pad with isolated dummy nodes at (0, 0).

    Real-node coordinates are min-max normalised first so that the dummies do
    not change them when X_n is assembled.
    """
    n = sample.n_nodes
    if n > n_max:
        raise ContractError(f"sample has {n} nodes, more than n_max = {n_max}")
    if n == n_max:
        return sample
    xy = normalized_coords(sample.network)
    nodes = [Node(i, float(x), float(y)) for i, (x, y) in enumerate(xy)]
    nodes += [Node(i, 0.0, 0.0) for i in range(n, n_max)]
    net = Network(tuple(nodes), sample.network.links, sample.network.first_thru_node)
    return replace(sample, network=net, meta={**sample.meta, "padded_from": n})


# --------------------------------------------------------------------------
# exports

METRICS_HEADER = ["split", "model", "mae_flow", "rmse_flow", "mae_ratio", "rmse_ratio", "lc_norm"]
HISTORY_HEADER = ["epoch", "l_alpha", "l_f", "l_c", "l_total", "val_mae_ratio"]


def write_metrics_csv(path, rows: Sequence[tuple[str, str, Metrics]]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for split, model, m in rows:
            w.writerow([split, model, *(repr(v) for v in m.as_row())])


def write_history_csv(path, history: History) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for e in history.epochs:
            w.writerow([e.epoch, repr(e.l_alpha), repr(e.l_f), repr(e.l_c), repr(e.l_total),
                        repr(e.val.mae_ratio) if e.val else ""])


def plot_scatter(path, true_flows, pred_flows, title: str = "") -> None:
    """Predicted vs true link flow as a deterministic SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = np.asarray(true_flows, dtype=float)
    p = np.asarray(pred_flows, dtype=float)
    with matplotlib.rc_context({"svg.hashsalt": "trafficlab", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ax.scatter(t, p, s=6, alpha=0.6, linewidths=0)
        hi = float(max(t.max(initial=0), p.max(initial=0))) or 1.0
        ax.plot([0, hi], [0, hi], color="k", lw=0.8)
        ax.set_xlabel("true flow")
        ax.set_ylabel("predicted flow")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)

