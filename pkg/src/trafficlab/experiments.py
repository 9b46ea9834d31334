"""Desk-scale experiment recipes shared by ``scripts/`` and the acceptance tests."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import hetgat as hg
from . import traineval as te
from .netcore import load_network, load_trips
from .scenario import Dataset, ScenarioConfig, gen_grid_random_network, generate_dataset, load_dataset, \
    random_od, save_dataset

SIOUX_FALLS = Path(__file__).resolve().parents[2] / "data" / "sioux_falls"
SF_CONFIG = ScenarioConfig(samples=375, seed=0)


def cache_dir() -> Path:
    return Path(os.environ.get("TRAFFICLAB_CACHE", Path(__file__).resolve().parents[2] / ".cache"))


def desk_model(homogeneous: bool = False) -> hg.ModelConfig:
    return hg.ModelConfig(embed_size=32, heads=4, v_layers=2, r_layers=2, hidden_size=64,
                          homogeneous_mode=homogeneous, w_alpha=1.0, w_flow=0.005, w_cons=0.05)


def desk_config(seed: int, epochs: int = 200, architecture: str = "hetgat", homogeneous: bool = False,
                **kw) -> te.TrainConfig:
    return te.TrainConfig(learning_rate=1e-3, batch_size=16, epochs=epochs, seed=seed,
                          model=desk_model(homogeneous), architecture=architecture, eval_every=5, **kw)


def sioux_falls_dataset(config: ScenarioConfig = SF_CONFIG, path: Path | None = None,
                        workers: int = 1) -> Dataset:
    """Load the cached Sioux Falls dataset for ``config``, generating it on a miss."""
    path = Path(path) if path else cache_dir() / f"sioux_falls-{config.samples}-s{config.seed}.jsonl"
    if path.exists():
        ds = load_dataset(path)
        if ds.manifest.get("config") == asdict(config):
            return ds
    net = load_network(SIOUX_FALLS / "SiouxFalls_net.tntp")
    od = load_trips(SIOUX_FALLS / "SiouxFalls_trips.tntp")
    ds = generate_dataset(net, od, config, parent="SiouxFalls_net", workers=workers)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    return ds


def grid_dataset(n_nodes: int, samples: int, seed: int, pair_fraction: float = 0.3) -> Dataset:
    """Synthetic grid-derived topology with random demand, solved per sample."""
    rng = np.random.default_rng([seed, n_nodes])
    net = gen_grid_random_network(n_nodes, rng)
    od = random_od(net, rng, pair_fraction)
    return generate_dataset(net, od, ScenarioConfig(samples=samples, seed=seed), parent=f"grid{n_nodes}")


@dataclass(frozen=True)
class RunResult:
    label: str
    seed: int
    test: te.Metrics
    first_loss: float
    final_loss: float

    def row(self) -> dict:
        return {"label": self.label, "seed": self.seed, "first_loss": self.first_loss,
                "final_loss": self.final_loss, **asdict(self.test)}


def run(dataset: Dataset, config: te.TrainConfig, label: str, log=None) -> RunResult:
    def on_epoch(r):
        if log and r.val:
            log(f"{label} seed {config.seed} epoch {r.epoch}: L_total {r.l_total:.4f} "
                f"val mae_ratio {r.val.mae_ratio:.4f} lc {r.val.lc_norm:.4f}")

    model, hist = te.train(dataset, config, on_epoch=on_epoch)
    return RunResult(label, config.seed, te.evaluate_metrics(model, dataset.test),
                     hist.epochs[0].l_total, hist.epochs[-1].l_total)


def compare(dataset: Dataset, seed: int, epochs: int = 200, log=None) -> dict[str, RunResult]:
    """HetGAT, FCNN and HetGAT without virtual links, trained identically."""
    return {
        "hetgat": run(dataset, desk_config(seed, epochs), "hetgat", log),
        "fcnn": run(dataset, desk_config(seed, epochs, architecture="fcnn"), "fcnn", log),
        "homogeneous": run(dataset, desk_config(seed, epochs, homogeneous=True), "homogeneous", log),
    }


def cached_json(name: str, compute):
    """Memoize a JSON-able result under the cache directory (used by scripts, not tests)."""
    path = cache_dir() / name
    if path.exists():
        return json.loads(path.read_text())
    value = compute()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(value, indent=1, sort_keys=True))
    return value


def transfer(source: Dataset, target: Dataset, seed: int, pre_epochs: int, epochs: int,
             model: hg.ModelConfig | None = None) -> dict:
    """Pretrain on ``source``, retrain size-dependent parts on ``target``; compare to an untrained model."""
    cfg = te.TrainConfig(epochs=pre_epochs, batch_size=16, seed=seed, model=model or desk_model(),
                         eval_every=max(pre_epochs, 1))
    pre, _ = te.train(source, cfg)
    moved, _ = te.transfer_retrain(pre, target, replace(cfg, epochs=epochs, eval_every=max(epochs, 1)))
    scaler = hg.EdgeScaler.fit([s.network for s in target.samples])
    untrained = te.init_model(target.samples[0].n_nodes, replace(cfg, seed=seed + 1), scaler)
    frozen = sorted(k for k in pre.params if not te.is_size_dependent(k))
    return {
        "transfer": te.evaluate_metrics(moved, target.test),
        "untrained": te.evaluate_metrics(untrained, target.test),
        "frozen_identical": all(pre.params[k].tobytes() == moved.params[k].tobytes() for k in frozen),
        "frozen": frozen,
    }
