"""Command-line entry point: ``trafficlab <subcommand> ...``.

Every run writes into ``<out>/<subcommand>-<digest>/`` where the digest covers
the subcommand, the config text, overrides and input file contents, so
identical invocations land in (and overwrite) the same directory with
byte-identical files.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checks
from . import hetgat as hg
from . import traineval as te
from .errors import TrafficLabError
from .netcore import load_network, load_trips
from .scenario import ScenarioConfig, gen_grid_random_network, generate_dataset, load_dataset, random_od, save_dataset
from .uesolver import (
    SolverOptions,
    conservation_residuals,
    solve_ue_frank_wolfe,
    wardrop_gap,
    write_solution_csv,
    write_trace_csv,
)

OUT_ENV = "TRAFFICLAB_OUT"
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# --------------------------------------------------------------------------
# config handling


def read_config(path: str | None, overrides: list[str]) -> tuple[configparser.ConfigParser, str, Path]:
    cp = configparser.ConfigParser()
    text = ""
    base = Path.cwd()
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        text = p.read_text()
        cp.read_string(text, source=str(p))
        base = p.resolve().parent
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, value)
    return cp, text, base


def _coerce(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def dataclass_from_section(cls, cp: configparser.ConfigParser, section: str, **extra):
    values = dict(extra)
    if cp.has_section(section):
        defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
        for key, raw in cp.items(section):
            if key not in defaults:
                raise UsageError(f"unknown option [{section}] {key}")
            values[key] = _coerce(raw, defaults[key])
    return cls(**values)


def train_config(cp) -> te.TrainConfig:
    model = dataclass_from_section(hg.ModelConfig, cp, "model")
    return dataclass_from_section(te.TrainConfig, cp, "train", model=model)


# --------------------------------------------------------------------------
# run directories


def _digest(parts: list[bytes]) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(hashlib.sha256(p).digest())
    return h.hexdigest()[:12]


def run_dir(args, command: str, config_text: str, inputs: list[str | None]) -> Path:
    root = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    parts = [command.encode(), config_text.encode(), "\n".join(args.set or []).encode()]
    parts += [json.dumps(_flag_echo(args), sort_keys=True).encode()]
    for p in inputs:
        if p:
            parts.append(Path(p).read_bytes())
    d = root / f"{command}-{_digest(parts)}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _flag_echo(args) -> dict:
    skip = {"func", "out", "threads", "set"}
    return {k: v for k, v in vars(args).items() if k not in skip and v is not None}


def write_manifest(d: Path, args, command: str, config_text: str, extra: dict) -> None:
    doc = {"command": command, "flags": _flag_echo(args), "overrides": list(args.set or []),
           "config": config_text, **extra}
    (d / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _require(path: str, what: str) -> str:
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# --------------------------------------------------------------------------
# subcommands


def cmd_solve(args) -> int:
    _require(args.net, "network file")
    _require(args.trips, "trips file")
    net = load_network(args.net, args.node)
    od = load_trips(args.trips)
    sol = solve_ue_frank_wolfe(net, od, SolverOptions(args.threshold, args.max_iter))
    d = run_dir(args, "solve", "", [args.net, args.trips, args.node])
    write_solution_csv(d / "solution.csv", net, sol)
    write_trace_csv(d / "trace.csv", sol)
    write_manifest(d, args, "solve", "", {
        "nodes": net.n_nodes, "links": net.n_links, "iterations": sol.iterations,
        "converged": sol.converged, "beckmann": sol.beckmann_value, "final_rel_change": sol.final_rel_change})
    print(f"{'converged' if sol.converged else 'NOT converged'} after {sol.iterations} iterations; "
          f"Beckmann {sol.beckmann_value:.6g}; output {d}")
    return 0


def cmd_gen_data(args) -> int:
    cp, text, base = read_config(args.config, args.set or [])
    scfg = dataclass_from_section(ScenarioConfig, cp, "scenario")
    sec = cp["network"] if cp.has_section("network") else {}
    if "net" in sec:
        net_path = base / sec["net"]
        net = load_network(_require(str(net_path), "network file"),
                           str(base / sec["node"]) if "node" in sec else None)
        od = load_trips(_require(str(base / sec["trips"]), "trips file"))
        parent = net_path.stem
    elif "grid_nodes" in sec:
        rng = np.random.default_rng(int(sec.get("seed", scfg.seed)))
        net = gen_grid_random_network(int(sec["grid_nodes"]), rng)
        od = random_od(net, rng, float(sec.get("od_pair_fraction", 0.3)))
        parent = f"grid{net.n_nodes}"
    else:
        raise UsageError("config needs [network] net/trips or grid_nodes")
    ds = generate_dataset(net, od, scfg, parent=parent, workers=args.threads or 1)
    d = run_dir(args, "gen-data", text, [])
    save_dataset(ds, d / "dataset.jsonl")
    write_manifest(d, args, "gen-data", text, {"dataset": ds.manifest})
    print(f"{len(ds)} samples (split {ds.split_index}); CoV capacity {ds.manifest['cov_capacity']:.3f}, "
          f"demand {ds.manifest['cov_demand']:.3f}; output {d}")
    return 0


def cmd_train(args) -> int:
    cp, text, _ = read_config(args.config, args.set or [])
    cfg = train_config(cp)
    ds = load_dataset(_require(args.data, "dataset"))
    if cfg.strategy == "transfer":
        if not args.init:
            raise UsageError("strategy transfer needs --init CHECKPOINT")
        pre = te.TrainedModel.load(_require(args.init, "checkpoint"))
        model, hist = te.transfer_retrain(pre, ds, cfg)
    else:
        model, hist = te.train(ds, cfg)
    d = run_dir(args, "train", text, [args.data, args.init])
    model.save(d / "model.json")
    te.write_history_csv(d / "history.csv", hist)
    test = ds.test if cfg.strategy != "homogenized" else [
        te.homogenize_sample(s, model.n_nodes) for s in ds.test]
    rows = [("test", cfg.architecture, te.evaluate_metrics(model, test))] if test else []
    te.write_metrics_csv(d / "metrics.csv", rows)
    write_manifest(d, args, "train", text, {"train_config": dataclasses.asdict(cfg)})
    last = hist.epochs[-1]
    print(f"trained {cfg.epochs} epochs; final L_total {last.l_total:.5g}; output {d}")
    return 0


def cmd_eval(args) -> int:
    model = te.TrainedModel.load(_require(args.ckpt, "checkpoint"))
    ds = load_dataset(_require(args.data, "dataset"))
    pad = [te.homogenize_sample(s, model.n_nodes) for s in ds.samples] \
        if any(s.n_nodes < model.n_nodes for s in ds.samples) else ds.samples
    train_s, test_s = pad[: ds.split_index], pad[ds.split_index:]
    d = run_dir(args, "eval", "", [args.data, args.ckpt])
    rows = []
    for split, part in (("train", train_s), ("test", test_s)):
        if part:
            rows.append((split, model.architecture, te.evaluate_metrics(model, part)))
    te.write_metrics_csv(d / "metrics.csv", rows)
    pdir = d / "predictions"
    pdir.mkdir(exist_ok=True)
    for i, (s, p) in enumerate(zip(test_s, te.predict_samples(model, test_s))):
        hg.write_prediction_csv(pdir / f"sample_{ds.split_index + i + 1:05d}.csv", p, s.solution)
    write_manifest(d, args, "eval", "", {"metrics": {r[0]: dataclasses.asdict(r[2]) for r in rows}})
    for split, _, m in rows:
        print(f"{split}: mae_ratio {m.mae_ratio:.4f} rmse_ratio {m.rmse_ratio:.4f} "
              f"mae_flow {m.mae_flow:.4f} lc_norm {m.lc_norm:.4g}")
    print(f"output {d}")
    return 0


def cmd_gradcheck(args) -> int:
    prim = checks.primitive_errors(args.seed)
    full = {arch: checks.model_gradient_error(max_entries=args.max_entries, architecture=arch)
            for arch in ("hetgat", "fcnn")}
    worst = max(max(prim.values()), *full.values())
    for name, err in sorted(prim.items()):
        print(f"primitive {name:12s} {err:.3e}")
    for name, err in full.items():
        print(f"L_total   {name:12s} {err:.3e}")
    ok = worst < GRADCHECK_TOL
    print(f"max relative error {worst:.3e} -> {'PASS' if ok else 'FAIL'} (tolerance {GRADCHECK_TOL:g})")
    return 0 if ok else 1


def cmd_verify(args) -> int:
    ds = load_dataset(_require(args.data, "dataset"))
    d = run_dir(args, "verify", "", [args.data])
    failures = 0
    with open(d / "audit.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "relative_gap", "max_od_gap", "max_conservation_residual", "ok"])
        for i, s in enumerate(ds.samples):
            rep = wardrop_gap(s.network, s.solution, s.od_true, args.max_paths)
            res = float(np.max(np.abs(conservation_residuals(s.network, s.solution.flows, s.od_true)),
                               initial=0.0))
            ok = rep.relative_gap < args.gap_tol and res < 1e-6 * s.od_true.total
            failures += not ok
            w.writerow([i + 1, repr(rep.relative_gap), repr(rep.max_od_gap), repr(res), int(ok)])
    write_manifest(d, args, "verify", "", {"samples": len(ds), "failures": failures})
    print(f"{len(ds) - failures}/{len(ds)} samples pass; output {d}")
    return 0 if failures == 0 else 1


def _read_predictions(path: Path) -> tuple[np.ndarray, np.ndarray]:
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    t, p = [], []
    for f in files:
        with open(f, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["flow_true"] == "":
                    continue
                t.append(float(row["flow_true"]))
                p.append(float(row["flow_pred"]))
    if not t:
        raise TrafficLabError(f"no prediction rows with ground truth under {path}")
    return np.array(t), np.array(p)


def cmd_plot(args) -> int:
    src = Path(args.pred)
    if not src.exists():
        raise FileNotFoundError(f"prediction file not found: {args.pred}")
    t, p = _read_predictions(src)
    inputs = sorted(src.glob("*.csv")) if src.is_dir() else [src]
    d = run_dir(args, "plot", "", [str(f) for f in inputs])
    te.plot_scatter(d / "scatter.svg", t, p, args.title or "")
    write_manifest(d, args, "plot", "", {"points": len(t)})
    print(f"{len(t)} points; output {d / 'scatter.svg'}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="cap on worker processes (default: core count)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value; repeatable")

    parser = _Parser(prog="trafficlab", description="Traffic assignment and graph-surrogate laboratory.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("solve", parents=[common], help="Frank-Wolfe user equilibrium on TNTP files")
    p.add_argument("--net", required=True)
    p.add_argument("--trips", required=True)
    p.add_argument("--node", help="node coordinate file (default: sibling *_node.tntp if present)")
    p.add_argument("--threshold", type=float, default=1e-5)
    p.add_argument("--max-iter", type=int, default=10_000)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("gen-data", parents=[common], help="generate a scenario dataset")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train HetGAT or the FCNN baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--init", help="pretrained checkpoint (transfer strategy)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="metrics and per-link predictions for a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the autodiff engine")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=None, help="probe at most this many entries per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("verify", parents=[common], help="Wardrop gap and conservation audit of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--gap-tol", type=float, default=1e-4)
    p.add_argument("--max-paths", type=int, default=16)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot", parents=[common], help="predicted-vs-true flow scatter (SVG)")
    p.add_argument("--pred", required=True, help="prediction CSV or a directory of them")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            print(parser.format_usage(), end="", file=sys.stderr)
            return 2
        return args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 2
    except (TrafficLabError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
