"""HetGAT vs FCNN vs HetGAT without virtual links on Sioux Falls, several seeds."""
import argparse
import csv
import sys

from trafficlab.experiments import compare, sioux_falls_dataset

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
p.add_argument("--epochs", type=int, default=200)
p.add_argument("--csv", default="compare_models.csv")
p.add_argument("--quiet", action="store_true")
args = p.parse_args()

ds = sioux_falls_dataset()
log = None if args.quiet else (lambda line: print(line, file=sys.stderr, flush=True))
rows = []
for seed in args.seeds:
    for res in compare(ds, seed, args.epochs, log).values():
        rows.append(res.row())
        print(f"seed {seed} {res.label:12s} mae_ratio {res.test.mae_ratio:.4f} "
              f"rmse_ratio {res.test.rmse_ratio:.4f} lc_norm {res.test.lc_norm:.4f}", flush=True)

with open(args.csv, "w", newline="") as fh:
    w = csv.DictWriter(fh, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)
