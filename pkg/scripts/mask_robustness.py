"""HetGAT on the Sioux Falls dataset with a fraction of OD pairs hidden from the model."""
import argparse

from trafficlab.experiments import desk_config, run, sioux_falls_dataset
from trafficlab.scenario import remask_dataset

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--ratios", type=float, nargs="+", default=[0.0, 0.2, 0.3, 0.4])
p.add_argument("--seed", type=int, default=0)
p.add_argument("--epochs", type=int, default=200)
args = p.parse_args()

base = sioux_falls_dataset()
for ratio in args.ratios:
    res = run(remask_dataset(base, ratio), desk_config(args.seed, args.epochs), f"mask{ratio}")
    print(f"mask {ratio:.1f}: mae_ratio {res.test.mae_ratio:.4f} lc_norm {res.test.lc_norm:.4f} "
          f"L_total {res.first_loss:.3f} -> {res.final_loss:.3f}", flush=True)
