"""Generate (or reuse) the 375-sample mixed-LMH Sioux Falls dataset."""
import argparse
from dataclasses import replace

from trafficlab.experiments import SF_CONFIG, sioux_falls_dataset

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--samples", type=int, default=SF_CONFIG.samples)
p.add_argument("--seed", type=int, default=SF_CONFIG.seed)
p.add_argument("--workers", type=int, default=1)
args = p.parse_args()

ds = sioux_falls_dataset(replace(SF_CONFIG, samples=args.samples, seed=args.seed), workers=args.workers)
m = ds.manifest
print(f"{m['n_samples']} samples, split at {m['split_index']}, levels {m['level_counts']}")
print(f"CoV capacity {m['cov_capacity']:.3f}  CoV demand {m['cov_demand']:.3f}")
