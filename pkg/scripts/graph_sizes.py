"""Variable graph sizes: homogenized training on mixed sizes, and transfer to a larger graph."""
import argparse

from trafficlab import traineval as te
from trafficlab.experiments import desk_config, grid_dataset, transfer

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--small", type=int, default=16)
p.add_argument("--large", type=int, default=36)
p.add_argument("--samples", type=int, default=60)
p.add_argument("--epochs", type=int, default=50)
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()

small = grid_dataset(args.small, args.samples, args.seed)
large = grid_dataset(args.large, args.samples, args.seed + 1)

mixed = small.train + large.train
model, _ = te.train(mixed, desk_config(args.seed, args.epochs, strategy="homogenized"),
                    val=small.test + large.test)
n_max = model.n_nodes
for name, ds in (("small", small), ("large", large)):
    m = te.evaluate_metrics(model, [te.homogenize_sample(s, n_max) for s in ds.test])
    print(f"homogenized, {name} ({ds.samples[0].n_nodes} nodes): mae_ratio {m.mae_ratio:.4f}")

out = transfer(small, large, args.seed, args.epochs, args.epochs)
print(f"transfer {args.small}->{args.large}: mae_ratio {out['transfer'].mae_ratio:.4f} "
      f"(untrained {out['untrained'].mae_ratio:.4f}); encoders unchanged: {out['frozen_identical']}")
