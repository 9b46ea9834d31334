"""Finite-difference suites shared by the ``gradcheck`` command and the acceptance tests."""
from __future__ import annotations

import numpy as np

from . import hetgat as hg
from . import tensorad as ad
from .netcore import Link, Network, Node, ODMatrix
from .scenario import Sample
from .uesolver import solve_ue_frank_wolfe

TOY_CONFIG = hg.ModelConfig(embed_size=8, heads=2, hidden_size=8)
TOY_OD = ODMatrix({(0, 2): 3.0, (1, 3): 2.0, (3, 1): 1.0, (0, 3): 1.5})


def toy_network() -> Network:
    coords = [(0, 0), (1, 0), (1, 1), (0, 1)]
    edges = [(0, 1, 1.0, 2.0), (1, 2, 1.5, 1.0), (2, 3, 1.0, 2.0), (3, 0, 2.0, 1.5),
             (0, 2, 2.5, 1.0), (1, 3, 2.0, 2.5), (2, 0, 1.0, 1.0)]
    return Network(tuple(Node(i, float(x), float(y)) for i, (x, y) in enumerate(coords)),
                   tuple(Link(u, v, t, c) for u, v, t, c in edges))


def toy_sample() -> Sample:
    net = toy_network()
    return Sample(net, TOY_OD, TOY_OD, frozenset(), solve_ue_frank_wolfe(net, TOY_OD), {})


def primitive_errors(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per primitive on random, kink-free inputs."""
    rng = np.random.default_rng(seed)
    m, k, n = 3, 4, 5
    w = rng.normal(size=(m, n))
    pos = rng.uniform(0.5, 2.0, size=(m, n))
    signed = rng.uniform(0.1, 2.0, size=(m, n)) * rng.choice([-1, 1], size=(m, n))
    idx = np.array([0, 2, 2, 1])
    cases = {
        "add": (lambda a, b: ad.sum_(ad.add(a, b) * w), [pos, rng.normal(size=n)]),
        "sub": (lambda a, b: ad.sum_(ad.sub(a, b) * w), [pos, rng.normal(size=(m, 1))]),
        "mul": (lambda a, b: ad.sum_(ad.mul(a, b) * w), [pos, rng.normal(size=(m, n))]),
        "div": (lambda a, b: ad.sum_(ad.div(a, b) * w), [rng.normal(size=(m, n)), pos]),
        "scalar": (lambda a: ad.sum_((a * 2.5 + 1.0) * w), [rng.normal(size=(m, n))]),
        "matmul": (lambda a, b: ad.sum_(ad.matmul(a, b) * w), [rng.normal(size=(m, k)), rng.normal(size=(k, n))]),
        "head_matmul": (lambda a, b: ad.sum_(ad.head_matmul(a, b)),
                        [rng.normal(size=(m, 2, k)), rng.normal(size=(2, k, 3))]),
        "exp": (lambda a: ad.sum_(ad.exp(a) * w), [rng.uniform(-2, 2, size=(m, n))]),
        "log": (lambda a: ad.sum_(ad.log(a) * w), [pos]),
        "power": (lambda a: ad.sum_(ad.power(a, 3.0) * w), [pos]),
        "leaky_relu": (lambda a: ad.sum_(ad.leaky_relu(a) * w), [signed]),
        "abs": (lambda a: ad.sum_(ad.abs_(a) * w), [signed]),
        "concat": (lambda a, b: ad.sum_(ad.concat([a, b]) * rng_w(m, n + 2)), [rng.normal(size=(m, n)),
                                                                               rng.normal(size=(m, 2))]),
        "slice": (lambda a: ad.sum_(a[1:, ::2] * w[1:, ::2]), [rng.normal(size=(m, n))]),
        "gather": (lambda a: ad.sum_(ad.gather_rows(a, idx) * rng_w(4, n)), [rng.normal(size=(m, n))]),
        "scatter_add": (lambda a: ad.sum_(ad.scatter_add_rows(a, [1, 0, 1], 2) * rng_w(2, n)),
                        [rng.normal(size=(m, n))]),
        "sum_rows": (lambda a: ad.sum_(ad.sum_(a, axis=1) * w[:, 0]), [rng.normal(size=(m, n))]),
        "mean": (lambda a: ad.mean(a * w) + ad.sum_(ad.mean(a, axis=1)), [rng.normal(size=(m, n))]),
        "layer_norm": (lambda a, g, o: ad.sum_(ad.layer_norm(a, g, o) * w),
                       [rng.normal(size=(m, n)), rng.normal(size=n), rng.normal(size=n)]),
    }
    fixed = np.random.default_rng(seed + 1).normal(size=(8, 8))

    def rng_w(r, c):
        return fixed[:r, :c]

    return {name: ad.gradient_check(f, leaves) for name, (f, leaves) in cases.items()}


def model_gradient_error(seed: int = 2, max_entries: int | None = None, architecture: str = "hetgat") -> float:
    """Max relative error of dL_total/dtheta on the 4-node toy instance.

    Seeds must keep every leaky-rectifier and abs argument clear of zero by more
    than one finite-difference step; seed 2 does for both architectures.
    """
    sample = toy_sample()
    rng = np.random.default_rng(seed)
    if architecture == "fcnn":
        params = hg.init_fcnn_params(4, TOY_CONFIG, rng)
        graph = hg.build_hetero_graph(sample.network, sample.od_observed, homogeneous=True)
    else:
        params = hg.init_params(4, TOY_CONFIG, rng)
        graph = hg.build_hetero_graph(sample.network, sample.od_observed)
    names = sorted(params)
    targets = hg.sample_targets(sample)

    def loss(*leaves):
        P = dict(zip(names, leaves))
        alpha = hg.forward_alpha(graph, P, TOY_CONFIG, architecture)
        return hg.loss_tensors(alpha, graph, targets, TOY_CONFIG.weights)["total"]

    return ad.gradient_check(loss, [params[k] for k in names], h=1e-5, max_entries=max_entries,
                             seed=seed, floor=1e-6)
