import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import two_parallel
from trafficlab.errors import DomainError, IntegrityError, SchemaVersionError
from trafficlab.netcore import ODMatrix
from trafficlab.scenario import (
    ScenarioConfig,
    generate_dataset,
    gen_grid_random_network,
    is_strongly_connected,
    load_dataset,
    mask_od,
    perturb_topology,
    random_od,
    remask_dataset,
    save_dataset,
    scale_capacities,
    scale_od,
    serialize_network_bytes,
)
from trafficlab.uesolver import conservation_residuals, wardrop_gap


def rng(seed=0):
    return np.random.default_rng(seed)


def pairs_of(net):
    return [(l.from_node, l.to_node) for l in net.links]


def test_scale_od_identity_and_degenerate():
    od = ODMatrix({(0, 1): 100.0, (1, 0): 3.0})
    assert scale_od(od, rng(), 1.0, 1.0) == od
    assert scale_od(od, rng(), 0.5, 0.5)[(0, 1)] == 50.0


def test_scale_od_mean():
    od = ODMatrix({(i, i + 1): 1.0 for i in range(10_000)})
    out = scale_od(od, rng(42), 0.5, 1.5)
    vals = np.array(list(out.values()))
    assert abs(vals.mean() - 1.0) < 0.02
    assert vals.min() >= 0.5 and vals.max() <= 1.5


def test_scale_od_rejects_bad_range():
    with pytest.raises(DomainError):
        scale_od(ODMatrix(), rng(), 1.5, 0.5)


def test_scale_capacities_light(sioux_falls):
    net, _ = sioux_falls
    out = scale_capacities(net, rng(1), "L")
    ratio = out.capacity / net.capacity
    assert np.all(ratio >= 0.8) and np.all(ratio <= 1.0)
    assert out.free_flow_time.tolist() == net.free_flow_time.tolist()


def test_scale_capacities_identity(sioux_falls):
    net, _ = sioux_falls
    assert scale_capacities(net, rng(), (1.0, 1.0)).links == net.links


def test_scale_capacities_heavy(sioux_falls):
    net, _ = sioux_falls
    ratio = scale_capacities(net, rng(5), "H").capacity / net.capacity
    assert ratio.min() >= 0.2 and ratio.max() <= 1.0


def test_mask_examples():
    od = ODMatrix({(0, i): float(i) for i in range(1, 11)})
    same, m0 = mask_od(od, 0.0, rng())
    assert same == od and m0 == frozenset()
    none, m1 = mask_od(od, 1.0, rng())
    assert len(none) == 0 and len(m1) == 10
    part, m4 = mask_od(od, 0.4, rng())
    assert len(m4) == 4 and len(part) == 6
    assert all(k not in part for k in m4)


@given(st.floats(0, 1), st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_mask_consistency(ratio, seed):
    od = ODMatrix({(i, j): 1.0 + i + j for i in range(4) for j in range(4) if i != j})
    obs, mask = mask_od(od, ratio, rng(seed))
    for k in od:
        assert (obs.get(k) == 0) == (k in mask)
        if k not in mask:
            assert obs[k] == od[k]


@pytest.mark.parametrize("target", [4, 16, 36, 100])
def test_grid_network_size_and_connectivity(target):
    net = gen_grid_random_network(target, rng(target))
    assert net.n_nodes == target
    assert is_strongly_connected(net.n_nodes, pairs_of(net))
    assert np.all((net.capacity >= 5) & (net.capacity <= 20))
    assert np.all((net.free_flow_time >= 1) & (net.free_flow_time <= 5))


@pytest.mark.slow
def test_grid_network_300():
    net = gen_grid_random_network(300, rng(300))
    assert net.n_nodes == 300 and is_strongly_connected(300, pairs_of(net))


def test_grid_network_deterministic():
    a = gen_grid_random_network(30, rng(9))
    b = gen_grid_random_network(30, rng(9))
    assert serialize_network_bytes(a) == serialize_network_bytes(b)


def test_grid_network_rejects_small():
    with pytest.raises(DomainError):
        gen_grid_random_network(3, rng())


def test_perturb_identity_and_bounds(sioux_falls):
    net, _ = sioux_falls
    assert perturb_topology(net, rng(), 0, 0) is net
    with pytest.raises(DomainError):
        perturb_topology(net, rng(), 0, net.n_links)


def test_perturb_sioux_falls(sioux_falls):
    net, _ = sioux_falls
    out = perturb_topology(net, rng(11), 4, 4)
    assert out.n_links == 76 and out.n_nodes == 24
    assert is_strongly_connected(24, pairs_of(out))
    assert set(pairs_of(out)) != set(pairs_of(net))


def test_generate_small_dataset_gap_oracle():
    net = two_parallel()
    od = ODMatrix({(0, 1): 3.0})
    ds = generate_dataset(net, od, ScenarioConfig(samples=10, seed=3))
    assert len(ds) == 10 and ds.manifest["split_index"] == 8
    for s in ds.samples:
        assert wardrop_gap(s.network, s.solution, s.od_true, 4).relative_gap < 1e-4
        res = conservation_residuals(s.network, s.solution.flows, s.od_true)
        assert np.max(np.abs(res)) < 1e-6 * s.od_true.total
        assert s.od_true.total == pytest.approx(100.0, rel=1e-12)


def test_mixed_levels_cycle():
    ds = generate_dataset(two_parallel(), ODMatrix({(0, 1): 3.0}), ScenarioConfig(samples=9))
    assert ds.manifest["level_counts"] == {"H": 3, "L": 3, "M": 3}
    assert [s.meta["level"] for s in ds.samples[:3]] == ["L", "M", "H"]


def test_masked_samples_solved_on_true_demand():
    net = gen_grid_random_network(9, rng(2))
    od = random_od(net, rng(3), 0.5)
    ds = generate_dataset(net, od, ScenarioConfig(samples=4, mask_ratio=0.4, seed=1))
    for s in ds.samples:
        assert len(s.mask) == int(np.floor(0.4 * len(s.od_true) + 0.5))
        res = conservation_residuals(s.network, s.solution.flows, s.od_true)
        assert np.max(np.abs(res)) < 1e-6 * s.od_true.total
        for k in s.od_true:
            assert (s.od_observed.get(k) == 0) == (k in s.mask)


def test_remask_matches_direct_generation():
    net = gen_grid_random_network(9, rng(2))
    od = random_od(net, rng(3), 0.5)
    plain = generate_dataset(net, od, ScenarioConfig(samples=3, seed=4))
    direct = generate_dataset(net, od, ScenarioConfig(samples=3, seed=4, mask_ratio=0.4))
    again = remask_dataset(plain, 0.4)
    assert again.manifest == direct.manifest
    for s, t in zip(again.samples, direct.samples):
        assert s.mask == t.mask and s.od_observed == t.od_observed and s.mask
        assert s.solution.flows.tolist() == t.solution.flows.tolist()


def test_dataset_roundtrip_and_determinism(tmp_path):
    cfg = ScenarioConfig(samples=10, seed=5, mask_ratio=0.3)
    net = gen_grid_random_network(9, rng(0))
    od = random_od(net, rng(1), 0.5)
    a = generate_dataset(net, od, cfg)
    b = generate_dataset(net, od, cfg)
    save_dataset(a, tmp_path / "a.jsonl")
    save_dataset(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = load_dataset(tmp_path / "a.jsonl")
    assert back.manifest == a.manifest
    for s, t in zip(a.samples, back.samples):
        assert s.network.links == t.network.links and s.network.nodes == t.network.nodes
        assert s.od_true == t.od_true and s.od_observed == t.od_observed and s.mask == t.mask
        assert s.solution.flows.tolist() == t.solution.flows.tolist()
        assert s.solution.ratios.tolist() == t.solution.ratios.tolist()
        assert s.meta == t.meta
    save_dataset(back, tmp_path / "c.jsonl")
    assert (tmp_path / "c.jsonl").read_bytes() == (tmp_path / "a.jsonl").read_bytes()


def test_load_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(IntegrityError):
        load_dataset(tmp_path / "e.jsonl")


def test_load_truncated_file(tmp_path):
    ds = generate_dataset(two_parallel(), ODMatrix({(0, 1): 3.0}), ScenarioConfig(samples=3))
    save_dataset(ds, tmp_path / "d.jsonl")
    text = (tmp_path / "d.jsonl").read_text()
    (tmp_path / "t.jsonl").write_text(text[: len(text) - 40])
    with pytest.raises(IntegrityError):
        load_dataset(tmp_path / "t.jsonl")
    lines = text.splitlines()
    (tmp_path / "u.jsonl").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(IntegrityError, match="declares 3"):
        load_dataset(tmp_path / "u.jsonl")


def test_load_schema_mismatch(tmp_path):
    ds = generate_dataset(two_parallel(), ODMatrix({(0, 1): 3.0}), ScenarioConfig(samples=1))
    save_dataset(ds, tmp_path / "d.jsonl")
    lines = (tmp_path / "d.jsonl").read_text().splitlines()
    man = json.loads(lines[0])
    man["schema_version"] = 99
    (tmp_path / "v.jsonl").write_text(json.dumps(man) + "\n" + lines[1] + "\n")
    with pytest.raises(SchemaVersionError):
        load_dataset(tmp_path / "v.jsonl")


def test_load_ignores_unknown_fields(tmp_path):
    ds = generate_dataset(two_parallel(), ODMatrix({(0, 1): 3.0}), ScenarioConfig(samples=2))
    save_dataset(ds, tmp_path / "d.jsonl")
    lines = (tmp_path / "d.jsonl").read_text().splitlines()
    man = json.loads(lines[0])
    man["future_field"] = {"x": 1}
    recs = [json.loads(l) for l in lines[1:]]
    for r in recs:
        r["extra"] = [1, 2, 3]
        r["links"][0]["lanes"] = 2
    (tmp_path / "f.jsonl").write_text("\n".join(json.dumps(o) for o in [man, *recs]) + "\n")
    back = load_dataset(tmp_path / "f.jsonl")
    assert len(back) == 2
    assert back.samples[0].solution.flows.tolist() == ds.samples[0].solution.flows.tolist()


def test_cov_telemetry_reported():
    ds = generate_dataset(two_parallel(), ODMatrix({(0, 1): 3.0}), ScenarioConfig(samples=6))
    assert ds.manifest["cov_capacity"] > 0
    assert "cov_demand" in ds.manifest


def test_generation_independent_of_workers():
    net = gen_grid_random_network(9, rng(0))
    from trafficlab.scenario import random_od, sample_to_record
    od = random_od(net, rng(1), 0.5)
    cfg = ScenarioConfig(samples=4, seed=2)
    a = generate_dataset(net, od, cfg, workers=1)
    b = generate_dataset(net, od, cfg, workers=2)
    assert [sample_to_record(s) for s in a.samples] == [sample_to_record(s) for s in b.samples]
