import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_network
from trafficlab import hetgat as hg
from trafficlab import tensorad as ad
from trafficlab import traineval as te
from trafficlab.errors import ContractError, NumericError
from trafficlab.netcore import ODMatrix
from trafficlab.scenario import Sample, ScenarioConfig, gen_grid_random_network, generate_dataset, random_od
from trafficlab.uesolver import solve_ue_frank_wolfe

TINY = hg.ModelConfig(embed_size=8, heads=2, hidden_size=16, v_layers=1, r_layers=1)


def grid_dataset(n_nodes, samples, seed=0, **kw):
    rng = np.random.default_rng(seed)
    net = gen_grid_random_network(n_nodes, rng)
    od = random_od(net, rng, 0.4)
    return generate_dataset(net, od, ScenarioConfig(samples=samples, seed=seed, **kw))


@pytest.fixture(scope="module")
def ds9():
    return grid_dataset(9, 50, seed=1)


def cfg(**kw):
    base = dict(epochs=2, batch_size=8, model=TINY, seed=0)
    base.update(kw)
    return te.TrainConfig(**base)


def test_training_descends(ds9):
    _, hist = te.train(ds9, cfg(epochs=30, eval_every=10))
    assert len(hist) == 30
    ltot = hist.column("l_total")
    assert ltot[-1] < 0.5 * ltot[0]


def test_single_step_per_epoch_when_batch_covers_dataset(ds9, monkeypatch):
    calls = []
    real = ad.adam_step
    monkeypatch.setattr(ad, "adam_step", lambda *a, **k: calls.append(1) or real(*a, **k))
    te.train(ds9, cfg(epochs=1, batch_size=len(ds9)))
    assert len(calls) == 1


def test_training_is_deterministic(ds9):
    _, h1 = te.train(ds9, cfg(epochs=3))
    _, h2 = te.train(ds9, cfg(epochs=3))
    assert h1 == h2
    m1, _ = te.train(ds9, cfg(epochs=2, architecture="fcnn"))
    m2, _ = te.train(ds9, cfg(epochs=2, architecture="fcnn"))
    assert all(m1.params[k].tobytes() == m2.params[k].tobytes() for k in m1.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts(ds9):
    with pytest.raises(NumericError, match="epoch"):
        te.train(ds9, cfg(epochs=3, learning_rate=1e300))


def test_mixed_sizes_need_homogenized_strategy():
    a = grid_dataset(4, 3, seed=2)
    b = grid_dataset(9, 3, seed=3)
    with pytest.raises(ContractError):
        te.train(a.samples + b.samples, cfg())


def test_metrics_identity_and_constant_offset(ds9):
    samples = ds9.samples[:5]
    exact = [hg.Prediction(s.solution.ratios, s.solution.flows) for s in samples]
    m = te.compute_metrics(samples, exact)
    assert m.mae_flow == m.rmse_flow == m.mae_ratio == m.rmse_ratio == 0.0
    assert m.lc_norm < 1e-6
    off = [hg.Prediction(s.solution.ratios + 1 / s.network.capacity, s.solution.flows + 1) for s in samples]
    m = te.compute_metrics(samples, off)
    assert m.mae_flow == pytest.approx(1.0, abs=1e-12) and m.rmse_flow == pytest.approx(1.0, abs=1e-12)


def test_metrics_match_scalar_recomputation(ds9):
    rng = np.random.default_rng(0)
    samples = ds9.samples[:5]
    preds = []
    for s in samples:
        a = rng.uniform(0, 2, size=s.network.n_links)
        preds.append(hg.Prediction(a, a * s.network.capacity))
    m = te.compute_metrics(samples, preds)
    errs_f, errs_r, lcs = [], [], []
    for s, p in zip(samples, preds):
        for e in range(s.network.n_links):
            errs_f.append(p.flow[e] - s.solution.flows[e])
            errs_r.append(p.alpha[e] - s.solution.ratios[e])
        bal = [0.0] * s.n_nodes
        for e, link in enumerate(s.network.links):
            bal[link.to_node] += p.flow[e]
            bal[link.from_node] -= p.flow[e]
        for (o, d), q in s.od_true.items():
            bal[d] -= q
            bal[o] += q
        lcs.append(sum(abs(b) for b in bal) / sum(s.od_true.values()))
    n = len(errs_f)
    assert m.mae_flow == pytest.approx(sum(abs(x) for x in errs_f) / n, rel=1e-12)
    assert m.rmse_flow == pytest.approx((sum(x * x for x in errs_f) / n) ** 0.5, rel=1e-12)
    assert m.mae_ratio == pytest.approx(sum(abs(x) for x in errs_r) / n, rel=1e-12)
    assert m.rmse_ratio == pytest.approx((sum(x * x for x in errs_r) / n) ** 0.5, rel=1e-12)
    assert m.lc_norm == pytest.approx(sum(lcs) / len(lcs), rel=1e-12)


def test_empty_split_rejected(ds9):
    model, _ = te.train(ds9, cfg(epochs=1))
    with pytest.raises(ContractError):
        te.evaluate_metrics(model, [])


@given(st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_rmse_at_least_mae(seed):
    rng = np.random.default_rng(seed)
    net = make_network(2, [(0, 1, 1.0, 2.0), (1, 0, 1.0, 3.0)])
    od = ODMatrix({(0, 1): 1.0})
    s = Sample(net, od, od, frozenset(), solve_ue_frank_wolfe(net, od), {})
    a = rng.normal(size=2)
    m = te.compute_metrics([s], [hg.Prediction(a, a * net.capacity)])
    assert m.rmse_flow >= m.mae_flow and m.rmse_ratio >= m.mae_ratio
    assert min(m.as_row()) >= 0


def test_ground_truth_conservation_on_dataset(ds9):
    for s in ds9.samples:
        assert hg.conservation_loss(s.solution.flows, s.od_true, s.network)[0] / s.od_true.total < 1e-6


def test_fold_partition():
    folds = te.fold_slices(100, 5)
    assert [len(f) for f in folds] == [20] * 5
    flat = [i for f in folds for i in f]
    assert flat == list(range(100))
    with pytest.raises(ContractError):
        te.fold_slices(3, 5)
    with pytest.raises(ContractError):
        te.fold_slices(10, 1)


def test_kfold_mean(ds9):
    res = te.kfold_cv(ds9.samples[:10], 2, cfg(epochs=1))
    assert len(res.folds) == 2
    assert res.mean.mae_ratio == pytest.approx(np.mean([f.mae_ratio for f in res.folds]), abs=1e-12)
    assert res.std.mae_flow == pytest.approx(np.std([f.mae_flow for f in res.folds]), abs=1e-12)


def test_homogenize_identity_and_padding():
    net = make_network(3, [(0, 1, 1.0, 1.0), (1, 2, 1.0, 1.0), (2, 0, 1.0, 1.0)], [(0, 0), (2, 0), (1, 4)])
    od = ODMatrix({(0, 2): 2.0})
    s = Sample(net, od, od, frozenset(), solve_ue_frank_wolfe(net, od), {})
    assert te.homogenize_sample(s, 3) is s
    p = te.homogenize_sample(s, 5)
    assert p.n_nodes == 5 and p.network.links == net.links
    assert p.od_true.total == od.total and p.solution is s.solution
    g = hg.build_hetero_graph(p.network, p.od_observed)
    for dummy in (3, 4):
        assert dummy not in g.real_src and dummy not in g.real_dst
        assert dummy not in g.virtual_src and dummy not in g.virtual_dst
        assert not g.features[dummy].any()
    g3 = hg.build_hetero_graph(net, od)
    assert np.array_equal(g.features[:3, 5:], g3.features[:, 3:])
    with pytest.raises(ContractError):
        te.homogenize_sample(p, 4)


def test_padded_nodes_do_not_influence_predictions():
    small = grid_dataset(4, 2, seed=4).samples[0]
    padded = te.homogenize_sample(small, 9)
    params = hg.init_params(9, TINY, np.random.default_rng(0))
    g = hg.build_hetero_graph(padded.network, padded.od_observed)
    base = hg.predict_graph(g, params, TINY).alpha
    rng = np.random.default_rng(1)
    for _ in range(5):
        feats = g.features.copy()
        feats[4:] = rng.normal(scale=10, size=feats[4:].shape)
        noisy = hg.HeteroGraph(**{**g.__dict__, "features": feats})
        assert np.abs(hg.predict_graph(noisy, params, TINY).alpha - base).max() <= 1e-12


def test_homogenized_training_on_mixed_sizes():
    a = grid_dataset(4, 6, seed=5)
    b = grid_dataset(9, 6, seed=6)
    model, hist = te.train(a.train + b.train, cfg(strategy="homogenized"), val=a.test + b.test)
    assert model.n_nodes == 9 and len(hist) == 2
    for part in (a.test, b.test):
        m = te.evaluate_metrics(model, [te.homogenize_sample(s, 9) for s in part])
        assert np.isfinite(m.mae_ratio)


def test_transfer_freezes_encoders(ds9):
    src = grid_dataset(4, 8, seed=7)
    pre, _ = te.train(src, cfg(epochs=1))
    new, _ = te.transfer_retrain(pre, ds9, cfg(epochs=2))
    for k, v in pre.params.items():
        if te.is_size_dependent(k):
            assert new.params[k].shape != v.shape or new.params[k].tobytes() != v.tobytes() or not v.any()
        else:
            assert new.params[k].tobytes() == v.tobytes()
    assert new.params["pre.w0"].shape == (11, 16) and pre.params["pre.w0"].shape == (6, 16)
    trainable = sum(v.size for k, v in new.params.items() if te.is_size_dependent(k))
    expected = sum(v.size for k, v in hg.init_params(9, TINY, np.random.default_rng(0)).items()
                   if k.startswith(("pre.", "head.")))
    assert trainable == expected


def test_transfer_rejects_width_mismatch(ds9):
    pre, _ = te.train(grid_dataset(4, 4, seed=7), cfg(epochs=1))
    other = hg.ModelConfig(embed_size=16, heads=2, hidden_size=16, v_layers=1, r_layers=1)
    with pytest.raises(ContractError):
        te.transfer_retrain(pre, ds9, cfg(model=other))


def test_exports(tmp_path, ds9):
    model, hist = te.train(ds9, cfg(epochs=2))
    m = te.evaluate_metrics(model, ds9.test)
    te.write_metrics_csv(tmp_path / "m.csv", [("test", "hetgat", m)])
    te.write_history_csv(tmp_path / "h.csv", hist)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "split,model,mae_flow,rmse_flow,mae_ratio,rmse_ratio,lc_norm" and len(lines) == 2
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_alpha,l_f,l_c,l_total,val_mae_ratio" and len(lines) == 3
    preds = te.predict_samples(model, ds9.test)
    t = np.concatenate([s.solution.flows for s in ds9.test])
    p = np.concatenate([q.flow for q in preds])
    te.plot_scatter(tmp_path / "a.svg", t, p)
    te.plot_scatter(tmp_path / "b.svg", t, p)
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    assert b"<svg" in (tmp_path / "a.svg").read_bytes()


def test_model_save_load(tmp_path, ds9):
    model, _ = te.train(ds9, cfg(epochs=1))
    model.save(tmp_path / "m.json")
    back = te.TrainedModel.load(tmp_path / "m.json")
    assert back.n_nodes == model.n_nodes and back.config == model.config and back.scaler == model.scaler
    assert te.evaluate_metrics(back, ds9.test) == te.evaluate_metrics(model, ds9.test)


def test_config_validation():
    with pytest.raises(ContractError):
        te.TrainConfig(batch_size=0)
    with pytest.raises(ContractError):
        te.TrainConfig(strategy="magic")
