import numpy as np
import pytest

from nodesplit import analysis as an
from nodesplit import engine as en
from nodesplit import graph as gr
from nodesplit import hiv


def test_options_validation():
    with pytest.raises(ValueError):
        an.ConflictOptions(pvalue_method="bayes")
    with pytest.raises(ValueError):
        an.ConflictOptions(n_points=1)
    with pytest.raises(ValueError):
        an.ConflictOptions(pinv_tol=0.0)


def test_posterior_summary(beta_binomial, quick_cfg):
    f = an.fit(beta_binomial, quick_cfg, "bb")
    (row,) = an.posterior_summary(f.graph, f.samples)
    assert row["node"] == "p"
    assert row["q025"] < row["median"] < row["q975"]
    assert 0 < row["mcse"] < 0.05 and row["psrf"] < 1.05
    assert an.mcse_warnings([row], tol=1e-6) == ["p"]
    assert an.mcse_warnings([row]) == []


def test_constant_node_summary():
    g = hiv.build_hiv_graph()
    s = en.sample(g, en.SamplerConfig(chains=2, iterations=2000, burn_in=500, thin=1),
                  check_convergence=False)
    rows = {r["node"]: r for r in an.posterior_summary(g, s)}
    assert rows["c"]["sd"] == 0.0 and rows["c"]["mcse"] == 0.0


def test_split_fit_pipeline(two_normals, quick_cfg):
    spec = gr.SplitSpec(("theta",), [gr.Partition("1", ("y1",)), gr.Partition("2", ("y2",))],
                        {"theta": [gr.CopySpec("1"), gr.CopySpec("2", prior="normal(0, 10)")]})
    f = an.split_fit(gr.split(two_normals, spec), spec, quick_cfg,
                     an.ConflictOptions(n_points=2 ** 10), "two")
    r = f.report
    assert r.p == 1
    assert r.delta_mean[0] == pytest.approx(-3.0 * 100 / 101, abs=0.05)
    assert r.chi2_pvalue == pytest.approx(r.p_normal[0], abs=2e-3)
    assert r.p_adjusted[0] == pytest.approx(r.p_normal[0], abs=1e-9)


def test_simulate_null_guards():
    with pytest.raises(ValueError):
        an.simulate_null(50)
    with pytest.raises(ValueError):
        an.simulate_null(100, method="nope")


def test_simulate_null_is_seeded():
    cfg = en.SamplerConfig(chains=1, iterations=2500, burn_in=500, thin=2)
    a = an.simulate_null(100, seed=3, cfg=cfg)
    b = an.simulate_null(100, seed=3, cfg=cfg)
    assert np.array_equal(a.pvalues, b.pvalues)
    assert set(a.as_dict()) >= {"ks_statistic", "ks_pvalue", "fraction_below_0_05"}


def test_leave_out_table_shape():
    cfg = en.SamplerConfig(chains=2, iterations=3000, burn_in=1000, thin=2, seed=2)
    t = an.hiv_leave_n_out(cfg, an.ConflictOptions(n_points=2 ** 10))
    assert len(t.fits) == 15
    assert len(t.rows(1)) == 5 and len(t.rows(2)) == 23
    for r in t.rows(2):
        assert r["p_AW"] <= r["p_AL"] + 2e-3 <= r["p_AA"] + 4e-3


def test_leave_out_independent_of_worker_count():
    cfg = en.SamplerConfig(chains=2, iterations=2000, burn_in=500, thin=2, seed=4)
    opts = an.ConflictOptions(n_points=2 ** 8)
    one = an.hiv_leave_n_out(cfg, opts, workers=1)
    two = an.hiv_leave_n_out(cfg, opts, workers=2)
    assert one.rows() == two.rows()
    for a, b in zip(one.fits, two.fits):
        assert np.array_equal(a.samples.draws, b.samples.draws)
