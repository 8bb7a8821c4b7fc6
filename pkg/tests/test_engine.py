import math

import numpy as np
import pytest
from scipy import stats

from nodesplit import engine as en
from nodesplit import graph as gr
from nodesplit import hiv
from nodesplit import tape as tp


def _tape_logp(g, values):
    t = tp.compile_graph(g)
    val = t.init_values.copy()
    for n, v in values.items():
        val[t.slot[n]] = v
    return tp.full_logp(val, t.ins, t.all_ins, t.fac, t.all_fac)


@pytest.mark.parametrize("values", [
    {"rho": 0.02, "pi": 0.08, "kappa": 0.4, "D_L": 800.0, "D_U": 5000.0},
    {"rho": 0.5, "pi": 0.5, "kappa": 0.5, "D_L": 1.0, "D_U": 2.0},
])
def test_compiled_density_matches_reference(values):
    g = hiv.build_hiv_graph()
    ref = gr.log_joint_density(g, values)
    got = _tape_logp(g, values)
    if math.isinf(ref):
        assert got == ref
    else:
        assert got == pytest.approx(ref, rel=1e-10, abs=1e-8)


def test_beta_binomial_posterior(beta_binomial, quick_cfg):
    s = en.sample(beta_binomial, quick_cfg)
    post = stats.beta(19, 36)
    assert s.mean("p") == pytest.approx(post.mean(), abs=0.005)
    assert s.sd("p") == pytest.approx(post.std(), rel=0.05)
    assert 0.3 < s.acceptance["p"] < 0.6


def test_normal_posterior(two_normals, quick_cfg):
    s = en.sample(two_normals, quick_cfg)
    prec = 1 / 100 + 2
    assert s.mean("theta") == pytest.approx(4.0 / prec, abs=0.02)
    assert s.sd("theta") == pytest.approx(math.sqrt(1 / prec), rel=0.05)


def test_sampling_is_deterministic(beta_binomial, quick_cfg):
    a = en.sample(beta_binomial, quick_cfg)
    b = en.sample(beta_binomial, quick_cfg)
    assert np.array_equal(a.draws, b.draws)
    c = en.sample(beta_binomial, en.SamplerConfig(chains=2, iterations=12000, burn_in=2000,
                                                  thin=2, seed=12))
    assert not np.array_equal(a.draws, c.draws)


def test_chains_are_distinct_streams(beta_binomial, quick_cfg):
    s = en.sample(beta_binomial, quick_cfg)
    assert not np.array_equal(s.chains_of("p")[0], s.chains_of("p")[1])
    assert len(set(en.chain_seeds(1, 8))) == 8


def test_deviance_matches_closed_form(beta_binomial, quick_cfg):
    s = en.sample(beta_binomial, quick_cfg)
    p = s["p"]
    y, n = 17, 50
    dev = 2 * (y * np.log(y / (n * p)) + (n - y) * np.log((n - y) / (n - n * p)))
    d = en.deviance_summary(beta_binomial, s)
    assert d.mean_deviance == pytest.approx(dev.mean(), rel=1e-10)
    pm = p.mean()
    plug = 2 * (y * math.log(y / (n * pm)) + (n - y) * math.log((n - y) / (n - n * pm)))
    assert d.plugin_deviance == pytest.approx(plug, rel=1e-10)
    assert d.dic == pytest.approx(d.mean_deviance + d.p_D)
    # one free parameter
    assert d.p_D == pytest.approx(1.0, abs=0.15)
    assert s.deviance_trace.mean() == pytest.approx(d.mean_deviance, rel=1e-10)


@pytest.mark.parametrize("kind,y,params,expected", [
    ("binomial", 0, (10, 0.2), -2 * 10 * math.log(0.8)),
    ("binomial", 10, (10, 0.5), -2 * 10 * math.log(0.5)),
    ("poisson", 0, (3.0,), 6.0),
    ("poisson", 4, (4.0,), 0.0),
    ("normal", 1.0, (0.0, 2.0), 0.25),
])
def test_datum_deviance(kind, y, params, expected):
    assert float(en.datum_deviance(kind, y, params)) == pytest.approx(expected, abs=1e-12)


def test_block_update_acceptance():
    # correlated pair updated jointly
    g = gr.ModelGraph([gr.founder("a", "normal(0, 10)"), gr.founder("b", "normal(0, 10)"),
                       gr.deterministic("s", "a + b"), gr.deterministic("d", "a - b"),
                       gr.observed("y1", "normal(s, 0.1)", 1.0),
                       gr.observed("y2", "normal(d, 1)", 0.0)], blocks=[("a", "b")])
    s = en.sample(g, en.SamplerConfig(chains=2, iterations=20000, burn_in=5000, thin=1, seed=3))
    assert 0.15 < s.acceptance["a+b"] < 0.35
    assert s.mean("a") + s.mean("b") == pytest.approx(1.0, abs=0.01)
    cor = np.corrcoef(s["a"], s["b"])[0, 1]
    assert cor < -0.9


def test_config_validation():
    with pytest.raises(ValueError):
        en.SamplerConfig(chains=0)
    with pytest.raises(ValueError):
        en.SamplerConfig(iterations=100, burn_in=100)
    with pytest.raises(ValueError):
        en.SamplerConfig(thin=0)
    with pytest.raises(ValueError):
        en.SamplerConfig(target_accept=1.0)


def test_initialisation_failure():
    # prior support excludes the data entirely
    g = gr.ModelGraph([gr.founder("p", "uniform(0, 1)"),
                       gr.deterministic("q", "indicator(2, p, 3)", gr.UNIT),
                       gr.observed("y", "bernoulli(q)", 1)])
    with pytest.raises(en.InitialisationFailure):
        en.sample(g, en.SamplerConfig(chains=1, iterations=100, burn_in=10, thin=1))


def test_samples_csv_round_trip(beta_binomial, tmp_path):
    s = en.sample(beta_binomial, en.SamplerConfig(chains=2, iterations=500, burn_in=100, thin=1))
    s.to_csv(tmp_path / "d.csv")
    back = en.read_samples_csv(tmp_path / "d.csv")
    assert np.array_equal(back.draws, s.draws)


def test_psrf_detects_disagreeing_chains():
    rng = np.random.default_rng(0)
    good = rng.normal(size=(4, 2000, 1))
    bad = good + np.arange(4)[:, None, None]
    s_good = en.PosteriorSamples({"x": 0}, good, np.zeros((4, 2000)))
    s_bad = en.PosteriorSamples({"x": 0}, bad, np.zeros((4, 2000)))
    assert en.psrf(s_good, "x") < 1.01
    assert en.psrf(s_bad, "x") > 1.5


def test_batch_means_se_iid():
    x = np.random.default_rng(1).normal(size=40000)
    assert en.batch_means_se(x) == pytest.approx(1 / math.sqrt(40000), rel=0.2)


def test_nonconvergence_warning():
    # bimodal posterior with chains stuck in different modes
    g = gr.ModelGraph([gr.founder("m", "normal(0, 10)"), gr.deterministic("m2", "m * m"),
                       gr.observed("y", "normal(m2, 0.01)", 25.0)])
    with pytest.warns(en.NonConvergence):
        en.sample(g, en.SamplerConfig(chains=4, iterations=3000, burn_in=1000, thin=1, seed=2))
