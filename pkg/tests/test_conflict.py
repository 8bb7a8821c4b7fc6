import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from nodesplit import conflict as cf
from nodesplit import engine as en
from nodesplit import graph as gr


@given(st.integers(2, 8), st.integers(0, 10 ** 6), st.data())
@settings(max_examples=50, deadline=None)
def test_penrose_identities(m, seed, data):
    rank = data.draw(st.integers(1, m - 1))
    A = np.random.default_rng(seed).normal(size=(m, rank))
    S = A @ A.T
    P, r = cf.pseudo_inverse(S)
    assert r == rank
    tol = 1e-8 * max(1.0, np.abs(S).max() * np.abs(P).max())
    assert np.allclose(S @ P @ S, S, atol=tol * np.abs(S).max())
    assert np.allclose(P @ S @ P, P, atol=tol * np.abs(P).max())
    assert np.allclose((S @ P).T, S @ P, atol=1e-8)
    assert np.allclose((P @ S).T, P @ S, atol=1e-8)


@pytest.mark.parametrize("z", [0.3, 1.0, 1.96, 3.0])
def test_globals_match_normal_at_one_contrast(z):
    p = 2 * special.ndtr(-z)
    x2, df, p_chi2 = cf.global_chi2((np.array([z]), np.array([[1.0]])))
    assert df == 1 and x2 == pytest.approx(z * z)
    assert p_chi2 == pytest.approx(p, abs=2e-3)


def test_rank_deficient_chi2_degrees_of_freedom():
    # three contrasts, one a linear combination of the other two
    rng = np.random.default_rng(1)
    base = rng.normal(size=(5000, 2))
    d = np.column_stack([base[:, 0], base[:, 1], base[:, 0] - base[:, 1]])
    x2, df, p = cf.global_chi2((d.mean(axis=0) + np.array([0.1, 0.2, -0.1]), np.cov(d.T)))
    assert df == 2
    assert 0 < p <= 1


def test_single_pvalue_methods_on_normal_draws():
    x = np.random.default_rng(3).normal(2.0, 1.0, size=200_000)
    exact = 2 * special.ndtr(-2.0)
    for method in cf.PVALUE_METHODS:
        assert cf.single_conflict_pvalue(x, method) == pytest.approx(exact, abs=4e-3)


def test_kde_pvalue_differs_from_tail_when_skewed():
    x = np.random.default_rng(4).gamma(2.0, 1.0, size=100_000) - 0.5
    tail = cf.single_conflict_pvalue(x, "tail")
    kde = cf.single_conflict_pvalue(x, "kde")
    assert tail == pytest.approx(2 * np.mean(x < 0), abs=1e-12)
    assert abs(tail - kde) > 0.01


def test_single_pvalue_errors():
    with pytest.raises(cf.DegenerateDistribution):
        cf.single_conflict_pvalue(np.ones(5000))
    with pytest.raises(ValueError):
        cf.single_conflict_pvalue(np.zeros(10))
    with pytest.raises(ValueError):
        cf.single_conflict_pvalue(np.random.default_rng(0).normal(size=5000), "bogus")


def test_transforms():
    assert cf.apply_transform(np.array([0.5]), "logit")[0] == 0.0
    assert cf.apply_transform(np.array([math.e]), "log")[0] == pytest.approx(1.0)
    with pytest.raises(cf.TransformDomainError):
        cf.apply_transform(np.array([0.0]), "log")
    with pytest.raises(cf.TransformDomainError):
        cf.apply_transform(np.array([1.0]), "logit")
    with pytest.raises(cf.TransformDomainError):
        cf.apply_transform(np.array([np.nan]), "identity")


def _three_way_split(y=(0.0, 1.0, 4.0)):
    g = gr.ModelGraph([gr.founder("theta", "normal(0, 100)")] +
                      [gr.observed(f"y{i}", "normal(theta, 1)", v) for i, v in enumerate(y, 1)])
    spec = gr.SplitSpec(("theta",), [gr.Partition(str(i), (f"y{i}",)) for i in (1, 2, 3)],
                        {"theta": [gr.CopySpec("1")] +
                         [gr.CopySpec(str(i), prior="normal(0, 100)") for i in (2, 3)]})
    return gr.split(g, spec), spec


@pytest.fixture(scope="module")
def three_way():
    sm, spec = _three_way_split()
    s = en.sample(sm.graph, en.SamplerConfig(chains=2, iterations=30000, burn_in=5000, thin=2,
                                             seed=4))
    return sm, spec, s


def test_contrast_structure(three_way):
    sm, spec, s = three_way
    cs = cf.build_contrasts(sm, s, spec)
    assert cs.labels == ["theta 1-2", "theta 1-3", "theta 2-3"]
    assert cs.C.tolist() == [[1, -1, 0], [1, 0, -1], [0, 1, -1]]
    assert np.allclose(cs.delta_mean, [-1, -4, -3], atol=0.05)
    # Var(theta_q) = 1 nearly, independent partitions
    assert np.allclose(np.diag(cs.S_Delta), 2.0, rtol=0.05)
    m, S = cf.analytic_contrast_moments(sm, s, spec)
    assert np.allclose(m, cs.delta_mean)
    assert np.allclose(S, cs.S_Delta, atol=0.05)


def test_maxT_report(three_way):
    sm, spec, s = three_way
    cs = cf.build_contrasts(sm, s, spec)
    rep = cf.maxT_adjust(cs, n_points=2 ** 12)
    assert rep.chi2_df == 2
    assert np.all(rep.p_adjusted >= rep.p_normal)
    order = np.argsort(-np.abs(rep.z))
    assert np.all(np.diff(rep.p_adjusted[order]) >= -1e-12)
    assert rep.maxT_pvalue == pytest.approx(rep.p_adjusted.min(), abs=1e-12)
    assert rep.p_adjusted.max() <= 1.0
    assert rep.p_normal[1] < 0.01
    row = rep.rows()[0]
    assert set(row) >= {"label", "mean", "sd", "p_U", "p_normal", "p_A", "flags"}


def test_pvalue_method_is_recorded(three_way):
    sm, spec, s = three_way
    cs = cf.build_contrasts(sm, s, spec)
    rep = cf.maxT_adjust(cs, n_points=2 ** 12, pvalue_method="normal")
    assert np.array_equal(rep.p_conflict, rep.p_normal)
    assert rep.global_summary()["pvalue_method"] == "normal"


def test_pooling_across_models(three_way):
    sm, spec, s = three_way
    rep = cf.maxT_adjust(cf.build_contrasts(sm, s, spec), n_points=2 ** 12)
    reps = [rep, rep]
    within = cf.adjust_across_models(reps, "within")
    fam = cf.adjust_across_models(reps, "per_family", ["a", "b"], n_points=2 ** 12)
    pooled = cf.adjust_across_models(reps, "all", n_points=2 ** 12)
    for w, f, a in zip(within, fam, pooled):
        assert np.allclose(w, f, atol=2e-3)
        assert np.all(a >= f - 2e-3)
    with pytest.raises(cf.DimensionMismatch):
        cf.adjust_across_models(reps, "per_family", ["a"])
    with pytest.raises(ValueError):
        cf.adjust_across_models(reps, "nonsense")


def test_pooled_block_product():
    z = [np.array([2.0]), np.array([1.0])]
    R = [np.eye(1), np.eye(1)]
    p = cf.pooled_maxT(z, R)
    inside = (2 * special.ndtr(2.0) - 1) ** 2
    assert p[0][0] == pytest.approx(1 - inside, abs=1e-9)
    with pytest.raises(cf.DimensionMismatch):
        cf.pooled_maxT([np.array([1.0, 2.0])], [np.eye(1)])


def test_flags():
    rng = np.random.default_rng(8)
    d = np.column_stack([rng.normal(size=5000), rng.standard_t(2, size=5000)])
    cs = cf.ContrastSet([("a", "1", "identity"), ("b", "1", "identity"),
                         ("a", "2", "identity"), ("b", "2", "identity")],
                        np.array([[1, 0, -1, 0], [0, 1, 0, -1]], float), d, ["a", "b"],
                        [("a", "1", "2"), ("b", "1", "2")], np.array([1.0, 1.0, 8.0, 1.0]))
    rep = cf.maxT_adjust(cs, n_points=2 ** 10)
    assert rep.normality_flags == [False, True]
    assert rep.flags(0) == "diffuse:2"
    assert "nonnormal" in rep.flags(1)


def test_density_curve_spans_zero():
    x = np.random.default_rng(1).normal(5.0, 1.0, size=20000)
    xs, d = cf.density_curve(x)
    assert xs[0] <= 0.0 and xs[-1] >= 8.0
    assert integrate.trapezoid(d, xs) == pytest.approx(1.0, abs=0.01)
