import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nodesplit import config as cfgio
from nodesplit import graph as gr
from nodesplit import hiv
from nodesplit import nma


def _same_split(a, b):
    assert a.separators == b.separators
    assert a.partitions == b.partitions
    assert {k: tuple(v) for k, v in a.copy_plan.items()} == \
        {k: tuple(v) for k, v in b.copy_plan.items()}
    assert dict(a.transforms) == dict(b.transforms)
    assert dict(a.labels) == dict(b.labels)
    assert a.shared_nodes == b.shared_nodes and a.pairs == b.pairs


def test_hiv_round_trip(tmp_path):
    g = hiv.build_hiv_graph()
    _, spec = hiv.saturated_split(g)
    cfgio.save_model(tmp_path / "m.toml", g, spec)
    g2, spec2 = cfgio.load_model(tmp_path / "m.toml")
    assert g2 == g
    _same_split(spec, spec2)
    assert cfgio.dumps(g2, spec2) == cfgio.dumps(g, spec)
    # the reloaded spec splits to the same graph
    assert gr.split(g2, spec2).graph == gr.split(g, spec).graph


def test_nma_round_trip():
    g = nma.build_nma_graph(nma.smoking_arms())
    sm, spec = nma.split_nma(g, nma.smoking_schemes()["d"])
    g2, spec2 = cfgio.loads(cfgio.dumps(sm.graph, spec))
    assert g2 == sm.graph
    _same_split(spec, spec2)


@given(st.floats(-50, 50, allow_nan=False), st.floats(0.01, 100, allow_nan=False),
       st.integers(0, 20))
@settings(max_examples=60, deadline=None)
def test_random_model_round_trip(mu, sd, y):
    g = gr.ModelGraph([
        gr.founder("a", f"normal({mu!r}, {sd!r})"),
        gr.deterministic("p", "ilogit(a - k)", gr.UNIT),
        gr.observed("y", "binomial(20, p)", y),
    ], {"k": mu / 3})
    text = cfgio.dumps(g)
    g2, spec = cfgio.loads(text)
    assert spec is None and g2 == g
    assert cfgio.dumps(g2) == text


@pytest.mark.parametrize("text", [
    "[nodes.a]\nrole = 'founder'\n",
    "[nodes.a]\nrole = 'wizard'\ndist = 'normal(0, 1)'\n",
    "[nodes.a]\ndist = 'gamma(1, 1)'\n",
    "[nodes.a]\ndist = 'normal(0, 1)'\n[surprise]\nx = 1\n",
    "[nodes.a\n",
    "[nodes.a]\nrole = 'deterministic'\nexpr = 'a ** 2'\n",
])
def test_invalid_files(text):
    with pytest.raises(cfgio.ConfigError):
        cfgio.loads(text)


def test_missing_file(tmp_path):
    with pytest.raises(cfgio.ConfigError):
        cfgio.load_model(tmp_path / "absent.toml")


def test_copies_default_to_every_partition():
    text = """
[nodes.theta]
dist = "normal(0, 10)"
[observations.y1]
dist = "normal(theta, 1)"
value = 0.0
[observations.y2]
dist = "normal(theta, 1)"
value = 2.0
[split]
separators = ["theta"]
[[split.partitions]]
name = "a"
data = ["y1"]
[[split.partitions]]
name = "b"
data = ["y2"]
"""
    g, spec = cfgio.loads(text)
    assert [c.partition for c in spec.copy_plan["theta"]] == ["a", "b"]
    assert all(c.derived for c in spec.copy_plan["theta"])
    sm = gr.split(g, spec)
    assert set(sm.graph.names()) == {"theta__a", "theta__b", "y1", "y2"}
