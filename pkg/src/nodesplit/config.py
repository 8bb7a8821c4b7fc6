"""Reading and writing models as TOML.

A model file has up to five tables::

    [constants]            name = value
    [nodes.<name>]         role ("founder" | "stochastic" | "deterministic"),
                           dist or expr, support
    [observations.<name>]  dist, value
    [blocks]               groups = [[name, ...], ...]
    [split]                separators, transforms, labels, shared, pairs,
                           [[split.partitions]] name, data
                           [[split.copies]] separator, partition, prior

Split copies not listed under ``split.copies`` are derived. Writing is
canonical: reading a written file and writing it again gives the same bytes.
"""
from __future__ import annotations

import sys
from pathlib import Path
from typing import Optional

import tomli_w

from . import expr as ex
from . import graph as gr

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


def _num(x: float):
    x = float(x)
    return int(x) if x.is_integer() and abs(x) < 2 ** 53 else x


def graph_to_dict(g: gr.ModelGraph, spec: Optional[gr.SplitSpec] = None) -> dict:
    out: dict = {}
    if g.constants:
        out["constants"] = {k: float(v) for k, v in g.constants.items()}
    nodes, obs = {}, {}
    for n in g.names():
        nd = g[n]
        if nd.role == gr.OBSERVED:
            obs[n] = {"dist": str(nd.dist), "value": _num(nd.value)}
        elif nd.role == gr.DETERMINISTIC:
            nodes[n] = {"role": nd.role, "expr": ex.to_string(nd.expr), "support": nd.support}
        else:
            nodes[n] = {"role": nd.role, "dist": str(nd.dist), "support": nd.support}
    if nodes:
        out["nodes"] = nodes
    if obs:
        out["observations"] = obs
    if g.blocks:
        out["blocks"] = {"groups": [list(b) for b in g.blocks]}
    if spec is not None:
        out["split"] = split_to_dict(spec)
    return out


def split_to_dict(spec: gr.SplitSpec) -> dict:
    d: dict = {"separators": list(spec.separators)}
    if spec.transforms:
        d["transforms"] = dict(spec.transforms)
    if spec.labels:
        d["labels"] = dict(spec.labels)
    if spec.shared_nodes:
        d["shared"] = sorted(spec.shared_nodes)
    if spec.pairs is not None:
        d["pairs"] = [list(p) for p in spec.pairs]
    d["partitions"] = [{"name": p.name, "data": list(p.data)} for p in spec.partitions]
    copies = []
    for sep in spec.separators:
        for c in spec.copy_plan.get(sep, ()):
            row = {"separator": sep, "partition": c.partition}
            if not c.derived:
                row["prior"] = str(c.prior) if c.prior is not None else "jeffreys"
            copies.append(row)
    if copies:
        d["copies"] = copies
    return d


def _need(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"{where}: missing {key!r}")
    return table[key]


def graph_from_dict(d: dict) -> tuple:
    """Return ``(ModelGraph, SplitSpec or None)``."""
    unknown = set(d) - {"constants", "nodes", "observations", "blocks", "split"}
    if unknown:
        raise ConfigError(f"unknown tables {sorted(unknown)}")
    try:
        nodes = []
        for name, t in d.get("nodes", {}).items():
            role = t.get("role", gr.FOUNDER)
            sup = t.get("support")
            if role == gr.DETERMINISTIC:
                nodes.append(gr.deterministic(name, _need(t, "expr", f"nodes.{name}"), sup or gr.REAL))
            elif role in (gr.FOUNDER, gr.STOCHASTIC):
                nodes.append(gr.NodeDef(name, role, dist=_need(t, "dist", f"nodes.{name}"), support=sup))
            else:
                raise ConfigError(f"nodes.{name}: bad role {role!r}")
        for name, t in d.get("observations", {}).items():
            nodes.append(gr.observed(name, _need(t, "dist", f"observations.{name}"),
                                     _need(t, "value", f"observations.{name}")))
        blocks = [tuple(b) for b in d.get("blocks", {}).get("groups", [])]
        g = gr.ModelGraph(nodes, d.get("constants", {}), blocks)
        spec = split_from_dict(d["split"]) if "split" in d else None
    except gr.GraphError as e:
        raise ConfigError(str(e)) from None
    except ex.ExpressionError as e:
        raise ConfigError(str(e)) from None
    return g, spec


def split_from_dict(d: dict) -> gr.SplitSpec:
    seps = tuple(_need(d, "separators", "split"))
    parts = tuple(gr.Partition(_need(p, "name", "split.partitions"), tuple(p.get("data", ())))
                  for p in _need(d, "partitions", "split"))
    plan = {s: [] for s in seps}
    listed = {}
    for c in d.get("copies", []):
        s, q = _need(c, "separator", "split.copies"), _need(c, "partition", "split.copies")
        if s not in plan:
            raise ConfigError(f"split.copies: {s!r} is not a separator")
        prior = c.get("prior")
        listed[(s, q)] = gr.CopySpec(q, derived=prior is None,
                                     prior=None if prior in (None, "jeffreys") else prior)
    # every separator has a copy in every partition unless copies are listed for it
    has_list = {s for s, _ in listed}
    for s in seps:
        if s in has_list:
            plan[s] = [listed[(s, q)] for q in (p.name for p in parts) if (s, q) in listed]
        else:
            plan[s] = [gr.CopySpec(p.name) for p in parts]
    pairs = d.get("pairs")
    return gr.SplitSpec(seps, parts, plan, d.get("transforms", {}), frozenset(d.get("shared", ())),
                        tuple(tuple(p) for p in pairs) if pairs is not None else None,
                        d.get("labels", {}))


def dumps(g: gr.ModelGraph, spec: Optional[gr.SplitSpec] = None) -> str:
    return tomli_w.dumps(graph_to_dict(g, spec))


def loads(text: str) -> tuple:
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}") from None
    return graph_from_dict(d)


def load_model(path) -> tuple:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"model file {p} does not exist")
    return loads(p.read_text())


def save_model(path, g: gr.ModelGraph, spec: Optional[gr.SplitSpec] = None) -> None:
    Path(path).write_text(dumps(g, spec))
