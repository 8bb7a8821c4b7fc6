"""Directed acyclic graphs for evidence-synthesis models and their node-splits.

A :class:`ModelGraph` is a set of scalar nodes. Stochastic nodes carry a
:class:`Distribution` whose parameters are constants or references to other
nodes; deterministic nodes carry an expression over their parents; observed
nodes carry a distribution and a fixed value. Edges are implied by the
references.
"""
from __future__ import annotations

import heapq
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping, Optional

import networkx as nx
import numpy as np
from scipy import stats

from . import expr as ex

FOUNDER = "founder"
STOCHASTIC = "stochastic"
DETERMINISTIC = "deterministic"
OBSERVED = "observed"
ROLES = (FOUNDER, STOCHASTIC, DETERMINISTIC, OBSERVED)

REAL = "real"
POSITIVE = "positive"
UNIT = "unit"
COUNT = "count"
SUPPORTS = (REAL, POSITIVE, UNIT, COUNT)

SEP = "__"

# distribution kind -> parameter names
KINDS = {
    "binomial": ("n", "p"),
    "poisson": ("rate",),
    "normal": ("mean", "sd"),
    "uniform": ("lower", "upper"),
    "beta": ("a", "b"),
    "lognormal": ("mu", "sigma"),
    "bernoulli": ("p",),
    "jeffreys_proportion": (),
    "jeffreys_rate": (),
    "flat": (),
}
IMPROPER = {"jeffreys_rate", "flat"}
DISCRETE = {"binomial", "poisson", "bernoulli"}

_COMPATIBLE = {
    "beta": {UNIT},
    "jeffreys_proportion": {UNIT},
    "lognormal": {POSITIVE},
    "jeffreys_rate": {POSITIVE},
    "normal": {REAL},
    "flat": {REAL, POSITIVE, UNIT},
    "uniform": {REAL, POSITIVE, UNIT},
    "binomial": {COUNT},
    "poisson": {COUNT},
    "bernoulli": {COUNT},
}


class GraphError(ValueError):
    pass


class MissingValue(GraphError):
    pass


class UnidentifiablePartition(GraphError):
    pass


class InvalidSeparator(GraphError):
    pass


@dataclass(frozen=True)
class Distribution:
    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"unknown distribution {self.kind!r}")
        if len(self.params) != len(KINDS[self.kind]):
            raise GraphError(
                f"{self.kind} takes {len(KINDS[self.kind])} parameter(s), got {len(self.params)}")
        params = tuple(ex.const(p) if isinstance(p, (int, float)) else
                       (ex.ref(p) if isinstance(p, str) else p) for p in self.params)
        for p in params:
            if p[0] not in ("const", "ref"):
                raise GraphError("distribution parameters must be constants or node names")
        object.__setattr__(self, "params", params)

    @classmethod
    def parse(cls, text: str) -> "Distribution":
        e = _parse_call(text)
        return cls(e[0], tuple(e[1:]))

    @property
    def improper(self) -> bool:
        return self.kind in IMPROPER

    def refs(self) -> set:
        return {p[1] for p in self.params if p[0] == "ref"}

    def rename(self, mapping: Mapping[str, str]) -> "Distribution":
        return Distribution(self.kind, tuple(ex.rename(p, mapping) for p in self.params))

    def __str__(self):
        return f"{self.kind}({', '.join(ex.to_string(p) for p in self.params)})"


def _parse_call(text: str):
    import ast
    try:
        tree = ast.parse(text.strip(), mode="eval").body
    except SyntaxError:
        raise GraphError(f"cannot parse distribution {text!r}") from None
    if not (isinstance(tree, ast.Call) and isinstance(tree.func, ast.Name)):
        raise GraphError(f"distribution must look like kind(args): {text!r}")
    args = []
    for a in tree.args:
        e = ex._convert(a, text)
        args.append(e)
    return (tree.func.id,) + tuple(args)


def default_support(dist: Distribution) -> str:
    k = dist.kind
    if k in DISCRETE:
        return COUNT
    if k in ("beta", "jeffreys_proportion"):
        return UNIT
    if k in ("lognormal", "jeffreys_rate"):
        return POSITIVE
    if k == "uniform":
        lo, hi = dist.params
        if lo[0] == "const" and hi[0] == "const":
            if lo[1] >= 0 and hi[1] <= 1:
                return UNIT
            if lo[1] >= 0:
                return POSITIVE
        return REAL
    return REAL


def jeffreys_for(support: str) -> Distribution:
    """Default prior for a severed copy: Jeffreys where one exists, else flat."""
    if support == UNIT:
        return Distribution("jeffreys_proportion")
    if support == POSITIVE:
        return Distribution("jeffreys_rate")
    return Distribution("flat")


@dataclass(frozen=True)
class NodeDef:
    name: str
    role: str
    dist: Optional[Distribution] = None
    expr: Optional[tuple] = None
    value: Optional[float] = None
    support: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.dist, str):
            object.__setattr__(self, "dist", Distribution.parse(self.dist))
        if isinstance(self.expr, (str, int, float)):
            object.__setattr__(self, "expr", ex.parse(self.expr))
        if self.support is None:
            sup = default_support(self.dist) if self.dist is not None else REAL
            object.__setattr__(self, "support", sup)

    @property
    def stochastic(self) -> bool:
        return self.role in (FOUNDER, STOCHASTIC)

    def parents(self) -> set:
        if self.role == DETERMINISTIC:
            return ex.refs(self.expr) if self.expr is not None else set()
        return self.dist.refs() if self.dist is not None else set()

    def rename(self, mapping: Mapping[str, str]) -> "NodeDef":
        return replace(
            self,
            name=mapping.get(self.name, self.name),
            dist=self.dist.rename(mapping) if self.dist is not None else None,
            expr=ex.rename(self.expr, mapping) if self.expr is not None else None,
        )


def founder(name, dist, support=None) -> NodeDef:
    return NodeDef(name, FOUNDER, dist=dist, support=support)


def stochastic(name, dist, support=None) -> NodeDef:
    return NodeDef(name, STOCHASTIC, dist=dist, support=support)


def deterministic(name, expression, support=REAL) -> NodeDef:
    return NodeDef(name, DETERMINISTIC, expr=expression, support=support)


def observed(name, dist, value) -> NodeDef:
    d = Distribution.parse(dist) if isinstance(dist, str) else dist
    return NodeDef(name, OBSERVED, dist=d, value=float(value),
                   support=COUNT if d.kind in DISCRETE else REAL)


@dataclass(frozen=True)
class Diagnostic:
    code: str
    node: str
    message: str

    def __str__(self):
        return f"{self.code}: {self.message}"


class ModelGraph:
    """Immutable DAG of :class:`NodeDef` plus named constants."""

    def __init__(self, nodes: Iterable[NodeDef], constants: Optional[Mapping[str, float]] = None,
                 blocks: Iterable[Iterable[str]] = ()):
        nodes = tuple(nodes)
        # groups of stochastic nodes the sampler updates jointly
        self._blocks = tuple(tuple(b) for b in blocks)
        counts = Counter(n.name for n in nodes)
        self._duplicates = tuple(sorted(n for n, c in counts.items() if c > 1))
        self._nodes = MappingProxyType({n.name: n for n in nodes})
        self._order = tuple(dict.fromkeys(n.name for n in nodes))
        self._constants = MappingProxyType(
            {k: float(v) for k, v in sorted((constants or {}).items())})
        self._topo = None

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_nodes"] = dict(self._nodes)
        state["_constants"] = dict(self._constants)
        return state

    def __setstate__(self, state):
        state["_nodes"] = MappingProxyType(state["_nodes"])
        state["_constants"] = MappingProxyType(state["_constants"])
        self.__dict__.update(state)

    # -- basic access -------------------------------------------------
    @property
    def nodes(self) -> Mapping[str, NodeDef]:
        return self._nodes

    @property
    def constants(self) -> Mapping[str, float]:
        return self._constants

    @property
    def blocks(self) -> tuple:
        return self._blocks

    def __getitem__(self, name: str) -> NodeDef:
        return self._nodes[name]

    def __contains__(self, name) -> bool:
        return name in self._nodes

    def __len__(self):
        return len(self._nodes)

    def __iter__(self):
        return iter(self._nodes.values())

    def __eq__(self, other):
        return (isinstance(other, ModelGraph) and dict(self._nodes) == dict(other._nodes)
                and dict(self._constants) == dict(other._constants)
                and self._blocks == other._blocks)

    def __hash__(self):
        return hash((frozenset(self._nodes.values()), tuple(self._constants.items())))

    def __repr__(self):
        return f"ModelGraph({len(self._nodes)} nodes)"

    def names(self, role: Optional[str] = None) -> list:
        return [n for n in self._order if role is None or self._nodes[n].role == role]

    @property
    def stochastic_names(self) -> list:
        return [n for n in self.topological_order() if self._nodes[n].stochastic]

    @property
    def observed_names(self) -> list:
        return [n for n in self.topological_order() if self._nodes[n].role == OBSERVED]

    def parents(self, name: str) -> set:
        return {p for p in self._nodes[name].parents() if p not in self._constants}

    def children(self, name: str) -> set:
        return {n for n, nd in self._nodes.items() if name in nd.parents()}

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self._nodes)
        for n, nd in self._nodes.items():
            for p in nd.parents():
                if p in self._nodes:
                    g.add_edge(p, n)
        return g

    def topological_order(self) -> tuple:
        """Kahn's algorithm with lexicographic tie-breaking, so the order is canonical."""
        if self._topo is None:
            indeg = {n: 0 for n in self._nodes}
            kids = {n: [] for n in self._nodes}
            for n, nd in self._nodes.items():
                for p in nd.parents():
                    if p in self._nodes:
                        indeg[n] += 1
                        kids[p].append(n)
            heap = [n for n, d in indeg.items() if d == 0]
            heapq.heapify(heap)
            out = []
            while heap:
                n = heapq.heappop(heap)
                out.append(n)
                for k in kids[n]:
                    indeg[k] -= 1
                    if indeg[k] == 0:
                        heapq.heappush(heap, k)
            if len(out) != len(self._nodes):
                raise GraphError("graph contains a cycle")
            self._topo = tuple(out)
        return self._topo

    def ancestors(self, names: Iterable[str]) -> set:
        seen, stack = set(), list(names)
        while stack:
            n = stack.pop()
            if n in seen or n not in self._nodes:
                continue
            seen.add(n)
            stack.extend(self._nodes[n].parents())
        return seen

    def descendants(self, name: str) -> set:
        kids = {n: set() for n in self._nodes}
        for n, nd in self._nodes.items():
            for p in nd.parents():
                if p in kids:
                    kids[p].add(n)
        seen, stack = set(), [name]
        while stack:
            n = stack.pop()
            for k in kids[n]:
                if k not in seen:
                    seen.add(k)
                    stack.append(k)
        return seen

    def with_nodes(self, nodes: Iterable[NodeDef], constants=None) -> "ModelGraph":
        nodes = tuple(nodes)
        names = {n.name for n in nodes}
        blocks = [b for b in self._blocks if all(x in names for x in b)]
        return ModelGraph(nodes, self._constants if constants is None else constants, blocks)

    def without(self, names: Iterable[str]) -> "ModelGraph":
        drop = set(names)
        return self.with_nodes(n for n in self if n.name not in drop)


# ---------------------------------------------------------------------------
# validation


def validate_graph(g: ModelGraph) -> list:
    """Return one :class:`Diagnostic` per structural problem; empty when well formed."""
    out = []
    for name in g._duplicates:
        out.append(Diagnostic("duplicate node", name, f"node {name!r} defined more than once"))
    known = set(g.nodes) | set(g.constants)
    for name in set(g.nodes) & set(g.constants):
        out.append(Diagnostic("duplicate node", name, f"{name!r} is both a node and a constant"))
    for nd in g:
        if not nd.name:
            out.append(Diagnostic("invalid name", nd.name, "empty node name"))
        if nd.role not in ROLES:
            out.append(Diagnostic("invalid role", nd.name, f"{nd.name}: unknown role {nd.role!r}"))
            continue
        if nd.support not in SUPPORTS:
            out.append(Diagnostic("invalid support", nd.name,
                                  f"{nd.name}: unknown support {nd.support!r}"))
        if nd.role == DETERMINISTIC:
            if nd.expr is None:
                out.append(Diagnostic("missing expression", nd.name,
                                      f"{nd.name}: deterministic node without expression"))
        else:
            if nd.dist is None:
                out.append(Diagnostic("missing distribution", nd.name,
                                      f"{nd.name}: {nd.role} node without distribution"))
                continue
            if nd.support not in _COMPATIBLE[nd.dist.kind]:
                out.append(Diagnostic(
                    "support mismatch", nd.name,
                    f"{nd.name}: support {nd.support!r} incompatible with {nd.dist.kind}"))
            if nd.role == OBSERVED:
                if nd.value is None or not math.isfinite(nd.value):
                    out.append(Diagnostic("missing value", nd.name,
                                          f"{nd.name}: observed node without a finite value"))
                elif nd.dist.kind in DISCRETE:
                    if nd.value < 0 or not float(nd.value).is_integer():
                        out.append(Diagnostic("invalid value", nd.name,
                                              f"{nd.name}: count data must be a nonnegative integer"))
                    if nd.dist.kind == "binomial" and nd.dist.params[0][0] == "const" \
                            and nd.value > nd.dist.params[0][1]:
                        out.append(Diagnostic("invalid value", nd.name,
                                              f"{nd.name}: events exceed trials"))
                if nd.dist.improper:
                    out.append(Diagnostic("improper likelihood", nd.name,
                                          f"{nd.name}: observed node with improper distribution"))
            elif nd.dist.kind in DISCRETE:
                out.append(Diagnostic("discrete parameter", nd.name,
                                      f"{nd.name}: unobserved discrete nodes are not supported"))
        for r in sorted(nd.parents() - known):
            out.append(Diagnostic("unresolved reference", nd.name,
                                  f"{nd.name}: unresolved reference to {r!r}"))
    in_block = set()
    for b in g.blocks:
        for name in b:
            if name not in g.nodes or not g[name].stochastic:
                out.append(Diagnostic("invalid block", name,
                                      f"block member {name!r} is not a stochastic node"))
            elif name in in_block:
                out.append(Diagnostic("invalid block", name, f"{name!r} is in two blocks"))
            in_block.add(name)
    # cycles: one diagnostic per strongly connected component
    gx = g.to_networkx()
    for comp in nx.strongly_connected_components(gx):
        if len(comp) > 1 or any(gx.has_edge(c, c) for c in comp):
            names = sorted(comp)
            out.append(Diagnostic("cycle detected", names[0],
                                  f"cycle detected among {', '.join(names)}"))
    if not any(d.code == "cycle detected" for d in out):
        stoch = {n for n, nd in g.nodes.items() if nd.stochastic}
        for nd in g:
            if nd.role == FOUNDER and g.ancestors(nd.parents()) & stoch:
                out.append(Diagnostic("founder has stochastic parents", nd.name,
                                      f"{nd.name}: founder node depends on stochastic nodes"))
    return out


def check(g: ModelGraph) -> None:
    diags = validate_graph(g)
    if diags:
        raise GraphError("; ".join(str(d) for d in diags))


# ---------------------------------------------------------------------------
# reference log density (scipy based; the sampler uses a compiled path)


def _scalar(p, env):
    return p[1] if p[0] == "const" else float(env[p[1]])


def flat_log_density(x: float, support: str) -> float:
    """Flat on the sampling scale (identity, log or logit)."""
    if support == POSITIVE:
        return -math.log(x) if x > 0 else -math.inf
    if support == UNIT:
        return -math.log(x) - math.log1p(-x) if 0 < x < 1 else -math.inf
    return 0.0


def dist_logpdf(dist: Distribution, x: float, env: Mapping[str, float], support=REAL) -> float:
    a = [_scalar(p, env) for p in dist.params]
    k = dist.kind
    with np.errstate(all="ignore"):
        if k == "binomial":
            return float(stats.binom.logpmf(x, a[0], a[1]))
        if k == "poisson":
            return float(stats.poisson.logpmf(x, a[0]))
        if k == "bernoulli":
            return float(stats.bernoulli.logpmf(x, a[0]))
        if k == "normal":
            return float(stats.norm.logpdf(x, a[0], a[1]))
        if k == "uniform":
            if not a[0] <= x <= a[1] or not a[0] < a[1]:
                return -math.inf
            return -math.log(a[1] - a[0])
        if k == "beta":
            return float(stats.beta.logpdf(x, a[0], a[1]))
        if k == "lognormal":
            return float(stats.lognorm.logpdf(x, a[1], scale=math.exp(a[0])))
        if k == "jeffreys_proportion":
            return float(stats.beta.logpdf(x, 0.5, 0.5))
        if k == "jeffreys_rate":
            return -0.5 * math.log(x) if x > 0 else -math.inf
        if k == "flat":
            return flat_log_density(x, support)
    raise GraphError(f"unknown distribution {k!r}")


def complete_values(g: ModelGraph, values: Mapping[str, float]) -> dict:
    """Fill in deterministic and observed nodes given stochastic values."""
    env = dict(g.constants)
    for name in g.topological_order():
        nd = g[name]
        if nd.role == DETERMINISTIC:
            env[name] = ex.evaluate(nd.expr, env)
        elif nd.role == OBSERVED:
            env[name] = nd.value
        else:
            if name not in values:
                raise MissingValue(f"no value for stochastic node {name!r}")
            env[name] = float(values[name])
    return env


def log_joint_density(g: ModelGraph, values: Mapping[str, float]) -> float:
    """Sum of log p(node | parents) over stochastic and observed nodes.

    Returns ``-inf`` when a value lies outside its distribution's support,
    which is how violated indicator constraints show up.
    """
    env = complete_values(g, values)
    total = 0.0
    for name in g.topological_order():
        nd = g[name]
        if nd.role == DETERMINISTIC:
            continue
        lp = dist_logpdf(nd.dist, env[name], env, nd.support)
        if math.isnan(lp):
            lp = -math.inf
        total += lp
        if total == -math.inf:
            return -math.inf
    return total


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class Partition:
    name: str
    data: tuple

    def __post_init__(self):
        object.__setattr__(self, "data", tuple(self.data))


@dataclass(frozen=True)
class CopySpec:
    """How separator ``j`` appears in one partition.

    ``derived=True`` keeps the node's original definition (expressed through
    the partition's own copies of its parents). Otherwise the copy becomes a
    stochastic node with ``prior`` (default: Jeffreys for its support).
    """

    partition: str
    derived: bool = True
    prior: Optional[Distribution] = None

    def __post_init__(self):
        if isinstance(self.prior, str):
            object.__setattr__(self, "prior", Distribution.parse(self.prior))
        if self.prior is not None and self.derived:
            object.__setattr__(self, "derived", False)


TRANSFORMS = ("identity", "logit", "log")


@dataclass(frozen=True)
class SplitSpec:
    separators: tuple
    partitions: tuple
    copy_plan: Mapping = field(default_factory=dict)
    transforms: Mapping = field(default_factory=dict)
    shared_nodes: frozenset = frozenset()
    pairs: Optional[tuple] = None
    labels: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "separators", tuple(self.separators))
        object.__setattr__(self, "partitions", tuple(
            p if isinstance(p, Partition) else Partition(*p) for p in self.partitions))
        plan = {}
        for sep, copies in dict(self.copy_plan).items():
            plan[sep] = tuple(c if isinstance(c, CopySpec) else CopySpec(*c) for c in copies)
        object.__setattr__(self, "copy_plan", MappingProxyType(plan))
        object.__setattr__(self, "transforms", MappingProxyType(dict(self.transforms)))
        object.__setattr__(self, "labels", MappingProxyType(dict(self.labels)))
        object.__setattr__(self, "shared_nodes", frozenset(self.shared_nodes))
        if self.pairs is not None:
            object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))
        names = [p.name for p in self.partitions]
        if len(set(names)) != len(names):
            raise GraphError("partition names must be unique")
        for t in self.transforms.values():
            if t not in TRANSFORMS:
                raise GraphError(f"unknown transform {t!r}")

    @property
    def partition_names(self) -> tuple:
        return tuple(p.name for p in self.partitions)

    def __reduce__(self):
        return (SplitSpec, (self.separators, self.partitions, dict(self.copy_plan),
                            dict(self.transforms), self.shared_nodes, self.pairs,
                            dict(self.labels)))

    def transform(self, sep: str) -> str:
        return self.transforms.get(sep, "identity")

    def label(self, sep: str) -> str:
        return self.labels.get(sep, sep)


def copy_name(name: str, partition: str) -> str:
    return f"{name}{SEP}{partition}"


def default_transform(support: str) -> str:
    return {UNIT: "logit", POSITIVE: "log"}.get(support, "identity")


@dataclass(frozen=True)
class SplitModel:
    graph: ModelGraph
    spec: SplitSpec
    separator_copies: Mapping  # (separator, partition) -> node name
    partition_nodes: Mapping   # partition -> tuple of node names
    flat_copies: tuple = ()    # copies given a flat prior (no Jeffreys prior on their scale)

    def __post_init__(self):
        object.__setattr__(self, "separator_copies", MappingProxyType(dict(self.separator_copies)))
        object.__setattr__(self, "partition_nodes", MappingProxyType(dict(self.partition_nodes)))
        object.__setattr__(self, "flat_copies", tuple(self.flat_copies))

    def __reduce__(self):
        return (SplitModel, (self.graph, self.spec, dict(self.separator_copies),
                             dict(self.partition_nodes), self.flat_copies))

    @property
    def m_q(self) -> dict:
        return {q: sum(1 for (_, p) in self.separator_copies if p == q)
                for q in self.spec.partition_names}

    @property
    def m(self) -> int:
        return len(self.separator_copies)


def split(g: ModelGraph, spec: SplitSpec) -> SplitModel:
    """Split ``g`` into the partitions of ``spec``.

    Each partition holds its data nodes plus copies of every ancestor, renamed
    ``name__partition``. Separators listed as non-derived copies in a
    partition are severed: their original parents are not followed and the
    copy receives the plan's prior. Nodes in ``spec.shared_nodes`` exist once
    and are common to all partitions.
    """
    check(g)
    for sep in spec.separators:
        if sep not in g:
            raise InvalidSeparator(f"separator {sep!r} is not a node")
        if g[sep].role == OBSERVED:
            raise InvalidSeparator(f"separator {sep!r} is an observed node")
    for s in spec.shared_nodes:
        if s not in g:
            raise GraphError(f"shared node {s!r} is not a node")
        if s in spec.separators:
            raise InvalidSeparator(f"separator {s!r} cannot also be shared")
    seen_data = {}
    for part in spec.partitions:
        for d in part.data:
            if d not in g or g[d].role != OBSERVED:
                raise GraphError(f"partition {part.name!r}: {d!r} is not an observed node")
            if d in seen_data:
                raise GraphError(f"{d!r} assigned to partitions {seen_data[d]!r} and {part.name!r}")
            seen_data[d] = part.name
    for sep, copies in spec.copy_plan.items():
        if sep not in spec.separators:
            raise GraphError(f"copy plan given for non-separator {sep!r}")
        for c in copies:
            if c.partition not in spec.partition_names:
                raise GraphError(f"copy plan for {sep!r} names unknown partition {c.partition!r}")

    shared = set(spec.shared_nodes)
    for s in shared:
        bad = g.ancestors(g[s].parents()) - shared
        if bad:
            raise GraphError(f"shared node {s!r} depends on unshared nodes {sorted(bad)}")

    new_nodes: dict = {}
    for s in sorted(shared):
        new_nodes[s] = g[s]
    separator_copies = {}
    partition_nodes = {}
    flat_copies = []
    for part in spec.partitions:
        q = part.name
        plan = {sep: c for sep, cs in spec.copy_plan.items() for c in cs if c.partition == q}
        defs = {}
        stack = list(part.data) + list(plan)
        while stack:
            v = stack.pop()
            if v in defs or v in g.constants or v in shared:
                continue
            nd = g[v]
            if nd.role == OBSERVED and v not in part.data:
                raise GraphError(f"partition {q!r} depends on observed node {v!r} of another partition")
            c = plan.get(v)
            if c is not None and not c.derived:
                prior = c.prior if c.prior is not None else jeffreys_for(nd.support)
                if prior.kind == "flat":
                    flat_copies.append(copy_name(v, q))
                role = STOCHASTIC if prior.refs() else FOUNDER
                defs[v] = NodeDef(v, role, dist=prior, support=nd.support)
            else:
                defs[v] = nd
            stack.extend(defs[v].parents())
        mapping = {v: copy_name(v, q) for v, nd in defs.items() if nd.role != OBSERVED}
        for v, nd in defs.items():
            new = nd.rename(mapping)
            new_nodes[new.name] = new
            if v in spec.separators:
                separator_copies[(v, q)] = new.name
        partition_nodes[q] = tuple(mapping.get(n, n) for n in g.topological_order() if n in defs)

    order = {n: i for i, n in enumerate(g.topological_order())}

    def base(name):
        return name.split(SEP)[0]

    ordered = sorted(new_nodes.values(), key=lambda nd: (order.get(base(nd.name), 0), nd.name))
    blocks = []
    for b in g.blocks:
        if all(x in shared for x in b):
            blocks.append(b)
            continue
        for part in spec.partitions:
            names = tuple(copy_name(x, part.name) for x in b)
            if all(n in new_nodes and new_nodes[n].stochastic for n in names):
                blocks.append(names)
    sg = ModelGraph(ordered, g.constants, blocks)
    # separator copies ordered by partition, then separator (stacked phi_S)
    sep_index = {s: i for i, s in enumerate(spec.separators)}
    part_index = {p: i for i, p in enumerate(spec.partition_names)}
    separator_copies = dict(sorted(separator_copies.items(),
                                   key=lambda kv: (part_index[kv[0][1]], sep_index[kv[0][0]])))
    model = SplitModel(sg, spec, separator_copies, partition_nodes, tuple(sorted(flat_copies)))
    _check_identifiable(model)
    return model


def _check_identifiable(model: SplitModel) -> None:
    g = model.graph
    for q, members in model.partition_nodes.items():
        for name in members:
            nd = g[name]
            if nd.stochastic and nd.dist.improper:
                if not any(g[d].role == OBSERVED for d in g.descendants(name)):
                    raise UnidentifiablePartition(
                        f"partition {q!r}: {name!r} has an improper prior and no data")
        if not members:
            raise UnidentifiablePartition(f"partition {q!r} is empty")
