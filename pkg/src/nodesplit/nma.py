"""Network meta-analysis of binary outcomes under consistency, and its splits.

Each study ``d`` has a baseline treatment ``b`` (its alphabetically first
arm) and arm-level log-odds ``alpha_d + eta_bJ (+ beta_dJ)``. Treatment
effects relative to the reference treatment are basic parameters; every
other comparison is functional, ``eta_JK = eta_AK - eta_AJ``. Random study
effects within a multi-arm study have variance sigma^2 and covariance
sigma^2 / 2, written as a chain of conditional normals.
"""
from __future__ import annotations

import csv
import itertools
import math
import re
from dataclasses import dataclass, replace
from importlib import resources
from typing import Iterable, Optional, Sequence

import networkx as nx

from . import graph as gr

COMMON, RANDOM = "common", "random"
IN_ST, IN_DE, OWN = "in_ST", "in_DE", "own_partition"


class NmaError(ValueError):
    pass


class DisconnectedNetwork(NmaError):
    pass


class NoDirectEvidence(NmaError):
    pass


@dataclass(frozen=True)
class TrialArm:
    study: str
    design: str
    treatment: str
    events: int
    total: int

    def __post_init__(self):
        object.__setattr__(self, "study", str(self.study))
        if not 0 <= self.events <= self.total:
            raise NmaError(f"study {self.study} arm {self.treatment}: events outside [0, total]")


@dataclass(frozen=True)
class NmaSpec:
    reference: str = "A"
    effect_model: str = RANDOM
    sigma_upper: float = 5.0
    basic_prior_sd: float = 10.0
    baseline_prior_sd: float = 10.0

    def __post_init__(self):
        if self.effect_model not in (COMMON, RANDOM):
            raise NmaError(f"unknown effect model {self.effect_model!r}")


def read_arms(path) -> list:
    """Arms from a delimited table with columns study, design, treatment, events, total."""
    with open(path, newline="") as fh:
        sample = fh.read(2048)
        fh.seek(0)
        dialect = csv.Sniffer().sniff(sample, delimiters=",;\t")
        rows = list(csv.DictReader(fh, dialect=dialect))
    need = {"study", "design", "treatment", "events", "total"}
    if not rows or not need <= set(rows[0]):
        raise NmaError(f"trial table needs columns {sorted(need)}")
    return [TrialArm(r["study"].strip(), r["design"].strip(), r["treatment"].strip(),
                     int(r["events"]), int(r["total"])) for r in rows]


def smoking_arms() -> list:
    """The 24-study smoking cessation network (treatments A-D)."""
    with resources.as_file(resources.files(__package__) / "data" / "smoking.csv") as p:
        return read_arms(p)


def studies(arms: Sequence[TrialArm]) -> dict:
    """study -> arms sorted by treatment, in order of first appearance."""
    out: dict = {}
    for a in arms:
        out.setdefault(a.study, []).append(a)
    for s, group in out.items():
        ts = [a.treatment for a in group]
        if len(ts) < 2:
            raise NmaError(f"study {s} has fewer than two arms")
        if len(set(ts)) != len(ts):
            raise NmaError(f"study {s} repeats a treatment")
        group.sort(key=lambda a: a.treatment)
    return out


def treatments(arms: Sequence[TrialArm]) -> list:
    return sorted({a.treatment for a in arms})


def edge(j: str, k: str) -> str:
    j, k = sorted((j, k))
    return j + k


def study_edges(group) -> list:
    return [edge(a.treatment, b.treatment) for a, b in itertools.combinations(group, 2)]


def network(arms: Sequence[TrialArm]) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(treatments(arms))
    for group in studies(arms).values():
        for a, b in itertools.combinations(group, 2):
            g.add_edge(a.treatment, b.treatment)
    return g


def _key(study: str) -> str:
    k = re.sub(r"\W", "_", study)
    return k


def eta(j: str, k: str) -> str:
    return f"eta_{j}{k}"


def _potentials(basis: Sequence[str]) -> dict:
    """Express every treatment as a signed sum of forest edges from its root.

    Returns treatment -> (root, {edge: sign}); ``eta_JK = phi(K) - phi(J)``.
    """
    f = nx.Graph()
    for e in basis:
        f.add_edge(e[0], e[1])
    out = {}
    for comp in nx.connected_components(f):
        root = min(comp)
        out[root] = (root, {})
        for parent, child in nx.bfs_edges(f, root):
            path = dict(out[parent][1])
            e = edge(parent, child)
            path[e] = path.get(e, 0) + (1 if e == parent + child else -1)
            out[child] = (root, path)
    return out


def _eta_expr(j: str, k: str, pot: dict, name) -> Optional[str]:
    if j not in pot or k not in pot or pot[j][0] != pot[k][0]:
        return None
    coef = dict(pot[k][1])
    for e, c in pot[j][1].items():
        coef[e] = coef.get(e, 0) - c
    terms = [(e, c) for e, c in sorted(coef.items()) if c]
    if not terms:
        return "0"
    out = ""
    for e, c in terms:
        sign = "+" if c > 0 else "-"
        term = name(eta(e[0], e[1])) if abs(c) == 1 else f"{abs(c)} * {name(eta(e[0], e[1]))}"
        out = (term if sign == "+" else f"-{term}") if not out else f"{out} {sign} {term}"
    return out


def _forest(edges: Iterable[str], prefer: Sequence[str] = ()) -> list:
    """Spanning forest of ``edges``, taking edges in ``prefer`` first, in order."""
    edges = sorted(set(edges))
    order = [e for e in prefer if e in edges] + [e for e in edges if e not in prefer]
    f, out = nx.Graph(), []
    for e in order:
        if f.has_node(e[0]) and f.has_node(e[1]) and nx.has_path(f, e[0], e[1]):
            continue
        f.add_edge(e[0], e[1])
        out.append(e)
    return out


def _nma_nodes(groups: dict, treats: Sequence[str], basis: Sequence[str], spec: NmaSpec,
               name=lambda x: x, sigma: str = "sigma", extra: Sequence[str] = ()) -> tuple:
    """Nodes and blocks for the studies in ``groups`` under a forest ``basis``.

    ``extra`` lists further comparisons that must exist as nodes; those not
    connected by the basis become founders with the basic-parameter prior.
    """
    prior = f"normal(0, {spec.basic_prior_sd!r})"
    pot = _potentials(basis)
    nodes = [gr.founder(name(eta(e[0], e[1])), prior) for e in basis]
    made = set(basis)
    for j, k in itertools.combinations(sorted(treats), 2):
        ex = _eta_expr(j, k, pot, name)
        if ex is not None and j + k not in made:
            nodes.append(gr.deterministic(name(eta(j, k)), ex))
            made.add(j + k)
    for e in extra:
        if e not in made:
            nodes.append(gr.founder(name(eta(e[0], e[1])), prior))
            made.add(e)
    blocks = []
    sigma_cond = sigma.replace("sigma", "sigma_cond", 1)
    for s, group in groups.items():
        k = _key(s)
        base = group[0].treatment
        alpha = name(f"alpha_{k}")
        nodes.append(gr.founder(alpha, f"normal(0, {spec.baseline_prior_sd!r})"))
        betas = []
        for i, a in enumerate(group[1:]):
            t = a.treatment
            lp = f"{alpha} + {name(eta(base, t))}"
            if spec.effect_model == RANDOM:
                b = name(f"beta_{k}_{t}")
                if i == 0:
                    nodes.append(gr.stochastic(b, f"normal(0, {sigma})"))
                else:
                    # equal covariances sigma^2 / 2: the conditional mean is
                    # sum(previous) / (i + 1), the sd sigma * sqrt((i + 2) / (2 (i + 1)))
                    m = name(f"mu_{k}_{t}")
                    nodes.append(gr.deterministic(m, f"({' + '.join(betas)}) / {i + 1}"))
                    if i == 1:
                        sd = sigma_cond
                    else:
                        sd = name(f"sd_{k}_{t}")
                        f = math.sqrt((i + 2) / (2.0 * (i + 1)))
                        nodes.append(gr.deterministic(sd, f"{sigma} * {f!r}", gr.POSITIVE))
                    nodes.append(gr.stochastic(b, f"normal({m}, {sd})"))
                betas.append(b)
                lp += f" + {b}"
            p = name(f"p_{k}_{t}")
            nodes.append(gr.deterministic(p, f"ilogit({lp})", gr.UNIT))
        nodes.append(gr.deterministic(name(f"p_{k}_{base}"), f"ilogit({alpha})", gr.UNIT))
        if len(betas) > 1:
            blocks.append(tuple(betas))
        for a in group:
            nodes.append(gr.observed(f"y_{k}_{a.treatment}",
                                     f"binomial({a.total}, {name(f'p_{k}_{a.treatment}')})",
                                     a.events))
    return nodes, blocks


def _sigma_nodes(groups: dict, spec: NmaSpec, sigma: str = "sigma") -> list:
    if spec.effect_model != RANDOM:
        return []
    nodes = [gr.founder(sigma, f"uniform(0, {spec.sigma_upper!r})")]
    if any(len(g) > 2 for g in groups.values()):
        nodes.append(gr.deterministic(sigma.replace("sigma", "sigma_cond", 1),
                                      f"{sigma} * 0.8660254037844386", gr.POSITIVE))
    return nodes


def _check_network(arms, spec: NmaSpec) -> dict:
    groups = studies(arms)
    if spec.reference not in treatments(arms):
        raise DisconnectedNetwork(f"reference treatment {spec.reference!r} not in the network")
    if not nx.is_connected(network(arms)):
        raise DisconnectedNetwork("treatment network is not connected")
    keys = [_key(s) for s in groups]
    if len(set(keys)) != len(keys):
        raise NmaError("study identifiers collide after sanitising")
    return groups


def star_basis(treats: Sequence[str], reference: str) -> list:
    return [edge(reference, t) for t in treats if t != reference]


class NmaGraph(gr.ModelGraph):
    """Consistency model that remembers the trial arms and settings it was built from."""

    def __init__(self, nodes, blocks, arms: Sequence[TrialArm], spec: NmaSpec):
        super().__init__(nodes, blocks=blocks)
        self.arms = tuple(arms)
        self.nma_spec = spec


def build_nma_graph(arms: Sequence[TrialArm], spec: NmaSpec = NmaSpec()) -> NmaGraph:
    """Consistency model with common or random treatment effects.

    Effects relative to ``spec.reference`` are basic parameters; every other
    comparison ``eta_JK`` is a deterministic node.
    """
    groups = _check_network(arms, spec)
    ts = treatments(arms)
    nodes = _sigma_nodes(groups, spec)
    more, blocks = _nma_nodes(groups, ts, star_basis(ts, spec.reference), spec)
    return NmaGraph(nodes + more, blocks, arms, spec)


def study_of(node: str) -> str:
    """Study key of an observed arm node ``y_<study>_<treatment>``."""
    return node[2:].rsplit("_", 1)[0]


# ---------------------------------------------------------------------------
# partition schemes


@dataclass(frozen=True)
class PartitionScheme:
    kind: str                       # two_way_ST_vs_DE | multi_way_sequential_trees | custom
    spanning_tree: tuple            # edges such as ("AB", "AC", "AD")
    multi_arm_placement: str        # in_ST | in_DE | own_partition
    partitions: tuple               # tuple of tuples of study ids, partition 1 first
    separators: tuple               # functional edges compared across partitions
    pairs: Optional[tuple] = None   # partition pairs compared, None for all
    share_variance: bool = True
    name: str = ""
    degenerate: bool = False
    bases: Optional[tuple] = None   # per-partition spanning trees, default spanning_tree

    def __post_init__(self):
        object.__setattr__(self, "spanning_tree", tuple(self.spanning_tree))
        object.__setattr__(self, "partitions", tuple(tuple(str(s) for s in p) for p in self.partitions))
        object.__setattr__(self, "separators", tuple(self.separators))
        seen = {}
        for i, p in enumerate(self.partitions):
            for s in p:
                if s in seen:
                    raise NmaError(f"study {s} placed in partitions {seen[s] + 1} and {i + 1}")
                seen[s] = i


def _check_tree(arms, tree) -> None:
    t = nx.Graph()
    for e in tree:
        if len(e) != 2:
            raise NmaError(f"bad edge {e!r}")
        t.add_edge(e[0], e[1])
    if not nx.is_forest(t):
        raise NmaError("spanning tree contains a cycle")
    missing = set(treatments(arms)) - set(t.nodes)
    if missing or not nx.is_connected(t):
        raise NmaError(f"spanning tree does not connect all treatments (missing {sorted(missing)})")


def _sequential_forests(edges: Sequence[str]) -> list:
    """Split edges into successive maximal forests, greedily in sorted order."""
    rest, out = sorted(edges), []
    while rest:
        taken = _forest(rest)
        out.append(taken)
        rest = [e for e in rest if e not in taken]
    return out


def enumerate_schemes(arms: Sequence[TrialArm], spanning_tree: Iterable[str],
                      share_variance: bool = True) -> list:
    """Two-way schemes with multi-arm studies in ST or in DE, plus the
    sequential-trees scheme when the non-tree edges contain a cycle."""
    tree = tuple(edge(*e) for e in spanning_tree)
    _check_tree(arms, tree)
    groups = studies(arms)
    all_edges = sorted(network(arms).edges())
    non_tree = tuple(e for e in sorted(edge(*e) for e in all_edges) if e not in tree)
    two_arm = {s: study_edges(g)[0] for s, g in groups.items() if len(g) == 2}
    multi = [s for s, g in groups.items() if len(g) > 2]
    st = [s for s, e in two_arm.items() if e in tree]
    de = [s for s, e in two_arm.items() if e not in tree]
    if not non_tree:
        return [PartitionScheme("two_way_ST_vs_DE", tree, IN_ST, (tuple(st + multi), ()),
                                (), share_variance=share_variance, degenerate=True)]
    schemes = [
        PartitionScheme("two_way_ST_vs_DE", tree, IN_ST, (tuple(_ordered(groups, st + multi)),
                                                          tuple(de)), non_tree,
                        share_variance=share_variance),
        PartitionScheme("two_way_ST_vs_DE", tree, IN_DE, (tuple(st), tuple(
            _ordered(groups, de + multi))), non_tree, share_variance=share_variance),
    ]
    rest = nx.Graph()
    rest.add_edges_from((e[0], e[1]) for e in non_tree)
    if not nx.is_forest(rest) and multi:
        parts = [tuple(st)]
        for forest in _sequential_forests(non_tree):
            parts.append(tuple(s for s, e in two_arm.items() if e in forest))
        parts.append(tuple(multi))
        pairs = tuple(("1", str(q)) for q in range(2, len(parts) + 1))
        schemes.append(PartitionScheme("multi_way_sequential_trees", tree, OWN, tuple(parts),
                                       non_tree, pairs, share_variance=share_variance))
    for s in schemes:
        if any(not p for p in s.partitions):
            object.__setattr__(s, "degenerate", True)
    return schemes


def _ordered(groups, ids) -> list:
    order = {s: i for i, s in enumerate(groups)}
    return sorted(ids, key=order.get)


def smoking_schemes() -> dict:
    """The five partitionings of the smoking network, keyed b-f."""
    arms = smoking_arms()
    b, c, d = enumerate_schemes(arms, ("AB", "AC", "AD"))
    e, f = enumerate_schemes(arms, ("AB", "AC", "BD"))
    return {k: replace(s, name=k) for k, s in zip("bcdef", (b, c, d, e, f))}


def split_nma(g: NmaGraph, scheme: PartitionScheme):
    """Split the consistency model by study partitions.

    Every partition holds its own copies of the basic parameters (the edges
    of its basis, by default the scheme's spanning tree) with the
    basic-parameter prior, and derives all other comparisons from them, so
    parameters a partition does not inform stay diffuse. sigma is shared
    when ``scheme.share_variance``, otherwise it is split on the log scale.

    Returns ``(SplitModel, SplitSpec)``.
    """
    if not isinstance(g, NmaGraph):
        raise NmaError("split_nma needs a graph from build_nma_graph")
    if scheme.degenerate:
        raise NmaError("scheme has an empty partition; nothing to compare")
    arms, spec = g.arms, g.nma_spec
    groups = _check_network(arms, spec)
    seps = tuple(edge(*e) for e in scheme.separators)
    if not seps:
        raise NmaError("scheme has no separators")
    ts = treatments(arms)
    star = star_basis(ts, spec.reference)
    shared = spec.effect_model == RANDOM and scheme.share_variance
    nodes = _sigma_nodes(groups, spec) if shared else []
    blocks, parts, partition_nodes, copies, plan = [], [], {}, {}, {}
    for i, ids in enumerate(scheme.partitions):
        q = str(i + 1)
        missing = [s for s in ids if s not in groups]
        if missing:
            raise NmaError(f"studies {missing} not in the network")
        sub = {s: groups[s] for s in ids}
        basis = scheme.bases[i] if scheme.bases else (scheme.spanning_tree or star)
        _check_tree(arms, basis)
        name = (lambda q: lambda x: gr.copy_name(x, q))(q)
        sigma = "sigma" if shared or spec.effect_model == COMMON else name("sigma")
        own = [] if shared else _sigma_nodes(sub, spec, sigma)
        more, bl = _nma_nodes(sub, ts, basis, spec, name, sigma, extra=seps)
        part_nodes = own + more
        nodes.extend(part_nodes)
        blocks.extend(bl)
        data = tuple(n.name for n in part_nodes if n.role == gr.OBSERVED)
        parts.append(gr.Partition(q, data))
        partition_nodes[q] = tuple(n.name for n in part_nodes)
        pot = _potentials(basis)
        for e in seps:
            copies[(eta(*e), q)] = name(eta(*e))
            derived = _eta_expr(e[0], e[1], pot, name) is not None and e not in basis
            plan.setdefault(eta(*e), []).append(
                gr.CopySpec(q) if derived else gr.CopySpec(q, prior=f"normal(0, {spec.basic_prior_sd!r})"))
        if not shared and spec.effect_model == RANDOM:
            copies[("sigma", q)] = sigma
            plan.setdefault("sigma", []).append(gr.CopySpec(q))
    sep_names = tuple(eta(*e) for e in seps)
    transforms = {s: "identity" for s in sep_names}
    labels = {s: s[4:] for s in sep_names}
    if not shared and spec.effect_model == RANDOM:
        sep_names += ("sigma",)
        transforms["sigma"] = "log"
    shared_nodes = {n.name for n in nodes[:2]} if shared else set()
    sspec = gr.SplitSpec(sep_names, parts, plan, transforms, shared_nodes, scheme.pairs, labels)
    order = {p.name: i for i, p in enumerate(parts)}
    sep_index = {s: i for i, s in enumerate(sep_names)}
    copies = dict(sorted(copies.items(), key=lambda kv: (order[kv[0][1]], sep_index[kv[0][0]])))
    nodes_graph = gr.ModelGraph(nodes, blocks=blocks)
    gr.check(nodes_graph)
    return gr.SplitModel(nodes_graph, sspec, copies, partition_nodes), sspec


def single_node_split(g: NmaGraph, edge_jk: str, share_variance: bool = True):
    """Indirect evidence versus direct evidence (studies containing both J and K) on JK."""
    if not isinstance(g, NmaGraph):
        raise NmaError("single_node_split needs a graph from build_nma_graph")
    arms, spec = g.arms, g.nma_spec
    e = edge(*edge_jk)
    groups = studies(arms)
    direct = [s for s, grp in groups.items() if e in study_edges(grp)]
    if not direct:
        raise NoDirectEvidence(f"no study compares {e[0]} and {e[1]} directly")
    indirect = [s for s in groups if s not in direct]
    if not indirect:
        raise NoDirectEvidence(f"no indirect evidence on {e}")
    ts = treatments(arms)
    star = tuple(star_basis(ts, spec.reference))
    pairs = [edge(j, k) for j, k in itertools.combinations(ts, 2)]
    direct_basis = tuple(_forest(pairs, (e,) + star))
    scheme = PartitionScheme("custom", star, IN_DE, (tuple(indirect), tuple(direct)), (e,),
                             share_variance=share_variance, name=f"split-{e}",
                             bases=(star, direct_basis))
    return split_nma(g, scheme)
