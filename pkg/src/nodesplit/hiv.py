"""Polish HIV prevalence model, its saturated split and leave-n-out splits.

Basic parameters: prevalence rho, proportion diagnosed pi and the share
kappa of diagnosed infections that are known. The number diagnosed
D = N * rho * pi * kappa is constrained to lie between stochastic bounds
D_L and D_U through an auxiliary Bernoulli datum equal to one.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

from . import graph as gr

# separator order used by every split of the model
SEPARATORS = ("rho", "pk", "pnk", "D_L", "D_U", "D")
LABELS = {"rho": "rho", "pk": "pi*kappa", "pnk": "pi*(1-kappa)", "pi": "pi",
          "kappa": "kappa", "D_L": "D_L", "D_U": "D_U", "D": "D"}
TRANSFORMS = {"rho": "logit", "pk": "logit", "pnk": "logit", "pi": "logit",
              "kappa": "logit", "D_L": "log", "D_U": "log", "D": "log"}
# datum -> node it directly informs
INFORMS = {"y1": "rho", "y2": "pk", "y3": "pnk", "y4": "D_L", "y5": "D_U"}
DATA = ("y1", "y2", "y3", "y4", "y5")
CONSTRAINT = "c_obs"
# model order (A), (B), ...: pairs of proportion data first, then mixed, then counts
LEAVE_OUT_ORDER = {
    1: (("y1",), ("y2",), ("y3",), ("y4",), ("y5",)),
    2: (("y1", "y2"), ("y1", "y3"), ("y2", "y3"), ("y1", "y4"), ("y1", "y5"),
        ("y2", "y4"), ("y2", "y5"), ("y3", "y4"), ("y3", "y5"), ("y4", "y5")),
}


@dataclass(frozen=True)
class HivData:
    N: float = 15_749_944
    y1: int = 35
    n1: int = 1536
    y2: int = 113
    n2: int = 2840
    y3: int = 136
    n3: int = 2725
    y4: int = 836
    y5: int = 5034
    # log-normal prior on the bounds D_L and D_U
    bound_mu: float = 3.25
    bound_sigma: float = 10.5

    def __post_init__(self):
        for y, n in ((self.y1, self.n1), (self.y2, self.n2), (self.y3, self.n3)):
            if not 0 <= y <= n:
                raise ValueError(f"binomial count {y} out of range for {n} trials")
        if self.y4 < 0 or self.y5 < 0 or self.N <= 0:
            raise ValueError("counts and population must be non-negative")
        if not self.bound_sigma > 0:
            raise ValueError("bound_sigma must be positive")

    @classmethod
    def from_table(cls, path, **overrides) -> "HivData":
        """Read rows ``name, y, n, likelihood`` (n blank for Poisson rows).

        A row named ``N`` sets the population size.
        """
        vals = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                name = row["name"].strip()
                if name == "N":
                    vals["N"] = float(row["y"])
                    continue
                if name not in INFORMS:
                    raise ValueError(f"unknown HIV datum {name!r}")
                lik = row.get("likelihood", "").strip().lower()
                expected = "poisson" if name in ("y4", "y5") else "binomial"
                if lik and lik != expected:
                    raise ValueError(f"{name} must have a {expected} likelihood, got {lik!r}")
                vals[name] = int(row["y"])
                if expected == "binomial":
                    vals["n" + name[1:]] = int(row["n"])
        vals.update(overrides)
        return cls(**vals)


def build_hiv_graph(data: HivData = HivData()) -> gr.ModelGraph:
    bound = f"lognormal({data.bound_mu!r}, {data.bound_sigma!r})"
    nodes = [
        gr.founder("rho", "uniform(0, 1)"),
        gr.founder("pi", "uniform(0, 1)"),
        gr.founder("kappa", "uniform(0, 1)"),
        gr.deterministic("pk", "pi * kappa", gr.UNIT),
        gr.deterministic("pnk", "pi * (1 - kappa)", gr.UNIT),
        gr.deterministic("D", "N * rho * pk", gr.POSITIVE),
        gr.founder("D_L", bound),
        gr.founder("D_U", bound),
        gr.deterministic("c", "indicator(D_L, D, D_U)", gr.UNIT),
        gr.observed(CONSTRAINT, "bernoulli(c)", 1),
        gr.observed("y1", f"binomial({data.n1}, rho)", data.y1),
        gr.observed("y2", f"binomial({data.n2}, pk)", data.y2),
        gr.observed("y3", f"binomial({data.n3}, pnk)", data.y3),
        gr.observed("y4", "poisson(D_L)", data.y4),
        gr.observed("y5", "poisson(D_U)", data.y5),
    ]
    return gr.ModelGraph(nodes, {"N": float(data.N)})


def saturated_split(g: gr.ModelGraph):
    """Separate the prior model from every likelihood contribution.

    The prior partition keeps the original priors and the constraint; each
    likelihood partition gives its directly informed parameter a Jeffreys
    prior. D_L, D_U and D share a partition so that D can be bounded there.
    """
    parts = [gr.Partition("prior", (CONSTRAINT,)), gr.Partition("y1", ("y1",)),
             gr.Partition("y2", ("y2",)), gr.Partition("y3", ("y3",)),
             gr.Partition("y45", ("y4", "y5"))]
    plan = {s: [gr.CopySpec("prior")] for s in SEPARATORS}
    plan["rho"].append(gr.CopySpec("y1", prior="jeffreys_proportion()"))
    plan["pk"].append(gr.CopySpec("y2", prior="jeffreys_proportion()"))
    plan["pnk"].append(gr.CopySpec("y3", prior="jeffreys_proportion()"))
    plan["D_L"].append(gr.CopySpec("y45", prior="jeffreys_rate()"))
    plan["D_U"].append(gr.CopySpec("y45", prior="jeffreys_rate()"))
    plan["D"].append(gr.CopySpec("y45", prior="uniform(D_L, D_U)"))
    spec = gr.SplitSpec(SEPARATORS, parts, plan, {s: TRANSFORMS[s] for s in SEPARATORS},
                        labels=LABELS)
    return gr.split(g, spec), spec


@dataclass(frozen=True)
class LeaveOutSpec:
    model: str                 # "(A)", "(B)", ...
    left_out: tuple
    split_nodes: tuple
    spec: gr.SplitSpec = field(repr=False, compare=False, default=None)

    @property
    def family(self) -> str:
        return f"leave-{len(self.left_out)}-out"

    @property
    def name(self) -> str:
        return f"{self.family} {self.model}"


def _leave_out_spec(left_out: tuple) -> tuple:
    informed = tuple(INFORMS[d] for d in left_out)
    rest = tuple(d for d in DATA if d not in left_out) + (CONSTRAINT,)
    parts = (gr.Partition("1", left_out), gr.Partition("2", rest))
    if set(informed) == {"pk", "pnk"}:
        # pi and kappa are identified by y2 and y3 together: split them too
        seps = ("pk", "pnk", "pi", "kappa")
        plan = {"pk": [gr.CopySpec("1"), gr.CopySpec("2")],
                "pnk": [gr.CopySpec("1"), gr.CopySpec("2")],
                "pi": [gr.CopySpec("1", prior="jeffreys_proportion()"), gr.CopySpec("2")],
                "kappa": [gr.CopySpec("1", prior="jeffreys_proportion()"), gr.CopySpec("2")]}
    elif set(informed) == {"D_L", "D_U"}:
        seps = ("D_L", "D_U", "D")
        plan = {"D_L": [gr.CopySpec("1", prior="jeffreys_rate()"), gr.CopySpec("2")],
                "D_U": [gr.CopySpec("1", prior="jeffreys_rate()"), gr.CopySpec("2")],
                "D": [gr.CopySpec("1", prior="uniform(D_L, D_U)"), gr.CopySpec("2")]}
    else:
        seps = informed
        plan = {s: [gr.CopySpec("1", prior=str(gr.jeffreys_for(
            gr.UNIT if TRANSFORMS[s] == "logit" else gr.POSITIVE))), gr.CopySpec("2")]
            for s in seps}
    spec = gr.SplitSpec(seps, parts, plan, {s: TRANSFORMS[s] for s in seps}, labels=LABELS)
    return seps, spec


def leave_n_out_splits(g: gr.ModelGraph, n: int) -> list:
    """Leave-n-out split models (A), (B), ... for n in {1, 2}."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    out = []
    for i, left in enumerate(LEAVE_OUT_ORDER[n]):
        seps, spec = _leave_out_spec(left)
        lo = LeaveOutSpec(f"({chr(ord('A') + i)})", left, seps, spec)
        out.append((lo, gr.split(g, spec)))
    return out


def with_bound_prior(data: HivData, mu: float, sigma: float) -> HivData:
    return replace(data, bound_mu=mu, bound_sigma=sigma)
