"""Command-line interface.

Commands ``fit``, ``split-fit``, ``nma``, ``hiv`` and ``simulate-null`` run
an analysis and write its artifacts to ``--out``; ``rerun`` repeats a run
recorded in a manifest. Exit status is 0 on success, 2 when the input is
invalid and 3 when the sampler fails.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import platform
import re
import sys
import tempfile
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import analysis as an
from . import config as cfgio
from . import conflict as cf
from . import engine as en
from . import graph as gr
from . import hiv
from . import nma

EXIT_OK, EXIT_INVALID, EXIT_SAMPLER = 0, 2, 3

# builtin -> (domain, kind)
BUILTINS = {
    "smoking-common": ("nma", "fit"),
    "smoking-random": ("nma", "fit"),
    **{f"smoking-scheme-{k}": ("nma", "split") for k in "bcdef"},
    "hiv-original": ("hiv", "fit"),
    "hiv-saturated": ("hiv", "split"),
    "hiv-leave1": ("hiv", "leave"),
    "hiv-leave2": ("hiv", "leave"),
}
HIV_ANALYSES = {"original": "hiv-original", "saturated": "hiv-saturated",
                "leave1": "hiv-leave1", "leave2": "hiv-leave2"}


class InputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, model_inputs: bool = True) -> None:
    if model_inputs:
        p.add_argument("--builtin", choices=sorted(BUILTINS), help="builtin analysis")
        p.add_argument("--model", help="model file (TOML)")
        p.add_argument("--data", help="data table (CSV)")
        p.add_argument("--mvn-points", type=int, default=an.ConflictOptions.n_points,
                       help="lattice points for MVN probabilities")
        p.add_argument("--pinv-tol", type=float, default=cf.PINV_TOL,
                       help="relative eigenvalue cut-off of the pseudo-inverse")
        p.add_argument("--pvalue-method", choices=cf.PVALUE_METHODS, default="tail",
                       help="single-contrast conflict p-value")
        p.add_argument("--workers", type=int, default=1,
                       help="processes for independent model fits")
        p.add_argument("--save-draws", action="store_true", help="also write all draws")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--chains", type=int)
    p.add_argument("--iters", type=int, help="iterations per chain, burn-in included")
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("table", "json"), default="table",
                   help="what to print on standard output")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nodesplit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("fit", help="fit a model"))
    _common(sub.add_parser("split-fit", help="fit a split model and test for conflict"))
    p = sub.add_parser("nma", help="network meta-analysis of binary outcomes")
    _common(p)
    p.add_argument("--effects", choices=(nma.COMMON, nma.RANDOM), default=nma.RANDOM)
    p.add_argument("--reference", default="A")
    p.add_argument("--tree", help="spanning tree edges, e.g. AB,AC,AD")
    p.add_argument("--placement", choices=(nma.IN_ST, nma.IN_DE, nma.OWN), default=nma.IN_ST,
                   help="where multi-arm studies go when splitting by --tree")
    p.add_argument("--split-edge", help="split a single comparison, e.g. BC")
    p.add_argument("--separate-variance", action="store_true",
                   help="give each partition its own random-effect sd")
    p = sub.add_parser("hiv", help="HIV prevalence evidence synthesis")
    _common(p)
    p.add_argument("--analysis", choices=sorted(HIV_ANALYSES))
    p.add_argument("--bound-mu", type=float)
    p.add_argument("--bound-sigma", type=float)
    p = sub.add_parser("simulate-null", help="null distribution of the conflict p-value")
    _common(p, model_inputs=False)
    p.add_argument("--replicates", type=int, default=500)
    p.add_argument("--shift", type=float, default=0.0, help="shift in sd units of the contrast")
    p.add_argument("--pvalue-method", choices=cf.PVALUE_METHODS, default="tail")
    p = sub.add_parser("rerun", help="repeat a run recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return ap


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path: Path, header: list, rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) if isinstance(r, dict) else _fmt(v) for h, v in
                    (zip(header, header) if isinstance(r, dict) else zip(header, r))])
    _atomic_write(path, buf.getvalue().encode())


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, (json.dumps(_clean(obj), indent=2) + "\n").encode())


def _slug(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", s).strip("_") or "x"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import matplotlib
    import networkx
    import numba
    import scipy
    return {"nodesplit": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__,
            "networkx": networkx.__version__, "matplotlib": matplotlib.__version__}


POSTERIOR_COLUMNS = ["model", "node", "mean", "sd", "q025", "median", "q975", "mcse", "psrf"]
DEVIANCE_COLUMNS = ["model", "datum", "mean_deviance", "plugin_deviance", "p_D", "DIC"]
REPORT_COLUMNS = ["model", "label", "mean", "sd", "z", "p_U", "p_normal", "p_A", "skew",
                  "kurtosis", "flags"]
LEAVE_COLUMNS = ["family", "model", "partition1", "label", "mean", "sd", "p_U", "p_AW", "p_AL",
                 "p_AA", "flags"]


class Writer:
    def __init__(self, out: Path, fmt: str, save_draws: bool = False):
        self.out = out
        self.fmt = fmt
        self.save_draws = save_draws
        self.posterior, self.deviance, self.report, self.models = [], [], [], []
        self.curves = []
        self.leave_rows = None
        self.mcse_bad = []
        out.mkdir(parents=True, exist_ok=True)

    def add_fit(self, f: an.FitResult) -> None:
        rows = an.posterior_summary(f.graph, f.samples)
        self.posterior += [dict(model=f.name, **r) for r in rows]
        self.mcse_bad += [(f.name, r["node"], r["mcse"]) for r in rows
                          if not r["mcse"] <= an.MCSE_TOLERANCE]
        d = f.deviance
        self.deviance.append(dict(model=f.name, datum="total", mean_deviance=d.mean_deviance,
                                  plugin_deviance=d.plugin_deviance, p_D=d.p_D, DIC=d.dic))
        for k, (a, b, c, e) in d.per_datum.items():
            self.deviance.append(dict(model=f.name, datum=k, mean_deviance=a, plugin_deviance=b,
                                      p_D=c, DIC=e))
        entry = {"name": f.name, "deviance": {"mean_deviance": d.mean_deviance,
                                              "plugin_deviance": d.plugin_deviance,
                                              "p_D": d.p_D, "DIC": d.dic},
                 "acceptance": f.samples.acceptance}
        if f.report is not None:
            r = f.report
            rows = r.rows()
            self.report += [dict(model=f.name, **x) for x in rows]
            entry["global"] = r.global_summary()
            entry["contrasts"] = rows
            for k, x in enumerate(rows):
                xs, dens = cf.density_curve(f.contrasts.delta_draws[:, k])
                self.curves.append((f.name, x["label"], xs, dens, x["p_U"], x["p_A"]))
        self.models.append(entry)
        if self.save_draws:
            f.samples.to_csv(self.out / f"draws_{_slug(f.name)}.csv")

    def finish(self) -> list:
        files = []
        p = self.out / "posterior.csv"
        _write_csv(p, POSTERIOR_COLUMNS, self.posterior)
        files.append(p)
        p = self.out / "deviance.csv"
        _write_csv(p, DEVIANCE_COLUMNS, self.deviance)
        files.append(p)
        if self.report:
            p = self.out / "conflict_report.csv"
            if self.leave_rows is not None:
                _write_csv(p, LEAVE_COLUMNS, self.leave_rows)
            else:
                _write_csv(p, REPORT_COLUMNS, self.report)
            files.append(p)
            p = self.out / "conflict_report.json"
            obj = {"models": self.models}
            if self.leave_rows is not None:
                obj["leave_n_out"] = self.leave_rows
            _write_json(p, obj)
            files.append(p)
            files += self._densities()
        else:
            p = self.out / "summary.json"
            _write_json(p, {"models": self.models})
            files.append(p)
        if self.save_draws:
            files += sorted(self.out.glob("draws_*.csv"))
        return files

    def _densities(self) -> list:
        from . import plotting
        d = self.out / "densities"
        d.mkdir(exist_ok=True)
        files, index, grids = [], [], {}
        multi = len({c[0] for c in self.curves}) > 1
        for model, label, xs, dens, p_u, p_a in self.curves:
            stem = _slug(f"{model} {label}" if multi else label)
            p = d / f"{stem}.csv"
            _write_csv(p, ["x", "density"], list(zip(xs, dens)))
            png = d / f"{stem}.png"
            plotting.plot_density(png, xs, dens, f"{model}: {label}" if multi else label, p_u, p_a)
            files += [p, png]
            index.append(dict(model=model, label=label, file=p.name, plot=png.name, p_U=p_u,
                              p_A=p_a))
            grids.setdefault(model, []).append((label, xs, dens, p_u, p_a))
        for model, curves in grids.items():
            png = d / (f"overview_{_slug(model)}.png" if multi else "overview.png")
            plotting.plot_grid(png, curves)
            files.append(png)
        p = d / "index.csv"
        _write_csv(p, ["model", "label", "file", "plot", "p_U", "p_A"], index)
        files.append(p)
        return files

    def print_summary(self, stream=None) -> None:
        stream = stream or sys.stdout
        if self.fmt == "json":
            json.dump(_clean({"models": self.models, "leave_n_out": self.leave_rows}), stream,
                      indent=2)
            stream.write("\n")
            return
        for m in self.models:
            d = m["deviance"]
            stream.write(f"== {m['name']}\n")
            stream.write(f"   E[D] {d['mean_deviance']:.3f}  D(mean) {d['plugin_deviance']:.3f}"
                         f"  p_D {d['p_D']:.3f}  DIC {d['DIC']:.3f}\n")
            if "global" in m and self.leave_rows is None:
                g = m["global"]
                stream.write(f"   global chi2 {g['chi2']:.3f} on {g['chi2_df']} df, "
                             f"p = {g['chi2_pvalue']:.4f}; max-T p = {g['maxT_pvalue']:.4f}\n")
                stream.write(f"   {'contrast':<24}{'mean':>10}{'sd':>9}{'p_U':>9}{'p_A':>9}  flags\n")
                for r in m["contrasts"]:
                    stream.write(f"   {r['label']:<24}{r['mean']:>10.3f}{r['sd']:>9.3f}"
                                 f"{r['p_U']:>9.4f}{r['p_A']:>9.4f}  {r['flags']}\n")
        if self.leave_rows is not None:
            stream.write(f"   {'model':<22}{'split':<16}{'p_U':>9}{'p_AW':>9}{'p_AL':>9}{'p_AA':>9}\n")
            for r in self.leave_rows:
                stream.write(f"   {r['family'] + ' ' + r['model']:<22}{r['label']:<16}"
                             f"{r['p_U']:>9.4f}{r['p_AW']:>9.4f}{r['p_AL']:>9.4f}"
                             f"{r['p_AA']:>9.4f}\n")


# ---------------------------------------------------------------------------
# dispatch


def _sampler_config(args, profile: Optional[dict]) -> en.SamplerConfig:
    base = en.SamplerConfig(**(profile or {}))
    over = {k: v for k, v in (("chains", args.chains), ("iterations", args.iters),
                              ("burn_in", args.burnin), ("thin", args.thin)) if v is not None}
    return replace(base, seed=args.seed, **over)


def _resolve_builtin(args) -> Optional[str]:
    if args.command == "hiv" and args.analysis:
        name = HIV_ANALYSES[args.analysis]
        if args.builtin and args.builtin != name:
            raise InputError("--analysis and --builtin disagree")
        return name
    return args.builtin


def _check_inputs(args, builtin: Optional[str]) -> None:
    if builtin and args.model:
        raise InputError("give either --builtin or --model, not both")
    if builtin:
        domain, kind = BUILTINS[builtin]
        if args.command == "fit" and kind != "fit":
            raise InputError(f"{builtin} is a split analysis; use split-fit")
        if args.command == "split-fit" and kind == "fit":
            raise InputError(f"{builtin} has no split; use fit")
        if args.command in ("nma", "hiv") and domain != args.command:
            raise InputError(f"{builtin} is not a {args.command} analysis")
        if args.data and domain == "nma":
            raise InputError("smoking builtins use the embedded data; drop --data")
    elif args.command in ("fit", "split-fit") and not args.model:
        raise InputError(f"{args.command} needs --builtin or --model")
    if args.model and not Path(args.model).is_file():
        raise InputError(f"model file {args.model} does not exist")
    if args.data and not Path(args.data).is_file():
        raise InputError(f"data file {args.data} does not exist")
    if args.workers < 1:
        raise InputError("--workers must be at least 1")


def _hiv_data(args) -> hiv.HivData:
    over = {}
    if getattr(args, "bound_mu", None) is not None:
        over["bound_mu"] = args.bound_mu
    if getattr(args, "bound_sigma", None) is not None:
        over["bound_sigma"] = args.bound_sigma
    if args.data:
        return hiv.HivData.from_table(args.data, **over)
    return replace(hiv.HivData(), **over)


def _run_builtin(name: str, args, w: Writer) -> None:
    domain, kind = BUILTINS[name]
    opts = _options(args)
    cfg = _sampler_config(args, an.NMA_PROFILE if domain == "nma" else an.HIV_PROFILE)
    if name in ("smoking-common", "smoking-random"):
        w.add_fit(an.smoking_consistency(name.split("-")[1], cfg))
    elif name.startswith("smoking-scheme-"):
        w.add_fit(an.smoking_scheme(name[-1], cfg, opts))
    elif name == "hiv-original":
        w.add_fit(an.hiv_original(cfg, _hiv_data(args)))
    elif name == "hiv-saturated":
        w.add_fit(an.hiv_saturated(cfg, opts, _hiv_data(args)))
    else:
        table = an.hiv_leave_n_out(cfg, opts, _hiv_data(args), workers=args.workers)
        n = int(name[-1])
        for f, lo in zip(table.fits, table.specs):
            if len(lo.left_out) == n:
                w.add_fit(f)
        w.leave_rows = table.rows(n)


def _options(args) -> an.ConflictOptions:
    return an.ConflictOptions(n_points=args.mvn_points, pinv_tol=args.pinv_tol,
                              pvalue_method=args.pvalue_method)


def _run_model_file(args, w: Writer) -> None:
    g, spec = cfgio.load_model(args.model)
    cfg = _sampler_config(args, None)
    if args.command == "fit":
        w.add_fit(an.fit(g, cfg, Path(args.model).stem))
        return
    if spec is None:
        raise InputError("model file has no [split] table")
    sm = gr.split(g, spec)
    w.add_fit(an.split_fit(sm, spec, cfg, _options(args), Path(args.model).stem))


def _run_nma_data(args, w: Writer) -> None:
    if not args.data:
        raise InputError("nma needs --builtin or --data")
    arms = nma.read_arms(args.data)
    g = nma.build_nma_graph(arms, nma.NmaSpec(reference=args.reference, effect_model=args.effects))
    cfg = _sampler_config(args, an.NMA_PROFILE)
    name = Path(args.data).stem
    if args.split_edge:
        sm, spec = nma.single_node_split(g, args.split_edge, not args.separate_variance)
        w.add_fit(an.split_fit(sm, spec, cfg, _options(args), f"{name}-split-{args.split_edge}",
                               check_convergence=False))
    elif args.tree:
        tree = [e.strip() for e in args.tree.split(",") if e.strip()]
        schemes = nma.enumerate_schemes(arms, tree, not args.separate_variance)
        chosen = [s for s in schemes if s.multi_arm_placement == args.placement]
        if not chosen:
            raise InputError(f"no scheme with multi-arm placement {args.placement} for this tree")
        sm, spec = nma.split_nma(g, chosen[0])
        w.add_fit(an.split_fit(sm, spec, cfg, _options(args), f"{name}-{args.placement}",
                               check_convergence=False))
    else:
        w.add_fit(an.fit(g, cfg, f"{name}-{args.effects}"))


def _run_simulate_null(args, w_out: Path) -> list:
    cfg = _sampler_config(args, dict(chains=2, iterations=6000, burn_in=1000, thin=5))
    r = an.simulate_null(args.replicates, seed=args.seed, shift=args.shift,
                         method=args.pvalue_method, cfg=cfg)
    p1 = w_out / "null_pvalues.csv"
    _write_csv(p1, ["replicate", "p"], list(enumerate(r.pvalues.tolist(), start=1)))
    p2 = w_out / "null_report.json"
    _write_json(p2, r.as_dict())
    if args.format == "json":
        print(json.dumps(_clean(r.as_dict()), indent=2))
    else:
        print(f"replicates {r.replicates}, shift {r.shift} sd: KS D = {r.ks_statistic:.4f}, "
              f"p = {r.ks_pvalue:.4f}; fraction p < 0.05 = {r.fraction_below_05:.3f}")
    return [p1, p2]


def _manifest_argv(argv: list) -> list:
    out, skip = [], False
    for i, a in enumerate(argv):
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def _execute(args, argv: list) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "simulate-null":
        files = _run_simulate_null(args, out)
        resolved = {"command": args.command, "replicates": args.replicates, "shift": args.shift,
                    "seed": args.seed, "pvalue_method": args.pvalue_method}
    else:
        builtin = _resolve_builtin(args)
        _check_inputs(args, builtin)
        w = Writer(out, args.format, args.save_draws)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", en.NonConvergence)
            if builtin:
                _run_builtin(builtin, args, w)
            elif args.model:
                _run_model_file(args, w)
            elif args.command == "nma":
                _run_nma_data(args, w)
            else:
                if not args.data:
                    raise InputError("hiv needs --builtin, --analysis or --data")
                args.analysis = args.analysis or "original"
                _run_builtin(HIV_ANALYSES[args.analysis], args, w)
        for c in caught:
            if issubclass(c.category, en.NonConvergence):
                print(f"warning: {c.message}", file=sys.stderr)
        if w.mcse_bad:
            worst = max(w.mcse_bad, key=lambda t: t[2] if math.isfinite(t[2]) else math.inf)
            print(f"warning: Monte Carlo standard error above {an.MCSE_TOLERANCE} on the "
                  f"transformed scale for {len(w.mcse_bad)} node(s); worst {worst[0]}:{worst[1]} "
                  f"= {worst[2]:.4g}. Consider longer runs (--iters).", file=sys.stderr)
        files = w.finish()
        w.print_summary()
        resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "format")}
        resolved["builtin"] = builtin
    cfg_text = json.dumps(_clean(resolved), sort_keys=True)
    manifest = {
        "argv": _manifest_argv(argv),
        "seed": args.seed,
        "config": _clean(resolved),
        "config_hash": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "versions": _versions(),
        "artifacts": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    _write_json(out / "manifest.json", manifest)
    return EXIT_OK


def main(argv: Optional[list] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        if args.command == "rerun":
            m = json.loads(Path(args.manifest).read_text())
            if "argv" not in m:
                raise InputError("manifest has no argv record")
            new = list(m["argv"]) + ["--out", args.out]
            return main(new)
        return _execute(args, argv)
    except en.SamplerError as e:
        print(f"sampler error: {e}", file=sys.stderr)
        return EXIT_SAMPLER
    except (InputError, cfgio.ConfigError, gr.GraphError, nma.NmaError, cf.ConflictError,
            FileNotFoundError, json.JSONDecodeError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
