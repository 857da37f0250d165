"""Command-line front end: ``stiffinfer <command> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
Every command that writes files also writes ``manifest.json`` next to them,
listing each output with its SHA-256 digest.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import FAILURE_THRESHOLD, N_BINS, SUPPORT

log = logging.getLogger("stiffinfer")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numerical failure here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: dict
    version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: list = field(default_factory=list)

    def add(self, path: Path):
        data = Path(path).read_bytes()
        self.outputs.append({"path": Path(path).name, "bytes": len(data),
                             "sha256": hashlib.sha256(data).hexdigest()})

    def write(self, directory: Path):
        self.finished = _now()
        p = Path(directory) / "manifest.json"
        p.write_text(json.dumps(asdict(self), indent=2, default=_json_default) + "\n")
        return p


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _dump_json(obj, path=None):
    text = json.dumps(obj, indent=2, default=_json_default, allow_nan=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)
    return text


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise UsageError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def _out_paths(out, command, default_name):
    """Resolve --out into (run directory, primary output file)."""
    if out is None:
        d = Path("stiffinfer-out") / command
        f = d / default_name
    else:
        p = Path(out)
        if p.suffix:
            d, f = p.parent, p
        else:
            d, f = p, p / default_name
    d.mkdir(parents=True, exist_ok=True)
    return d, f


def _threads(args):
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("STIFFINFER_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"STIFFINFER_THREADS must be an integer, got {env!r}") from None
    return 1


def _deep_merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _scenario(name, config_path=None):
    from .scenarios import Scenario, load_scenario, tomllib

    sc = load_scenario(name)
    if config_path:
        p = Path(config_path)
        try:
            over = tomllib.loads(p.read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {p}: {exc.strerror}") from None
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"invalid TOML in {p}: {exc}") from None
        sc = Scenario.from_config(_deep_merge(sc.config, over), p.parent)
    return sc


# ---- commands -------------------------------------------------------------

def cmd_mech_validate(args):
    from .mechanism import MechanismError, load_bundled, load_mechanism

    if args.path is None:
        args.path = "<bundled h2o2>"
        mech = load_bundled()
    else:
        mech = None
    try:
        mech = mech or load_mechanism(args.path)
    except MechanismError as exc:
        info = {"path": str(args.path), "valid": False, "error": str(exc)}
        for k in ("line", "field", "invariant"):
            if getattr(exc, k, None) is not None:
                info[k] = getattr(exc, k)
        _dump_json(info)
        return EXIT_INVALID
    except OSError as exc:
        raise UsageError(f"cannot read {args.path}: {exc.strerror}") from None
    _dump_json({"path": str(args.path), "valid": True, "n_species": mech.n_s,
                "n_elements": mech.n_e, "n_reactions": mech.n_r,
                "species": list(mech.species_names)})
    return EXIT_OK


def cmd_scenario_show(args):
    sc = _scenario(args.name, args.config)
    _dump_json(sc.resolved())
    return EXIT_OK


def cmd_scenario_list(args):
    from .scenarios import list_scenarios

    _dump_json(list_scenarios())
    return EXIT_OK


_SIM_MODELS = {"robertson": "robertson", "h2-adiabatic": "h2-autoignition",
               "h2-isothermal": "h2-autoignition"}


def cmd_simulate(args):
    from .stiffode import flow_map

    sc = _scenario(args.scenario or _SIM_MODELS[args.model], args.config)
    model = sc.isothermal_variant() if args.model == "h2-isothermal" else sc.model
    grid = sc.t_grid if args.t_end is None else sc.t_grid[sc.t_grid <= args.t_end]
    if grid.size == 0:
        raise UsageError("no output times at or below --t-end")
    if args.sens:
        ys, As = flow_map(model, sc.phi0, grid, sc.solver, with_sens=True)
    else:
        ys, As = flow_map(model, sc.phi0, grid, sc.solver), None
    names = sc.species_names
    n = len(names)
    # Robertson has no temperature column
    has_T = model.temperature(sc.phi0) is not None
    header = ["t", *names] + (["T"] if has_T else [])
    if args.sens:
        header += [f"A_{i + 1}_{j + 1}" for i in range(n) for j in range(n)]
    rows = []
    for k, (t, y) in enumerate(zip([0.0, *grid], [sc.phi0, *ys])):
        row = [t, *np.maximum(y, 0.0)] + ([model.temperature(y)] if has_T else [])
        if args.sens:
            row += list((np.eye(n) if k == 0 else As[k - 1]).ravel())
        rows.append(row)
    d, f = _out_paths(args.out, "simulate", "trajectory.csv")
    _write_csv(f, header, rows)
    man = RunManifest("simulate", sys.argv[1:], {"scenario": sc.resolved(), "model": args.model},
                      {"seed": args.seed}, started=args.started)
    man.add(f)
    man.write(d)
    return EXIT_OK


def cmd_rank(args):
    from .manifold import DEFAULT_RANK_THRESHOLD, conserved_basis, rank_descent_times
    from .stiffode import integrate_with_sensitivity

    sc = _scenario(args.scenario, args.config)
    thr = DEFAULT_RANK_THRESHOLD if args.threshold is None else args.threshold
    sens = integrate_with_sensitivity(sc.model, sc.phi0, sc.t_grid[-1], sc.solver, t_out=sc.t_grid)
    basis = conserved_basis(sc.element_matrix())
    rep = rank_descent_times(sens, basis, thr, times=sc.t_grid)
    d, f = _out_paths(args.out, "rank", "rank.csv")
    header, rows = rep.to_rows()
    _write_csv(f, header, rows)
    T = sc.anchors.get("T")
    label = f"{T:g}" if T is not None else sc.name
    js = d / (f.stem + "_summary.json")
    _dump_json(rep.summary(label), js)
    man = RunManifest("rank", sys.argv[1:], {"scenario": sc.resolved(), "threshold": thr},
                      {"seed": args.seed}, started=args.started)
    man.add(f)
    man.add(js)
    man.write(d)
    _dump_json(rep.summary(label))
    return EXIT_OK


def _sampler(sc, args):
    from .bayes import SamplerSettings

    s = asdict(sc.sampler)
    for k, a in (("n_chains", "chains"), ("n_draws", "draws"), ("n_warmup", "warmup"),
                 ("max_tree_depth", "max_tree_depth"), ("delta", "delta")):
        v = getattr(args, a, None)
        if v is not None:
            s[k] = v
    if getattr(args, "adapt_metric", False):
        s["adapt_metric"] = True
    return SamplerSettings(**s)


def cmd_infer(args):
    from .bayes import run_inference, sample_truth

    sc = _scenario(args.scenario, args.config)
    if sc.truth is None:
        raise UsageError(f"scenario {sc.name!r} has no truth distribution to infer")
    settings = _sampler(sc, args)
    cfg = sc.inference_solver or sc.solver
    res = run_inference(sc.truth, sc.model, args.tobs, args.mode, settings, args.seed, cfg,
                        threads=_threads(args))
    names = sc.species_names
    d, _ = _out_paths(args.out, "infer", "draws.csv")
    rows = []
    for c, ch in enumerate(res.chains):
        for i, x in enumerate(ch.draws):
            rows.append([c, i, *x])
    _write_csv(d / "draws.csv", ["chain", "draw", *names], rows)
    _write_csv(d / "truth.csv", names, res.truth)
    # uniform prior samples on the same box, from a stream separate from truth and chains
    rng = np.random.default_rng([args.seed, 2])
    prior = rng.uniform(sc.truth.lower, sc.truth.upper, (sc.truth.n_truth, sc.truth.dim))
    _write_csv(d / "prior.csv", names, prior)
    from .metrics import verdict_from_draws

    verdict = verdict_from_draws(res.normalized_draws, names)
    report = {"scenario": sc.name, "t_obs": args.tobs, "mode": args.mode, "seed": args.seed,
              "n_truth": sc.truth.n_truth, "sampler": asdict(settings),
              "observation": res.observation.to_dict(), "diagnostics": res.diagnostics(),
              "step_sizes": [c.step_size for c in res.chains],
              "verdict": verdict.to_dict()}
    _dump_json(report, d / "report.json")
    man = RunManifest("infer", sys.argv[1:], {"scenario": sc.resolved(), "sampler": asdict(settings)},
                      {"seed": args.seed, "truth_stream": [args.seed, 0],
                       "chain_streams": [[args.seed, 1, c] for c in range(settings.n_chains)],
                       "prior_stream": [args.seed, 2]}, started=args.started)
    for name in ("draws.csv", "truth.csv", "prior.csv", "report.json"):
        man.add(d / name)
    man.write(d)
    _dump_json({"out": str(d), "failed": verdict.failed, "diagnostics": {
        k: report["diagnostics"][k] for k in ("max_rhat", "min_ess")}})
    return EXIT_OK


def _numeric_columns(path, names=None):
    header, rows = _read_csv(path)
    skip = {"chain", "draw"}
    cols = [i for i, h in enumerate(header) if h not in skip]
    if names is not None:
        missing = [n for n in names if n not in header]
        if missing:
            raise UsageError(f"{path}: missing columns {missing}")
        cols = [header.index(n) for n in names]
    try:
        data = np.array([[float(r[i]) for i in cols] for r in rows])
    except (ValueError, IndexError):
        raise UsageError(f"{path}: non-numeric or ragged data") from None
    return [header[i] for i in cols], data


def cmd_jsd(args):
    from .metrics import (estimate_marginal, failure_verdict, prior_density, truth_density)

    names, draws = _numeric_columns(args.draws)
    if args.scenario:
        sc = _scenario(args.scenario, args.config)
        mu, s = sc.truth.mu0, sc.truth.s0
        idx = [sc.species_names.index(n) for n in names]
        norm = lambda x: (x - mu[idx]) / s[idx]
    else:
        norm = lambda x: x
    bins = args.bins
    post = [estimate_marginal(c, bins) for c in norm(draws).T]
    if not args.scenario:
        for n, m in zip(names, post):
            # raw concentrations all land in one or two bins of the normalized support
            if np.count_nonzero(m.probs) <= 2 and np.ptp(draws[:, names.index(n)]) > 0:
                raise UsageError(f"column {n!r} does not look normalized; pass --scenario")
    if args.truth:
        _, t = _numeric_columns(args.truth, names)
        truth = [estimate_marginal(c, bins) for c in norm(t).T]
    else:
        truth = truth_density(bins)
    if args.prior:
        _, p = _numeric_columns(args.prior, names)
        prior = [estimate_marginal(c, bins) for c in norm(p).T]
    else:
        prior = prior_density(bins)
    v = failure_verdict(truth, prior, post, args.threshold, args.base, names)
    d, f = _out_paths(args.out, "jsd", "jsd.json")
    _dump_json(v.to_dict(), f)
    man = RunManifest("jsd", sys.argv[1:], {"bins": bins, "base": args.base,
                                             "threshold": args.threshold},
                      {"seed": args.seed}, started=args.started)
    man.add(f)
    man.write(d)
    _dump_json(v.to_dict())
    return EXIT_OK


def _parse_grid(text):
    try:
        a, b, n = text.split(":")
        return 10.0 ** np.round(np.linspace(float(a), float(b), int(n)), 10)
    except ValueError:
        raise UsageError("--grid must be LOG10_START:LOG10_STOP:N") from None


def cmd_sweep(args):
    from .metrics import failure_time_sweep

    sc = _scenario(args.scenario, args.config)
    if sc.truth is None:
        raise UsageError(f"scenario {sc.name!r} has no truth distribution")
    grid = sc.t_grid if args.grid is None else _parse_grid(args.grid)
    species = args.species.split(",") if args.species else None
    if species:
        unknown = [s for s in species if s not in sc.species_names]
        if unknown:
            raise UsageError(f"unknown species {unknown}; have {sc.species_names}")
    settings = _sampler(sc, args)

    def progress(t, v):
        log.info("t_obs=%.3g failed=%s", t, v.failed)

    res = failure_time_sweep(sc, grid, args.mode, species, args.seed, settings,
                             sc.inference_solver or sc.solver, args.threshold, args.base,
                             stop_on_failure=args.stop_on_failure, threads=_threads(args),
                             progress=progress)
    d, f = _out_paths(args.out, "sweep", "sweep.csv")
    _write_csv(f, list(res.HEADER), res.rows)
    js = d / "failure_times.json"
    _dump_json(res.to_dict(), js)
    man = RunManifest("sweep", sys.argv[1:], {"scenario": sc.resolved(), "grid": grid,
                                               "sampler": asdict(settings), "mode": args.mode},
                      {"seed": args.seed, "truth_stream": [args.seed, 0]}, started=args.started)
    man.add(f)
    man.add(js)
    man.write(d)
    _dump_json(res.to_dict()["log10_critical_times"])
    return EXIT_OK


# ---- parser ---------------------------------------------------------------

def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be a positive number: {text!r}")
    return v


def _global_options(suppress):
    # subcommands repeat the global flags; SUPPRESS keeps an unset sub-level flag from
    # clobbering a value given before the subcommand
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")

    def d(v):
        return argparse.SUPPRESS if suppress else v
    g.add_argument("--seed", type=int, default=d(0), help="master RNG seed (integer, default 0)")
    g.add_argument("--out", default=d(None),
                   help="output directory, or output file path whose parent becomes the run "
                        "directory (default stiffinfer-out/<command>)")
    g.add_argument("--threads", type=int, default=d(None),
                   help="worker threads for chains (count; falls back to STIFFINFER_THREADS, then 1)")
    g.add_argument("--config", default=d(None),
                   help="TOML file merged over the scenario configuration")
    g.add_argument("-v", "--verbose", action="store_true", default=d(False),
                   help="log progress to stderr")
    return common


def build_parser():
    top = _global_options(False)
    common = _global_options(True)

    p = _Parser(prog="stiffinfer", description=__doc__.splitlines()[0], parents=[top])
    p.add_argument("--version", action="version", version=f"stiffinfer {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    mech = sub.add_parser("mech", help="mechanism utilities", parents=[common])
    msub = mech.add_subparsers(dest="mech_command", required=True, parser_class=_Parser)
    mv = msub.add_parser("validate", help="parse and validate a mechanism YAML file",
                         parents=[common])
    mv.add_argument("path", nargs="?", default=None,
                    help="mechanism file (Cantera-style YAML subset); default: bundled h2o2")
    mv.set_defaults(func=cmd_mech_validate)

    sc = sub.add_parser("scenario", help="bundled scenarios", parents=[common])
    ssub = sc.add_subparsers(dest="scenario_command", required=True, parser_class=_Parser)
    ss = ssub.add_parser("show", help="print the resolved scenario as JSON", parents=[common])
    ss.add_argument("name", help="scenario name or path to a scenario TOML file")
    ss.set_defaults(func=cmd_scenario_show)
    sl = ssub.add_parser("list", help="list bundled scenario names", parents=[common])
    sl.set_defaults(func=cmd_scenario_list)

    sim = sub.add_parser("simulate", help="integrate a reactor model and write the trajectory CSV",
                         parents=[common])
    sim.add_argument("--model", choices=sorted(_SIM_MODELS), required=True,
                     help="reactor model; h2-isothermal holds T at the anchor temperature (K)")
    sim.add_argument("--scenario", default=None,
                     help="scenario supplying phi0, output grid (s) and tolerances")
    sim.add_argument("--t-end", type=_positive_float, default=None,
                     help="last output time (s); default is the end of the scenario grid")
    sim.add_argument("--sens", action="store_true",
                     help="append the flattened sensitivity matrix A (dimensionless)")
    sim.set_defaults(func=cmd_simulate)

    rk = sub.add_parser("rank", help="track singular values of the subspace blocks of A",
                        parents=[common])
    rk.add_argument("--scenario", required=True, help="scenario name or TOML path")
    rk.add_argument("--threshold", type=_positive_float, default=None,
                    help="absolute singular-value cutoff for numerical rank (dimensionless, "
                         "default 1e-6)")
    rk.set_defaults(func=cmd_rank)

    def sampler_flags(q):
        q.add_argument("--chains", type=int, default=None, help="number of NUTS chains")
        q.add_argument("--draws", type=int, default=None, help="post-warmup draws per chain")
        q.add_argument("--warmup", type=int, default=None, help="warmup iterations per chain")
        q.add_argument("--max-tree-depth", type=int, default=None, help="NUTS tree depth limit")
        q.add_argument("--delta", type=float, default=None,
                       help="target acceptance statistic in (0, 1)")
        q.add_argument("--adapt-metric", action="store_true",
                       help="adapt a diagonal inverse metric during warmup")

    inf = sub.add_parser("infer", help="sample the initial-composition posterior",
                         parents=[common])
    inf.add_argument("--scenario", required=True, help="scenario name or TOML path")
    inf.add_argument("--tobs", type=_positive_float, required=True, help="observation time (s)")
    inf.add_argument("--mode", choices=["variance", "covariance"], default="variance",
                     help="likelihood covariance: diagonal variances or full covariance")
    sampler_flags(inf)
    inf.set_defaults(func=cmd_infer)

    js = sub.add_parser("jsd", help="Jensen-Shannon failure verdict from sample CSV files",
                        parents=[common])
    js.add_argument("--draws", required=True, help="posterior draws CSV (species columns)")
    js.add_argument("--truth", default=None,
                    help="truth samples CSV; default is the analytic truncated normal")
    js.add_argument("--prior", default=None,
                    help="prior samples CSV; default is the analytic uniform on +/-3 s0")
    js.add_argument("--scenario", default=None,
                    help="normalize columns by this scenario's mu0 and s0; otherwise the CSVs "
                         "must already be in normalized units")
    js.add_argument("--bins", type=int, default=N_BINS,
                    help=f"histogram bins over [{SUPPORT[0]}, {SUPPORT[1]}] (normalized units)")
    js.add_argument("--base", type=float, default=2, help="logarithm base (default 2)")
    js.add_argument("--threshold", type=float, default=FAILURE_THRESHOLD,
                    help="failure threshold on the JSD difference (dimensionless)")
    js.set_defaults(func=cmd_jsd)

    sw = sub.add_parser("sweep", help="failure-time sweep over observation times",
                        parents=[common])
    sw.add_argument("--scenario", required=True, help="scenario name or TOML path")
    sw.add_argument("--mode", choices=["variance", "covariance"], default="variance",
                    help="likelihood covariance mode")
    sw.add_argument("--grid", default=None,
                    help="observation grid LOG10_START:LOG10_STOP:N (log10 s), written "
                         "--grid=-4:-3:3 when negative; default is the scenario grid")
    sw.add_argument("--species", default=None, help="comma-separated species to assess")
    sw.add_argument("--base", type=float, default=2, help="logarithm base for the JSD")
    sw.add_argument("--threshold", type=float, default=FAILURE_THRESHOLD, help="failure threshold")
    sw.add_argument("--stop-on-failure", action="store_true",
                    help="stop once every assessed species has failed")
    sampler_flags(sw)
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    from .bayes import ObservationError, SingularCovarianceError
    from .mechanism import MechanismError
    from .nuts import SamplerError
    from .scenarios import ScenarioError
    from .stiffode import IntegrationError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.started = _now()
    try:
        return args.func(args)
    except (IntegrationError, ObservationError, SamplerError, SingularCovarianceError,
            FloatingPointError) as exc:
        print(f"stiffinfer {args.command}: numerical failure in "
              f"{type(exc).__module__.split('.')[-1]}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ScenarioError, MechanismError, ValueError, OSError) as exc:
        print(f"stiffinfer {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
