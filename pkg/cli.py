#!/usr/bin/env python3
"""
Command-line harness for gradient estimation on stochastic computation graphs.

Usage:
    python cli.py --builtin fig1-1 --samples 100000 --compare-oracle
    python cli.py --graph graphs/fig1_5.json --theta theta --baseline avg:0.9 --format json
    python cli.py --preset gauss-sf-vs-pd

Presets live in run_configs.json; any flag given on the command line wins.
"""

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from builtin_graphs import BUILTINS, get_builtin
from constants import DEFAULTS, ENV, ESTIMATOR_METHODS, TOLERANCES
from distributions import reparameterize
from errors import SCGError
from estimator import (BaselineSpec, estimate, get_method, hessian_vector_product, parse_baseline,
                       resolve_theta, sample_trace)
from graph_model import Graph, load_graph
from oracle import exact_gradient, variance_report

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_BAND = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scg", description="Estimate gradients of expected costs in stochastic computation graphs.")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--graph", help="graph document (JSON)")
    source.add_argument("--builtin", choices=sorted(BUILTINS), help="built-in example graph")
    parser.add_argument("--preset", help="named run configuration from run_configs.json")
    parser.add_argument("--theta", help="parameter node (id or name); default: every parameter")
    parser.add_argument("--samples", type=int, default=DEFAULTS["samples"])
    parser.add_argument("--seed", type=int, default=DEFAULTS["seed"])
    parser.add_argument("--method", choices=ESTIMATOR_METHODS, default=DEFAULTS["method"])
    parser.add_argument("--baseline", default=DEFAULTS["baseline"],
                        help="none | const:<v> | avg:<decay> | builtin (the example's own baselines)")
    parser.add_argument("--threads", type=int, help=f"worker threads (overridden by {ENV['threads']})")
    parser.add_argument("--compare-oracle", action="store_true", help="z-scores against the exact gradient")
    parser.add_argument("--compare-methods", action="store_true",
                        help="surrogate vs algorithm1 agreement, and score-function vs pathwise variance")
    parser.add_argument("--variance-report", action="store_true")
    parser.add_argument("--reparam", action="append", default=[], metavar="NODE",
                        help="reparameterize a Gaussian node before estimating (repeatable)")
    parser.add_argument("--hvp", metavar="VECTOR_FILE", help="also estimate a Hessian-vector product")
    parser.add_argument("--format", choices=("text", "json"), default="text")
    return parser


def load_run_configs(config_file: str = "run_configs.json") -> Dict[str, Any]:
    """Load named run presets; a missing file means no presets."""
    try:
        with open(config_file, "r") as f:
            return json.load(f)
    except FileNotFoundError:
        logger.debug("run configuration file %s not found; using built-in defaults", config_file)
        return {"presets": {}}


def parse_args(argv: Optional[Sequence[str]] = None, config_file: str = "run_configs.json") -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.preset:
        presets = load_run_configs(config_file).get("presets", {})
        if args.preset not in presets:
            raise UsageError(f"unknown preset '{args.preset}'")
        preset = {k.replace("-", "_"): v for k, v in presets[args.preset].items()}
        parser.set_defaults(**preset)
        args = parser.parse_args(argv)
    if not args.graph and not args.builtin:
        raise UsageError("one of --graph or --builtin is required")
    if args.samples < 1:
        raise UsageError("--samples must be at least 1")
    return args


def _load(args) -> Tuple[Graph, Dict, BaselineSpec, str]:
    if args.builtin:
        example = get_builtin(args.builtin)
        graph, inputs = example.load()
        source = args.builtin
    else:
        example = None
        graph, inputs = load_graph(args.graph)
        source = args.graph
    for node in args.reparam:
        graph = reparameterize(graph, graph.resolve(node))
    if args.baseline == "builtin":
        baselines = example.default_baselines(graph) if example else BaselineSpec()
    else:
        try:
            baselines = parse_baseline(args.baseline)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return graph, inputs, baselines, source


def _label(graph: Graph, node: int) -> str:
    return graph.nodes[node].name or str(node)


def _load_vector(path: str) -> np.ndarray:
    if Path(path).suffix == ".json":
        with open(path, "r") as f:
            return np.asarray(json.load(f), dtype=np.float64)
    return np.loadtxt(path, dtype=np.float64)


def compare_oracle(graph, inputs, result, thetas) -> Tuple[Dict[str, Any], bool]:
    band = DEFAULTS["z_band"]
    out, ok = {}, True
    for theta in thetas:
        exact = exact_gradient(graph, inputs, theta)
        mean = result.mean[theta]
        stderr = result.stderr[theta] if result.stderr else np.zeros_like(mean)
        diff = mean - exact
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(stderr > 0, diff / np.where(stderr > 0, stderr, 1.0),
                         np.where(np.abs(diff) <= TOLERANCES["unbiasedness"], 0.0, np.inf))
        within = bool(np.all(np.abs(z) <= band))
        ok = ok and within
        out[_label(graph, theta)] = {"exact": exact.tolist(), "z": np.asarray(z).tolist(), "within_band": within}
    return out, ok


def compare_methods(graph, inputs, args, baselines, thetas) -> Dict[str, Any]:
    traces = min(args.samples, 100)
    surrogate, algorithm1 = get_method("surrogate"), get_method("algorithm1")
    worst = 0.0
    for index in range(traces):
        trace = sample_trace(graph, inputs, args.seed, index)
        for theta in thetas:
            diff = np.abs(surrogate(graph, trace, baselines, theta) - algorithm1(graph, trace, baselines, theta))
            worst = max(worst, float(np.max(diff)) if diff.size else 0.0)
    report: Dict[str, Any] = {"traces": traces, "max_abs_diff": worst,
                              "equal": worst <= TOLERANCES["method_equality"]}

    gaussian = [w for w in graph.stochastic if graph.nodes[w].dist.reparameterizable
                and any(graph.index.det_influences(t, w) for t in thetas)]
    if gaussian:
        pathwise = graph
        for w in gaussian:
            pathwise = reparameterize(pathwise, w)
        sf = estimate(graph, inputs, None, args.samples, args.seed, args.method, baselines, args.threads)
        pd = estimate(pathwise, inputs, None, args.samples, args.seed, args.method, None, args.threads)
        rows = {}
        for theta in thetas:
            se = np.sqrt(np.square(sf.stderr[theta]) + np.square(pd.stderr[theta])) if sf.stderr else None
            rows[_label(graph, theta)] = {
                "sf_mean": sf.mean[theta].tolist(), "pd_mean": pd.mean[theta].tolist(),
                "sf_variance": sf.variance[theta].tolist() if sf.variance else None,
                "pd_variance": pd.variance[theta].tolist() if pd.variance else None,
                "within_band": bool(se is None or np.all(np.abs(sf.mean[theta] - pd.mean[theta])
                                                          <= DEFAULTS["z_band"] * se)),
                "pd_lower_variance": bool(sf.variance and np.sum(pd.variance[theta]) < np.sum(sf.variance[theta])),
            }
        report["sf_vs_pd"] = {"nodes": [_label(graph, w) for w in gaussian], "params": rows}
    return report


def estimate_hvp(graph, inputs, args, baselines, theta) -> Dict[str, Any]:
    v = _load_vector(args.hvp)
    samples = np.stack([hessian_vector_product(graph, sample_trace(graph, inputs, args.seed, i), theta, v, baselines)
                        for i in range(args.samples)])
    out = {"theta": _label(graph, theta), "mean": samples.mean(axis=0).tolist()}
    if args.samples > 1:
        out["stderr"] = np.sqrt(samples.var(axis=0, ddof=1) / args.samples).tolist()
    return out


def run(args: argparse.Namespace) -> Tuple[Dict[str, Any], int]:
    graph, inputs, baselines, source = _load(args)
    thetas = [resolve_theta(graph, args.theta)] if args.theta is not None else list(graph.params)
    theta_arg = thetas[0] if args.theta is not None else None

    result = estimate(graph, inputs, theta_arg, args.samples, args.seed, args.method, baselines, args.threads)
    report = {"source": source, **result.to_dict(graph)}
    code = EXIT_OK

    if args.compare_oracle:
        report["oracle"], ok = compare_oracle(graph, inputs, result, thetas)
        if not ok:
            code = EXIT_BAND
    if args.compare_methods:
        report["compare_methods"] = compare_methods(graph, inputs, args, baselines, thetas)
    if args.variance_report:
        report["variance_report"] = {
            _label(graph, t): variance_report(graph, inputs, t, baselines, args.method, args.samples, args.seed,
                                              threads=args.threads)
            for t in thetas
        }
    if args.hvp:
        report["hvp"] = estimate_hvp(graph, inputs, args, baselines, resolve_theta(graph, theta_arg))
    report["timestamp"] = datetime.now(timezone.utc).isoformat()
    return report, code


def format_text(report: Dict[str, Any]) -> str:
    lines = [f"Source: {report['source']}",
             f"Method: {report['method']}   Baseline: {report['baseline']}   "
             f"Samples: {report['n']}   Seed: {report['seed']}",
             "=" * 60]
    for name, mean in report["mean"].items():
        lines.append(f"d/d{name}: mean   = {np.round(mean, 6).tolist()}")
        if report["stderr"]:
            lines.append(f"{' ' * (len(name) + 4)}stderr = {np.round(report['stderr'][name], 6).tolist()}")
    for name, row in report.get("oracle", {}).items():
        lines.append(f"Oracle d/d{name}: {np.round(row['exact'], 6).tolist()}  z = {np.round(row['z'], 2).tolist()}"
                     f"  {'OK' if row['within_band'] else 'OUT OF BAND'}")
    methods = report.get("compare_methods")
    if methods:
        lines.append(f"surrogate vs algorithm1: max |diff| = {methods['max_abs_diff']:.3e} "
                     f"over {methods['traces']} trace(s)")
        for name, row in methods.get("sf_vs_pd", {}).get("params", {}).items():
            lines.append(f"{name}: SF mean {np.round(row['sf_mean'], 6).tolist()} var {row['sf_variance']}")
            lines.append(f"{' ' * len(name)}  PD mean {np.round(row['pd_mean'], 6).tolist()} var {row['pd_variance']}")
    for name, rows in report.get("variance_report", {}).items():
        for tag, moments in rows["baselines"].items():
            kind = "exact" if moments["exact"] else "sampled"
            lines.append(f"{name} baseline {tag}: variance ({kind}) {np.round(moments['variance'], 6).tolist()}")
    if "hvp" in report:
        lines.append(f"HVP d/d{report['hvp']['theta']}: {np.round(report['hvp']['mean'], 6).tolist()}")
    return "\n".join(lines)


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get(ENV["log_level"], "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args = parse_args(argv)
        report, code = run(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (SCGError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    if args.format == "json":
        print(json.dumps(report, indent=2))
    else:
        print(format_text(report))
    return code


if __name__ == "__main__":
    sys.exit(main())
