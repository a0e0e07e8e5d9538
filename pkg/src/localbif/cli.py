"""Command-line entry point: ``localbif {estimate,oracle,compare,lds,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import (
    ArtifactWriter,
    dumps_json,
    load_matrix,
    records_jsonl,
    trace_bytes,
    verify_directory,
)
from .config import RunConfig, load_config, serialize, with_overrides
from .data import DatasetSplit
from .errors import BifError, DivergenceError, IncompatibleError, ValidationError
from .estimators import InfluenceMatrix, aggregate_components, bif_from_trace, normalized_bif_from_trace, top_k
from .lds import attribution_set, lds_score, retrained_query_losses, spearman_flagged, subsample_datasets
from .models import init_params
from .oracle import analytic_gaussian_bif, classical_if, fit_checkpoint, gradsim
from .sgld import observable_set_from_queries, run_chains

log = logging.getLogger("localbif")

OUTPUT_ROOT_ENV = "LOCALBIF_OUTPUT_ROOT"

EXIT_CODES = """exit codes:
  0  success
  1  other package error
  2  invalid configuration or arguments
  3  numerical failure (sampler divergence, overflow, singular Hessian, no convergence)
  4  incompatible inputs (label or shape mismatch, output directory already exists)
  5  unsupported request (e.g. per-component losses on a dataset without components)
  6  artifact integrity failure (file does not match its manifest hash)
"""


# -- shared plumbing ------------------------------------------------------------------

def output_root(args, cfg: RunConfig | None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or "runs")


def prepare(args) -> RunConfig:
    if not args.config:
        raise ValidationError(f"{args.command} requires --config")
    if args.zero_noise and not args.allow_test_modes:
        raise ValidationError("--zero-noise is a test mode; pass --allow-test-modes to enable it")
    cfg = with_overrides(load_config(args.config), seed=args.seed, zero_noise=args.zero_noise)
    if args.run_id:
        cfg = replace(cfg, run_id=args.run_id)
    return cfg


def open_writer(args, cfg: RunConfig | None, command: str) -> ArtifactWriter:
    run_id = args.run_id or (cfg.run_id if cfg is not None else command)
    return ArtifactWriter(output_root(args, cfg) / run_id / command, command,
                          cfg.digest() if cfg is not None else "")


def load_problem(cfg: RunConfig) -> tuple[DatasetSplit, np.ndarray]:
    data = cfg.data.load()
    w0 = init_params(cfg.model, np.random.default_rng(cfg.checkpoint.init_seed), scale=cfg.checkpoint.init_scale)
    w_star = fit_checkpoint(cfg.model, data, w0, l2=cfg.checkpoint.l2)
    return data, w_star


def write_common(writer: ArtifactWriter, cfg: RunConfig, w_star: np.ndarray | None = None) -> None:
    writer.write_text("config.toml", serialize(cfg))
    if w_star is not None:
        writer.write_json("checkpoint.json", {"params": [float(v) for v in w_star]})


def workers_of(args) -> int:
    return args.workers if args.workers else (os.cpu_count() or 1)


# -- commands ------------------------------------------------------------------

def cmd_estimate(args) -> int:
    cfg = prepare(args)
    t0 = time.perf_counter()
    data, w_star = load_problem(cfg)
    observables = observable_set_from_queries(data, per_component=cfg.per_component)
    cfg.sgld.check_against(cfg.model, data.n)
    writer = open_writer(args, cfg, "estimate")
    write_common(writer, cfg, w_star)
    try:
        trace = run_chains(cfg.model, w_star, data, observables, cfg.sgld, workers=workers_of(args))
    except DivergenceError as e:
        writer.write_json("divergence.json", {"error": str(e), "step": e.step, "chain": e.chain,
                                              "max_abs": e.max_abs, "detail": e.detail})
        writer.close({"seconds": time.perf_counter() - t0})
        raise
    writer.write_bytes("trace.lbt", trace_bytes(trace))
    bif = bif_from_trace(trace)
    writer.write_matrix("bif", bif)
    writer.write_matrix("normalized_bif", normalized_bif_from_trace(trace))
    if cfg.per_component:
        writer.write_matrix("bif_by_query", aggregate_components(bif, "sum_over_query_components"))
    writer.write_text("topk.jsonl", records_jsonl(top_k(bif, cfg.top_k)))
    writer.write_json("summary.json", {"draws": trace.draw_count, "chains": trace.chains,
                                       "n_train": data.n, "n_query": data.q, "shape": list(bif.shape)})
    writer.close({"seconds": time.perf_counter() - t0})
    print(writer.dir)
    return 0


def oracle_matrices(cfg: RunConfig, data: DatasetSplit, w_star: np.ndarray) -> dict[str, InfluenceMatrix]:
    methods = cfg.oracle.methods if cfg.oracle is not None else ("dampened_if", "gradsim")
    gamma = cfg.oracle_gamma()
    # default tempering matches the sampler, so the dampened IF is the BIF's leading term
    beta = cfg.oracle.beta if cfg.oracle is not None and cfg.oracle.beta is not None else cfg.sgld.n_beta / data.n
    out = {}
    for m in methods:
        if m == "dampened_if":
            out[m] = classical_if(cfg.model, w_star, data, gamma, beta=beta)
        elif m == "gradsim":
            out[m] = gradsim(cfg.model, w_star, data)
        else:
            out[m] = analytic_gaussian_bif(cfg.model, w_star, data, gamma, cfg.sgld.n_beta)
    return out


def cmd_oracle(args) -> int:
    cfg = prepare(args)
    t0 = time.perf_counter()
    data, w_star = load_problem(cfg)
    mats = oracle_matrices(cfg, data, w_star)
    writer = open_writer(args, cfg, "oracle")
    write_common(writer, cfg, w_star)
    for name, mat in mats.items():
        writer.write_matrix(name, mat)
        writer.write_text(f"{name}_topk.jsonl", records_jsonl(top_k(mat, cfg.top_k)))
    writer.close({"seconds": time.perf_counter() - t0})
    print(writer.dir)
    return 0


def _first_mismatch(a, b):
    for k, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return k, x, y
    return min(len(a), len(b)), (a[len(b)] if len(a) > len(b) else None), (b[len(a)] if len(b) > len(a) else None)


def compare_matrices(a: InfluenceMatrix, b: InfluenceMatrix, k: int = 10) -> dict:
    for axis, la, lb in (("row", a.row_labels, b.row_labels), ("column", a.col_labels, b.col_labels)):
        if tuple(la) != tuple(lb):
            pos, x, y = _first_mismatch(la, lb)
            raise IncompatibleError(f"{axis} labels differ at position {pos}: {x!r} vs {y!r}")
    x, y = a.values.ravel(), b.values.ravel()
    diff = x - y
    xc, yc = x - x.mean(), y - y.mean()
    den = np.linalg.norm(xc) * np.linalg.norm(yc)
    pearson = float(np.clip(xc @ yc / den, -1, 1)) if den > 0 else 0.0
    rho, degenerate = spearman_flagged(x, y) if x.size >= 2 else (0.0, True)
    k = min(k, a.shape[0])
    overlaps = []
    for j in range(a.shape[1]):
        ta = set(np.argsort(-np.abs(a.values[:, j]), kind="stable")[:k].tolist())
        tb = set(np.argsort(-np.abs(b.values[:, j]), kind="stable")[:k].tolist())
        overlaps.append(len(ta & tb) / k)
    return {"kinds": [a.kind, b.kind], "shape": list(a.shape), "max_abs_diff": float(np.max(np.abs(diff))),
            "mean_abs_diff": float(np.mean(np.abs(diff))), "rms_diff": float(np.sqrt(np.mean(diff ** 2))),
            "pearson": pearson, "pearson_degenerate": bool(den == 0), "spearman": rho,
            "spearman_degenerate": degenerate, "top_k": k, "top_k_overlap": float(np.mean(overlaps)),
            "top_k_overlap_per_query": overlaps}


def cmd_compare(args) -> int:
    cfg = prepare(args) if args.config else None
    a, b = load_matrix(args.matrix_a), load_matrix(args.matrix_b)
    report = compare_matrices(a, b, args.k)
    report["inputs"] = [Path(args.matrix_a).name, Path(args.matrix_b).name]
    writer = open_writer(args, cfg, "compare")
    writer.write_json("comparison.json", report)
    writer.close()
    print(dumps_json(report), end="")
    return 0


def _tau_for(mat: InfluenceMatrix, data: DatasetSplit, attr: np.ndarray, path) -> np.ndarray:
    if any(label.count("/") == 2 for label in mat.row_labels):
        mat = aggregate_components(mat, "sum_over_train_components")
    if any(label.count("/") == 2 for label in mat.col_labels):
        mat = aggregate_components(mat, "sum_over_query_components")
    if mat.shape[1] != data.q:
        raise IncompatibleError(f"{path}: {mat.shape[1]} query columns, dataset has {data.q} queries")
    if mat.shape[0] == data.n:
        return mat.values[attr]
    if mat.shape[0] == attr.size:
        return mat.values
    raise IncompatibleError(f"{path}: {mat.shape[0]} train rows match neither the {data.n} training examples "
                            f"nor the {attr.size}-element attribution set")


def cmd_lds(args) -> int:
    cfg = prepare(args)
    if cfg.lds is None:
        raise ValidationError("the lds command needs an [lds] section in the config")
    if not args.tau:
        raise ValidationError("pass at least one --tau matrix artifact")
    t0 = time.perf_counter()
    data = cfg.data.load()
    attr = attribution_set(data.n, cfg.lds.alpha_attribution, cfg.lds.seed)
    taus = [(Path(p), _tau_for(load_matrix(p), data, attr, p)) for p in args.tau]
    subsets = subsample_datasets(attr.size, cfg.lds)
    cache = None if args.no_cache else output_root(args, cfg) / "retrain_cache"
    losses, converged = retrained_query_losses(cfg.model, data, subsets, cfg.lds, attr_idx=attr,
                                               workers=workers_of(args), cache_dir=cache)
    writer = open_writer(args, cfg, "lds")
    write_common(writer, cfg)
    writer.write_json("subsets.json", {"attribution_set": attr.tolist(),
                                       "subsets": [s.tolist() for s in subsets],
                                       "converged": converged.tolist()})
    rows = ["method,k,subset_size,spearman\n"]
    summary = []
    for idx, (path, tau) in enumerate(taus):
        label = path.stem
        report = lds_score(tau, subsets, losses, cfg.lds, method_label=label)
        writer.write_json(f"lds_{idx}_{label}.json", dict(report.to_dict(), source=path.name))
        rows += [f"{label},{k},{s.size},{float(r)!r}\n"
                 for k, (s, r) in enumerate(zip(subsets, report.per_subset_correlations))]
        summary.append({"method": label, "mean_lds": report.mean_lds, "std_error": report.std_error})
    writer.write_text("lds_per_subset.csv", "".join(rows))
    writer.write_json("summary.json", {"alpha_retrain": cfg.lds.alpha_retrain, "K": cfg.lds.K,
                                       "unconverged_subsets": int((~converged).sum()), "methods": summary})
    writer.close({"seconds": time.perf_counter() - t0})
    print(dumps_json(summary), end="")
    return 0


def cmd_report(args) -> int:
    cfg = prepare(args) if args.config else None
    runs = []
    for d in args.run_dirs:
        manifest = verify_directory(d)
        entry = {"directory": Path(d).name, "command": manifest.get("command"), "matrices": [], "lds": []}
        for name in sorted(manifest["files"]):
            p = Path(d) / name
            if name.endswith(".lbm"):
                m = load_matrix(p)
                entry["matrices"].append({"file": name, "kind": m.kind, "shape": list(m.shape),
                                          "mean": float(m.values.mean()), "max_abs": float(np.abs(m.values).max())})
            elif name.startswith("lds_") and name.endswith(".json"):
                r = json.loads(p.read_text())
                entry["lds"].append({"method": r["method"], "mean_lds": r["mean_lds"], "std_error": r["std_error"]})
        runs.append(entry)
    lines = ["# Run report", ""]
    for e in runs:
        lines.append(f"## {e['directory']} ({e['command']})")
        for m in e["matrices"]:
            lines.append(f"- {m['file']}: {m['kind']} {m['shape'][0]}x{m['shape'][1]}, "
                         f"max |value| {m['max_abs']:.6g}")
        for r in e["lds"]:
            lines.append(f"- LDS {r['method']}: {r['mean_lds']:.4f} +- {r['std_error']:.4f}")
        lines.append("")
    writer = open_writer(args, cfg, "report")
    writer.write_json("report.json", {"runs": runs})
    writer.write_text("report.md", "\n".join(lines))
    writer.close()
    print("\n".join(lines))
    return 0


# -- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override the sampler and LDS seeds")
    common.add_argument("--out", help=f"output root (default: config output_dir, then ${OUTPUT_ROOT_ENV}, then ./runs)")
    common.add_argument("--run-id", help="override the config run_id")
    common.add_argument("--workers", type=int, default=0, help="process pool size (default: number of cores)")
    common.add_argument("--zero-noise", action="store_true", help="drop SGLD noise (test mode)")
    common.add_argument("--allow-test-modes", action="store_true", help="permit test-only flags")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(
        prog="localbif", description="Local Bayesian influence functions for small models.",
        epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter
    sub.add_parser("estimate", parents=[common], epilog=EXIT_CODES, formatter_class=fmt,
                   help="run SGLD chains and write BIF matrices")
    sub.add_parser("oracle", parents=[common], epilog=EXIT_CODES, formatter_class=fmt,
                   help="write dense classical / analytic influence matrices")
    p = sub.add_parser("compare", parents=[common], epilog=EXIT_CODES, formatter_class=fmt,
                       help="compare two matrix artifacts")
    p.add_argument("matrix_a")
    p.add_argument("matrix_b")
    p.add_argument("--k", type=int, default=10, help="top-k size for ranking overlap")
    p = sub.add_parser("lds", parents=[common], epilog=EXIT_CODES, formatter_class=fmt,
                       help="score attribution matrices by retraining")
    p.add_argument("--tau", action="append", default=[], help="matrix artifact to score (repeatable)")
    p.add_argument("--no-cache", action="store_true", help="do not reuse cached retraining results")
    p = sub.add_parser("report", parents=[common], epilog=EXIT_CODES, formatter_class=fmt,
                       help="verify and summarize run directories")
    p.add_argument("run_dirs", nargs="+")
    return parser


COMMANDS = {"estimate": cmd_estimate, "oracle": cmd_oracle, "compare": cmd_compare, "lds": cmd_lds,
            "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except BifError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
