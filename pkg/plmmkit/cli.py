"""
Command Line Interface for plmmkit
process -> design -> fit / cv -> predict -> summary, all file in / file out
"""

import argparse
import os
import sys
import time
import logging
from typing import List, Optional

import numpy as np

from .config import PathOptions, RunConfig, load_config
from .decomposition import load_decomposition, save_decomposition
from .design_builder import create_design, load_design, read_table
from .errors import CapacityError, InferenceError, PlmmError
from .guardrails import MemoryGuard
from .inference import (
    cv_plmm,
    format_summary,
    load_cv,
    predict_blup,
    predict_linear,
    save_cv,
    summarize,
)
from .matrix_store import ArrayColumns, open_matrix
from .penalized_path import load_fit, plmm, save_fit
from .plink_ingest import parse_fam, process_delimited, process_plink
from .plots import plot_cv, plot_paths
from .run_log import RunLogger

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CAPACITY = 3

DECOMPOSITION_FILE = "decomposition.bk"
DESIGN_POINTER_FILE = "design.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems instead of exiting with status 2"""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _add_runtime_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("runtime")
    group.add_argument("--threads", type=int, default=None, help="Worker threads (default: all cores)")
    group.add_argument("--memory-budget", type=float, default=None, metavar="MB",
                       help="Abort with exit code 3 when a stage would exceed this many MiB")
    group.add_argument("--block-width", type=int, default=None, help="Columns per block")
    group.add_argument("--seed", type=int, default=None, help="Random seed (CV folds)")
    group.add_argument("--config", default=None, help="Path to config.yaml")
    group.add_argument("-v", "--verbose", action="store_true", help="Debug logging and progress bars")
    group.add_argument("-q", "--quiet", action="store_true", help="Warnings only")


def _add_path_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("penalized path")
    group.add_argument("--penalty", default=None, help="lasso, MCP or SCAD")
    group.add_argument("--gamma", type=float, default=None)
    group.add_argument("--nlambda", type=int, default=None)
    group.add_argument("--lambda-min-ratio", type=float, default=None)
    group.add_argument("--lambdas", default=None,
                       help="Comma-separated decreasing lambda values, or a file with one per line")
    group.add_argument("--tol", type=float, default=None)
    group.add_argument("--max-iter", type=int, default=None)
    group.add_argument("--normalize-trace", action="store_true",
                       help="Scale the relatedness matrix to trace n")
    group.add_argument("--save-decomp", default=None, metavar="PATH",
                       help="Also write the decomposition to this backing file")
    group.add_argument("--load-decomp", default=None, metavar="PATH",
                       help="Reuse a saved decomposition instead of recomputing it")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plmmkit", description="Penalized linear mixed models on file-backed data")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("process", help="PLINK triplet or delimited file -> matrix store")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--bfile", help="PLINK prefix (expects .bed/.bim/.fam)")
    source.add_argument("--delimited", help="Delimited numeric text file")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--name", default=None, help="Base name of the outputs")
    p.add_argument("--maf", type=float, default=None, help="Drop variants with MAF below this")
    p.add_argument("--sample-id", choices=["iid", "fid"], default="iid")
    p.add_argument("--keep-dosages", action="store_true", help="Keep the uint8 dosage store")
    p.add_argument("--delimiter", default=",", help="Field separator of --delimited ('ws' = whitespace)")
    p.add_argument("--no-header", action="store_true", help="--delimited file has no header line")
    p.add_argument("--id-col", default=None, help="Row id column of --delimited")
    p.add_argument("--overwrite", action="store_true")
    _add_runtime_options(p)
    p.set_defaults(handler=cmd_process)

    p = sub.add_parser("design", help="Align outcome, add covariates, standardize")
    p.add_argument("--matrix", required=True, help="Predictor backing file (.bk)")
    p.add_argument("--outcome", required=True, help="Outcome table")
    p.add_argument("--id-col", default="id")
    p.add_argument("--outcome-col", default=None)
    p.add_argument("--covariates", default=None, help="Unpenalized covariate table")
    p.add_argument("--covariate-cols", default=None, help="Comma-separated covariate columns")
    p.add_argument("--covariate-id-col", default=None)
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--name", default="design")
    p.add_argument("--overwrite", action="store_true")
    _add_runtime_options(p)
    p.set_defaults(handler=cmd_design)

    p = sub.add_parser("fit", help="Fit the penalized path")
    p.add_argument("--design", required=True, help="Design backing file (.bk)")
    p.add_argument("--out", required=True, help="Output directory")
    _add_path_options(p)
    _add_runtime_options(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("cv", help="Cross-validate the whole fitting pipeline")
    p.add_argument("--design", required=True, help="Design backing file (.bk)")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--nfolds", type=int, default=None)
    p.add_argument("--type", dest="prediction_type", choices=["linear", "blup"], default=None)
    p.add_argument("--plot-lambdas", type=int, default=None, help="Plot only the first N lambda values")
    _add_path_options(p)
    _add_runtime_options(p)
    p.set_defaults(handler=cmd_cv)

    p = sub.add_parser("predict", help="Predict outcomes for new rows")
    p.add_argument("--fit", required=True, help="Fit or CV output directory")
    p.add_argument("--data", required=True, help="New data: backing file (.bk) or delimited table")
    p.add_argument("--id-col", default="id", help="Row id column of a delimited --data table")
    p.add_argument("--design", default=None, help="Training design (default: the one recorded by fit)")
    p.add_argument("--type", dest="prediction_type", choices=["linear", "blup"], default="linear")
    p.add_argument("--lambda-index", type=int, default=None,
                   help="0-based lambda index (default: lambda_min for CV, last lambda for fit)")
    p.add_argument("--out", required=True, help="Predictions file")
    _add_runtime_options(p)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("summary", help="Summarize a fit or CV directory")
    p.add_argument("--fit", required=True, help="Fit or CV output directory")
    p.add_argument("--lambda-index", type=int, default=None)
    _add_runtime_options(p)
    p.set_defaults(handler=cmd_summary)

    return parser


def _run_config(args, config) -> RunConfig:
    runtime = config.get("runtime", {})
    cv = config.get("cv", {})
    path_opts = PathOptions.from_config(
        config,
        penalty=getattr(args, "penalty", None),
        gamma=getattr(args, "gamma", None),
        nlambda=getattr(args, "nlambda", None),
        lambda_min_ratio=getattr(args, "lambda_min_ratio", None),
        tol=getattr(args, "tol", None),
        max_iter=getattr(args, "max_iter", None),
        lambdas=_parse_lambdas(getattr(args, "lambdas", None)),
    )
    settings = {
        "subcommand": args.subcommand,
        "inputs": {k: getattr(args, k, None) for k in ("bfile", "delimited", "matrix", "outcome",
                                                        "covariates", "design", "fit", "data")},
        "output_dir": args.out if args.subcommand in ("process", "design", "fit", "cv") else None,
        "path": path_opts,
        "nfolds": getattr(args, "nfolds", None) or cv.get("nfolds", 5),
        "prediction_type": getattr(args, "prediction_type", None) or cv.get("prediction_type", "blup"),
        "seed": args.seed if args.seed is not None else cv.get("seed", 42),
        "memory_budget_mb": args.memory_budget if args.memory_budget is not None else runtime.get("memory_budget_mb"),
        "block_width": args.block_width or config.get("matrix_store", {}).get("block_width", 1024),
        "verbosity": 1 if args.verbose else (-1 if args.quiet else 0),
    }
    threads = args.threads if args.threads is not None else runtime.get("threads")
    if threads is not None:
        settings["threads"] = threads
    return RunConfig(**settings)


def _parse_lambdas(value: Optional[str]) -> Optional[List[float]]:
    if value is None:
        return None
    if os.path.exists(value):
        with open(value, 'r', encoding='utf-8') as f:
            return [float(line) for line in f if line.strip()]
    return [float(v) for v in value.split(",") if v.strip()]


def _setup_logging(config, verbosity: int) -> None:
    level = {1: logging.DEBUG, 0: logging.INFO, -1: logging.WARNING}[verbosity]
    log_format = config.get("logging", {}).get("log_format", "%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    logging.basicConfig(level=level, format=log_format, force=True)


def _run_logger(config) -> Optional[RunLogger]:
    settings = config.get("logging", {})
    if not settings.get("enabled", True):
        return None
    return RunLogger(settings.get("log_dir"))


def _count_input_rows(args) -> Optional[int]:
    """Sample count of the ingest input, read without decoding it"""
    if args.bfile:
        fam = args.bfile + ".fam"
        return len(parse_fam(fam)) if os.path.exists(fam) else None
    if not os.path.exists(args.delimited):
        return None
    with open(args.delimited, 'r', encoding='utf-8') as f:
        n_lines = sum(1 for line in f if line.strip())
    return max(n_lines - (0 if args.no_header else 1), 0)


def cmd_process(args, run: RunConfig, config, run_logger, guard: MemoryGuard) -> int:
    start = time.perf_counter()
    n_rows = _count_input_rows(args)
    if n_rows is not None:
        guard.require(guard.validate_run(n_rows, run.block_width, run.threads, dense=False))
    os.makedirs(run.output_dir, exist_ok=True)
    if args.bfile:
        maf = args.maf if args.maf is not None else config.get("ingest", {}).get("maf_min", 0.0)
        matrix, report, _, _ = process_plink(args.bfile, run.output_dir, name=args.name, maf_min=maf,
                                             sample_id=args.sample_id, block_width=run.block_width,
                                             overwrite=args.overwrite, keep_dosages=args.keep_dosages)
        print(f"Read {report.n_samples} samples, {report.n_variants_read} variants; "
              f"dropped {report.n_variants_dropped_constant} constant and "
              f"{report.n_variants_dropped_maf} below MAF; imputed {report.n_missing_imputed} missing calls")
    else:
        name = args.name or os.path.splitext(os.path.basename(args.delimited))[0]
        delimiter = None if args.delimiter == "ws" else args.delimiter
        id_col = args.id_col
        if id_col is not None and id_col.isdigit():
            id_col = int(id_col)
        matrix, names = process_delimited(args.delimited, delimiter=delimiter, has_header=not args.no_header,
                                          out_path=os.path.join(run.output_dir, f"{name}.bk"),
                                          id_col=id_col, overwrite=args.overwrite)
        print(f"Read {matrix.n_rows} rows x {len(names)} columns")
    if run_logger is not None:
        run_logger.log_stage("process", time.perf_counter() - start, n=matrix.n_rows, p=matrix.n_cols)
    print(f"Wrote {matrix.path}")
    return EXIT_OK


def cmd_design(args, run: RunConfig, config, run_logger, guard: MemoryGuard) -> int:
    start = time.perf_counter()
    predictors = open_matrix(args.matrix)
    guard.require(guard.validate_run(predictors.n_rows, run.block_width, run.threads, dense=False))
    covariate_cols = args.covariate_cols.split(",") if args.covariate_cols else None
    design = create_design(predictors, args.outcome, run.output_dir, name=args.name,
                           id_col=args.id_col, outcome_col=args.outcome_col,
                           covariate_table=args.covariates, covariate_id_col=args.covariate_id_col,
                           covariate_cols=covariate_cols, block_width=run.block_width,
                           threads=run.threads, overwrite=args.overwrite)
    if run_logger is not None:
        run_logger.log_stage("design", time.perf_counter() - start, n=design.n, p=design.p)
    print(f"Design: {design.n} samples, {design.p} columns ({design.n_unpenalized} unpenalized); "
          f"dropped {len(design.dropped_features)} constant column(s)")
    print(f"Wrote {design.path}")
    return EXIT_OK


def _load_decomposition(args, design):
    if not args.load_decomp:
        return None
    decomposition = load_decomposition(args.load_decomp)
    if decomposition.n != design.n:
        raise InferenceError(f"{args.load_decomp} has {decomposition.n} samples, design has {design.n}")
    return decomposition


def _write_fit_outputs(fit, design, args, out_dir: str) -> None:
    save_decomposition(fit.decomposition, os.path.join(out_dir, DECOMPOSITION_FILE), row_ids=design.sample_ids)
    if args.save_decomp:
        save_decomposition(fit.decomposition, args.save_decomp, row_ids=design.sample_ids)
    with open(os.path.join(out_dir, DESIGN_POINTER_FILE), 'w', encoding='utf-8') as f:
        f.write(os.path.abspath(design.path) + "\n")
    plot_paths(fit, os.path.join(out_dir, "paths.svg"))


def cmd_fit(args, run: RunConfig, config, run_logger, guard: MemoryGuard) -> int:
    design = load_design(args.design)
    guard.require(guard.validate_run(design.n, run.block_width, run.threads))
    decomp = config.get("decomposition", {})
    fit = plmm(design, run.path, decomposition=_load_decomposition(args, design),
               block_width=run.block_width, threads=run.threads, guard=guard,
               normalize_trace=args.normalize_trace or decomp.get("normalize_trace", False),
               eta_bounds=tuple(decomp.get("eta_bounds", (0.01, 0.99))),
               eta_tol=decomp.get("eta_tol", 1e-6), progress=run.verbosity > 0)
    save_fit(fit, run.output_dir)
    _write_fit_outputs(fit, design, args, run.output_dir)
    if run_logger is not None:
        run_logger.log_timings(fit.timings, n=design.n, p=design.p, nlambda=fit.n_lambda)
    print(f"Fit {fit.n_lambda} lambda values, eta = {fit.eta:.4f}; wrote {run.output_dir}")
    return EXIT_OK


def cmd_cv(args, run: RunConfig, config, run_logger, guard: MemoryGuard) -> int:
    design = load_design(args.design)
    guard.require(guard.validate_run(design.n, run.block_width, run.threads))
    decomp = config.get("decomposition", {})
    if args.load_decomp:
        logger.warning("--load-decomp is ignored by cv; every fold recomputes its decomposition")
    start = time.perf_counter()
    cv = cv_plmm(design, nfolds=run.nfolds, seed=run.seed, prediction_type=run.prediction_type,
                 opts=run.path, block_width=run.block_width, threads=run.threads, guard=guard,
                 normalize_trace=args.normalize_trace or decomp.get("normalize_trace", False),
                 keep_fold_fits=False, progress=run.verbosity > 0)
    save_cv(cv, run.output_dir)
    _write_fit_outputs(cv.fit, design, args, run.output_dir)
    plot_cv(cv, os.path.join(run.output_dir, "cve.svg"), n_lambdas=args.plot_lambdas)
    if run_logger is not None:
        run_logger.log_stage("cv", time.perf_counter() - start, n=design.n, p=design.p,
                             nlambda=len(cv.lambdas), nfolds=cv.nfolds)
    print(f"lambda_min = {cv.lambda_min:.6g} (index {cv.lambda_min_index}), "
          f"cve = {cv.cve[cv.lambda_min_index]:.6g}; wrote {run.output_dir}")
    return EXIT_OK


def _read_new_data(path: str, id_col: str, feature_names: List[str]):
    if path.endswith(".bk"):
        store = open_matrix(path)
        if list(store.col_names) == list(feature_names):
            return store, store.row_ids
        position = {name: j for j, name in enumerate(store.col_names)}
        missing = [name for name in feature_names if name not in position]
        if missing:
            raise InferenceError(f"{path} lacks fitted feature(s) {', '.join(missing[:5])}")
        values = store.read_cols([position[name] for name in feature_names])
        return ArrayColumns(values, feature_names), store.row_ids
    table = read_table(path)
    ids = table[id_col].tolist() if id_col in table.columns else [str(i + 1) for i in range(len(table))]
    missing = [name for name in feature_names if name not in table.columns]
    if missing:
        raise InferenceError(f"{path} lacks fitted feature(s) {', '.join(missing[:5])}")
    try:
        values = table[feature_names].apply(lambda col: col.astype(float)).to_numpy(dtype=np.float64)
    except ValueError as e:
        raise InferenceError(f"{path} holds non-numeric feature values: {e}") from e
    return ArrayColumns(values, feature_names), ids


def _default_index(fit_dir: str, fit) -> int:
    if os.path.exists(os.path.join(fit_dir, "cve.txt")):
        return load_cv(fit_dir).lambda_min_index
    return fit.n_lambda - 1


def cmd_predict(args, run: RunConfig, config, run_logger, guard: MemoryGuard) -> int:
    fit = load_fit(args.fit)
    index = args.lambda_index if args.lambda_index is not None else _default_index(args.fit, fit)
    fit.check_index(index)
    X_new, ids = _read_new_data(args.data, args.id_col, fit.feature_names)

    if run.prediction_type == "blup":
        design_path = args.design
        pointer = os.path.join(args.fit, DESIGN_POINTER_FILE)
        if design_path is None and os.path.exists(pointer):
            with open(pointer, 'r', encoding='utf-8') as f:
                design_path = f.read().strip()
        if design_path is None:
            raise InferenceError("BLUP prediction needs the training design (--design)")
        design = load_design(design_path)
        decomposition = load_decomposition(os.path.join(args.fit, DECOMPOSITION_FILE))
        pred = predict_blup(fit, design, X_new, index, decomposition, run.block_width)
    else:
        pred = predict_linear(fit, X_new, index, run.block_width)

    directory = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(directory, exist_ok=True)
    with open(args.out, 'w', encoding='utf-8') as f:
        for sample, value in zip(ids, pred):
            f.write(f"{sample}\t{float(value)!r}\n")
    print(f"Wrote {len(pred)} {run.prediction_type} predictions at lambda index {index} to {args.out}")
    return EXIT_OK


def cmd_summary(args, run: RunConfig, config, run_logger, guard: MemoryGuard) -> int:
    if os.path.exists(os.path.join(args.fit, "cve.txt")):
        obj = load_cv(args.fit)
    else:
        obj = load_fit(args.fit)
    print(format_summary(summarize(obj, args.lambda_index)))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)

    try:
        config = load_config(args.config)
        run = _run_config(args, config)
    except (OSError, ValueError) as e:
        print(f"plmmkit: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    _setup_logging(config, run.verbosity)
    run_logger = _run_logger(config)
    guard = MemoryGuard(run.memory_budget_mb, run_logger)

    try:
        return args.handler(args, run, config, run_logger, guard)
    except CapacityError as e:
        print(f"plmmkit: {e}", file=sys.stderr)
        return EXIT_CAPACITY
    except (PlmmError, OSError, ValueError) as e:
        logger.debug("Run failed", exc_info=True)
        print(f"plmmkit: error: {e}", file=sys.stderr)
        return EXIT_DATA
