"""
Penalized Path - Coordinate descent for lasso, MCP and SCAD on the rotated problem
Lambda grid, strong-rule screening with KKT checks, back-transformation and persistence
"""

import os
import time
import logging
import warnings
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml
from numba import njit
from scipy import sparse
from tqdm import tqdm

from .config import PathOptions
from .decomposition import (
    ETA_BOUNDS,
    ETA_TOL,
    Decomposition,
    RotatedProblem,
    compute_grm,
    eigen_sym,
    estimate_eta,
    normalize_trace as normalize_kinship_trace,
    rotate,
)
from .errors import DecompositionError, FitError
from .guardrails import MemoryGuard
from .matrix_store import ColumnSource, map_blocks

logger = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-10
# relative slack on the leading lambda; roundoff cannot activate a feature there
LAMBDA_MAX_SLACK = 1e-10


@njit(cache=True, nogil=True)
def soft_threshold(z, lam):
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


@njit(cache=True, nogil=True)
def mcp_update(z, lam, gamma):
    if abs(z) <= gamma * lam:
        return soft_threshold(z, lam) / (1.0 - 1.0 / gamma)
    return z


@njit(cache=True, nogil=True)
def scad_update(z, lam, gamma):
    az = abs(z)
    if az <= 2.0 * lam:
        return soft_threshold(z, lam)
    if az <= gamma * lam:
        return soft_threshold(z, gamma * lam / (gamma - 1.0)) / (1.0 - 1.0 / (gamma - 1.0))
    return z


@njit(cache=True, nogil=True)
def _threshold(z, lam, gamma, penalty_code):
    if penalty_code == 0:
        return soft_threshold(z, lam)
    if penalty_code == 1:
        return mcp_update(z, lam, gamma)
    return scad_update(z, lam, gamma)


@njit(cache=True, nogil=True)
def _sweep(X, r, beta, pf, col_ms, lam, gamma, penalty_code, active_only):
    n = X.shape[0]
    max_change = 0.0
    for j in range(X.shape[1]):
        if col_ms[j] == 0.0:
            continue
        if active_only and beta[j] == 0.0 and pf[j] > 0.0:
            continue
        z = 0.0
        for i in range(n):
            z += X[i, j] * r[i]
        z = z / n + beta[j]
        if pf[j] == 0.0:
            new = z
        else:
            new = _threshold(z, lam * pf[j], gamma, penalty_code)
        delta = new - beta[j]
        if delta != 0.0:
            for i in range(n):
                r[i] -= delta * X[i, j]
            beta[j] = new
            if abs(delta) > max_change:
                max_change = abs(delta)
    return max_change


@njit(cache=True, nogil=True)
def _cd_kernel(X, r, beta, pf, col_ms, lam, gamma, penalty_code, tol, max_iter):
    """Full sweeps alternating with active-only sweeps; r and beta updated in place"""
    n_iter = 0
    while n_iter < max_iter:
        n_iter += 1
        if _sweep(X, r, beta, pf, col_ms, lam, gamma, penalty_code, False) < tol:
            return n_iter, True
        while n_iter < max_iter:
            n_iter += 1
            if _sweep(X, r, beta, pf, col_ms, lam, gamma, penalty_code, True) < tol:
                break
    return n_iter, False


def penalty_value(beta: np.ndarray, lam: float, penalty: str, gamma: float,
                  penalty_factor: Optional[np.ndarray] = None) -> float:
    """Sum of the penalty over coefficients (penalty factor scales lambda)"""
    beta = np.abs(np.asarray(beta, dtype=np.float64))
    lams = lam * (np.ones_like(beta) if penalty_factor is None else np.asarray(penalty_factor))
    if penalty == "lasso":
        values = lams * beta
    elif penalty == "MCP":
        values = np.where(beta <= gamma * lams, lams * beta - beta ** 2 / (2 * gamma), gamma * lams ** 2 / 2)
    else:
        values = np.where(
            beta <= lams,
            lams * beta,
            np.where(beta <= gamma * lams,
                     (2 * gamma * lams * beta - beta ** 2 - lams ** 2) / (2 * (gamma - 1)),
                     lams ** 2 * (gamma + 1) / 2),
        )
    return float(values.sum())


def column_gradient(X: ColumnSource, r: np.ndarray,
                    block_width: Optional[int] = None, threads: int = 1) -> np.ndarray:
    """(1/n) X^T r, accumulated in column blocks"""
    n = X.n_rows
    parts = map_blocks(lambda first, block: block.T @ r / n, X, block_width, threads)
    return np.concatenate(list(parts))


def _unpenalized_fit(rp: RotatedProblem):
    unpen = np.flatnonzero(rp.penalty_factor == 0)
    Xu = rp.Xr.read_cols(unpen)
    coef, *_ = np.linalg.lstsq(Xu, rp.yr, rcond=None)
    return unpen, coef, rp.yr - Xu @ coef


def lambda_grid(rp: RotatedProblem,
                opts: PathOptions,
                block_width: Optional[int] = None,
                threads: int = 1) -> np.ndarray:
    """
    Decreasing log-spaced lambda sequence starting at lambda_max

    lambda_max is the largest penalized |x^T r0|/n where r0 is the residual of
    the rotated outcome after the unpenalized least-squares fit.
    """
    _, _, r0 = _unpenalized_fit(rp)
    grad = np.abs(column_gradient(rp.Xr, r0, block_width, threads))
    penalized = rp.penalty_factor > 0
    lambda_max = float(np.max(grad[penalized] / rp.penalty_factor[penalized]))

    scale = max(1.0, float(np.sqrt(np.mean(rp.yr ** 2))))
    if lambda_max < LAMBDA_FLOOR * scale:
        message = "Outcome is orthogonal to every penalized column; the lambda grid has a single value"
        warnings.warn(message)
        logger.warning(message)
        return np.array([LAMBDA_FLOOR * scale])

    lambda_max *= 1.0 + LAMBDA_MAX_SLACK
    if opts.nlambda == 1:
        return np.array([lambda_max])
    ratio = opts.resolve_min_ratio(rp.n, int(penalized.sum()))
    grid = np.exp(np.linspace(np.log(lambda_max), np.log(lambda_max * ratio), opts.nlambda))
    grid[0] = lambda_max
    return grid


class FitPath:
    """
    Regularization path on the rotated and original scales

    Attributes:
        lambdas: Decreasing lambda values (index 0-based everywhere)
        beta_rotated: Sparse (p+1) x L coefficients of the rotated columns, intercept first
        beta: Sparse p x L coefficients on the original data scale
        intercepts: Original-scale intercept per lambda
    """

    def __init__(self,
                 lambdas: np.ndarray,
                 beta: sparse.spmatrix,
                 intercepts: np.ndarray,
                 feature_names: List[str],
                 penalty_factor: np.ndarray,
                 eta: float,
                 penalty: str,
                 gamma: Optional[float],
                 n_iter: Optional[np.ndarray] = None,
                 converged: Optional[np.ndarray] = None,
                 loss: Optional[np.ndarray] = None,
                 beta_rotated: Optional[sparse.spmatrix] = None,
                 rot_scales: Optional[np.ndarray] = None,
                 timings: Optional[Dict[str, float]] = None,
                 decomposition: Optional[Decomposition] = None,
                 rotated_residuals: Optional[np.ndarray] = None,
                 y: Optional[np.ndarray] = None,
                 n: Optional[int] = None):
        self.lambdas = np.asarray(lambdas, dtype=np.float64)
        self.beta = sparse.csc_matrix(beta)
        self.intercepts = np.asarray(intercepts, dtype=np.float64)
        self.feature_names = list(feature_names)
        self.penalty_factor = np.asarray(penalty_factor, dtype=np.float64)
        self.eta = float(eta)
        self.penalty = penalty
        self.gamma = gamma
        L = len(self.lambdas)
        self.n_iter = np.zeros(L, dtype=np.int64) if n_iter is None else np.asarray(n_iter, dtype=np.int64)
        self.converged = np.ones(L, dtype=bool) if converged is None else np.asarray(converged, dtype=bool)
        self.loss = np.full(L, np.nan) if loss is None else np.asarray(loss, dtype=np.float64)
        self.beta_rotated = sparse.csc_matrix(beta_rotated) if beta_rotated is not None else None
        self.rot_scales = rot_scales
        self.timings = dict(timings or {})
        self.decomposition = decomposition
        self.rotated_residuals = rotated_residuals
        self.y = y
        self.n = n

    @property
    def n_lambda(self) -> int:
        return len(self.lambdas)

    def check_index(self, lambda_index: int) -> int:
        if not -self.n_lambda <= lambda_index < self.n_lambda:
            raise FitError(f"lambda index {lambda_index} out of range 0..{self.n_lambda - 1}")
        return lambda_index % self.n_lambda

    def coef(self, lambda_index: int) -> np.ndarray:
        """Dense original-scale coefficients at one lambda"""
        k = self.check_index(lambda_index)
        return self.beta[:, k].toarray().ravel()

    def selected(self, lambda_index: int) -> List[str]:
        """Names of nonzero penalized features"""
        beta = self.coef(lambda_index)
        return [name for name, b, pf in zip(self.feature_names, beta, self.penalty_factor) if b != 0 and pf > 0]

    def nonzero_count(self, lambda_index: int) -> int:
        return len(self.selected(lambda_index))

    def __repr__(self) -> str:
        return f"FitPath(penalty={self.penalty}, n_lambda={self.n_lambda}, p={len(self.feature_names)})"


def fit_path(rp: RotatedProblem,
             opts: PathOptions,
             lambdas: Optional[Sequence[float]] = None,
             block_width: Optional[int] = None,
             threads: int = 1,
             guard: Optional[MemoryGuard] = None,
             progress: bool = False) -> Dict[str, object]:
    """
    Fit the penalized path on the rotated problem

    Args:
        rp: Rotated problem with unit mean-square columns
        opts: Penalty, tolerance and iteration limit
        lambdas: Decreasing lambda values (default: lambda_grid)

    Returns:
        Dict with lambdas, beta_rotated (sparse), n_iter, converged, loss, rotated_residuals
    """
    if lambdas is None:
        lambdas = opts.lambdas if opts.lambdas is not None else lambda_grid(rp, opts, block_width, threads)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if np.any(lambdas <= 0) or np.any(np.diff(lambdas) >= 0):
        raise FitError("lambda sequence must be positive and strictly decreasing")

    n, P = rp.n, rp.n_cols
    pf = rp.penalty_factor
    penalized = pf > 0
    gamma = opts.effective_gamma
    code = opts.penalty_code

    unpen, coef, r = _unpenalized_fit(rp)
    beta = np.zeros(P)
    beta[unpen] = coef
    grad = column_gradient(rp.Xr, r, block_width, threads)

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    n_iter = np.zeros(len(lambdas), dtype=np.int64)
    converged = np.zeros(len(lambdas), dtype=bool)
    loss = np.zeros(len(lambdas))
    residuals = np.empty((n, len(lambdas)))

    cached_set: Optional[np.ndarray] = None
    cached_X: Optional[np.ndarray] = None
    lam_prev = lambdas[0]

    for k in tqdm(range(len(lambdas)), desc="lambda path", disable=not progress):
        lam = lambdas[k]
        strong = penalized & (np.abs(grad) >= pf * (2.0 * lam - lam_prev))
        working = np.flatnonzero(~penalized | (beta != 0) | strong)

        while True:
            if cached_set is None or not np.array_equal(working, cached_set):
                if guard is not None:
                    guard.require(guard.check_working_set(n, len(working)))
                cached_X = rp.Xr.read_cols(working)
                cached_set = working
            col_ms = np.einsum("ij,ij->j", cached_X, cached_X) / n
            beta_w = beta[working].copy()
            iters, ok = _cd_kernel(cached_X, r, beta_w, pf[working], col_ms, lam, gamma, code,
                                   opts.tol, opts.max_iter)
            beta[working] = beta_w
            n_iter[k] += iters
            converged[k] = ok

            grad = column_gradient(rp.Xr, r, block_width, threads)
            outside = np.ones(P, dtype=bool)
            outside[working] = False
            violators = np.flatnonzero(outside & penalized & (np.abs(grad) > lam * pf))
            if len(violators) == 0:
                break
            logger.debug(f"lambda {k}: {len(violators)} KKT violation(s); refitting")
            working = np.union1d(working, violators)

        if not converged[k]:
            message = f"lambda index {k} ({lam:.6g}) did not converge in {opts.max_iter} iterations"
            warnings.warn(message)
            logger.warning(message)

        nz = np.flatnonzero(beta)
        rows.append(nz)
        cols.append(np.full(len(nz), k))
        vals.append(beta[nz].copy())
        loss[k] = float(r @ r) / (2.0 * n)
        residuals[:, k] = r
        lam_prev = lam

    beta_rotated = sparse.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(P, len(lambdas)),
    )
    return {
        "lambdas": lambdas,
        "beta_rotated": beta_rotated,
        "n_iter": n_iter,
        "converged": converged,
        "loss": loss,
        "rotated_residuals": residuals,
    }


def untransform(beta_rotated: sparse.spmatrix,
                centers: np.ndarray,
                scales: np.ndarray,
                rot_scales: np.ndarray):
    """
    Back-transform rotated-scale coefficients to the original data scale

    Args:
        beta_rotated: (p+1) x L, intercept in row 0
        centers, scales: Standardization statistics of the p design columns
        rot_scales: Mean-square scales of the p+1 rotated columns

    Returns:
        (beta p x L sparse, intercepts length L)
    """
    beta_std = sparse.diags(1.0 / np.asarray(rot_scales, dtype=np.float64)) @ sparse.csr_matrix(beta_rotated)
    beta_std = sparse.csr_matrix(beta_std)
    intercept_std = beta_std[0].toarray().ravel()
    features = beta_std[1:]
    beta = sparse.csc_matrix(sparse.diags(1.0 / np.asarray(scales, dtype=np.float64)) @ features)
    beta.eliminate_zeros()
    shift = np.asarray(features.T @ (np.asarray(centers) / np.asarray(scales))).ravel()
    return beta, intercept_std - shift


def plmm(design,
         opts: Optional[PathOptions] = None,
         decomposition: Optional[Decomposition] = None,
         lambdas: Optional[Sequence[float]] = None,
         block_width: Optional[int] = None,
         threads: int = 1,
         guard: Optional[MemoryGuard] = None,
         normalize_trace: bool = False,
         eta_bounds=ETA_BOUNDS,
         eta_tol: float = ETA_TOL,
         rotated_path: Optional[str] = None,
         keep_rotated: bool = False,
         progress: bool = False) -> FitPath:
    """
    Fit a penalized linear mixed model path

    Runs relatedness -> eigendecomposition -> eta -> rotation -> lambda grid ->
    coordinate descent -> back-transformation and records seconds per stage.

    Args:
        design: Design from design_builder
        opts: Path options (default: PathOptions())
        decomposition: Precomputed decomposition; skips the first three stages
        lambdas: Explicit decreasing lambda sequence
        normalize_trace: Divide K by trace(K)/n before decomposing
        rotated_path: Backing file for the rotated design (default: scratch space)
        keep_rotated: Keep the rotated backing file and beta_rotated

    Returns:
        FitPath with decomposition and rotated residuals attached
    """
    opts = opts or PathOptions()
    timings: Dict[str, float] = {}

    if decomposition is None:
        start = time.perf_counter()
        K = compute_grm(design.X, design.penalty_factor, block_width, threads, guard)
        trace_normalizer = 1.0
        if normalize_trace:
            K, trace_normalizer = normalize_kinship_trace(K)
        timings["grm"] = time.perf_counter() - start

        start = time.perf_counter()
        U, d = eigen_sym(K)
        del K
        timings["eigen"] = time.perf_counter() - start

        start = time.perf_counter()
        eta = estimate_eta(d, U, design.y, eta_bounds, eta_tol)
        decomposition = Decomposition(U, d, eta, trace_normalizer)
        timings["eta"] = time.perf_counter() - start
    elif decomposition.n != design.n:
        raise DecompositionError(f"Decomposition has {decomposition.n} samples, design has {design.n}")

    start = time.perf_counter()
    rp = rotate(design.X, design.y, design.penalty_factor, decomposition,
                out_path=rotated_path, block_width=block_width, threads=threads)
    timings["rotate"] = time.perf_counter() - start

    try:
        start = time.perf_counter()
        if lambdas is None and opts.lambdas is None:
            lambdas = lambda_grid(rp, opts, block_width, threads)
        result = fit_path(rp, opts, lambdas, block_width, threads, guard, progress)
        timings["fit"] = time.perf_counter() - start

        start = time.perf_counter()
        beta, intercepts = untransform(result["beta_rotated"], design.centers, design.scales, rp.rot_scales)
        timings["format"] = time.perf_counter() - start
    finally:
        if not keep_rotated:
            rp.cleanup()

    fit = FitPath(
        lambdas=result["lambdas"],
        beta=beta,
        intercepts=intercepts,
        feature_names=design.feature_names,
        penalty_factor=design.penalty_factor,
        eta=decomposition.eta,
        penalty=opts.penalty,
        gamma=opts.gamma,
        n_iter=result["n_iter"],
        converged=result["converged"],
        loss=result["loss"],
        beta_rotated=result["beta_rotated"],
        rot_scales=rp.rot_scales,
        timings=timings,
        decomposition=decomposition,
        rotated_residuals=result["rotated_residuals"],
        y=design.y,
        n=design.n,
    )
    logger.info(
        f"Fit {fit!r}: eta={fit.eta:.4f}, {int((~fit.converged).sum())} non-converged lambda(s), "
        f"timings " + ", ".join(f"{k}={v:.2f}s" for k, v in timings.items())
    )
    return fit


def save_fit(fit: FitPath, out_dir: str) -> None:
    """Write lambda.txt, beta.sparse, intercept.txt, features.txt and fitinfo.txt"""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "lambda.txt"), 'w', encoding='utf-8') as f:
        f.writelines(f"{float(v)!r}\n" for v in fit.lambdas)
    with open(os.path.join(out_dir, "intercept.txt"), 'w', encoding='utf-8') as f:
        f.writelines(f"{float(v)!r}\n" for v in fit.intercepts)
    with open(os.path.join(out_dir, "features.txt"), 'w', encoding='utf-8') as f:
        f.writelines(f"{name}\t{int(pf)}\n" for name, pf in zip(fit.feature_names, fit.penalty_factor))

    beta = sparse.csc_matrix(fit.beta)
    beta.sort_indices()
    with open(os.path.join(out_dir, "beta.sparse"), 'w', encoding='utf-8') as f:
        for k in range(beta.shape[1]):
            start, end = beta.indptr[k], beta.indptr[k + 1]
            for j, value in zip(beta.indices[start:end], beta.data[start:end]):
                f.write(f"{fit.feature_names[j]}\t{k}\t{float(value)!r}\n")

    info = {
        "eta": fit.eta,
        "penalty": fit.penalty,
        "gamma": fit.gamma,
        "n": fit.n,
        "p": len(fit.feature_names),
        "n_lambda": fit.n_lambda,
        "trace_normalizer": fit.decomposition.trace_normalizer if fit.decomposition is not None else 1.0,
        "path": [
            {"lambda_index": k, "n_iter": int(fit.n_iter[k]), "converged": bool(fit.converged[k]),
             "loss": float(fit.loss[k]), "nonzero": fit.nonzero_count(k)}
            for k in range(fit.n_lambda)
        ],
        "timings": {stage: float(seconds) for stage, seconds in fit.timings.items()},
    }
    with open(os.path.join(out_dir, "fitinfo.txt"), 'w', encoding='utf-8') as f:
        yaml.safe_dump(info, f, sort_keys=False)
    logger.info(f"Saved fit to {out_dir}")


def _read_lines(path: str) -> List[str]:
    if not os.path.exists(path):
        raise FitError(f"Missing fit file: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return [line.rstrip("\n") for line in f if line.strip()]


def load_fit(out_dir: str) -> FitPath:
    """Read a fit written by save_fit (without the in-memory decomposition)"""
    lambdas = np.array([float(v) for v in _read_lines(os.path.join(out_dir, "lambda.txt"))])
    intercepts = np.array([float(v) for v in _read_lines(os.path.join(out_dir, "intercept.txt"))])
    features = [line.split("\t") for line in _read_lines(os.path.join(out_dir, "features.txt"))]
    names = [f[0] for f in features]
    penalty_factor = np.array([float(f[1]) for f in features])
    index = {name: j for j, name in enumerate(names)}

    rows, cols, vals = [], [], []
    for line in _read_lines(os.path.join(out_dir, "beta.sparse")):
        name, k, value = line.split("\t")
        if name not in index:
            raise FitError(f"beta.sparse names unknown feature {name!r}")
        rows.append(index[name])
        cols.append(int(k))
        vals.append(float(value))
    beta = sparse.csc_matrix((vals, (rows, cols)), shape=(len(names), len(lambdas)))

    with open(os.path.join(out_dir, "fitinfo.txt"), 'r', encoding='utf-8') as f:
        info = yaml.safe_load(f) or {}
    path = info.get("path", [])
    return FitPath(
        lambdas=lambdas,
        beta=beta,
        intercepts=intercepts,
        feature_names=names,
        penalty_factor=penalty_factor,
        eta=info.get("eta", 0.0),
        penalty=info.get("penalty", "lasso"),
        gamma=info.get("gamma"),
        n_iter=[p["n_iter"] for p in path] or None,
        converged=[p["converged"] for p in path] or None,
        loss=[p["loss"] for p in path] or None,
        timings=info.get("timings", {}),
        n=info.get("n"),
    )
