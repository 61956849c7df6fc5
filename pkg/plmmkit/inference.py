"""
Inference - Cross-validation with in-fold preconditioning, prediction and summaries
Linear and BLUP predictions, lambda selection and CV persistence
"""

import os
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Union

import numpy as np
import yaml
from pydantic import BaseModel, Field
from tqdm import tqdm

from .config import PathOptions
from .decomposition import Decomposition
from .design_builder import Design, RowSubset
from .errors import DesignError, InferenceError
from .guardrails import MemoryGuard
from .matrix_store import DEFAULT_BLOCK_WIDTH, ArrayColumns, ColumnSource
from .penalized_path import FitPath, load_fit, plmm, save_fit

logger = logging.getLogger(__name__)

PREDICTION_TYPES = ("linear", "blup")


class CVResult:
    """
    Cross-validation outcome for one lambda grid

    Attributes:
        lambdas: Shared lambda grid (from the full-data fit or the user)
        cve, cvse: Mean held-out squared error and its standard error per lambda
        folds: Fold label (1..k) of every design row
        fit: Full-data FitPath
        fold_fits: Per-fold FitPaths (may be empty when loaded from disk)
    """

    def __init__(self,
                 lambdas: np.ndarray,
                 cve: np.ndarray,
                 cvse: np.ndarray,
                 folds: np.ndarray,
                 prediction_type: str,
                 fit: FitPath,
                 sample_ids: Optional[List[str]] = None,
                 seed: Optional[int] = None,
                 fold_fits: Optional[List[FitPath]] = None):
        self.lambdas = np.asarray(lambdas, dtype=np.float64)
        self.cve = np.asarray(cve, dtype=np.float64)
        self.cvse = np.asarray(cvse, dtype=np.float64)
        self.folds = np.asarray(folds, dtype=np.int64)
        self.prediction_type = prediction_type
        self.fit = fit
        self.sample_ids = list(sample_ids) if sample_ids is not None else [str(i + 1) for i in range(len(folds))]
        self.seed = seed
        self.fold_fits = list(fold_fits or [])

        self.lambda_min_index = int(np.argmin(self.cve))
        threshold = self.cve[self.lambda_min_index] + self.cvse[self.lambda_min_index]
        self.lambda_1se_index = int(np.flatnonzero(self.cve <= threshold)[0])

    @property
    def nfolds(self) -> int:
        return int(self.folds.max())

    @property
    def lambda_min(self) -> float:
        return float(self.lambdas[self.lambda_min_index])

    @property
    def lambda_1se(self) -> float:
        return float(self.lambdas[self.lambda_1se_index])

    def __repr__(self) -> str:
        return (f"CVResult(k={self.nfolds}, type={self.prediction_type}, "
                f"lambda_min={self.lambda_min:.6g}, cve_min={self.cve[self.lambda_min_index]:.6g})")


class Summary(BaseModel):
    """Summary of one lambda of a fit or CV result"""

    lambda_index: int
    lambda_value: float
    penalty: str
    eta: float
    n_nonzero: int = Field(..., description="Nonzero penalized coefficients")
    selected: List[str] = Field(default_factory=list)
    coefficients: List[float] = Field(default_factory=list)
    intercept: float
    cve: Optional[float] = None
    cvse: Optional[float] = None
    lambda_min: Optional[float] = None
    lambda_min_index: Optional[int] = None
    is_lambda_min: Optional[bool] = None


def assign_folds(n: int, k: int, seed: int = 42) -> np.ndarray:
    """
    Balanced fold labels 1..k in a seeded random order

    Returns:
        Length-n array; fold sizes differ by at most one
    """
    if k < 2:
        raise InferenceError(f"Need at least 2 folds, got {k}")
    if k > n:
        raise InferenceError(f"Cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    return rng.permutation(np.arange(n) % k + 1)


def _as_source(X_new, fit: FitPath) -> ColumnSource:
    if isinstance(X_new, ColumnSource):
        if list(X_new.col_names) != fit.feature_names:
            missing = [name for name in fit.feature_names if name not in set(X_new.col_names)]
            detail = f"missing {missing[:5]}" if missing else "columns are in a different order"
            raise InferenceError(f"New data columns do not match the fitted features ({detail})")
        return X_new
    array = np.asarray(X_new, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.shape[1] != len(fit.feature_names):
        raise InferenceError(f"New data has {array.shape[1]} columns, the fit has {len(fit.feature_names)} features")
    return ArrayColumns(array, fit.feature_names)


def predict_linear(fit: FitPath,
                   X_new,
                   lambda_index: Optional[int] = None,
                   block_width: Optional[int] = None) -> np.ndarray:
    """
    Fixed-effect prediction on the original scale

    Args:
        fit: Fitted path
        X_new: Original-scale rows (ColumnSource with the fitted feature names, or an array)
        lambda_index: One lambda (0-based) or None for every lambda

    Returns:
        Length-m vector, or m x L matrix when lambda_index is None
    """
    source = _as_source(X_new, fit)
    if lambda_index is not None:
        lambda_index = fit.check_index(lambda_index)
        beta = fit.beta[:, [lambda_index]]
        intercepts = fit.intercepts[[lambda_index]]
    else:
        beta = fit.beta
        intercepts = fit.intercepts

    beta = beta.tocsr()
    pred = np.tile(intercepts, (source.n_rows, 1))
    width = block_width or DEFAULT_BLOCK_WIDTH
    for first, block in source.iter_col_blocks(width):
        part = beta[first:first + block.shape[1]]
        if part.nnz:
            pred += np.asarray(part.T @ block.T).T
    return pred[:, 0] if lambda_index is not None else pred


def _cross_relatedness(new_std: ColumnSource, train_std: ColumnSource,
                       penalty_factor: np.ndarray, block_width: Optional[int]) -> np.ndarray:
    """Scaled by the same contributing-column count as compute_grm"""
    penalized = penalty_factor > 0
    width = block_width or DEFAULT_BLOCK_WIDTH
    K_cross = np.zeros((new_std.n_rows, train_std.n_rows))
    p_pen = 0
    for first in range(0, train_std.n_cols, width):
        k = min(width, train_std.n_cols - first)
        mask = penalized[first:first + k]
        if not mask.any():
            continue
        train_block = train_std.read_col_block(first, k)[:, mask]
        p_pen += int(np.count_nonzero(np.any(train_block != 0.0, axis=0)))
        K_cross += new_std.read_col_block(first, k)[:, mask] @ train_block.T
    if p_pen == 0:
        raise InferenceError("Every penalized training column is zero")
    return K_cross / p_pen


def predict_blup(fit: FitPath,
                 design: Design,
                 X_new,
                 lambda_index: Optional[int] = None,
                 decomposition: Optional[Decomposition] = None,
                 block_width: Optional[int] = None) -> np.ndarray:
    """
    Best linear unbiased prediction

    Adds eta K_cross U diag(1/(eta d + 1 - eta)) U^T (y - fitted) to the linear
    prediction, where K_cross relates the new rows to the training rows through
    the penalized columns standardized with training statistics.

    Args:
        fit: Path fitted on `design`
        design: Training design (raw columns required)
        X_new: Original-scale new rows
        decomposition: Training decomposition (default: the one attached to fit)
    """
    decomposition = decomposition or fit.decomposition
    if decomposition is None:
        raise InferenceError("BLUP prediction needs the training decomposition")
    if decomposition.n != design.n:
        raise InferenceError(f"Decomposition has {decomposition.n} samples, design has {design.n}")
    if design.feature_names != fit.feature_names:
        raise InferenceError("Training design features do not match the fit")

    source = _as_source(X_new, fit)
    linear_new = predict_linear(fit, source, lambda_index, block_width)
    if decomposition.eta == 0.0:
        return linear_new

    try:
        train_raw = design.raw_columns()
        new_std = design.standardized(source)
    except DesignError as e:
        raise InferenceError(str(e)) from e
    residual = design.y[:, None] - predict_linear(fit, train_raw, None, block_width)
    if lambda_index is not None:
        residual = residual[:, [fit.check_index(lambda_index)]]

    K_cross = _cross_relatedness(new_std, design.X, design.penalty_factor, block_width)
    K_cross /= decomposition.trace_normalizer

    eta, d, U = decomposition.eta, decomposition.d, decomposition.U
    weights = 1.0 / (eta * d + (1.0 - eta))
    random_effect = eta * (K_cross @ (U @ (weights[:, None] * (U.T @ residual))))
    if lambda_index is not None:
        return linear_new + random_effect[:, 0]
    return linear_new + random_effect


def training_fitted(fit: FitPath, lambda_index: int) -> np.ndarray:
    """Original-scale fitted training values recovered from the rotated residuals"""
    if fit.rotated_residuals is None or fit.decomposition is None or fit.y is None:
        raise InferenceError("Fit does not carry its rotated residuals and decomposition")
    k = fit.check_index(lambda_index)
    dec = fit.decomposition
    return fit.y - dec.U @ (fit.rotated_residuals[:, k] / dec.w)


def _fold_errors(design: Design,
                 folds: np.ndarray,
                 fold: int,
                 lambdas: np.ndarray,
                 prediction_type: str,
                 opts: PathOptions,
                 block_width: Optional[int],
                 guard: Optional[MemoryGuard],
                 normalize_trace: bool):
    train = np.flatnonzero(folds != fold)
    test = np.flatnonzero(folds == fold)
    sub = design.training_subset(train, block_width)
    fit = plmm(sub, opts, lambdas=lambdas, block_width=block_width, threads=1,
               guard=guard, normalize_trace=normalize_trace)
    held_out = RowSubset(design.raw_columns(), test)
    if prediction_type == "blup":
        pred = predict_blup(fit, sub, held_out, None, block_width=block_width)
    else:
        pred = predict_linear(fit, held_out, None, block_width)
    errors = (design.y[test][:, None] - pred) ** 2
    return test, errors, fit


def cv_plmm(design: Design,
            nfolds: int = 5,
            seed: int = 42,
            prediction_type: str = "blup",
            opts: Optional[PathOptions] = None,
            lambdas: Optional[Sequence[float]] = None,
            folds: Optional[Sequence[int]] = None,
            block_width: Optional[int] = None,
            threads: int = 1,
            guard: Optional[MemoryGuard] = None,
            normalize_trace: bool = False,
            keep_fold_fits: bool = True,
            progress: bool = False) -> CVResult:
    """
    Cross-validate the whole fitting pipeline

    Every fold recomputes standardization, relatedness, eigendecomposition,
    eta and rotation from its training rows; the lambda grid is shared.

    Args:
        design: Full design
        nfolds: Number of folds
        seed: Fold assignment seed
        prediction_type: "blup" or "linear" held-out prediction
        lambdas: Explicit grid (default: grid of the full-data fit)
        folds: Explicit fold labels 1..k (default: assign_folds)
        threads: Folds run concurrently on up to this many workers

    Returns:
        CVResult with the full-data fit attached
    """
    if prediction_type not in PREDICTION_TYPES:
        raise InferenceError(f"prediction_type must be one of {PREDICTION_TYPES}, got {prediction_type!r}")
    opts = opts or PathOptions()
    n = design.n

    if folds is None:
        folds = assign_folds(n, nfolds, seed)
    folds = np.asarray(folds, dtype=np.int64)
    if len(folds) != n:
        raise InferenceError(f"{len(folds)} fold labels for {n} samples")
    labels = np.unique(folds)
    sizes = np.array([(folds == f).sum() for f in labels])
    if len(labels) < 2 or sizes.min() < 2:
        raise InferenceError(f"Every fold needs at least 2 samples (sizes {sizes.tolist()})")

    full = plmm(design, opts, lambdas=lambdas, block_width=block_width, threads=threads,
                guard=guard, normalize_trace=normalize_trace)
    grid = full.lambdas

    def run(fold):
        return _fold_errors(design, folds, fold, grid, prediction_type, opts,
                            block_width, guard, normalize_trace)

    errors = np.zeros((n, len(grid)))
    fold_fits = []
    workers = max(1, min(threads, len(labels)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = pool.map(run, labels)
        for test, fold_errors, fit in tqdm(results, total=len(labels), desc="cv folds", disable=not progress):
            errors[test] = fold_errors
            if keep_fold_fits:
                fold_fits.append(fit)

    cve = errors.mean(axis=0)
    cvse = errors.std(axis=0, ddof=1) / np.sqrt(n)
    result = CVResult(grid, cve, cvse, folds, prediction_type, full,
                      sample_ids=design.sample_ids, seed=seed, fold_fits=fold_fits)
    logger.info(f"Cross-validated {result!r}")
    return result


def summarize(obj: Union[FitPath, CVResult], lambda_index: Optional[int] = None) -> Summary:
    """
    Summary record at one lambda

    Args:
        obj: FitPath or CVResult
        lambda_index: 0-based index (default: lambda_min for CV, the last lambda for a fit)
    """
    cv = obj if isinstance(obj, CVResult) else None
    fit = cv.fit if cv is not None else obj
    if lambda_index is None:
        lambda_index = cv.lambda_min_index if cv is not None else fit.n_lambda - 1
    if not 0 <= lambda_index < fit.n_lambda:
        raise InferenceError(f"lambda index {lambda_index} out of range 0..{fit.n_lambda - 1}")

    beta = fit.coef(lambda_index)
    penalized = [j for j, pf in enumerate(fit.penalty_factor) if pf > 0 and beta[j] != 0]
    summary = Summary(
        lambda_index=lambda_index,
        lambda_value=float(fit.lambdas[lambda_index]),
        penalty=fit.penalty,
        eta=fit.eta,
        n_nonzero=len(penalized),
        selected=[fit.feature_names[j] for j in penalized],
        coefficients=[float(beta[j]) for j in penalized],
        intercept=float(fit.intercepts[lambda_index]),
    )
    if cv is not None:
        summary.cve = float(cv.cve[lambda_index])
        summary.cvse = float(cv.cvse[lambda_index])
        summary.lambda_min = cv.lambda_min
        summary.lambda_min_index = cv.lambda_min_index
        summary.is_lambda_min = lambda_index == cv.lambda_min_index
    return summary


def format_summary(summary: Summary, max_features: int = 20) -> str:
    """Render a Summary as plain text"""
    lines = [
        f"{summary.penalty}-penalized model fit with eta = {summary.eta:.4f}",
        f"lambda[{summary.lambda_index}] = {summary.lambda_value:.6g}",
        f"nonzero penalized coefficients: {summary.n_nonzero}",
        f"intercept: {summary.intercept:.6g}",
    ]
    if summary.cve is not None:
        marker = " (lambda_min)" if summary.is_lambda_min else ""
        lines.append(f"cve: {summary.cve:.6g} (se {summary.cvse:.4g}){marker}")
        lines.append(f"lambda_min = {summary.lambda_min:.6g} at index {summary.lambda_min_index}")
    if summary.selected:
        lines.append("selected features:")
        shown = list(zip(summary.selected, summary.coefficients))[:max_features]
        lines.extend(f"  {name}\t{coef:.6g}" for name, coef in shown)
        if len(summary.selected) > max_features:
            lines.append(f"  ... {len(summary.selected) - max_features} more")
    return "\n".join(lines)


def save_cv(cv: CVResult, out_dir: str) -> None:
    """Write cve.txt, folds.txt and cvinfo.txt next to the full-data fit files"""
    save_fit(cv.fit, out_dir)
    with open(os.path.join(out_dir, "cve.txt"), 'w', encoding='utf-8') as f:
        for lam, cve, cvse in zip(cv.lambdas, cv.cve, cv.cvse):
            f.write(f"{float(lam)!r}\t{float(cve)!r}\t{float(cvse)!r}\n")
    with open(os.path.join(out_dir, "folds.txt"), 'w', encoding='utf-8') as f:
        for sample, fold in zip(cv.sample_ids, cv.folds):
            f.write(f"{sample}\t{int(fold)}\n")
    info = {
        "lambda_min": cv.lambda_min,
        "lambda_min_index": cv.lambda_min_index,
        "lambda_1se": cv.lambda_1se,
        "lambda_1se_index": cv.lambda_1se_index,
        "prediction_type": cv.prediction_type,
        "nfolds": cv.nfolds,
        "seed": cv.seed,
    }
    with open(os.path.join(out_dir, "cvinfo.txt"), 'w', encoding='utf-8') as f:
        yaml.safe_dump(info, f, sort_keys=False)
    logger.info(f"Saved cross-validation to {out_dir}")


def load_cv(out_dir: str) -> CVResult:
    """Read a CV directory written by save_cv"""
    cve_path = os.path.join(out_dir, "cve.txt")
    if not os.path.exists(cve_path):
        raise InferenceError(f"Missing CV file: {cve_path}")
    table = np.loadtxt(cve_path, delimiter="\t", ndmin=2)
    ids, folds = [], []
    with open(os.path.join(out_dir, "folds.txt"), 'r', encoding='utf-8') as f:
        for line in f:
            if line.strip():
                sample, fold = line.rstrip("\n").split("\t")
                ids.append(sample)
                folds.append(int(fold))
    with open(os.path.join(out_dir, "cvinfo.txt"), 'r', encoding='utf-8') as f:
        info = yaml.safe_load(f) or {}
    return CVResult(table[:, 0], table[:, 1], table[:, 2], np.array(folds),
                    info.get("prediction_type", "blup"), load_fit(out_dir),
                    sample_ids=ids, seed=info.get("seed"))
