"""
Decomposition - Relatedness matrix, eigendecomposition, variance ratio and rotation
Prepares the preconditioned problem that the penalized path is fit on
"""

import os
import logging
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import minimize_scalar

from .config import scratch_dir
from .errors import DecompositionError
from .guardrails import MemoryGuard
from .matrix_store import (
    ColumnSource,
    ElementKind,
    FileMatrix,
    create_matrix,
    map_blocks,
    open_matrix,
    remove_matrix,
)

logger = logging.getLogger(__name__)

ETA_BOUNDS = (0.01, 0.99)
ETA_TOL = 1e-6
INTERCEPT_NAME = "(Intercept)"


class Decomposition:
    """
    Eigendecomposition of the relatedness matrix plus the variance ratio

    Attributes:
        U: n x n orthonormal eigenvectors (columns)
        d: Eigenvalues, descending
        eta: Estimated share of outcome variance due to structure
        trace_normalizer: Factor K was divided by (1.0 when not normalized)
    """

    def __init__(self, U: np.ndarray, d: np.ndarray, eta: float, trace_normalizer: float = 1.0):
        self.U = np.asarray(U, dtype=np.float64)
        self.d = np.asarray(d, dtype=np.float64)
        self.eta = float(eta)
        self.trace_normalizer = float(trace_normalizer)
        if self.U.shape != (len(self.d), len(self.d)):
            raise DecompositionError(f"U is {self.U.shape} but there are {len(self.d)} eigenvalues")

    @property
    def n(self) -> int:
        return len(self.d)

    @property
    def w(self) -> np.ndarray:
        """Rotation weights (eta d + 1 - eta)^(-1/2)"""
        return 1.0 / np.sqrt(self.eta * self.d + (1.0 - self.eta))

    def preconditioner(self) -> np.ndarray:
        """F = diag(w) U^T, the matrix applied to both sides of the model"""
        return self.w[:, None] * self.U.T

    def relatedness(self) -> np.ndarray:
        """K reconstructed from U and d"""
        return (self.U * self.d) @ self.U.T

    def variance_matrix(self) -> np.ndarray:
        """S = eta K + (1 - eta) I"""
        return self.eta * self.relatedness() + (1.0 - self.eta) * np.eye(self.n)

    @classmethod
    def from_kinship(cls, K: np.ndarray, y: np.ndarray,
                     bounds: Tuple[float, float] = ETA_BOUNDS,
                     tol: float = ETA_TOL,
                     trace_normalizer: float = 1.0) -> "Decomposition":
        """Eigendecompose K and estimate eta for outcome y"""
        U, d = eigen_sym(K)
        return cls(U, d, estimate_eta(d, U, y, bounds, tol), trace_normalizer)

    def __repr__(self) -> str:
        return f"Decomposition(n={self.n}, eta={self.eta:.6f})"


class RotatedProblem:
    """
    Preconditioned design and outcome

    Column 0 of Xr is the rotated intercept; every column has mean square 1
    after division by rot_scales (an all-zero column keeps scale 1).
    """

    def __init__(self,
                 Xr: ColumnSource,
                 yr: np.ndarray,
                 rot_scales: np.ndarray,
                 penalty_factor: np.ndarray,
                 feature_names: List[str],
                 owns_store: bool = False):
        self.Xr = Xr
        self.yr = np.asarray(yr, dtype=np.float64)
        self.rot_scales = np.asarray(rot_scales, dtype=np.float64)
        self.penalty_factor = np.asarray(penalty_factor, dtype=np.float64)
        self.feature_names = list(feature_names)
        self.owns_store = owns_store

    @property
    def n(self) -> int:
        return self.Xr.n_rows

    @property
    def n_cols(self) -> int:
        return self.Xr.n_cols

    def cleanup(self) -> None:
        """Delete the rotated backing file when it lives in scratch space"""
        if self.owns_store and isinstance(self.Xr, FileMatrix):
            remove_matrix(self.Xr.path)
            scratch = os.path.dirname(self.Xr.path)
            if os.path.isdir(scratch) and not os.listdir(scratch):
                os.rmdir(scratch)
            self.owns_store = False


def compute_grm(X: ColumnSource,
                penalty_factor: np.ndarray,
                block_width: Optional[int] = None,
                threads: int = 1,
                guard: Optional[MemoryGuard] = None) -> np.ndarray:
    """
    Relatedness matrix K = (1/p_pen) sum of x x^T over penalized columns

    p_pen counts only penalized columns that are not identically zero, so a
    column zeroed out as constant within a training fold does not shrink K.

    Args:
        X: Standardized design columns
        penalty_factor: Column weights; only columns with factor > 0 contribute
        guard: Memory guard checked before the n x n workspace is allocated

    Returns:
        Symmetric n x n array
    """
    penalty_factor = np.asarray(penalty_factor, dtype=np.float64)
    penalized = penalty_factor > 0
    if not penalized.any():
        raise DecompositionError("No penalized columns to compute relatedness from")
    if guard is not None:
        guard.require(guard.check_dense_workspace(X.n_rows))

    def partial(first: int, block: np.ndarray) -> Tuple[Optional[np.ndarray], int]:
        cols = block[:, penalized[first:first + block.shape[1]]]
        if cols.shape[1] == 0:
            return None, 0
        return cols @ cols.T, int(np.count_nonzero(np.any(cols != 0.0, axis=0)))

    K = np.zeros((X.n_rows, X.n_rows))
    p_pen = 0
    for part, contributing in map_blocks(partial, X, block_width, threads):
        if part is not None:
            K += part
        p_pen += contributing
    if p_pen == 0:
        raise DecompositionError("Every penalized column is zero; relatedness is undefined")
    K /= p_pen
    K = (K + K.T) / 2.0
    logger.info(f"Relatedness matrix over {p_pen} penalized columns; trace/n = {np.trace(K) / X.n_rows:.6f}")
    return K


def normalize_trace(K: np.ndarray) -> Tuple[np.ndarray, float]:
    """Scale K so that trace(K)/n = 1; returns (K, factor)"""
    factor = float(np.trace(K) / K.shape[0])
    if factor <= 0:
        raise DecompositionError("Relatedness matrix has non-positive trace")
    return K / factor, factor


def eigen_sym(K: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Dense symmetric eigendecomposition, eigenvalues descending

    Returns:
        (U, d) with K = U diag(d) U^T
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DecompositionError(f"Relatedness matrix must be square, got {K.shape}")
    try:
        d, U = linalg.eigh(K, check_finite=True)
    except (linalg.LinAlgError, ValueError) as e:
        raise DecompositionError(f"Eigendecomposition failed: {e}") from e
    return np.ascontiguousarray(U[:, ::-1]), d[::-1].copy()


def profile_loglik(eta: float, d: np.ndarray, z: np.ndarray) -> float:
    """Profile log-likelihood of the variance ratio, total variance profiled out"""
    v = eta * d + (1.0 - eta)
    n = len(z)
    return -0.5 * (n * np.log(np.sum(z * z / v)) + np.sum(np.log(v)))


def estimate_eta(d: np.ndarray,
                 U: np.ndarray,
                 y: np.ndarray,
                 bounds: Tuple[float, float] = ETA_BOUNDS,
                 tol: float = ETA_TOL) -> float:
    """
    Maximize the profile log-likelihood of eta over a bounded interval

    Args:
        d, U: Eigendecomposition of K
        y: Outcome (centered here)
        bounds: Search interval
        tol: Absolute tolerance of the bounded Brent search

    Returns:
        eta_hat; a flat likelihood resolves to the lower bound
    """
    lower, upper = bounds
    y = np.asarray(y, dtype=np.float64)
    z = U.T @ (y - y.mean())
    if not np.any(z):
        logger.warning("Outcome is constant; eta set to the lower bound")
        return float(lower)

    result = minimize_scalar(lambda eta: -profile_loglik(eta, d, z),
                             bounds=(lower, upper), method="bounded",
                             options={"xatol": tol})
    candidates = sorted({float(lower), float(result.x), float(upper)})
    values = [profile_loglik(eta, d, z) for eta in candidates]
    best = max(values)
    tie = 1e-10 * max(1.0, abs(best))
    eta_hat = next(eta for eta, value in zip(candidates, values) if value >= best - tie)
    logger.info(f"Estimated eta = {eta_hat:.6f}")
    return eta_hat


def rotate(X: ColumnSource,
           y: np.ndarray,
           penalty_factor: np.ndarray,
           decomposition: Decomposition,
           out_path: Optional[str] = None,
           block_width: Optional[int] = None,
           threads: int = 1) -> RotatedProblem:
    """
    Precondition the design and outcome with F = diag(w) U^T

    Args:
        X: Standardized design columns
        y: Outcome
        penalty_factor: Design penalty factor (0 is prepended for the intercept)
        decomposition: Eigendecomposition and eta
        out_path: Backing file for the rotated columns (default: scratch space)

    Returns:
        RotatedProblem with the intercept in column 0
    """
    y = np.asarray(y, dtype=np.float64)
    n = decomposition.n
    if X.n_rows != n or len(y) != n:
        raise DecompositionError(
            f"Dimension mismatch: design {X.n_rows} rows, outcome {len(y)}, decomposition {n}"
        )
    if len(penalty_factor) != X.n_cols:
        raise DecompositionError(f"penalty_factor has {len(penalty_factor)} entries for {X.n_cols} columns")

    owns_store = out_path is None
    if owns_store:
        out_path = os.path.join(scratch_dir("plmmkit_rotated_"), "rotated.bk")

    w = decomposition.w
    Ut = decomposition.U.T
    names = [INTERCEPT_NAME] + list(X.col_names)
    Xr = create_matrix(out_path, n, X.n_cols + 1, ElementKind.FLOAT64, col_names=names, overwrite=True)

    def rescale(block: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        scales = np.sqrt(np.mean(block * block, axis=0))
        scales = np.where(scales > 0, scales, 1.0)
        return block / scales, scales

    intercept, intercept_scale = rescale(w[:, None] * (Ut @ np.ones((n, 1))))
    Xr.write_col_block(0, intercept)

    def transform(first: int, block: np.ndarray):
        return first, rescale(w[:, None] * (Ut @ block))

    rot_scales = [intercept_scale]
    for first, (rotated, scales) in map_blocks(transform, X, block_width, threads):
        Xr.write_col_block(first + 1, rotated)
        rot_scales.append(scales)

    logger.info(f"Rotated {X.n_cols} columns plus intercept (n={n})")
    return RotatedProblem(
        Xr=Xr,
        yr=w * (Ut @ y),
        rot_scales=np.concatenate(rot_scales),
        penalty_factor=np.concatenate([[0.0], np.asarray(penalty_factor, dtype=np.float64)]),
        feature_names=names,
        owns_store=owns_store,
    )


def save_decomposition(decomposition: Decomposition,
                       path: str,
                       row_ids: Optional[List[str]] = None,
                       overwrite: bool = True) -> FileMatrix:
    """Persist U as a float64 store with eigenvalues, eta and trace normalizer in the sidecar"""
    n = decomposition.n
    store = create_matrix(
        path, n, n, ElementKind.FLOAT64,
        row_ids=row_ids,
        overwrite=overwrite,
        extra={"eta": repr(decomposition.eta), "trace_normalizer": repr(decomposition.trace_normalizer)},
        sections={"eigenvalues": [repr(float(v)) for v in decomposition.d]},
    )
    store.write_col_block(0, decomposition.U)
    logger.info(f"Saved {decomposition!r} to {path}")
    return store


def load_decomposition(path: str) -> Decomposition:
    """Read a decomposition written by save_decomposition"""
    store = open_matrix(path)
    if "eigenvalues" not in store.sections or "eta" not in store.extra:
        raise DecompositionError(f"{store.meta_path} does not describe a decomposition")
    U = store.read_col_block(0, store.n_cols)
    d = np.array([float(v) for v in store.sections["eigenvalues"]])
    return Decomposition(U, d, float(store.extra["eta"]),
                         float(store.extra.get("trace_normalizer", 1.0)))
