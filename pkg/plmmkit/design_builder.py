"""
Design Builder - Aligns predictors with an outcome and standardizes the design
Covariates are prepended unpenalized; the design is persisted next to its raw columns
"""

import os
import logging
import warnings
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DesignError
from .matrix_store import (
    ColumnSource,
    ElementKind,
    FileMatrix,
    create_matrix,
    map_blocks,
    open_matrix,
)

logger = logging.getLogger(__name__)


def read_table(path: str) -> pd.DataFrame:
    """Read a delimited table with every field kept as text (delimiter sniffed)"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Missing file: {path}")
    try:
        return pd.read_csv(path, sep=None, engine="python", dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DesignError(f"Could not read {path}: {e}") from e


def _as_table(table: Union[str, pd.DataFrame]) -> pd.DataFrame:
    return read_table(table) if isinstance(table, str) else table


def _numeric(values: pd.Series, what: str, ids: pd.Series) -> np.ndarray:
    text = values.astype(str).str.strip()
    missing = text.isin(["", "NA", "NaN", "nan"])
    converted = pd.to_numeric(text.where(~missing), errors="coerce")
    bad = converted.isna() & ~missing
    if bad.any():
        first = bad.to_numpy().nonzero()[0][0]
        raise DesignError(f"Non-numeric {what} {values.iloc[first]!r} for sample {ids.iloc[first]!r}")
    return converted.to_numpy(dtype=np.float64)


class RowSubset(ColumnSource):
    """Row-selected view of another column source"""

    def __init__(self, source: ColumnSource, rows: Sequence[int]):
        self.source = source
        self.rows = np.asarray(rows, dtype=np.int64)
        self.n_rows = len(self.rows)
        self.n_cols = source.n_cols
        self.col_names = list(source.col_names)

    def read_col_block(self, first_col: int, n_block_cols: int, rows=None) -> np.ndarray:
        selected = self.rows if rows is None else self.rows[np.asarray(rows, dtype=np.int64)]
        return self.source.read_col_block(first_col, n_block_cols, rows=selected)


class AugmentedColumns(ColumnSource):
    """Covariate columns (in memory) followed by the predictor columns of aligned rows"""

    def __init__(self,
                 source: ColumnSource,
                 rows: Sequence[int],
                 covariates: Optional[np.ndarray] = None,
                 covariate_names: Optional[List[str]] = None):
        self.source = RowSubset(source, rows)
        self.covariates = (np.asfortranarray(covariates, dtype=np.float64)
                           if covariates is not None else np.empty((len(rows), 0), order="F"))
        self.n_covariates = self.covariates.shape[1]
        self.n_rows = self.source.n_rows
        self.n_cols = self.n_covariates + source.n_cols
        self.col_names = list(covariate_names or []) + list(source.col_names)

    @property
    def penalty_factor(self) -> np.ndarray:
        return np.concatenate([np.zeros(self.n_covariates), np.ones(self.source.n_cols)])

    def read_col_block(self, first_col: int, n_block_cols: int, rows=None) -> np.ndarray:
        self._check_range(first_col, n_block_cols)
        n = self.n_rows if rows is None else len(rows)
        out = np.empty((n, n_block_cols), dtype=np.float64, order="F")
        end = first_col + n_block_cols
        c = self.n_covariates
        if first_col < c:
            cov = self.covariates[:, first_col:min(end, c)]
            out[:, :cov.shape[1]] = cov if rows is None else cov[rows]
        if end > c:
            start = max(first_col, c)
            out[:, start - first_col:] = self.source.read_col_block(start - c, end - start, rows=rows)
        return out


class StandardizedBlocks(ColumnSource):
    """
    Standardized view of raw columns

    Columns flagged in `zero_cols` (constant on the rows the statistics came
    from) are served as exact zeros.
    """

    def __init__(self,
                 raw: ColumnSource,
                 centers: np.ndarray,
                 scales: np.ndarray,
                 zero_cols: Optional[np.ndarray] = None):
        self.raw = raw
        self.centers = np.asarray(centers, dtype=np.float64)
        self.scales = np.asarray(scales, dtype=np.float64)
        self.zero_cols = (np.asarray(zero_cols, dtype=bool) if zero_cols is not None
                          else np.zeros(raw.n_cols, dtype=bool))
        self.n_rows = raw.n_rows
        self.n_cols = raw.n_cols
        self.col_names = list(raw.col_names)

    def read_col_block(self, first_col: int, n_block_cols: int, rows=None) -> np.ndarray:
        block = self.raw.read_col_block(first_col, n_block_cols, rows=rows)
        sl = slice(first_col, first_col + n_block_cols)
        block = (block - self.centers[sl]) / self.scales[sl]
        block[:, self.zero_cols[sl]] = 0.0
        return np.asfortranarray(block)


def column_statistics(source: ColumnSource,
                      block_width: Optional[int] = None,
                      threads: int = 1,
                      rows=None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Population centers and scales of every column

    Returns:
        (centers, scales, constant) where constant flags columns with max == min
    """
    def stats(first: int, block: np.ndarray):
        if np.isnan(block).any():
            j = first + int(np.isnan(block).any(axis=0).nonzero()[0][0])
            raise DesignError(f"Feature {source.col_names[j]!r} has missing values; impute before standardizing")
        center = block.mean(axis=0)
        scale = np.sqrt(((block - center) ** 2).mean(axis=0))
        constant = block.max(axis=0) == block.min(axis=0)
        return center, scale, constant

    parts = list(map_blocks(stats, source, block_width, threads, rows=rows))
    centers = np.concatenate([p[0] for p in parts])
    scales = np.concatenate([p[1] for p in parts])
    constant = np.concatenate([p[2] for p in parts]) | (scales == 0)
    return centers, scales, constant


class Design:
    """
    Standardized design ready for fitting

    Attributes:
        X: Standardized n x p column source (covariates first)
        y: Outcome vector aligned with the rows of X
        penalty_factor: 0 for covariates, 1 for penalized features
        centers, scales: Standardization statistics of the retained columns
        raw: Row-aligned unstandardized retained columns (needed by CV and BLUP)
    """

    def __init__(self,
                 X: ColumnSource,
                 y: np.ndarray,
                 penalty_factor: np.ndarray,
                 centers: np.ndarray,
                 scales: np.ndarray,
                 sample_ids: List[str],
                 feature_names: List[str],
                 dropped_features: Optional[List[str]] = None,
                 raw: Optional[ColumnSource] = None,
                 path: Optional[str] = None,
                 outcome_name: str = "y"):
        self.X = X
        self.y = np.asarray(y, dtype=np.float64)
        self.penalty_factor = np.asarray(penalty_factor, dtype=np.float64)
        self.centers = np.asarray(centers, dtype=np.float64)
        self.scales = np.asarray(scales, dtype=np.float64)
        self.sample_ids = list(sample_ids)
        self.feature_names = list(feature_names)
        self.dropped_features = list(dropped_features or [])
        self.raw = raw
        self.path = path
        self.outcome_name = outcome_name

        if len(self.y) != X.n_rows or len(self.sample_ids) != X.n_rows:
            raise DesignError(f"Outcome length {len(self.y)} does not match {X.n_rows} design rows")
        if not (self.penalty_factor > 0).any():
            raise DesignError("Design has no penalized columns")
        zeros = np.flatnonzero(self.penalty_factor == 0)
        if len(zeros) and zeros[-1] != len(zeros) - 1:
            raise DesignError("Unpenalized columns must precede penalized columns")

    @property
    def n(self) -> int:
        return self.X.n_rows

    @property
    def p(self) -> int:
        return self.X.n_cols

    @property
    def n_unpenalized(self) -> int:
        return int((self.penalty_factor == 0).sum())

    @property
    def n_penalized(self) -> int:
        return self.p - self.n_unpenalized

    def __repr__(self) -> str:
        return f"Design(n={self.n}, p={self.p}, unpenalized={self.n_unpenalized})"

    def raw_columns(self) -> ColumnSource:
        """Original-scale retained columns, row-aligned with y"""
        if self.raw is None:
            raise DesignError("Design was built without its raw columns")
        return self.raw

    def standardized(self, source: ColumnSource) -> StandardizedBlocks:
        """Standardize new original-scale rows with this design's statistics"""
        if list(source.col_names) != self.feature_names:
            raise DesignError("New data columns do not match the design features")
        return StandardizedBlocks(source, self.centers, self.scales,
                                  zero_cols=getattr(self.X, "zero_cols", None))

    def training_subset(self, rows: Sequence[int],
                        block_width: Optional[int] = None,
                        threads: int = 1) -> "Design":
        """
        Design over a subset of rows, standardized with statistics of those rows only

        Columns constant within the subset are kept as zero columns (scale 1)
        and reported with a warning.
        """
        rows = np.asarray(rows, dtype=np.int64)
        raw = RowSubset(self.raw_columns(), rows)
        centers, scales, constant = column_statistics(raw, block_width, threads)
        if constant.any():
            names = [self.feature_names[j] for j in np.flatnonzero(constant)]
            message = f"{len(names)} column(s) constant within the training rows: {', '.join(names[:5])}"
            warnings.warn(message)
            logger.warning(message)
            scales = np.where(constant, 1.0, scales)

        return Design(
            X=StandardizedBlocks(raw, centers, scales, zero_cols=constant),
            y=self.y[rows],
            penalty_factor=self.penalty_factor,
            centers=centers,
            scales=scales,
            sample_ids=[self.sample_ids[i] for i in rows],
            feature_names=self.feature_names,
            dropped_features=self.dropped_features,
            raw=raw,
            outcome_name=self.outcome_name,
        )


def align_outcome(predictor_ids: Sequence[str],
                  outcome_table: Union[str, pd.DataFrame],
                  id_col: str,
                  outcome_col: str) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """
    Match outcome values to predictor rows by sample id

    Args:
        predictor_ids: Row ids of the predictor matrix
        outcome_table: Table (or path) with id_col and a numeric outcome_col
        id_col: Sample id column
        outcome_col: Outcome column

    Returns:
        (predictor row indices in predictor order, matched y, ids without outcome)
    """
    table = _as_table(outcome_table)
    for col in (id_col, outcome_col):
        if col not in table.columns:
            raise DesignError(f"Outcome table has no column {col!r}")

    ids = table[id_col].astype(str)
    duplicated = ids[ids.duplicated()]
    if len(duplicated) > 0:
        raise DesignError(f"Duplicate sample id {duplicated.iloc[0]!r} in outcome table")

    values = _numeric(table[outcome_col], "outcome", ids)
    lookup = pd.Series(values, index=ids.to_numpy())
    matched = lookup.reindex([str(i) for i in predictor_ids]).to_numpy()

    has_outcome = ~np.isnan(matched)
    if not has_outcome.any():
        raise DesignError("No predictor sample has an outcome value")

    rows = np.flatnonzero(has_outcome)
    dropped = [str(predictor_ids[i]) for i in np.flatnonzero(~has_outcome)]
    if dropped:
        logger.info(f"Dropped {len(dropped)} sample(s) without an outcome")
    return rows, matched[rows], dropped


def add_unpenalized(source: ColumnSource,
                    rows: Sequence[int],
                    sample_ids: Sequence[str],
                    covariate_table: Union[str, pd.DataFrame],
                    id_col: str,
                    covariate_cols: Optional[List[str]] = None) -> AugmentedColumns:
    """
    Prepend unpenalized covariates to the aligned predictor rows

    Args:
        source: Predictor matrix
        rows: Retained predictor rows (from align_outcome)
        sample_ids: Ids of the retained rows
        covariate_table: Table (or path) with id_col and numeric covariates
        covariate_cols: Covariates to use (default: every other column)

    Returns:
        AugmentedColumns whose penalty_factor is 0 for the covariates
    """
    table = _as_table(covariate_table)
    if id_col not in table.columns:
        raise DesignError(f"Covariate table has no column {id_col!r}")
    covariate_cols = covariate_cols or [c for c in table.columns if c != id_col]
    if not covariate_cols:
        raise DesignError("Covariate table has no covariate columns")
    for col in covariate_cols:
        if col not in table.columns:
            raise DesignError(f"Covariate table has no column {col!r}")
        if col in source.col_names:
            raise DesignError(f"Covariate {col!r} collides with a predictor name")

    ids = table[id_col].astype(str)
    duplicated = ids[ids.duplicated()]
    if len(duplicated) > 0:
        raise DesignError(f"Duplicate sample id {duplicated.iloc[0]!r} in covariate table")

    values = np.column_stack([_numeric(table[c], f"covariate {c!r}", ids) for c in covariate_cols])
    frame = pd.DataFrame(values, index=ids.to_numpy(), columns=covariate_cols)
    wanted = [str(s) for s in sample_ids]
    aligned = frame.reindex(wanted)
    incomplete = aligned.isna().any(axis=1).to_numpy()
    if incomplete.any():
        raise DesignError(f"Covariates missing for sample {wanted[int(np.argmax(incomplete))]!r}")

    return AugmentedColumns(source, rows, aligned.to_numpy(dtype=np.float64), covariate_cols)


def standardize(source: ColumnSource,
                out_path: str,
                raw_out_path: Optional[str] = None,
                row_ids: Optional[List[str]] = None,
                block_width: Optional[int] = None,
                threads: int = 1,
                overwrite: bool = False) -> Tuple[FileMatrix, np.ndarray, np.ndarray, List[str]]:
    """
    Center and scale every column, dropping constant ones

    Args:
        source: Float64 columns without missing values
        out_path: Backing file of the standardized store
        raw_out_path: Optional backing file receiving the retained unstandardized columns

    Returns:
        (standardized FileMatrix, centers, scales, dropped column names)
    """
    centers, scales, constant = column_statistics(source, block_width, threads)
    keep = ~constant
    if not keep.any():
        raise DesignError(f"All {source.n_cols} columns are constant")

    dropped = [source.col_names[j] for j in np.flatnonzero(constant)]
    kept_names = [source.col_names[j] for j in np.flatnonzero(keep)]
    centers, scales = centers[keep], scales[keep]

    out = create_matrix(out_path, source.n_rows, len(kept_names), ElementKind.FLOAT64,
                        col_names=kept_names, row_ids=row_ids, overwrite=overwrite)
    raw_out = None
    if raw_out_path is not None:
        raw_out = create_matrix(raw_out_path, source.n_rows, len(kept_names), ElementKind.FLOAT64,
                                col_names=kept_names, row_ids=row_ids, overwrite=overwrite)

    def transform(first: int, block: np.ndarray):
        k = block.shape[1]
        mask = keep[first:first + k]
        before = int(keep[:first].sum())
        kept = block[:, mask]
        sl = slice(before, before + kept.shape[1])
        return before, kept, (kept - centers[sl]) / scales[sl]

    for position, kept, std in map_blocks(transform, source, block_width, threads):
        if kept.shape[1] == 0:
            continue
        out.write_col_block(position, std)
        if raw_out is not None:
            raw_out.write_col_block(position, kept)

    if dropped:
        logger.info(f"Dropped {len(dropped)} constant column(s)")
    return out, centers, scales, dropped


def create_design(predictors: ColumnSource,
                  outcome_table: Union[str, pd.DataFrame],
                  out_dir: str,
                  name: str = "design",
                  id_col: str = "id",
                  outcome_col: Optional[str] = None,
                  predictor_ids: Optional[List[str]] = None,
                  covariate_table: Union[str, pd.DataFrame, None] = None,
                  covariate_id_col: Optional[str] = None,
                  covariate_cols: Optional[List[str]] = None,
                  block_width: Optional[int] = None,
                  threads: int = 1,
                  overwrite: bool = False) -> Design:
    """
    Build and persist a Design: align -> add covariates -> standardize

    Args:
        predictors: Predictor matrix (FileMatrix from ingestion or in-memory columns)
        outcome_table: Table (or path) holding sample ids and the outcome
        out_dir: Directory receiving <name>.bk/.meta, <name>_raw.bk and <name>_outcome.txt
        id_col: Sample id column of the outcome table
        outcome_col: Outcome column (default: first column other than id_col)
        predictor_ids: Row ids of the predictors (default: the store's row_ids)
        covariate_table: Optional unpenalized covariates (table or path)

    Returns:
        Persisted Design
    """
    outcome_table = _as_table(outcome_table)
    if outcome_col is None:
        others = [c for c in outcome_table.columns if c != id_col]
        if not others:
            raise DesignError("Outcome table has no outcome column")
        outcome_col = others[0]

    predictor_ids = predictor_ids or getattr(predictors, "row_ids", None)
    if predictor_ids is None:
        raise DesignError("Predictor row ids are required to align the outcome")
    if len(predictor_ids) != predictors.n_rows:
        raise DesignError(f"{len(predictor_ids)} predictor ids for {predictors.n_rows} rows")

    rows, y, dropped_ids = align_outcome(predictor_ids, outcome_table, id_col, outcome_col)
    sample_ids = [str(predictor_ids[i]) for i in rows]

    if covariate_table is not None:
        columns = add_unpenalized(predictors, rows, sample_ids, covariate_table,
                                  covariate_id_col or id_col, covariate_cols)
    else:
        columns = AugmentedColumns(predictors, rows)
    penalty_factor = columns.penalty_factor

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{name}.bk")
    raw_path = os.path.join(out_dir, f"{name}_raw.bk")
    X, centers, scales, dropped = standardize(columns, path, raw_out_path=raw_path,
                                              row_ids=sample_ids, block_width=block_width,
                                              threads=threads, overwrite=overwrite)
    keep = np.isin(np.asarray(columns.col_names, dtype=object), np.asarray(X.col_names, dtype=object))
    penalty_factor = penalty_factor[keep]

    X.extra.update({"outcome_name": str(outcome_col), "raw_file": os.path.basename(raw_path)})
    X.sections.update({
        "centers": [repr(float(v)) for v in centers],
        "scales": [repr(float(v)) for v in scales],
        "penalty_factor": [str(int(v)) for v in penalty_factor],
        "dropped_features": dropped,
    })
    X.write_meta()

    with open(os.path.join(out_dir, f"{name}_outcome.txt"), 'w', encoding='utf-8') as f:
        for sample, value in zip(sample_ids, y):
            f.write(f"{sample}\t{float(value)!r}\n")

    design = Design(X=X, y=y, penalty_factor=penalty_factor, centers=centers, scales=scales,
                    sample_ids=sample_ids, feature_names=X.col_names, dropped_features=dropped,
                    raw=open_matrix(raw_path), path=X.path, outcome_name=str(outcome_col))
    logger.info(
        f"Created {design!r} at {path}; {len(dropped_ids)} sample(s) without outcome, "
        f"{len(dropped)} constant column(s) dropped"
    )
    return design


def load_design(path: str) -> Design:
    """Open a persisted Design from its backing file path"""
    X = open_matrix(path)
    base = os.path.splitext(X.path)[0]
    outcome_path = base + "_outcome.txt"
    if not os.path.exists(outcome_path):
        raise DesignError(f"Missing outcome file: {outcome_path}")
    for section in ("centers", "scales", "penalty_factor"):
        if section not in X.sections:
            raise DesignError(f"{X.meta_path} has no {section!r} section; not a design store")

    ids, values = [], []
    with open(outcome_path, 'r', encoding='utf-8') as f:
        for line in f:
            if line.strip():
                sample, value = line.rstrip("\n").split("\t")
                ids.append(sample)
                values.append(float(value))
    if ids != X.row_ids:
        raise DesignError(f"{outcome_path} is not aligned with {X.path}")

    raw_file = X.extra.get("raw_file")
    raw = open_matrix(os.path.join(os.path.dirname(X.path), raw_file)) if raw_file else None

    return Design(
        X=X,
        y=np.array(values),
        penalty_factor=np.array([float(v) for v in X.sections["penalty_factor"]]),
        centers=np.array([float(v) for v in X.sections["centers"]]),
        scales=np.array([float(v) for v in X.sections["scales"]]),
        sample_ids=ids,
        feature_names=X.col_names,
        dropped_features=X.sections.get("dropped_features", []),
        raw=raw,
        path=X.path,
        outcome_name=X.extra.get("outcome_name", "y"),
    )
