"""
PLINK Ingest - Parses .bed/.bim/.fam triplets and delimited text into matrix stores
Decodes genotypes to dosages, imputes missing calls and drops unusable variants
"""

import os
import logging
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .errors import IngestError
from .matrix_store import (
    DEFAULT_BLOCK_WIDTH,
    MISSING_SENTINEL,
    ElementKind,
    FileMatrix,
    create_matrix,
    remove_matrix,
)

logger = logging.getLogger(__name__)

FAM_COLUMNS = ["fid", "iid", "sex", "phenotype_raw"]
BIM_COLUMNS = ["chrom", "variant_id", "genetic_dist", "bp_position", "allele1", "allele2"]

BED_MAGIC = b"\x6c\x1b"
SNP_MAJOR = 0x01
SAMPLE_MAJOR = 0x00

# 2-bit genotype code -> count of allele A1: 00 hom A1, 01 missing, 10 het, 11 hom A2
CODE_TO_DOSAGE = np.array([2, MISSING_SENTINEL, 1, 0], dtype=np.uint8)


def _byte_lookup() -> np.ndarray:
    """(256, 4) table: packed byte -> dosages of its four samples, low bits first"""
    byte = np.arange(256, dtype=np.uint16)[:, None]
    shifts = np.array([0, 2, 4, 6], dtype=np.uint16)[None, :]
    return CODE_TO_DOSAGE[(byte >> shifts) & 3]


BYTE_LOOKUP = _byte_lookup()


class IngestReport(BaseModel):
    """Tallies from decoding and filtering one genotype matrix"""

    n_samples: int
    n_variants_read: int
    n_variants_dropped_constant: int = 0
    n_variants_dropped_maf: int = 0
    n_missing: int = Field(0, description="Missing genotype calls seen while decoding")
    n_missing_imputed: int = 0
    maf: List[float] = Field(default_factory=list)
    missing_rate: List[float] = Field(default_factory=list)
    dropped_variants: List[str] = Field(default_factory=list)

    @property
    def n_variants_retained(self) -> int:
        return self.n_variants_read - self.n_variants_dropped_constant - self.n_variants_dropped_maf


def _read_fields(path: str, min_fields: int, exact: bool = False) -> List[List[str]]:
    if not os.path.exists(path):
        raise IngestError(f"Missing file: {path}")
    rows = []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) < min_fields or (exact and len(fields) != min_fields):
                expected = f"{min_fields}" if exact else f"at least {min_fields}"
                raise IngestError(
                    f"{path}, line {lineno}: expected {expected} fields, found {len(fields)}"
                )
            rows.append(fields)
    if not rows:
        raise IngestError(f"{path} is empty")
    return rows


def parse_fam(path: str) -> pd.DataFrame:
    """
    Read a PLINK .fam file

    Args:
        path: Whitespace-delimited file with at least 6 fields per line

    Returns:
        SampleTable with columns fid, iid, sex, phenotype_raw in file order
    """
    rows = _read_fields(path, 6)
    table = pd.DataFrame(
        [(r[0], r[1], r[4], r[5]) for r in rows],
        columns=FAM_COLUMNS,
        dtype=str,
    )
    logger.info(f"Parsed {len(table)} samples from {path}")
    return table


def parse_bim(path: str) -> pd.DataFrame:
    """
    Read a PLINK .bim file

    Args:
        path: Whitespace-delimited file with 6 fields per line

    Returns:
        VariantTable (chrom, variant_id, genetic_dist, bp_position, allele1, allele2)
    """
    rows = _read_fields(path, 6, exact=True)
    table = pd.DataFrame(rows, columns=BIM_COLUMNS, dtype=str)
    try:
        table["genetic_dist"] = table["genetic_dist"].astype(np.float64)
        table["bp_position"] = table["bp_position"].astype(np.int64)
    except ValueError as e:
        raise IngestError(f"{path}: non-numeric position field ({e})") from e

    duplicated = table["variant_id"][table["variant_id"].duplicated()]
    if len(duplicated) > 0:
        raise IngestError(f"{path}: duplicate variant id {duplicated.iloc[0]!r}")

    logger.info(f"Parsed {len(table)} variants from {path}")
    return table


def decode_bed(bed_path: str,
               n_samples: int,
               n_variants: int,
               out: FileMatrix,
               block_width: Optional[int] = None) -> IngestReport:
    """
    Decode a SNP-major .bed file into a uint8 dosage store

    Args:
        bed_path: Path to the .bed file
        n_samples: Number of samples (.fam lines)
        n_variants: Number of variants (.bim lines)
        out: Writable n_samples x n_variants uint8 FileMatrix

    Returns:
        IngestReport with per-variant missing rate, MAF and the missing tally
    """
    if not os.path.exists(bed_path):
        raise IngestError(f"Missing file: {bed_path}")
    with open(bed_path, 'rb') as f:
        header = f.read(3)
    if len(header) < 3 or header[:2] != BED_MAGIC:
        raise IngestError(f"{bed_path}: not a PLINK .bed file (bad magic bytes)")
    if header[2] == SAMPLE_MAJOR:
        raise IngestError(f"{bed_path}: sample-major .bed files are not supported")
    if header[2] != SNP_MAJOR:
        raise IngestError(f"{bed_path}: unknown .bed mode byte {header[2]:#04x}")

    bytes_per_variant = (n_samples + 3) // 4
    expected = 3 + n_variants * bytes_per_variant
    actual = os.path.getsize(bed_path)
    if actual != expected:
        raise IngestError(
            f"{bed_path}: {actual} bytes, expected {expected} for {n_samples} samples x {n_variants} variants"
        )
    if (out.n_rows, out.n_cols) != (n_samples, n_variants) or out.element_kind is not ElementKind.UINT8:
        raise IngestError(f"Output store {out!r} does not match {n_samples}x{n_variants} uint8")

    width = block_width or DEFAULT_BLOCK_WIDTH
    missing = np.zeros(n_variants, dtype=np.int64)
    allele_sum = np.zeros(n_variants, dtype=np.int64)

    packed = np.memmap(bed_path, dtype=np.uint8, mode="r", offset=3,
                       shape=(n_variants, bytes_per_variant))
    try:
        for first in range(0, n_variants, width):
            k = min(width, n_variants - first)
            chunk = np.array(packed[first:first + k])
            # padding samples in the last byte fall off the slice
            dosages = BYTE_LOOKUP[chunk].reshape(k, bytes_per_variant * 4)[:, :n_samples].T
            out.write_col_block(first, dosages)
            is_missing = dosages == MISSING_SENTINEL
            missing[first:first + k] = is_missing.sum(axis=0)
            allele_sum[first:first + k] = np.where(is_missing, 0, dosages).sum(axis=0, dtype=np.int64)
    finally:
        del packed

    observed = n_samples - missing
    with np.errstate(divide="ignore", invalid="ignore"):
        freq = np.where(observed > 0, allele_sum / (2.0 * observed), 0.0)
    maf = np.minimum(freq, 1.0 - freq)

    report = IngestReport(
        n_samples=n_samples,
        n_variants_read=n_variants,
        n_missing=int(missing.sum()),
        maf=maf.tolist(),
        missing_rate=(missing / n_samples).tolist(),
    )
    logger.info(f"Decoded {n_variants} variants x {n_samples} samples; {report.n_missing} missing calls")
    return report


def impute_and_filter(m: FileMatrix,
                      maf_min: float = 0.0,
                      out_path: Optional[str] = None,
                      block_width: Optional[int] = None,
                      overwrite: bool = False) -> Tuple[FileMatrix, IngestReport]:
    """
    Mean-impute missing dosages and drop constant or rare variants

    Args:
        m: uint8 dosage store
        maf_min: Variants with minor allele frequency below this are dropped
        out_path: Float64 output store (default: next to m with suffix _imputed)

    Returns:
        (float64 FileMatrix of retained variants, IngestReport)
    """
    if m.element_kind is not ElementKind.UINT8:
        raise IngestError(f"{m!r} is not a uint8 dosage store")

    width = block_width or DEFAULT_BLOCK_WIDTH
    n = m.n_rows
    count = np.zeros(m.n_cols, dtype=np.int64)
    sums = np.zeros(m.n_cols, dtype=np.int64)
    constant = np.zeros(m.n_cols, dtype=bool)

    for first in range(0, m.n_cols, width):
        k = min(width, m.n_cols - first)
        raw = m.read_raw_block(first, k)
        observed = raw != MISSING_SENTINEL
        count[first:first + k] = observed.sum(axis=0)
        sums[first:first + k] = np.where(observed, raw, 0).sum(axis=0, dtype=np.int64)
        lo = np.where(observed, raw, MISSING_SENTINEL).min(axis=0)
        hi = np.where(observed, raw, 0).max(axis=0)
        constant[first:first + k] = (count[first:first + k] == 0) | (lo == hi)

    with np.errstate(divide="ignore", invalid="ignore"):
        means = np.where(count > 0, sums / np.maximum(count, 1), 0.0)
    freq = means / 2.0
    maf = np.minimum(freq, 1.0 - freq)
    rare = ~constant & (maf < maf_min)
    retained = ~constant & ~rare

    if not retained.any():
        raise IngestError(
            f"All {m.n_cols} variants dropped ({int(constant.sum())} constant, {int(rare.sum())} below MAF {maf_min})"
        )

    out_path = out_path or os.path.splitext(m.path)[0] + "_imputed.bk"
    keep_idx = np.flatnonzero(retained)
    out = create_matrix(out_path, n, len(keep_idx), ElementKind.FLOAT64,
                        col_names=[m.col_names[j] for j in keep_idx],
                        row_ids=m.row_ids, overwrite=overwrite)

    n_imputed = 0
    position = 0
    for first in range(0, m.n_cols, width):
        k = min(width, m.n_cols - first)
        keep = retained[first:first + k]
        if not keep.any():
            continue
        block = m.read_col_block(first, k)[:, keep]
        rows, cols = np.nonzero(np.isnan(block))
        block[rows, cols] = means[first:first + k][keep][cols]
        n_imputed += len(rows)
        out.write_col_block(position, block)
        position += block.shape[1]

    report = IngestReport(
        n_samples=n,
        n_variants_read=m.n_cols,
        n_variants_dropped_constant=int(constant.sum()),
        n_variants_dropped_maf=int(rare.sum()),
        n_missing=int((n - count).sum()),
        n_missing_imputed=int(n_imputed),
        maf=maf.tolist(),
        missing_rate=((n - count) / n).tolist(),
        dropped_variants=[m.col_names[j] for j in np.flatnonzero(~retained)],
    )
    logger.info(
        f"Retained {report.n_variants_retained}/{m.n_cols} variants "
        f"({report.n_variants_dropped_constant} constant, {report.n_variants_dropped_maf} rare); "
        f"imputed {n_imputed} calls"
    )
    return out, report


def process_plink(prefix: str,
                  out_dir: str,
                  name: Optional[str] = None,
                  maf_min: float = 0.0,
                  sample_id: str = "iid",
                  block_width: Optional[int] = None,
                  overwrite: bool = False,
                  keep_dosages: bool = False) -> Tuple[FileMatrix, IngestReport, pd.DataFrame, pd.DataFrame]:
    """
    Run the whole triplet pipeline: parse, decode, impute and filter

    Args:
        prefix: Path prefix of the .bed/.bim/.fam files
        out_dir: Directory for the backing files and report
        name: Base name of the outputs (default: basename of prefix)
        maf_min: MAF filter threshold
        sample_id: Which .fam field labels the rows ("iid" or "fid")
        keep_dosages: Keep the intermediate uint8 store

    Returns:
        (float64 FileMatrix, IngestReport, SampleTable, retained VariantTable)
    """
    for ext in (".bed", ".bim", ".fam"):
        if not os.path.exists(prefix + ext):
            raise IngestError(f"Missing PLINK file: {prefix + ext}")
    if sample_id not in ("iid", "fid"):
        raise IngestError(f"sample_id must be 'iid' or 'fid', got {sample_id!r}")

    name = name or os.path.basename(prefix)
    os.makedirs(out_dir, exist_ok=True)

    samples = parse_fam(prefix + ".fam")
    variants = parse_bim(prefix + ".bim")

    dosage_path = os.path.join(out_dir, f"{name}_dosage.bk")
    dosages = create_matrix(dosage_path, len(samples), len(variants), ElementKind.UINT8,
                            col_names=variants["variant_id"].tolist(),
                            row_ids=samples[sample_id].tolist(), overwrite=overwrite)
    decode_report = decode_bed(prefix + ".bed", len(samples), len(variants), dosages, block_width)

    matrix, report = impute_and_filter(dosages, maf_min=maf_min,
                                       out_path=os.path.join(out_dir, f"{name}.bk"),
                                       block_width=block_width, overwrite=overwrite)
    report.n_missing = decode_report.n_missing
    if not keep_dosages:
        remove_matrix(dosage_path)

    retained = variants[~variants["variant_id"].isin(set(report.dropped_variants))]
    retained.to_csv(os.path.join(out_dir, f"{name}_variants.txt"), sep="\t", index=False)
    samples.to_csv(os.path.join(out_dir, f"{name}_samples.txt"), sep="\t", index=False)
    with open(os.path.join(out_dir, f"{name}_report.json"), 'w', encoding='utf-8') as f:
        f.write(report.model_dump_json(indent=2))

    return matrix, report, samples, retained


def process_delimited(path: str,
                      delimiter: Optional[str] = ",",
                      has_header: bool = True,
                      out_path: Optional[str] = None,
                      id_col: Optional[Union[str, int]] = None,
                      overwrite: bool = False,
                      chunksize: int = 10000) -> Tuple[FileMatrix, List[str]]:
    """
    Convert a rectangular numeric text table into a float64 store

    Args:
        path: Delimited text file
        delimiter: Field separator; None splits on runs of whitespace
        has_header: First line holds column names
        out_path: Backing file (default: path with extension .bk)
        id_col: Column (name or position) holding row ids instead of data

    Returns:
        (FileMatrix, column names)
    """
    if not os.path.exists(path):
        raise IngestError(f"Missing file: {path}")

    def chunks():
        try:
            reader = pd.read_csv(path,
                                 sep=delimiter if delimiter is not None else r"\s+",
                                 header=0 if has_header else None,
                                 dtype=str,
                                 keep_default_na=False,
                                 chunksize=chunksize)
            for chunk in reader:
                yield chunk
        except pd.errors.ParserError as e:
            raise IngestError(f"{path}: ragged row ({e})") from e
        except pd.errors.EmptyDataError as e:
            raise IngestError(f"{path} is empty") from e

    first_data_line = 2 if has_header else 1

    def split_ids(chunk: pd.DataFrame) -> Tuple[Optional[pd.Series], pd.DataFrame]:
        if id_col is None:
            return None, chunk
        key = chunk.columns[id_col] if isinstance(id_col, int) else id_col
        if key not in chunk.columns:
            raise IngestError(f"{path}: id column {id_col!r} not found")
        return chunk[key], chunk.drop(columns=[key])

    def to_numeric(values: pd.DataFrame, row_offset: int) -> np.ndarray:
        short = values.isna().any(axis=1).to_numpy()
        if short.any():
            line = first_data_line + row_offset + int(np.argmax(short))
            raise IngestError(f"{path}, line {line}: ragged row (expected {values.shape[1]} numeric fields)")
        text = values.to_numpy(dtype=str)
        try:
            return text.astype(np.float64)
        except ValueError:
            for i, row in enumerate(text):
                for j, cell in enumerate(row):
                    try:
                        float(cell)
                    except ValueError:
                        raise IngestError(
                            f"{path}, line {first_data_line + row_offset + i}: non-numeric value {cell!r} "
                            f"in column {values.columns[j]!r}"
                        ) from None
            raise

    n_rows = 0
    names: Optional[List[str]] = None
    row_ids: List[str] = []
    for chunk in chunks():
        ids, values = split_ids(chunk)
        if names is None:
            names = [str(c) for c in values.columns] if has_header else [f"V{j + 1}" for j in range(values.shape[1])]
        to_numeric(values, n_rows)
        row_ids.extend(ids.astype(str).tolist() if ids is not None else [])
        n_rows += len(values)

    if not n_rows or not names:
        raise IngestError(f"{path} holds no data rows")

    out_path = out_path or os.path.splitext(path)[0] + ".bk"
    out = create_matrix(out_path, n_rows, len(names), ElementKind.FLOAT64,
                        col_names=names,
                        row_ids=row_ids if id_col is not None else None,
                        overwrite=overwrite)
    position = 0
    for chunk in chunks():
        _, values = split_ids(chunk)
        block = to_numeric(values, position)
        out.write_row_block(position, block)
        position += block.shape[0]

    logger.info(f"Imported {n_rows}x{len(names)} matrix from {path}")
    return out, names
