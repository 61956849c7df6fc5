"""
Simulation - Synthetic genotypes, structured samples and outcomes
Also writes PLINK triplets with an encoder independent of the ingest decoder
"""

import os
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .matrix_store import MISSING_SENTINEL

logger = logging.getLogger(__name__)

# dosage -> 2-bit PLINK code: 2 -> 00, missing -> 01, 1 -> 10, 0 -> 11
DOSAGE_TO_CODE = {2: 0b00, MISSING_SENTINEL: 0b01, 1: 0b10, 0: 0b11}


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def simulate_genotypes(n: int,
                       p: int,
                       maf_range: Tuple[float, float] = (0.05, 0.5),
                       missing_rate: float = 0.0,
                       seed=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Independent samples under Hardy-Weinberg proportions

    Returns:
        (n x p uint8 dosages with MISSING_SENTINEL for missing calls, allele frequencies)
    """
    rng = _rng(seed)
    freq = rng.uniform(maf_range[0], maf_range[1], size=p)
    dosages = rng.binomial(2, freq, size=(n, p)).astype(np.uint8)
    if missing_rate > 0:
        dosages[rng.random((n, p)) < missing_rate] = MISSING_SENTINEL
    return dosages, freq


def simulate_families(n_families: int,
                      family_size: int,
                      p: int,
                      maf_range: Tuple[float, float] = (0.05, 0.5),
                      seed=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sibships: each member inherits one haplotype from each of two shared parents

    Returns:
        (n x p uint8 dosages, family label per sample)
    """
    rng = _rng(seed)
    freq = rng.uniform(maf_range[0], maf_range[1], size=p)
    blocks, labels = [], []
    for family in range(n_families):
        parents = rng.binomial(1, freq, size=(2, 2, p))  # parent, haplotype, variant
        pick = rng.integers(0, 2, size=(family_size, 2, p))
        from_first = np.where(pick[:, 0], parents[0, 1], parents[0, 0])
        from_second = np.where(pick[:, 1], parents[1, 1], parents[1, 0])
        blocks.append((from_first + from_second).astype(np.uint8))
        labels.extend([family] * family_size)
    return np.vstack(blocks), np.array(labels)


def simulate_populations(n: int,
                         p: int,
                         divergence: float = 0.15,
                         maf_range: Tuple[float, float] = (0.1, 0.5),
                         seed=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Two populations of equal size with shifted allele frequencies

    Returns:
        (n x p uint8 dosages, population label 0/1 per sample)
    """
    rng = _rng(seed)
    base = rng.uniform(maf_range[0], maf_range[1], size=p)
    shift = rng.normal(0.0, divergence, size=p)
    freqs = np.clip(np.vstack([base - shift, base + shift]), 0.01, 0.99)
    population = np.repeat([0, 1], [n // 2, n - n // 2])
    dosages = rng.binomial(2, freqs[population]).astype(np.uint8)
    return dosages, population


def standardize_dense(X: np.ndarray) -> np.ndarray:
    """Column-standardize an in-memory matrix (population scale, constant columns zeroed)"""
    X = np.asarray(X, dtype=np.float64)
    scale = X.std(axis=0)
    return np.where(scale > 0, (X - X.mean(axis=0)) / np.where(scale > 0, scale, 1.0), 0.0)


def simulate_outcome(X: np.ndarray,
                     n_causal: int = 5,
                     effect: float = 0.5,
                     random_effect: Optional[np.ndarray] = None,
                     noise_sd: float = 1.0,
                     intercept: float = 0.0,
                     seed=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    y = intercept + X_std[:, causal] effect + random_effect + noise

    Returns:
        (y, indices of the causal columns)
    """
    rng = _rng(seed)
    X_std = standardize_dense(X)
    causal = np.sort(rng.choice(X_std.shape[1], size=n_causal, replace=False)) if n_causal else np.array([], int)
    signs = rng.choice([-1.0, 1.0], size=len(causal))
    y = intercept + X_std[:, causal] @ (effect * signs) + rng.normal(0.0, noise_sd, size=X_std.shape[0])
    if random_effect is not None:
        y = y + random_effect
    return y, causal


def polygenic_effect(X: np.ndarray, variance: float, seed=None) -> np.ndarray:
    """Random effect u ~ N(0, variance K) with K the relatedness of X"""
    rng = _rng(seed)
    X_std = standardize_dense(X)
    p = X_std.shape[1]
    return X_std @ rng.normal(0.0, np.sqrt(variance / p), size=p)


def write_plink(dosages: np.ndarray,
                prefix: str,
                sample_ids: Optional[Sequence[str]] = None,
                variant_ids: Optional[Sequence[str]] = None,
                family_ids: Optional[Sequence[str]] = None,
                chrom: str = "1") -> Tuple[str, str, str]:
    """
    Write a SNP-major .bed/.bim/.fam triplet

    Args:
        dosages: n x p counts in {0, 1, 2} or MISSING_SENTINEL
        prefix: Output path prefix

    Returns:
        Paths of the .bed, .bim and .fam files
    """
    dosages = np.asarray(dosages)
    n, p = dosages.shape
    sample_ids = list(sample_ids) if sample_ids is not None else [f"s{i + 1}" for i in range(n)]
    variant_ids = list(variant_ids) if variant_ids is not None else [f"rs{j + 1}" for j in range(p)]
    family_ids = list(family_ids) if family_ids is not None else sample_ids

    codes = np.full(dosages.shape, 0b01, dtype=np.uint8)
    for dosage, code in DOSAGE_TO_CODE.items():
        codes[dosages == dosage] = code
    padded = np.zeros((4 * ((n + 3) // 4), p), dtype=np.uint8)
    padded[:n] = codes
    packed = (padded[0::4] | (padded[1::4] << 2) | (padded[2::4] << 4) | (padded[3::4] << 6)).astype(np.uint8)

    directory = os.path.dirname(os.path.abspath(prefix))
    os.makedirs(directory, exist_ok=True)
    bed, bim, fam = prefix + ".bed", prefix + ".bim", prefix + ".fam"
    with open(bed, 'wb') as f:
        f.write(bytes([0x6C, 0x1B, 0x01]))
        f.write(np.ascontiguousarray(packed.T).tobytes())

    pd.DataFrame({
        "chrom": chrom,
        "variant_id": variant_ids,
        "genetic_dist": 0,
        "bp_position": np.arange(1, p + 1) * 1000,
        "allele1": "A",
        "allele2": "G",
    }).to_csv(bim, sep="\t", header=False, index=False)
    pd.DataFrame({
        "fid": family_ids,
        "iid": sample_ids,
        "father": 0,
        "mother": 0,
        "sex": 0,
        "phenotype": -9,
    }).to_csv(fam, sep=" ", header=False, index=False)

    logger.debug(f"Wrote PLINK triplet {prefix} ({n} samples x {p} variants)")
    return bed, bim, fam


def write_outcome(path: str, sample_ids: Sequence[str], y: np.ndarray,
                  id_col: str = "id", outcome_col: str = "y") -> str:
    """Write an outcome CSV (id, value)"""
    pd.DataFrame({id_col: list(sample_ids), outcome_col: np.asarray(y)}).to_csv(path, index=False)
    return path


def sample_names(n: int, prefix: str = "s") -> List[str]:
    return [f"{prefix}{i + 1}" for i in range(n)]
