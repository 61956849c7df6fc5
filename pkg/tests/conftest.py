"""
Shared fixtures - temporary stores, simulated PLINK triplets and small designs
"""

import os
import sys

import numpy as np
import pandas as pd
import pytest
import yaml

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from plmmkit.design_builder import create_design
from plmmkit.matrix_store import MISSING_SENTINEL, ArrayColumns
from plmmkit.simulate import sample_names, simulate_genotypes, simulate_outcome, write_outcome, write_plink


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


@pytest.fixture
def plink_triplet(tmp_path):
    """40 samples x 60 variants with a few missing calls, plus an outcome CSV"""
    dosages, _ = simulate_genotypes(40, 60, (0.1, 0.5), seed=7)
    dosages[3, 5] = MISSING_SENTINEL
    dosages[10, 20] = MISSING_SENTINEL
    ids = sample_names(40)
    prefix = str(tmp_path / "geno")
    write_plink(dosages, prefix, sample_ids=ids)
    y, causal = simulate_outcome(np.where(dosages == MISSING_SENTINEL, 1, dosages), n_causal=3, seed=7)
    outcome = write_outcome(str(tmp_path / "outcome.csv"), ids, y)
    return {"prefix": prefix, "dosages": dosages, "ids": ids, "y": y, "causal": causal, "outcome": outcome}


def make_design(out_dir, n=50, p=40, seed=0, covariates=False, name="design"):
    """Design built from simulated dosages (and optionally two covariates) through create_design"""
    dosages, _ = simulate_genotypes(n, p, (0.1, 0.5), seed=seed)
    ids = sample_names(n)
    y, _ = simulate_outcome(dosages, n_causal=3, effect=0.8, seed=seed)
    names = [f"rs{j + 1}" for j in range(p)]
    outcome = pd.DataFrame({"id": ids, "y": y})
    covariate_table = None
    if covariates:
        rs = np.random.default_rng(seed + 1)
        covariate_table = pd.DataFrame({"id": ids, "age": rs.normal(50, 10, n), "sex": rs.integers(0, 2, n)})
    return create_design(ArrayColumns(dosages, names), outcome, str(out_dir), name=name,
                         predictor_ids=ids, covariate_table=covariate_table, block_width=16)


@pytest.fixture
def small_design(tmp_path):
    return make_design(tmp_path / "design")


@pytest.fixture
def cli_config(tmp_path):
    """Config file whose log directory lives in the test's temporary directory"""
    path = tmp_path / "config.yaml"
    with open(path, 'w') as f:
        yaml.safe_dump({
            "matrix_store": {"block_width": 16},
            "path": {"penalty": "lasso", "nlambda": 10, "tol": 1.0e-9, "max_iter": 10000},
            "cv": {"nfolds": 3, "seed": 1, "prediction_type": "blup"},
            "runtime": {"threads": 1, "memory_budget_mb": None},
            "logging": {"enabled": True, "log_dir": "logs",
                        "log_format": "%(levelname)s - %(message)s"},
            "output": {"results_dir": "results"},
        }, f)
    return str(path)


@pytest.fixture
def design_factory(tmp_path):
    """Build designs under the test's temporary directory: design_factory(name, **kwargs)"""
    def factory(name="design", **kwargs):
        return make_design(tmp_path / name, name=name, **kwargs)
    return factory
