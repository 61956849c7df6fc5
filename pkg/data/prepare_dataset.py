"""
Dataset Preparation Script
Writes a small simulated PLINK triplet with outcome and covariate tables
"""

import os
import sys
import logging

current_dir = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.dirname(current_dir))

import numpy as np
import pandas as pd

from plmmkit.matrix_store import MISSING_SENTINEL
from plmmkit.simulate import (
    polygenic_effect,
    simulate_families,
    simulate_outcome,
    write_outcome,
    write_plink,
)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class DatasetPreparator:
    """Prepare a related-sample fixture for the CLI walkthrough"""

    def __init__(self, seed: int = 42):
        """Initialize preparator"""
        self.seed = seed
        self.n_families = 40
        self.family_size = 5
        self.n_variants = 2000
        self.n_causal = 10
        self.missing_rate = 0.01
        self.random_effect_variance = 1.0

    def simulate(self) -> dict:
        """Family-structured genotypes, outcome with a polygenic component, two covariates"""
        rng = np.random.default_rng(self.seed)
        dosages, families = simulate_families(self.n_families, self.family_size, self.n_variants, seed=rng)
        n = dosages.shape[0]
        ids = [f"f{fam + 1}_{k + 1}" for fam, k in zip(families, np.arange(n) % self.family_size)]

        u = polygenic_effect(dosages, self.random_effect_variance, seed=rng)
        y, causal = simulate_outcome(dosages, n_causal=self.n_causal, random_effect=u, seed=rng)
        covariates = pd.DataFrame({
            "id": ids,
            "age": rng.integers(20, 70, size=n),
            "sex": rng.integers(0, 2, size=n),
        })
        y = y + 0.02 * covariates["age"].to_numpy() + 0.3 * covariates["sex"].to_numpy()

        dosages[rng.random(dosages.shape) < self.missing_rate] = MISSING_SENTINEL
        family_ids = [f"f{fam + 1}" for fam in families]
        logger.info(f"Simulated {n} samples in {self.n_families} families x {self.n_variants} variants")
        return {"dosages": dosages, "ids": ids, "family_ids": family_ids, "y": y,
                "covariates": covariates, "causal": causal}

    def save_dataset(self, data: dict, output_dir: str, name: str = "fixture"):
        """Save the triplet, outcome.csv, covariates.csv and the causal variant list"""
        os.makedirs(output_dir, exist_ok=True)
        prefix = os.path.join(output_dir, name)
        write_plink(data["dosages"], prefix, sample_ids=data["ids"], family_ids=data["family_ids"])
        write_outcome(os.path.join(output_dir, "outcome.csv"), data["ids"], data["y"])
        data["covariates"].to_csv(os.path.join(output_dir, "covariates.csv"), index=False)
        with open(os.path.join(output_dir, "causal.txt"), 'w') as f:
            f.writelines(f"rs{j + 1}\n" for j in data["causal"])
        logger.info(f"Saved dataset to {output_dir}")

        print("\n" + "="*80)
        print("DATASET SUMMARY")
        print("="*80)
        print(f"Samples:        {len(data['ids'])}")
        print(f"Variants:       {data['dosages'].shape[1]}")
        print(f"Missing calls:  {int((data['dosages'] == MISSING_SENTINEL).sum())}")
        print(f"Causal:         {len(data['causal'])}")
        print(f"Outcome mean:   {data['y'].mean():.3f} (sd {data['y'].std():.3f})")
        print("="*80 + "\n")


def main():
    """Main dataset preparation workflow"""
    preparator = DatasetPreparator()
    data = preparator.simulate()
    preparator.save_dataset(data, current_dir)

    print(f"Dataset ready: {os.path.join(current_dir, 'fixture')}.bed/.bim/.fam")
    print("Run the pipeline with: python -m plmmkit process --bfile data/fixture --out work")


if __name__ == "__main__":
    main()
