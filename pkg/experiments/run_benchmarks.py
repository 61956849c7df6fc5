"""
Benchmark Runner for plmmkit
Times the full process -> design -> fit pipeline over a grid of simulated (n, p)
"""

import sys
import os

# Add project root to path (works whether run from experiments/ or project/)
current_dir = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(current_dir)
sys.path.insert(0, project_root)
import argparse
import json
import shutil
import threading
import time
import logging
from datetime import datetime

import numpy as np
import pandas as pd
import psutil
from tqdm import tqdm

from plmmkit.config import PathOptions, load_config, scratch_dir
from plmmkit.decomposition import eigen_sym
from plmmkit.design_builder import create_design
from plmmkit.guardrails import MemoryGuard
from plmmkit.penalized_path import plmm
from plmmkit.plink_ingest import process_plink
from plmmkit.run_log import RunLogger
from plmmkit.simulate import sample_names, simulate_genotypes, simulate_outcome, write_outcome, write_plink

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


class PeakMemory:
    """Samples the resident set size of this process on a background thread"""

    def __init__(self, interval: float = 0.05):
        self.interval = interval
        self.process = psutil.Process(os.getpid())
        self.peak = 0
        self._stop = threading.Event()
        self._thread = None

    def _poll(self):
        while not self._stop.is_set():
            self.peak = max(self.peak, self.process.memory_info().rss)
            self._stop.wait(self.interval)

    def __enter__(self):
        self.peak = self.process.memory_info().rss
        self._thread = threading.Thread(target=self._poll, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self.peak = max(self.peak, self.process.memory_info().rss)

    @property
    def peak_mb(self) -> float:
        return self.peak / 2 ** 20


class BenchmarkRunner:
    """Run and log pipeline benchmarks on simulated data"""

    def __init__(self, config_path: str = "../config.yaml"):
        """Initialize benchmark runner"""
        if not os.path.isabs(config_path):
            config_path = os.path.normpath(os.path.join(current_dir, config_path))
        self.config = load_config(config_path)
        self.settings = self.config['experiment']

        self.results_dir = self.config['output']['results_dir']
        os.makedirs(self.results_dir, exist_ok=True)

        self.experiment_id = datetime.now().strftime("%Y%m%d_%H%M%S")
        self.run_logger = RunLogger(self.config['logging']['log_dir'], run_id=self.experiment_id)
        runtime = self.config.get('runtime', {})
        self.threads = runtime.get('threads') or os.cpu_count() or 1
        self.guard = MemoryGuard(runtime.get('memory_budget_mb'), self.run_logger)
        self.block_width = self.config['matrix_store']['block_width']
        logger.info(f"Initialized benchmark: {self.experiment_id}")

    def run_one(self, n: int, p: int, seed: int) -> dict:
        """
        Simulate one data set and push it through the whole pipeline

        Returns:
            Row with per-group seconds, per-stage seconds and peak RSS in MB
        """
        self.run_logger.run_id = f"{self.experiment_id}_n{n}_p{p}"
        workdir = scratch_dir("plmmkit_bench_")
        try:
            dosages, _ = simulate_genotypes(n, p, tuple(self.settings['maf_range']), seed=seed)
            ids = sample_names(n)
            y, _ = simulate_outcome(dosages, n_causal=min(self.settings['n_causal'], p), seed=seed)
            prefix = os.path.join(workdir, "sim")
            write_plink(dosages, prefix, sample_ids=ids)
            outcome = write_outcome(os.path.join(workdir, "y.csv"), ids, y)
            del dosages

            run_start = time.perf_counter()
            with PeakMemory() as memory:
                start = time.perf_counter()
                matrix, report, _, _ = process_plink(prefix, workdir, name="sim", block_width=self.block_width)
                self.run_logger.log_stage("process", time.perf_counter() - start, n=n, p=p)

                start = time.perf_counter()
                design = create_design(matrix, outcome, workdir, block_width=self.block_width,
                                       threads=self.threads)
                self.run_logger.log_stage("design", time.perf_counter() - start, n=n, p=p)

                self.guard.require(self.guard.validate_run(n, self.block_width, self.threads))
                opts = PathOptions.from_config(self.config, nlambda=self.settings['nlambda'])
                fit = plmm(design, opts, block_width=self.block_width, threads=self.threads, guard=self.guard)
                self.run_logger.log_timings(fit.timings, n=n, p=p, nlambda=fit.n_lambda)
            self.run_logger.log_total(time.perf_counter() - run_start, n=n, p=p)

            breakdown = self.run_logger.stage_breakdown()
            covered, message, _ = self.run_logger.check_stage_coverage()
            if not covered:
                logger.warning(f"n={n}, p={p}: {message}")
            logger.info(f"n={n}, p={p}\n{self.run_logger.format_breakdown()}")
            return {
                'n': n,
                'p': p,
                'p_retained': report.n_variants_retained,
                'nlambda': fit.n_lambda,
                'eta': fit.eta,
                **{f"{group}_s": seconds for group, seconds in breakdown.items()},
                **{f"stage_{stage}_s": seconds for stage, seconds in fit.timings.items()},
                'stages_cover_total': covered,
                'peak_rss_mb': memory.peak_mb,
                'threads': self.threads,
            }
        finally:
            shutil.rmtree(workdir, ignore_errors=True)

    def eigen_scaling(self, n_values, seed: int) -> pd.DataFrame:
        """Seconds for the dense symmetric eigendecomposition at each n"""
        rng = np.random.default_rng(seed)
        rows = []
        for n in n_values:
            A = rng.normal(size=(n, n))
            K = A @ A.T / n
            start = time.perf_counter()
            eigen_sym(K)
            rows.append({'n': n, 'eigen_s': time.perf_counter() - start})
        return pd.DataFrame(rows)

    def run_experiment(self, n_values=None, p_values=None) -> pd.DataFrame:
        """
        Run every (n, p) combination of the grid

        Args:
            n_values: Sample sizes (default: experiment.n_values)
            p_values: Feature counts (default: experiment.p_values)

        Returns:
            Results dataframe
        """
        n_values = n_values or self.settings['n_values']
        p_values = p_values or self.settings['p_values']
        seed = self.settings['random_seed']
        grid = [(n, p) for p in p_values for n in n_values]
        logger.info(f"Benchmarking {len(grid)} (n, p) combinations")

        results = []
        errors = 0
        for n, p in tqdm(grid, desc="Benchmarking"):
            try:
                results.append(self.run_one(n, p, seed))
            except Exception as e:
                logger.error(f"Error benchmarking n={n}, p={p}: {e}")
                errors += 1
        logger.info(f"Completed with {errors} errors")

        results_df = pd.DataFrame(results)
        eigen_df = self.eigen_scaling(n_values, seed)
        self._save_results(results_df, eigen_df)
        self._print_summary(results_df, eigen_df)
        return results_df

    def _save_results(self, results_df: pd.DataFrame, eigen_df: pd.DataFrame):
        """Save benchmark results"""
        csv_path = os.path.join(self.results_dir, f"benchmark_{self.experiment_id}.csv")
        results_df.to_csv(csv_path, index=False)
        eigen_df.to_csv(os.path.join(self.results_dir, f"eigen_{self.experiment_id}.csv"), index=False)
        logger.info(f"Saved results to {csv_path}")

        summary = {
            'experiment_id': self.experiment_id,
            'timestamp': datetime.now().isoformat(),
            'num_runs': len(results_df),
            'metrics': {
                'mean_total_s': float(results_df['total_s'].mean()) if len(results_df) else None,
                'max_total_s': float(results_df['total_s'].max()) if len(results_df) else None,
                'max_peak_rss_mb': float(results_df['peak_rss_mb'].max()) if len(results_df) else None,
                'eigen_s': dict(zip(eigen_df['n'].astype(int).astype(str), eigen_df['eigen_s'].astype(float))),
            },
            'config': {
                'threads': self.threads,
                'block_width': self.block_width,
                **self.settings,
            },
        }
        summary_path = os.path.join(self.results_dir, f"summary_{self.experiment_id}.json")
        with open(summary_path, 'w') as f:
            json.dump(summary, f, indent=2)
        logger.info(f"Saved summary to {summary_path}")

    def _print_summary(self, results_df: pd.DataFrame, eigen_df: pd.DataFrame):
        """Print benchmark summary"""
        print("\n" + "="*80)
        print(f"BENCHMARK SUMMARY - {self.experiment_id}")
        print("="*80)
        if len(results_df):
            columns = ['n', 'p', 'ingest_s', 'design_s', 'decomposition_s', 'fit_s', 'total_s', 'peak_rss_mb']
            print(results_df[columns].to_string(index=False, float_format=lambda v: f"{v:.2f}"))
        print(f"\nEigendecomposition:")
        for _, row in eigen_df.iterrows():
            print(f"  n = {int(row['n']):6d}: {row['eigen_s']:.3f}s")
        print("="*80 + "\n")


def main():
    """Main benchmark runner"""
    parser = argparse.ArgumentParser(description="Benchmark the plmmkit pipeline on simulated data")
    parser.add_argument("--n", type=int, nargs="*", default=None, help="Sample sizes")
    parser.add_argument("--p", type=int, nargs="*", default=None, help="Feature counts")
    parser.add_argument("--config", default="../config.yaml")
    args = parser.parse_args()

    runner = BenchmarkRunner(args.config)
    runner.run_experiment(args.n, args.p)
    logger.info("Benchmark complete!")


if __name__ == "__main__":
    main()
