"""
Benchmark Analysis Script
Stage breakdown tables and plots from benchmark CSVs
"""

import os
import sys

import numpy as np
import pandas as pd
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import seaborn as sns

# Set style
sns.set_style("whitegrid")
plt.rcParams['figure.figsize'] = (10, 6)
plt.rcParams['font.size'] = 11

STAGE_GROUPS = ['ingest', 'design', 'decomposition', 'fit', 'other']


class BenchmarkAnalyzer:
    """Analyze benchmark results"""

    def __init__(self, results_path: str):
        """Load results from CSV"""
        self.results_df = pd.read_csv(results_path)
        self.experiment_id = os.path.basename(results_path).replace('benchmark_', '').replace('.csv', '')
        self.groups = [g for g in STAGE_GROUPS if f"{g}_s" in self.results_df.columns]

        eigen_path = os.path.join(os.path.dirname(results_path), f"eigen_{self.experiment_id}.csv")
        self.eigen_df = pd.read_csv(eigen_path) if os.path.exists(eigen_path) else None

        print(f"Loaded {len(self.results_df)} runs from {results_path}")

    def stage_breakdown_table(self) -> pd.DataFrame:
        """Seconds and share of total per stage group, one row per (n, p)"""
        table = self.results_df[['n', 'p']].copy()
        total = self.results_df['total_s'].replace(0, np.nan)
        for group in self.groups:
            table[f"{group} (s)"] = self.results_df[f"{group}_s"].round(2)
            table[f"{group} (%)"] = (100 * self.results_df[f"{group}_s"] / total).round(1)
        table['total (s)'] = self.results_df['total_s'].round(2)
        if 'unaccounted_s' in self.results_df.columns:
            table['unaccounted (%)'] = (100 * self.results_df['unaccounted_s'] / total).round(1)
        table['peak RSS (MB)'] = self.results_df['peak_rss_mb'].round(0)

        print("\n" + "="*80)
        print("STAGE BREAKDOWN")
        print("="*80)
        print(table.to_string(index=False))
        print("="*80 + "\n")
        return table

    def eigen_scaling(self) -> dict:
        """Fit seconds ~ n^k on the eigendecomposition timings"""
        if self.eigen_df is None or len(self.eigen_df) < 2:
            return {}
        slope, _ = np.polyfit(np.log(self.eigen_df['n']), np.log(self.eigen_df['eigen_s']), 1)

        print("\n" + "="*80)
        print("EIGENDECOMPOSITION SCALING")
        print("="*80)
        print(f"Empirical exponent: {slope:.2f} (dense solver is cubic in n)")
        print("="*80 + "\n")
        return {'exponent': float(slope)}

    def plot_stage_breakdown(self, save_path: str = None):
        """Stacked bars of seconds per stage group for every (n, p)"""
        fig, ax = plt.subplots(figsize=(12, 6))
        labels = [f"n={n}\np={p}" for n, p in zip(self.results_df['n'], self.results_df['p'])]
        bottom = np.zeros(len(self.results_df))
        colors = sns.color_palette("deep", len(self.groups))
        for group, color in zip(self.groups, colors):
            values = self.results_df[f"{group}_s"].to_numpy()
            ax.bar(labels, values, bottom=bottom, label=group, color=color, edgecolor='black', linewidth=0.5)
            bottom += values
        ax.set_ylabel('Seconds')
        ax.set_title('Pipeline time by stage')
        ax.legend()
        plt.tight_layout()

        if save_path:
            plt.savefig(save_path, dpi=300, bbox_inches='tight')
            print(f"Saved stage breakdown plot to {save_path}")
        plt.close(fig)

    def plot_memory(self, save_path: str = None):
        """Peak resident memory against n, one line per p"""
        fig, ax = plt.subplots()
        sns.lineplot(data=self.results_df, x='n', y='peak_rss_mb', hue='p', marker='o', ax=ax, palette='deep')
        ax.set_xlabel('Samples (n)')
        ax.set_ylabel('Peak RSS (MB)')
        ax.set_title('Peak memory')
        plt.tight_layout()

        if save_path:
            plt.savefig(save_path, dpi=300, bbox_inches='tight')
            print(f"Saved memory plot to {save_path}")
        plt.close(fig)


def main():
    """Run analysis on the latest benchmark"""
    current_dir = os.path.dirname(os.path.abspath(__file__))
    results_dir = os.path.normpath(os.path.join(current_dir, "..", "results"))
    if len(sys.argv) > 1:
        results_path = sys.argv[1]
        results_dir = os.path.dirname(os.path.abspath(results_path))
    else:
        files = [f for f in os.listdir(results_dir) if f.startswith('benchmark_') and f.endswith('.csv')] \
            if os.path.isdir(results_dir) else []
        if not files:
            print(f"No benchmark results found in {results_dir}")
            return
        results_path = os.path.join(results_dir, sorted(files)[-1])

    print(f"Analyzing: {os.path.basename(results_path)}\n")
    analyzer = BenchmarkAnalyzer(results_path)
    analyzer.stage_breakdown_table()
    analyzer.eigen_scaling()

    plots_dir = os.path.join(results_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)
    analyzer.plot_stage_breakdown(os.path.join(plots_dir, f"stage_breakdown_{analyzer.experiment_id}.png"))
    analyzer.plot_memory(os.path.join(plots_dir, f"memory_{analyzer.experiment_id}.png"))


if __name__ == "__main__":
    main()
