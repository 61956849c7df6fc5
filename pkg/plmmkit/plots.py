"""
Plots - Coefficient path and cross-validation error figures
Static 800x600 SVGs with glyphs as paths and no timestamps
"""

import os
import logging
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import seaborn as sns

logger = logging.getLogger(__name__)

sns.set_style("whitegrid")

# 800 x 600 viewBox at the SVG backend's 72 dpi
FIGSIZE = (800 / 72, 600 / 72)
SVG_DPI = 72
SVG_PARAMS = {
    "svg.fonttype": "path",
    "svg.hashsalt": "plmmkit",
    "font.size": 11,
}


def _save(fig, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fig.savefig(path, format="svg", dpi=SVG_DPI, metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Saved {path}")


def plot_paths(fit, path: str) -> int:
    """
    Coefficient paths against log(lambda)

    One line per penalized feature that is nonzero somewhere on the path,
    tagged with SVG id `path-<feature>`.

    Args:
        fit: FitPath
        path: Output .svg file

    Returns:
        Number of lines drawn
    """
    beta = fit.beta.tocsr()
    ever_active = [j for j in range(beta.shape[0])
                   if fit.penalty_factor[j] > 0 and beta[j].nnz > 0]
    x = np.log(fit.lambdas)
    marker = "o" if fit.n_lambda == 1 else None

    with plt.rc_context(SVG_PARAMS):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        for j in ever_active:
            line, = ax.plot(x, beta[j].toarray().ravel(), marker=marker, linewidth=1.2)
            line.set_gid(f"path-{fit.feature_names[j]}")
        ax.axhline(0.0, color="grey", linewidth=0.8)
        if fit.n_lambda > 1:
            ax.set_xlim(x.max(), x.min())
        ax.set_xlabel(r"$\log(\lambda)$")
        ax.set_ylabel(r"$\hat{\beta}$")
        ax.set_title(f"{fit.penalty} coefficient paths ({len(ever_active)} features)")
        fig.subplots_adjust(left=0.1, right=0.96, top=0.92, bottom=0.1)
        _save(fig, path)
    return len(ever_active)


def plot_cv(cv, path: str, n_lambdas: Optional[int] = None) -> None:
    """
    Cross-validation error (cve +/- cvse) against log(lambda) with a lambda_min marker

    Args:
        cv: CVResult
        path: Output .svg file
        n_lambdas: Plot only the first n_lambdas values of the grid
    """
    stop = len(cv.lambdas) if n_lambdas is None else max(1, min(n_lambdas, len(cv.lambdas)))
    x = np.log(cv.lambdas[:stop])

    with plt.rc_context(SVG_PARAMS):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        ax.errorbar(x, cv.cve[:stop], yerr=cv.cvse[:stop], fmt="o", color="firebrick",
                    ecolor="grey", markersize=4, capsize=2, gid="cve")
        if cv.lambda_min_index < stop:
            marker = ax.axvline(np.log(cv.lambda_min), color="black", linestyle="--", linewidth=1.0)
            marker.set_gid("lambda-min")
        if stop > 1:
            ax.set_xlim(x.max(), x.min())
        ax.set_xlabel(r"$\log(\lambda)$")
        ax.set_ylabel("Cross-validation error")
        ax.set_title(f"{cv.nfolds}-fold CV, {cv.prediction_type} prediction")
        fig.subplots_adjust(left=0.1, right=0.96, top=0.92, bottom=0.1)
        _save(fig, path)
