"""
Inference tests - fold assignment, in-fold preconditioning, prediction, summaries, CV persistence
"""

import numpy as np
import pandas as pd
import pytest
from scipy.stats import binomtest

from plmmkit.config import PathOptions
from plmmkit.decomposition import Decomposition
from plmmkit.design_builder import create_design
from plmmkit.errors import InferenceError
from plmmkit.inference import (
    CVResult,
    assign_folds,
    cv_plmm,
    format_summary,
    load_cv,
    predict_blup,
    predict_linear,
    save_cv,
    summarize,
    training_fitted,
)
from plmmkit.matrix_store import ArrayColumns
from plmmkit.penalized_path import plmm
from plmmkit.simulate import (
    polygenic_effect,
    sample_names,
    simulate_families,
    simulate_genotypes,
    simulate_outcome,
    simulate_populations,
)


def _design_from(dosages, y, out_dir, name="design"):
    ids = sample_names(len(y))
    names = [f"rs{j + 1}" for j in range(dosages.shape[1])]
    return create_design(ArrayColumns(np.asarray(dosages, dtype=np.float64), names),
                         pd.DataFrame({"id": ids, "y": y}), str(out_dir), name=name,
                         predictor_ids=ids, block_width=64)


def test_assign_folds():
    """Test 1: Fold sizes differ by at most one and the seed fixes the assignment"""
    folds = assign_folds(23, 5, seed=4)
    sizes = np.bincount(folds)[1:]
    assert sizes.max() - sizes.min() <= 1
    assert sizes.sum() == 23
    np.testing.assert_array_equal(folds, assign_folds(23, 5, seed=4))
    assert not np.array_equal(folds, assign_folds(23, 5, seed=5))

    with pytest.raises(InferenceError):
        assign_folds(10, 1)
    with pytest.raises(InferenceError):
        assign_folds(3, 4)


def test_fold_fit_ignores_held_out_rows(tmp_path):
    """Test 2: Changing the held-out rows of fold 1 leaves that fold's fit bit-identical"""
    n, p = 50, 40
    dosages, _ = simulate_genotypes(n, p, (0.1, 0.5), seed=21)
    y, _ = simulate_outcome(dosages, n_causal=3, effect=0.8, seed=21)
    folds = assign_folds(n, 5, seed=3)
    held_out = folds == 1

    other = dosages.copy()
    replacement, _ = simulate_genotypes(n, p, (0.1, 0.5), seed=99)
    other[held_out] = replacement[held_out]
    y_other = y.copy()
    y_other[held_out] = np.random.default_rng(99).normal(5.0, 3.0, size=held_out.sum())

    first = _design_from(dosages, y, tmp_path / "a")
    second = _design_from(other, y_other, tmp_path / "b")
    lambdas = [0.5, 0.3, 0.2, 0.1, 0.05]
    cv_a = cv_plmm(first, folds=folds, lambdas=lambdas, prediction_type="linear", threads=1)
    cv_b = cv_plmm(second, folds=folds, lambdas=lambdas, prediction_type="linear", threads=1)

    fit_a, fit_b = cv_a.fold_fits[0], cv_b.fold_fits[0]
    np.testing.assert_array_equal(fit_a.beta.toarray(), fit_b.beta.toarray())
    np.testing.assert_array_equal(fit_a.intercepts, fit_b.intercepts)
    assert fit_a.eta == fit_b.eta
    assert len(cv_a.fold_fits) == 5
    # other folds train on the changed rows
    assert not np.array_equal(cv_a.fold_fits[1].intercepts, cv_b.fold_fits[1].intercepts)


def test_lambda_selection():
    """Test 3: lambda_min is the argmin; lambda_1se is the largest lambda within one SE"""
    cv = CVResult(lambdas=[5.0, 4.0, 3.0, 2.0, 1.0],
                  cve=[10.0, 6.0, 5.0, 4.5, 4.8],
                  cvse=[1.0, 1.0, 1.0, 0.6, 0.5],
                  folds=[1, 2, 1, 2], prediction_type="linear", fit=None)
    assert cv.lambda_min_index == 3
    assert cv.lambda_min == 2.0
    assert cv.lambda_1se_index == 2
    assert cv.nfolds == 2


def test_predict_linear_matches_coefficients(small_design, rng):
    """Test 4: Linear prediction is intercept + X beta on the original scale"""
    fit = plmm(small_design, PathOptions(nlambda=6))
    X_new = rng.integers(0, 3, size=(7, small_design.p)).astype(float)
    k = fit.n_lambda - 1
    expected = fit.intercepts[k] + X_new @ fit.coef(k)
    np.testing.assert_allclose(predict_linear(fit, X_new, k), expected, atol=1e-12)
    assert predict_linear(fit, X_new).shape == (7, fit.n_lambda)
    np.testing.assert_allclose(predict_linear(fit, X_new[0], 0), fit.intercepts[0])

    with pytest.raises(InferenceError):
        predict_linear(fit, X_new[:, :3])
    with pytest.raises(InferenceError):
        predict_linear(fit, ArrayColumns(X_new, list(reversed(fit.feature_names))))


def test_training_fitted_matches_linear(small_design):
    """Test 5: Fitted values recovered from rotated residuals equal the linear prediction"""
    fit = plmm(small_design, PathOptions(nlambda=6))
    raw = small_design.raw_columns()
    for k in (0, 3, fit.n_lambda - 1):
        np.testing.assert_allclose(training_fitted(fit, k), predict_linear(fit, raw, k), atol=1e-8)


def test_blup_zero_eta_is_linear(small_design, rng):
    """Test 6: With eta = 0 the random-effect term vanishes exactly"""
    fit = plmm(small_design, PathOptions(nlambda=5))
    dec = Decomposition(fit.decomposition.U, fit.decomposition.d, 0.0)
    X_new = rng.integers(0, 3, size=(4, small_design.p)).astype(float)
    np.testing.assert_array_equal(predict_blup(fit, small_design, X_new, 2, decomposition=dec),
                                  predict_linear(fit, X_new, 2))


def test_blup_matches_dense_formula(design_factory):
    """Test 7: BLUP equals linear + eta K_cross S^-1 (y - linear) with S inverted explicitly"""
    design = design_factory(n=10, p=30, seed=5)
    fit = plmm(design, PathOptions(nlambda=5))
    eta = fit.decomposition.eta
    k = fit.n_lambda - 1

    Z = design.X.read_col_block(0, design.p)
    K = Z @ Z.T / design.p
    S = eta * K + (1.0 - eta) * np.eye(design.n)
    raw = design.raw_columns()
    linear_train = predict_linear(fit, raw, k)

    X_new = raw.read_col_block(0, design.p)[[0, 4]] + np.array([[0.0], [1.0]])
    Z_new = (X_new - design.centers) / design.scales
    K_cross = Z_new @ Z.T / design.p
    expected = predict_linear(fit, X_new, k) + eta * K_cross @ np.linalg.inv(S) @ (design.y - linear_train)
    np.testing.assert_allclose(predict_blup(fit, design, X_new, k), expected, atol=1e-8)

    both = predict_blup(fit, design, X_new)
    np.testing.assert_allclose(both[:, k], expected, atol=1e-8)


def test_blup_needs_decomposition(small_design):
    """Test 8: A reloaded fit without its decomposition cannot give BLUP predictions"""
    fit = plmm(small_design, PathOptions(nlambda=3))
    fit.decomposition = None
    with pytest.raises(InferenceError, match="decomposition"):
        predict_blup(fit, small_design, np.zeros((1, small_design.p)))


def test_summaries(small_design):
    """Test 9: Fit summaries default to the last lambda, CV summaries to lambda_min"""
    cv = cv_plmm(small_design, nfolds=3, seed=2, opts=PathOptions(nlambda=8))
    fit_summary = summarize(cv.fit)
    assert fit_summary.lambda_index == cv.fit.n_lambda - 1
    assert fit_summary.n_nonzero == len(fit_summary.selected) == cv.fit.nonzero_count(-1)
    assert fit_summary.cve is None

    cv_summary = summarize(cv)
    assert cv_summary.lambda_index == cv.lambda_min_index
    assert cv_summary.is_lambda_min
    assert cv_summary.cve == pytest.approx(cv.cve.min())
    text = format_summary(cv_summary)
    assert "lambda_min =" in text
    assert f"lambda[{cv.lambda_min_index}]" in text

    with pytest.raises(InferenceError):
        summarize(cv.fit, cv.fit.n_lambda)
    with pytest.raises(InferenceError):
        summarize(cv, -1)


def test_cv_result_shape_and_persistence(small_design, tmp_path):
    """Test 10: cve/cvse cover the grid, folds are 1..k, and save_cv/load_cv round-trips"""
    cv = cv_plmm(small_design, nfolds=4, seed=8, prediction_type="linear", opts=PathOptions(nlambda=6))
    assert cv.cve.shape == cv.cvse.shape == (6,)
    np.testing.assert_array_equal(cv.lambdas, cv.fit.lambdas)
    assert set(cv.folds.tolist()) == {1, 2, 3, 4}
    assert np.all(cv.cvse >= 0)

    save_cv(cv, str(tmp_path / "cv"))
    loaded = load_cv(str(tmp_path / "cv"))
    np.testing.assert_array_equal(loaded.cve, cv.cve)
    np.testing.assert_array_equal(loaded.cvse, cv.cvse)
    np.testing.assert_array_equal(loaded.folds, cv.folds)
    assert loaded.sample_ids == small_design.sample_ids
    assert loaded.lambda_min_index == cv.lambda_min_index
    assert loaded.prediction_type == "linear"
    assert loaded.seed == 8


def test_cv_argument_errors(small_design):
    """Test 11: Too many folds, tiny folds and unknown prediction types are rejected"""
    with pytest.raises(InferenceError):
        cv_plmm(small_design, nfolds=small_design.n + 1)
    with pytest.raises(InferenceError, match="prediction_type"):
        cv_plmm(small_design, prediction_type="mean")
    folds = np.ones(small_design.n, dtype=int)
    folds[0] = 2
    with pytest.raises(InferenceError, match="at least 2"):
        cv_plmm(small_design, folds=folds)


def test_lambda_min_ignores_fold_labels(small_design):
    """Test 12: Renaming the folds leaves cve and lambda_min unchanged"""
    folds = assign_folds(small_design.n, 4, seed=5)
    relabeled = np.array([3, 4, 2, 1])[folds - 1]
    opts = PathOptions(nlambda=8)
    cv_a = cv_plmm(small_design, folds=folds, opts=opts, prediction_type="linear")
    cv_b = cv_plmm(small_design, folds=relabeled, opts=opts, prediction_type="linear")
    np.testing.assert_allclose(cv_b.cve, cv_a.cve, rtol=1e-12)
    assert cv_b.lambda_min_index == cv_a.lambda_min_index
    assert cv_b.lambda_min == cv_a.lambda_min


def test_cve_at_lambda_max_is_covariate_only_error(design_factory):
    """Test 13: At lambda_max the CV error equals that of a GLS fit on the covariates alone"""
    design = design_factory(n=50, p=30, seed=17, covariates=True)
    folds = assign_folds(design.n, 5, seed=2)
    cv = cv_plmm(design, folds=folds, lambdas=[1e3, 0.5, 0.1], prediction_type="linear")

    A = np.column_stack([np.ones(design.n), design.raw_columns().read_col_block(0, design.n_unpenalized)])
    errors = np.zeros(design.n)
    for fold, fit in zip(np.unique(folds), cv.fold_fits):
        train, test = np.flatnonzero(folds != fold), np.flatnonzero(folds == fold)
        assert fit.nonzero_count(0) == 0
        dec = fit.decomposition
        s_inv = (dec.U / (dec.eta * dec.d + 1.0 - dec.eta)) @ dec.U.T
        coef = np.linalg.solve(A[train].T @ s_inv @ A[train], A[train].T @ s_inv @ design.y[train])
        errors[test] = (design.y[test] - A[test] @ coef) ** 2
    assert cv.cve[0] == pytest.approx(errors.mean(), rel=1e-9)


def test_threads_do_not_change_results(small_design):
    """Test 14: One worker and several workers give the same path and CV error"""
    opts = PathOptions(nlambda=8)
    serial = cv_plmm(small_design, nfolds=4, seed=3, opts=opts, threads=1)
    parallel = cv_plmm(small_design, nfolds=4, seed=3, opts=opts, threads=3)
    np.testing.assert_allclose(parallel.fit.beta.toarray(), serial.fit.beta.toarray(), rtol=0, atol=1e-12)
    np.testing.assert_allclose(parallel.cve, serial.cve, rtol=1e-12, atol=1e-12)
    for a, b in zip(serial.fold_fits, parallel.fold_fits):
        np.testing.assert_allclose(b.beta.toarray(), a.beta.toarray(), rtol=0, atol=1e-12)


@pytest.mark.slow
def test_blup_improves_held_out_error(tmp_path):
    """Test 15: On family-structured data BLUP beats linear prediction across 20 replicates"""
    wins = 0
    for rep in range(20):
        dosages, _ = simulate_families(20, 10, 800, seed=rep)
        u = polygenic_effect(dosages, variance=1.0, seed=1000 + rep)
        y, _ = simulate_outcome(dosages, n_causal=5, effect=0.5, random_effect=u, seed=2000 + rep)
        design = _design_from(dosages, y, tmp_path / f"r{rep}")
        opts = PathOptions(nlambda=20)
        blup = cv_plmm(design, nfolds=5, seed=rep, prediction_type="blup", opts=opts)
        linear = cv_plmm(design, nfolds=5, seed=rep, prediction_type="linear", opts=opts)
        wins += blup.cve[blup.lambda_min_index] < linear.cve[linear.lambda_min_index]
    assert binomtest(wins, 20, alternative="greater").pvalue < 0.05


def _plain_lasso_cv(design, folds, lambdas):
    """Held-out linear error of the unrotated lasso (eta = 0 in every fold)"""
    errors = np.zeros((design.n, len(lambdas)))
    for fold in np.unique(folds):
        train, test = np.flatnonzero(folds != fold), np.flatnonzero(folds == fold)
        sub = design.training_subset(train)
        identity = Decomposition(np.eye(len(train)), np.zeros(len(train)), 0.0)
        fit = plmm(sub, PathOptions(), decomposition=identity, lambdas=lambdas)
        X_test = design.raw_columns().read_col_block(0, design.p)[test]
        errors[test] = (design.y[test][:, None] - predict_linear(fit, X_test)) ** 2
    return errors.mean(axis=0)


@pytest.mark.slow
def test_preconditioning_reduces_confounded_selections(tmp_path):
    """Test 16: With population-confounded null features the mixed model selects fewer of them"""
    mixed, plain = [], []
    for rep in range(20):
        dosages, population = simulate_populations(200, 400, divergence=0.15, seed=rep)
        y = 1.5 * population + np.random.default_rng(500 + rep).normal(size=200)
        design = _design_from(dosages, y, tmp_path / f"r{rep}")
        cv = cv_plmm(design, nfolds=5, seed=rep, prediction_type="linear", opts=PathOptions(nlambda=20))
        mixed.append(cv.fit.nonzero_count(cv.lambda_min_index))

        identity = Decomposition(np.eye(design.n), np.zeros(design.n), 0.0)
        full = plmm(design, PathOptions(nlambda=20), decomposition=identity)
        cve = _plain_lasso_cv(design, cv.folds, full.lambdas)
        plain.append(full.nonzero_count(int(np.argmin(cve))))
    assert np.median(mixed) < np.median(plain)
