"""
Decomposition tests - relatedness, eigendecomposition, variance ratio, preconditioning, persistence
"""

import os

import numpy as np
import pandas as pd
import pytest

from plmmkit.decomposition import (
    INTERCEPT_NAME,
    Decomposition,
    compute_grm,
    eigen_sym,
    estimate_eta,
    load_decomposition,
    normalize_trace,
    profile_loglik,
    rotate,
    save_decomposition,
)
from plmmkit.design_builder import create_design
from plmmkit.errors import CapacityError, DecompositionError
from plmmkit.guardrails import MemoryGuard
from plmmkit.matrix_store import ArrayColumns
from plmmkit.simulate import simulate_genotypes, standardize_dense


def test_preconditioner_identity():
    """Test 1: diag(w) U^T S U diag(w) = I on 25 random problems"""
    rng = np.random.default_rng(3)
    for trial in range(25):
        n = (20, 50, 100)[trial % 3]
        dosages, _ = simulate_genotypes(n, 2 * n, seed=rng)
        Z = standardize_dense(dosages)
        K = compute_grm(ArrayColumns(Z), np.ones(Z.shape[1]), block_width=13)
        y = rng.normal(size=n) + Z[:, :5].sum(axis=1)
        dec = Decomposition.from_kinship(K, y)

        F = dec.preconditioner()
        S = dec.eta * K + (1.0 - dec.eta) * np.eye(n)
        assert np.max(np.abs(F @ S @ F.T - np.eye(n))) < 1e-8
        assert 0.01 <= dec.eta <= 0.99


def test_eigendecomposition_correctness():
    """Test 2: U D U^T = K and U^T U = I on 20 random PSD matrices up to n = 300"""
    rng = np.random.default_rng(5)
    for n in np.linspace(10, 300, 20).astype(int):
        A = rng.normal(size=(n, max(2, n // 2)))
        K = A @ A.T / n
        U, d = eigen_sym(K)
        assert np.max(np.abs((U * d) @ U.T - K)) < 1e-8
        assert np.max(np.abs(U.T @ U - np.eye(n))) < 1e-8
        assert np.all(np.diff(d) <= 0)


def test_eigen_sym_rejects_bad_input():
    """Test 3: Non-square and non-finite matrices raise DecompositionError"""
    with pytest.raises(DecompositionError):
        eigen_sym(np.ones((3, 2)))
    K = np.eye(3)
    K[0, 1] = K[1, 0] = np.nan
    with pytest.raises(DecompositionError):
        eigen_sym(K)


def test_grm_blocked_matches_dense(rng):
    """Test 4: Blocked threaded relatedness equals X X^T / p over penalized columns only"""
    Z = rng.normal(size=(15, 40))
    pf = np.ones(40)
    pf[:3] = 0.0
    K = compute_grm(ArrayColumns(Z), pf, block_width=6, threads=3)
    expected = Z[:, 3:] @ Z[:, 3:].T / 37
    np.testing.assert_allclose(K, expected, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(K, K.T)

    with pytest.raises(DecompositionError):
        compute_grm(ArrayColumns(Z), np.zeros(40))


def test_grm_respects_memory_budget(rng):
    """Test 5: The dense workspace check runs before K is allocated"""
    guard = MemoryGuard(memory_budget_mb=0.001)
    with pytest.raises(CapacityError):
        compute_grm(ArrayColumns(rng.normal(size=(100, 5))), np.ones(5), guard=guard)


def test_normalize_trace(rng):
    """Test 6: Trace normalization divides by trace/n and reports the factor"""
    A = rng.normal(size=(8, 8))
    K = A @ A.T
    scaled, factor = normalize_trace(K)
    assert factor == pytest.approx(np.trace(K) / 8)
    assert np.trace(scaled) == pytest.approx(8.0)


def test_eta_maximizes_profile_likelihood():
    """Test 7: eta_hat is at least as likely as every point of a fine grid"""
    rng = np.random.default_rng(9)
    n = 150
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    d = np.sort(rng.gamma(0.5, 2.0, size=n))[::-1]
    K = (Q * d) @ Q.T
    S = 0.6 * K + 0.4 * np.eye(n)
    y = np.linalg.cholesky(S) @ rng.normal(size=n)

    U, dd = eigen_sym(K)
    eta = estimate_eta(dd, U, y, tol=1e-8)
    z = U.T @ (y - y.mean())
    grid = np.linspace(0.01, 0.99, 99)
    best_on_grid = max(profile_loglik(g, dd, z) for g in grid)
    assert profile_loglik(eta, dd, z) >= best_on_grid - 1e-6


def test_eta_edge_cases():
    """Test 8: A constant outcome or a flat likelihood resolves to the lower bound"""
    n = 10
    U, d = np.eye(n), np.ones(n)
    assert estimate_eta(d, U, np.full(n, 3.0)) == 0.01
    # K = I makes every eta equally likely
    rng = np.random.default_rng(1)
    assert estimate_eta(d, U, rng.normal(size=n), bounds=(0.05, 0.9)) == 0.05


def test_rotate(rng):
    """Test 9: Rotated columns are F x rescaled to mean square 1, intercept first"""
    n, p = 12, 6
    Z = standardize_dense(rng.normal(size=(n, p)))
    A = rng.normal(size=(n, n))
    U, d = eigen_sym(A @ A.T / n)
    dec = Decomposition(U, d, 0.4)
    y = rng.normal(size=n)

    rp = rotate(ArrayColumns(Z, [f"x{j}" for j in range(p)]), y, np.ones(p), dec, block_width=4)
    try:
        F = dec.preconditioner()
        Xr = rp.Xr.read_col_block(0, p + 1)
        assert rp.feature_names[0] == INTERCEPT_NAME
        np.testing.assert_allclose(np.mean(Xr ** 2, axis=0), 1.0, rtol=1e-12)
        np.testing.assert_allclose(Xr[:, 0] * rp.rot_scales[0], F @ np.ones(n), atol=1e-12)
        np.testing.assert_allclose(Xr[:, 1:] * rp.rot_scales[1:], F @ Z, atol=1e-12)
        np.testing.assert_allclose(rp.yr, F @ y, atol=1e-12)
        np.testing.assert_array_equal(rp.penalty_factor, np.r_[0.0, np.ones(p)])
    finally:
        path = rp.Xr.path
        rp.cleanup()
    assert not os.path.exists(path)


def test_rotate_dimension_mismatch(rng):
    """Test 10: A decomposition of another size is refused"""
    dec = Decomposition(np.eye(4), np.ones(4), 0.5)
    with pytest.raises(DecompositionError, match="Dimension mismatch"):
        rotate(ArrayColumns(rng.normal(size=(5, 2))), np.zeros(5), np.ones(2), dec)


def test_decomposition_round_trip(tmp_path, rng):
    """Test 11: Saved decompositions reload with identical U, d, eta and trace factor"""
    A = rng.normal(size=(9, 9))
    U, d = eigen_sym(A @ A.T)
    dec = Decomposition(U, d, 0.37, trace_normalizer=2.5)
    save_decomposition(dec, str(tmp_path / "dec.bk"), row_ids=[f"s{i}" for i in range(9)])

    loaded = load_decomposition(str(tmp_path / "dec.bk"))
    np.testing.assert_array_equal(loaded.U, dec.U)
    np.testing.assert_array_equal(loaded.d, dec.d)
    assert loaded.eta == 0.37
    assert loaded.trace_normalizer == 2.5


def test_eta_ignores_outcome_scale():
    """Test 12: Scaling y by c > 0 shifts the profile likelihood by a constant and leaves eta_hat unchanged"""
    rng = np.random.default_rng(12)
    n = 80
    dosages, _ = simulate_genotypes(n, 200, seed=12)
    Z = standardize_dense(dosages)
    U, d = eigen_sym(Z @ Z.T / Z.shape[1])
    y = np.linalg.cholesky(0.5 * (U * d) @ U.T + 0.5 * np.eye(n)) @ rng.normal(size=n)

    z = U.T @ (y - y.mean())
    grid = np.linspace(0.01, 0.99, 25)
    base = estimate_eta(d, U, y, tol=1e-9)
    for c in (1e-3, 0.5, 7.5, 1e4):
        shift = [profile_loglik(g, d, c * z) - profile_loglik(g, d, z) for g in grid]
        np.testing.assert_allclose(shift, -n * np.log(c), rtol=1e-9)
        assert estimate_eta(d, U, c * y, tol=1e-9) == pytest.approx(base, abs=1e-6)


def test_rotation_is_linear_in_outcome(rng):
    """Test 13: rotate(a y1 + b y2) = a rotate(y1) + b rotate(y2)"""
    n, p = 20, 8
    Z = standardize_dense(rng.normal(size=(n, p)))
    A = rng.normal(size=(n, n))
    U, d = eigen_sym(A @ A.T / n)
    dec = Decomposition(U, d, 0.3)
    y1, y2 = rng.normal(size=n), rng.normal(size=n)
    a, b = 2.5, -0.75

    rotated = []
    for y in (y1, y2, a * y1 + b * y2):
        rp = rotate(ArrayColumns(Z), y, np.ones(p), dec)
        rotated.append(rp.yr)
        rp.cleanup()
    np.testing.assert_allclose(rotated[2], a * rotated[0] + b * rotated[1], atol=1e-12)


def test_fold_constant_columns_do_not_shrink_relatedness(tmp_path):
    """Test 14: A column zeroed within the training rows is left out of the relatedness scaling"""
    X = np.array([[0, 1, 3], [0, 2, 1], [0, 0, 2], [1, 1, 0], [2, 2, 5], [1, 0, 4]], dtype=float)
    ids = [f"s{i}" for i in range(6)]
    design = create_design(ArrayColumns(X, ["g", "h", "k"]), pd.DataFrame({"id": ids, "y": np.arange(6.0)}),
                           str(tmp_path), predictor_ids=ids)
    with pytest.warns(UserWarning, match="constant within the training rows"):
        sub = design.training_subset([0, 1, 2])

    K = compute_grm(sub.X, sub.penalty_factor)
    assert np.trace(K) / sub.n == pytest.approx(1.0, abs=1e-8)
    Z = sub.X.read_col_block(0, 3)
    np.testing.assert_allclose(K, Z[:, 1:] @ Z[:, 1:].T / 2, atol=1e-12)

    with pytest.raises(DecompositionError, match="zero"):
        compute_grm(ArrayColumns(np.zeros((4, 3))), np.ones(3))
