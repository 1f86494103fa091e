# tests/test_subspace.py
import itertools
import math

import numpy as np
import pytest

from services.error_handler import DimensionError, UsageError
from services.hsi_data.types import reshape_to_matrix
from services.hsi_data.synthetic import simulate_scene
from services.subspace import (
    cayley_menger_sq_volume,
    cayley_menger_sq_volume_batch,
    correlation_eigs,
    estimate_snr,
    project,
    snr_threshold,
    svm_greedy_seed,
    svm_maximize,
)


def _sign_fix(V):
    lead = np.argmax(np.abs(V), axis=0)
    return V * np.sign(V[lead, np.arange(V.shape[1])])


# ===== correlation_eigs / project =====
def test_rank_one_basis_is_first_axis():
    R = np.zeros((3, 4))
    R[0] = [1.0, 2.0, 3.0, 4.0]
    basis = correlation_eigs(R, 1)
    np.testing.assert_allclose(basis.U_d[:, 0], [1.0, 0.0, 0.0], atol=1e-12)
    assert math.isclose(basis.eigenvalues[0], 30.0 / 4.0, rel_tol=1e-12)


def test_eigs_match_numpy_oracle(rng):
    R = rng.standard_normal((5, 20))
    basis = correlation_eigs(R, 3)
    w, V = np.linalg.eigh(R @ R.T / 20)
    order = np.argsort(w)[::-1][:3]
    np.testing.assert_allclose(basis.eigenvalues, w[order], rtol=1e-10)
    np.testing.assert_allclose(basis.U_d, _sign_fix(V[:, order]), atol=1e-10)


def test_basis_orthonormal_and_sign_rule(rng):
    R = rng.random((12, 40))
    basis = correlation_eigs(R, 4)
    np.testing.assert_allclose(basis.U_d.T @ basis.U_d, np.eye(4), atol=1e-12)
    assert np.all(np.diff(basis.eigenvalues) <= 0)
    lead = np.argmax(np.abs(basis.U_d), axis=0)
    assert np.all(basis.U_d[lead, np.arange(4)] > 0)


def test_project_reconstructs_low_rank_data(rng):
    R = rng.random((10, 3)) @ rng.random((3, 50))
    basis, X_d = project(R, 3)
    np.testing.assert_allclose(basis.U_d @ X_d, R, atol=1e-10)


def test_project_full_dimension(rng):
    R = rng.standard_normal((4, 9))
    basis, X_d = project(R, 4)
    np.testing.assert_allclose(basis.U_d @ X_d, R, atol=1e-12)


def test_project_invalid_dimension(rng):
    with pytest.raises(UsageError):
        correlation_eigs(rng.random((4, 9)), 5)
    with pytest.raises(UsageError):
        correlation_eigs(rng.random((4, 9)), 0)


# ===== SNR =====
def test_snr_threshold_values():
    assert math.isclose(snr_threshold(4), 28.0206, abs_tol=1e-4)
    assert math.isclose(snr_threshold(3), 26.7712, abs_tol=1e-4)
    assert math.isclose(snr_threshold(4, offset=-2.0), 26.0206, abs_tol=1e-4)


@pytest.mark.parametrize("target", [10.0, 20.0, 30.0])
def test_estimated_snr_close_to_truth(target):
    scene = simulate_scene(120, 64, 64, 4, target, seed=21)
    estimate = estimate_snr(reshape_to_matrix(scene.cube), 4)
    assert abs(estimate - target) <= 3.0


def test_snr_invariant_to_pixel_permutation(rng):
    scene = simulate_scene(40, 16, 16, 3, 20.0, seed=5)
    R = reshape_to_matrix(scene.cube).values
    shuffled = R[:, rng.permutation(R.shape[1])]
    assert math.isclose(estimate_snr(R, 3), estimate_snr(shuffled, 3), rel_tol=1e-9)


def test_noiseless_snr_is_large_and_finite():
    scene = simulate_scene(40, 16, 16, 3, "noiseless", seed=5)
    snr = estimate_snr(reshape_to_matrix(scene.cube), 3)
    assert math.isfinite(snr)
    assert snr > snr_threshold(3)


def test_as_written_formula_is_abs_log_ratio():
    scene = simulate_scene(40, 16, 16, 3, 20.0, seed=8)
    R = reshape_to_matrix(scene.cube)
    db = estimate_snr(R, 3, "db")
    as_written = estimate_snr(R, 3, "as-written")
    assert math.isclose(as_written, abs(db / 10.0), rel_tol=1e-9)


def test_snr_rejects_bad_inputs(rng):
    R = rng.random((5, 10))
    with pytest.raises(UsageError):
        estimate_snr(R, 3, "linear")
    with pytest.raises(UsageError):
        estimate_snr(R, 5)


# ===== Cayley–Menger =====
def test_cm_unit_segment():
    assert math.isclose(cayley_menger_sq_volume(np.array([[0.0, 1.0]])), 1.0, rel_tol=1e-12)


def test_cm_equilateral_triangle():
    pts = np.array([[0.0, 1.0, 0.5], [0.0, 0.0, math.sqrt(3) / 2]])
    assert math.isclose(cayley_menger_sq_volume(pts), 3.0 / 16.0, rel_tol=1e-12)


def test_cm_unit_corner_tetrahedron():
    pts = np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    assert math.isclose(cayley_menger_sq_volume(pts), 1.0 / 72.0, rel_tol=1e-12)


def test_cm_matches_shoelace(rng):
    for _ in range(20):
        pts = rng.standard_normal((2, 3))
        (x1, x2, x3), (y1, y2, y3) = pts
        area = 0.5 * abs(x1 * (y2 - y3) + x2 * (y3 - y1) + x3 * (y1 - y2))
        assert math.isclose(cayley_menger_sq_volume(pts), area ** 2, rel_tol=1e-9, abs_tol=1e-12)


def test_cm_collinear_is_zero():
    pts = np.array([[0.0, 1.0, 2.0], [0.0, 1.0, 2.0]])
    assert abs(cayley_menger_sq_volume(pts)) <= 1e-10


def test_cm_rigid_motion_invariance(rng):
    pts = rng.standard_normal((3, 4))
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    moved = Q @ pts + rng.standard_normal((3, 1))
    assert math.isclose(cayley_menger_sq_volume(pts), cayley_menger_sq_volume(moved), rel_tol=1e-8)


def test_cm_batch_matches_single(rng):
    batch = rng.standard_normal((5, 3, 2))
    vols = cayley_menger_sq_volume_batch(batch)
    for b in range(5):
        assert math.isclose(vols[b], cayley_menger_sq_volume(batch[b].T), rel_tol=1e-12)


def test_cm_needs_two_points():
    with pytest.raises(DimensionError):
        cayley_menger_sq_volume(np.ones((2, 1)))


# ===== svm_maximize =====
def _best_volume(pts, P):
    return max(
        cayley_menger_sq_volume(pts[:, list(c)])
        for c in itertools.combinations(range(pts.shape[1]), P)
    )


def test_svm_maximize_with_exhaustive_check_matches_brute_force(rng):
    for _ in range(50):
        pts = rng.standard_normal((2, 12))
        chosen = svm_maximize(pts, 3, exhaustive_limit=10_000)
        assert math.isclose(cayley_menger_sq_volume(pts[:, chosen]), _best_volume(pts, 3), rel_tol=1e-12)
        assert chosen == sorted(chosen) and len(set(chosen)) == 3


def test_refinement_never_below_greedy_seed(rng):
    for _ in range(50):
        pts = rng.standard_normal((2, 12))
        seed = svm_greedy_seed(pts, 3)
        chosen = svm_maximize(pts, 3, exhaustive_limit=0)
        assert len(set(seed)) == 3
        assert cayley_menger_sq_volume(pts[:, chosen]) >= cayley_menger_sq_volume(pts[:, seed])
    for P in (3, 4, 5):
        pts = rng.standard_normal((P, 400))
        seed = svm_greedy_seed(pts, P)
        chosen = svm_maximize(pts, P)
        assert cayley_menger_sq_volume(pts[:, chosen]) >= cayley_menger_sq_volume(pts[:, seed])


def test_slot_sweep_replaces_max_norm_seed():
    # A(10,0) có chuẩn lớn nhất nhưng tam giác lớn nhất là BCD
    pts = np.array([
        [10.0, 6.0, 6.0, -9.9],
        [0.0, 6.0, -6.0, 0.0],
    ])
    assert svm_greedy_seed(pts, 3) == [0, 3, 1]
    chosen = svm_maximize(pts, 3, exhaustive_limit=0)
    assert chosen == [1, 2, 3]
    assert math.isclose(cayley_menger_sq_volume(pts[:, chosen]), (0.5 * 12.0 * 15.9) ** 2, rel_tol=1e-10)
    assert math.isclose(cayley_menger_sq_volume(pts[:, [0, 3, 1]]), (0.5 * 19.9 * 6.0) ** 2, rel_tol=1e-10)
    assert svm_maximize(pts, 3, max_sweeps=1) == [1, 2, 3]


def test_large_search_is_deterministic_and_order_free(rng):
    pts = rng.standard_normal((3, 2000))
    chosen = svm_maximize(pts, 4)
    assert chosen == svm_maximize(pts.copy(), 4)
    perm = rng.permutation(2000)
    shuffled = svm_maximize(pts[:, perm], 4)
    assert sorted(int(perm[k]) for k in shuffled) == chosen


def test_svm_maximize_duplicate_vertices_pick_lowest_index(rng):
    vertices = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    interior = rng.dirichlet(np.ones(3), size=9).T
    columns = np.concatenate([np.repeat(vertices, 4, axis=1), vertices @ interior], axis=1)
    order = rng.permutation(columns.shape[1])
    pts = columns[:, order]
    expected = sorted(
        int(np.flatnonzero(np.all(pts == vertices[:, [v]], axis=0))[0])
        for v in range(3)
    )
    assert svm_maximize(pts, 3) == expected


def test_svm_maximize_deterministic(rng):
    pts = rng.standard_normal((3, 200))
    assert svm_maximize(pts, 4) == svm_maximize(pts.copy(), 4)


def test_svm_maximize_rejects_bad_shapes(rng):
    with pytest.raises(DimensionError):
        svm_maximize(rng.standard_normal((2, 2)), 3)
    with pytest.raises(UsageError):
        svm_maximize(rng.standard_normal((2, 5)), 1)
    with pytest.raises(DimensionError):
        svm_maximize(rng.standard_normal((1, 5)), 3)
    with pytest.raises(UsageError):
        svm_maximize(rng.standard_normal((2, 5)), 3, exhaustive_limit=-1)
