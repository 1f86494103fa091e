# tests/test_psvm.py
import numpy as np
import pytest

from services.error_handler import DimensionError, NormalizationError, RankError, UsageError
from services.hsi_data.synthetic import simulate_scene
from services.hsi_data.types import HsiCube
from services.metrics import endmember_sad_only, evaluate, match_materials, sad_endmember
from services.psvm import (
    BRANCH_MEAN_REMOVED,
    BRANCH_PROJECTIVE,
    PsvmOptions,
    projective_normalize,
    psvm_extract,
    psvm_extract_detailed,
    svm_extract,
    svm_extract_detailed,
)


# ===== projective_normalize =====
def test_identical_columns_map_to_u_over_norm_sq():
    c = np.array([1.0, 2.0, 2.0])
    out = projective_normalize(np.tile(c[:, None], (1, 4)))
    np.testing.assert_allclose(out, np.tile((c / 9.0)[:, None], (1, 4)), rtol=1e-15)


def test_projective_normalize_matches_oracle(rng):
    X = rng.random((4, 30)) + 0.1
    u = X.mean(axis=1)
    expected = np.stack([X[:, j] / (X[:, j] @ u) for j in range(30)], axis=1)
    np.testing.assert_allclose(projective_normalize(X), expected, rtol=1e-12)


def test_projective_normalize_removes_column_scaling(rng):
    X = rng.random((3, 10)) + 0.1
    scales = rng.uniform(0.5, 2.0, size=10)
    out = projective_normalize(np.concatenate([X, X * scales], axis=1))
    np.testing.assert_allclose(out[:, 10:], out[:, :10], rtol=1e-12)


def test_projective_normalize_names_bad_pixel():
    X = np.array([[2.0, 1.0, -1.0], [0.0, 1.0, 1.0]])
    with pytest.raises(NormalizationError, match="Pixel 2"):
        projective_normalize(X)


# ===== PSVM trên cảnh có pixel thuần =====
def test_pure_pixel_scene_recovers_endmembers_exactly(pure_scene):
    result = psvm_extract_detailed(pure_scene.cube, 4)
    assert result.branch == BRANCH_PROJECTIVE
    assert not result.denoised
    E_gt = pure_scene.gt_endmembers.values
    perm = match_materials(result.endmembers.values, E_gt)
    for i in range(4):
        assert sad_endmember(result.endmembers.values[:, perm[i]], E_gt[:, i]) <= 1e-6


def test_pure_pixel_indices_are_planted_positions(pure_scene):
    A = pure_scene.gt_abundances.values.reshape(4, -1)
    planted = sorted(int(np.flatnonzero(A[p] == 1.0)[0]) for p in range(4))
    assert psvm_extract_detailed(pure_scene.cube, 4).indices == planted


def test_psvm_is_deterministic(pure_scene):
    a = psvm_extract_detailed(pure_scene.cube, 4)
    b = psvm_extract_detailed(pure_scene.cube, 4)
    assert a.indices == b.indices
    np.testing.assert_array_equal(a.endmembers.values, b.endmembers.values)


def test_psvm_indices_invariant_to_global_scaling(pure_scene):
    scaled = HsiCube(pure_scene.cube.values * 3.7)
    assert psvm_extract_detailed(scaled, 4).indices == psvm_extract_detailed(pure_scene.cube, 4).indices


def test_psvm_columns_ordered_by_source_pixel(pure_scene):
    result = psvm_extract_detailed(pure_scene.cube, 4)
    assert result.indices == sorted(result.indices)
    assert result.endmembers.values.shape == (120, 4)


# ===== Nhánh SNR =====
def test_high_snr_psvm_equals_psvm_nd():
    scene = simulate_scene(60, 24, 24, 4, 40.0, seed=13)
    with_denoise = psvm_extract_detailed(scene.cube, 4)
    without = psvm_extract_detailed(scene.cube, 4, PsvmOptions(denoise=False))
    assert not with_denoise.denoised
    assert without.method == "psvm-nd"
    assert with_denoise.indices == without.indices
    np.testing.assert_array_equal(with_denoise.endmembers.values, without.endmembers.values)


def test_low_snr_triggers_denoising():
    scene = simulate_scene(60, 32, 32, 4, 10.0, seed=4)
    result = psvm_extract_detailed(scene.cube, 4)
    assert result.denoised
    assert result.snr_initial < result.snr_threshold
    assert result.branch in (BRANCH_PROJECTIVE, BRANCH_MEAN_REMOVED)
    assert result.endmembers.values.shape == (60, 4)


def test_threshold_offset_forces_mean_removed_branch():
    scene = simulate_scene(40, 16, 16, 3, 30.0, seed=2)
    result = psvm_extract_detailed(
        scene.cube, 3, PsvmOptions(denoise=False, snr_threshold_offset=1000.0)
    )
    assert result.branch == BRANCH_MEAN_REMOVED


def test_summary_fields(pure_scene):
    summary = psvm_extract_detailed(pure_scene.cube, 4).summary()
    assert set(summary) == {
        "method", "indices", "snr_initial", "snr_final", "snr_threshold", "branch", "denoised",
    }


# ===== SVM cơ bản =====
def test_svm_extract_shape_and_branch():
    scene = simulate_scene(40, 16, 16, 3, 30.0, seed=9)
    result = svm_extract_detailed(scene.cube, 3)
    assert result.method == "svm"
    assert result.snr_initial is None
    assert svm_extract(scene.cube, 3).values.shape == (40, 3)


# ===== Lỗi =====
def test_material_count_out_of_range():
    cube = simulate_scene(10, 4, 4, 3, 30.0, seed=0).cube
    with pytest.raises(UsageError):
        psvm_extract(cube, 1)
    with pytest.raises(UsageError):
        psvm_extract(cube, 10)


def test_fewer_pixels_than_materials():
    cube = HsiCube(np.random.default_rng(0).random((10, 1, 2)))
    with pytest.raises(DimensionError):
        psvm_extract(cube, 3)


def test_identical_pixels_raise_rank_error():
    with pytest.raises(RankError):
        psvm_extract(HsiCube(np.full((10, 4, 4), 0.3)), 3)


def test_invalid_options():
    with pytest.raises(UsageError):
        PsvmOptions(snr_formula="linear")
    with pytest.raises(UsageError):
        PsvmOptions(gaussian_sigma=(1.0, -1.0, 1.0))
    with pytest.raises(UsageError):
        PsvmOptions(max_sweeps=0)


# ===== Độ bền với nhiễu =====
@pytest.mark.slow
def test_denoising_helps_at_10db():
    psvm_sad, nd_sad = [], []
    for seed in range(5):
        scene = simulate_scene(120, 64, 64, 4, 10.0, seed=seed)
        E_gt = scene.gt_endmembers.values
        A_gt = scene.gt_abundances.values
        for opts, bucket in ((PsvmOptions(), psvm_sad), (PsvmOptions(denoise=False), nd_sad)):
            E = psvm_extract(scene.cube, 4, opts).values
            bucket.append(evaluate(E, A_gt, E_gt, A_gt).mean_sad)
    assert np.median(psvm_sad) <= np.median(nd_sad)


@pytest.mark.slow
def test_five_material_scene_at_20db_within_sad_bound():
    scene = simulate_scene(120, 64, 64, 5, 20.0, seed=0)
    E = psvm_extract(scene.cube, 5)
    _, sad, mean_sad = endmember_sad_only(E, scene.gt_endmembers)
    assert len(sad) == 5
    assert mean_sad <= 0.08
