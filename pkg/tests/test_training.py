# tests/test_training.py
import math

import numpy as np
import pytest

from services.config import check_memory_budget
from services.cscnet.network import init_params, make_config, network_forward
from services.error_handler import (
    DimensionError,
    GradientCheckError,
    ResourceLimitError,
    UsageError,
    ZeroNormError,
)
from services.hsi_data.synthetic import simulate_scene
from services.metrics import evaluate
from services.psvm import psvm_extract
from services.training import (
    AdamState,
    GradCheckReport,
    TensorCheck,
    TrainConfig,
    adam_step,
    adam_update,
    estimate_memory,
    extract_endmembers,
    gradient_check,
    network_backward,
    require_gradients_ok,
    sad_loss,
    sad_pixel,
    train,
)


# ===== SAD =====
def test_sad_pixel_examples():
    assert math.isclose(sad_pixel([1.0, 0.0], [0.0, 1.0]), math.pi / 2, rel_tol=1e-12)
    assert sad_pixel([1.0, 2.0], [2.0, 4.0]) <= math.sqrt(2e-7) + 1e-9
    assert math.isclose(sad_pixel([1.0, 0.0], [-1.0, 0.0]), math.acos(-1 + 1e-7), rel_tol=1e-12)


def test_sad_pixel_zero_norm():
    with pytest.raises(ZeroNormError):
        sad_pixel([0.0, 0.0], [1.0, 0.0])


def test_sad_loss_matches_pixel_average(rng):
    Y = rng.random((6, 3, 4)) + 0.1
    Y_hat = rng.random((6, 3, 4)) + 0.1
    expected = np.mean([
        sad_pixel(Y[:, i, j], Y_hat[:, i, j]) for i in range(3) for j in range(4)
    ])
    assert math.isclose(sad_loss(Y_hat, Y), expected, rel_tol=1e-12)


def test_sad_loss_scale_invariance(rng):
    Y = rng.random((6, 3, 4)) + 0.1
    Y_hat = rng.random((6, 3, 4)) + 0.1
    scales = rng.uniform(0.5, 3.0, size=(1, 3, 4))
    assert math.isclose(sad_loss(Y_hat * scales, Y), sad_loss(Y_hat, Y), rel_tol=1e-10)
    assert sad_loss(Y, Y) <= math.sqrt(2e-7) + 1e-9


def test_sad_loss_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        sad_loss(rng.random((4, 2, 2)), rng.random((4, 2, 3)))


# ===== Lan truyền ngược =====
def test_decoder_gradient_orthogonal_to_decoder(toy_scene, toy_net):
    cfg, params = toy_net
    Y = toy_scene.cube.values
    _, _, cache = network_forward(Y, params, cfg)
    loss, grads = network_backward(cache, Y, params, cfg)
    # loss không đổi khi nhân decoder với một hằng số
    inner = float(np.sum(grads.decoder * params.decoder))
    scale = np.linalg.norm(grads.decoder) * np.linalg.norm(params.decoder)
    assert abs(inner) <= 1e-10 * scale
    assert 0.0 <= loss <= math.pi


def test_backward_loss_equals_forward_loss(toy_scene, toy_net):
    cfg, params = toy_net
    Y = toy_scene.cube.values
    Y_hat, _, cache = network_forward(Y, params, cfg)
    loss, _ = network_backward(cache, Y, params, cfg)
    assert loss == sad_loss(Y_hat, Y)


def test_clamped_cosines_give_zero_finite_gradients(rng):
    cfg = make_config(16, 8, 8, 3, C=4, K=2)
    s = rng.random(16) + 0.1
    params = init_params(cfg, 0, np.tile(s[:, None], (1, 3)))
    Y = s[:, None, None] * rng.uniform(0.5, 2.0, size=(1, 8, 8))
    _, _, cache = network_forward(Y, params, cfg)
    loss, grads = network_backward(cache, Y, params, cfg)
    assert grads.all_finite()
    assert loss <= math.sqrt(2e-7) + 1e-9
    for name, g in grads.named_tensors().items():
        assert np.all(g == 0.0), name


def test_backward_requires_forward_cache(toy_scene, toy_net):
    cfg, params = toy_net
    _, _, cache = network_forward(toy_scene.cube.values, params, cfg)
    cache.reconstruction = None
    with pytest.raises(DimensionError):
        network_backward(cache, toy_scene.cube.values, params, cfg)


def test_gradient_check_default_seed_passes():
    report = gradient_check(seed=0)
    assert report.passed, report.as_rows()
    names = [t.name for t in report.tensors]
    assert len(names) == len(set(names)) == 3 * 2 + 4
    by_name = {t.name: t for t in report.tensors}
    for name in ("decoder", "g_kernel", "modules.1.k_in"):
        assert by_name[name].checked > 0
        assert not by_name[name].skipped
        assert by_name[name].passed
    require_gradients_ok(report)


def test_first_module_update_kernels_are_skipped_not_passed():
    # z^(0) chỉ dùng W_in nên k_u, k_d của module đầu có gradient đúng bằng 0
    report = gradient_check(seed=0)
    skipped = {t.name for t in report.skipped}
    assert {"modules.0.k_u", "modules.0.k_d"} <= skipped
    for t in report.skipped:
        assert not t.passed
        assert t not in report.failures
    rows = {r["tensor"]: r for r in report.as_rows()}
    assert rows["modules.0.k_u"]["skipped"] is True
    assert rows["decoder"]["skipped"] is False


def test_corrupting_unused_kernel_is_a_failure():
    report = gradient_check(seed=0, corrupt="modules.0.k_u")
    assert [t.name for t in report.failures] == ["modules.0.k_u"]
    assert not report.passed


def test_report_with_only_skipped_tensors_does_not_pass():
    report = GradCheckReport(
        seed=0,
        eps=1e-5,
        tolerance=1e-4,
        tensors=[TensorCheck("a", 0.0, 0, 4, passed=False, skipped=True)],
    )
    assert not report.passed
    assert report.failures == []
    with pytest.raises(GradientCheckError, match="seed=0"):
        require_gradients_ok(report)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [1, 2])
def test_gradient_check_other_seeds(seed):
    assert gradient_check(seed=seed).passed


def test_gradient_check_detects_corruption():
    report = gradient_check(seed=0, corrupt="decoder")
    assert not report.passed
    assert [t.name for t in report.failures] == ["decoder"]
    with pytest.raises(GradientCheckError, match="decoder"):
        require_gradients_ok(report)


def test_gradient_check_unknown_tensor():
    with pytest.raises(UsageError):
        gradient_check(seed=0, corrupt="nope")


# ===== Adam =====
def test_adam_zero_gradient_leaves_param_unchanged():
    p = np.array([1.0, -2.0])
    m, v = np.zeros(2), np.zeros(2)
    adam_update(p, np.zeros(2), m, v, 1, 0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    p = np.array([1.0, -2.0])
    g = np.array([0.5, -3.0])
    adam_update(p, g, np.zeros(2), np.zeros(2), 1, 0.1)
    np.testing.assert_allclose(p, [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 3.0 / (3.0 + 1e-8)], rtol=1e-12)


def test_adam_trace_on_quadratic():
    w = np.array([1.0])
    m, v = np.zeros(1), np.zeros(1)
    trace = []
    for t in range(1, 4):
        adam_update(w, 2.0 * w, m, v, t, 0.1)
        trace.append(float(w[0]))

    # tính lại bằng số thực Python
    w_ref, m_ref, v_ref = 1.0, 0.0, 0.0
    for t in range(1, 4):
        g = 2.0 * w_ref
        m_ref = 0.9 * m_ref + 0.1 * g
        v_ref = 0.999 * v_ref + 0.001 * g * g
        m_hat = m_ref / (1 - 0.9 ** t)
        v_hat = v_ref / (1 - 0.999 ** t)
        w_ref -= 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert math.isclose(trace[t - 1], w_ref, rel_tol=1e-12)
    assert abs(trace[0] - 0.9) <= 1e-7
    assert abs(trace[1] - 0.80041) <= 1e-4


def test_adam_step_freezes_decoder(toy_net):
    _, params = toy_net
    before = params.copy()
    grads = params.map(np.ones_like)
    state = AdamState.zeros_like(params)
    adam_step(params, grads, state, lr_encoder=0.01, lr_decoder=0.01, freeze_decoder=True)
    np.testing.assert_array_equal(params.decoder, before.decoder)
    assert np.all(state.v.decoder == 0.0)
    assert (state.t, state.t_decoder) == (1, 0)
    np.testing.assert_allclose(params.g_kernel, before.g_kernel - 0.01, rtol=0, atol=1e-9)

    adam_step(params, grads, state, lr_encoder=0.01, lr_decoder=0.02, freeze_decoder=False)
    assert (state.t, state.t_decoder) == (2, 1)
    np.testing.assert_allclose(params.decoder, before.decoder - 0.02, rtol=0, atol=1e-9)


# ===== Cấu hình huấn luyện =====
def test_train_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(t1=10, epochs=5)
    with pytest.raises(UsageError):
        TrainConfig(lr_e=0.0)
    with pytest.raises(UsageError):
        TrainConfig(log_interval=0)
    TrainConfig(t1=0, epochs=1)


def test_train_config_presets():
    cfg = TrainConfig.from_preset("Moffett")
    assert (cfg.lr_e, cfg.lr_d, cfg.t1, cfg.epochs) == (2e-4, 2e-4, 1890, 2000)
    assert TrainConfig.from_preset("simulated", epochs=1200).epochs == 1200
    with pytest.raises(UsageError):
        TrainConfig.from_preset("urban")


def test_memory_budget():
    cfg = make_config(16, 8, 8, 3, C=4, K=2)
    assert estimate_memory(cfg) > 0
    with pytest.raises(ResourceLimitError):
        check_memory_budget(10 ** 18)


# ===== Huấn luyện hai giai đoạn =====
def _train_toy(toy_scene, **kwargs):
    cfg = make_config(16, 8, 8, 3, C=4, K=2)
    tcfg = TrainConfig(**{"epochs": 20, "t1": 10, "log_interval": 5, "seed": 0, **kwargs})
    return train(toy_scene.cube, 3, cfg, tcfg, toy_scene.gt_endmembers)


def test_train_runs_two_stages(toy_scene):
    seen = []
    cfg = make_config(16, 8, 8, 3, C=4, K=2)
    report = train(
        toy_scene.cube, 3, cfg, TrainConfig(epochs=20, t1=10, log_interval=5),
        toy_scene.gt_endmembers, on_checkpoint=seen.append,
    )
    assert len(report.losses) == 20
    assert all(0.0 <= x <= math.pi for x in report.losses)
    assert [c.epoch for c in report.checkpoints] == [5, 10, 15, 20]
    assert [c.stage for c in report.checkpoints] == [1, 1, 2, 2]
    assert all(c.decoder_frozen_ok for c in report.checkpoints[:2])
    assert seen == report.checkpoints
    assert report.stage_boundary == 10
    A = report.abundances.values
    assert A.shape == (3, 8, 8) and A.min() >= 0.0
    assert not np.array_equal(report.endmembers.values, toy_scene.gt_endmembers.values)
    np.testing.assert_array_equal(extract_endmembers(report.params).values, report.endmembers.values)


def test_stage_one_only_keeps_decoder(toy_scene):
    report = _train_toy(toy_scene, t1=20)
    np.testing.assert_array_equal(report.endmembers.values, toy_scene.gt_endmembers.values)


def test_train_is_deterministic(toy_scene):
    a = _train_toy(toy_scene)
    b = _train_toy(toy_scene)
    assert a.losses == b.losses
    np.testing.assert_array_equal(a.abundances.values, b.abundances.values)


def test_train_rejects_mismatched_init(toy_scene):
    cfg = make_config(16, 8, 8, 3, C=4, K=2)
    with pytest.raises(DimensionError):
        train(toy_scene.cube, 3, cfg, TrainConfig(epochs=2, t1=1), np.ones((16, 4)))


@pytest.mark.slow
def test_desk_scale_pipeline_quality():
    scene = simulate_scene(120, 64, 64, 4, 20.0, seed=0)
    E_init = psvm_extract(scene.cube, 4)
    cfg = make_config(120, 64, 64, 4, C=16, K=6)
    tcfg = TrainConfig(epochs=600, t1=300, log_interval=100)
    report = train(scene.cube, 4, cfg, tcfg, E_init)
    assert [c.epoch for c in report.checkpoints] == [100, 200, 300, 400, 500, 600]
    result = evaluate(report.endmembers, report.abundances, scene.gt_endmembers, scene.gt_abundances)
    assert result.mean_sad <= 0.08
    assert result.mean_rmse <= 0.15


@pytest.mark.slow
def test_desk_scale_30db_loss_windows_and_checkpoint_invariants():
    scene = simulate_scene(120, 64, 64, 4, 30.0, seed=0)
    E_init = psvm_extract(scene.cube, 4)
    cfg = make_config(120, 64, 64, 4, C=16, K=6)
    tcfg = TrainConfig(epochs=600, t1=300, log_interval=50)
    seen = []
    report = train(scene.cube, 4, cfg, tcfg, E_init, on_checkpoint=seen.append)

    assert len(report.losses) == 600
    med = np.median(np.asarray(report.losses).reshape(-1, 50), axis=1)
    assert np.all(np.diff(med) <= 0)

    assert [c.epoch for c in seen] == list(range(50, 601, 50))
    for ckpt in seen:
        thetas = np.asarray(ckpt.thetas)
        assert len(thetas) == 6
        assert np.all(thetas > 0)
        assert np.all(np.diff(thetas) < 0)
        assert ckpt.min_abundance >= 0.0
        assert ckpt.max_sum_deviation <= 1e-6
        assert 0.0 <= ckpt.loss <= math.pi
        if ckpt.epoch <= 300:
            assert ckpt.stage == 1
            assert ckpt.decoder_frozen_ok is True
        else:
            assert ckpt.stage == 2
            assert ckpt.decoder_frozen_ok is None

    A = report.abundances.values
    assert A.min() >= 0.0
    np.testing.assert_allclose(A.sum(axis=0), 1.0, atol=1e-6)
    assert not np.array_equal(report.params.decoder, E_init.values)
