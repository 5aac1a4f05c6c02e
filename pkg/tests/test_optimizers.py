import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given
from hypothesis.extra.numpy import arrays

from holochroma import color_balance as cb
from holochroma import optimizers as opt
from holochroma import wavefield as W
from holochroma.colorimetry import XYZ, cst, holo, white_point


class LinearRig:
    """Noise-free display whose camera reports Holo RGB intensity through XYZ.

    The loss-space capture equals the simulated intensity, so the
    straight-through gradient is the exact gradient of the objective.
    """

    def __init__(self, n=8, seed=0, gain=1.0):
        rng = np.random.default_rng(seed)
        zern = [list(rng.normal(0, 0.4, 6)) for _ in range(3)]
        homs = [None] + [W.synthetic_homography(rng, n, n, 0.02, 0.8) for _ in range(2)]
        self.propagation = W.PropagationModel(n, n, zernike=zern, homographies=homs)
        self.holo = holo()
        self.cmf_matrix = cb.cmfs_matrix()
        self.laser = cb.LaserModel.balanced_to(white_point("d65"), self.cmf_matrix)
        self.gain = gain

    def capture(self, intensity, laser):
        return self.gain * np.moveaxis(intensity, 0, -1) @ self.holo.m_rgb_to_xyz.T

    def restore(self, raw):
        return raw


def _target(n, seed=1):
    return np.random.default_rng(seed).uniform(0.1, 0.6, (n, n, 3))


# -- building blocks --------------------------------------------------------


def test_replace_forward_and_backward():
    u = np.arange(6.0).reshape(2, 3)
    v = -u
    value, back = opt.replace(u, v)
    np.testing.assert_array_equal(value, v)
    value[0, 0] = 99.0
    assert v[0, 0] == 0.0  # forward value is a copy
    g = np.ones_like(u)
    np.testing.assert_array_equal(back(g), g)
    with pytest.raises(ValueError):
        opt.replace(u, v[:1])
    with pytest.raises(ValueError):
        back(np.ones(3))


@given(arrays(float, (4, 3), elements=st.floats(-2, 2)), arrays(float, (4, 3), elements=st.floats(-2, 2)))
def test_mse_grad_matches_finite_difference(a, b):
    g = opt.mse_grad(a, b)
    for idx in [(0, 0), (3, 2), (1, 1)]:
        ap, am = a.copy(), a.copy()
        ap[idx] += 1e-6
        am[idx] -= 1e-6
        fd = (opt.mse_loss(ap, b) - opt.mse_loss(am, b)) / 2e-6
        assert g[idx] == pytest.approx(fd, abs=1e-7)


def test_adam_first_step_is_lr_times_sign():
    theta = np.array([1.0, -2.0, 3.0])
    grad = np.array([0.5, -4.0, 1e-3])
    state = opt.AdamState.zeros_like(theta)
    new = opt.adam_step(theta, grad, state, lr=0.1)
    # m_hat = g and v_hat = g^2 after bias correction
    np.testing.assert_allclose(new, theta - 0.1 * grad / (np.abs(grad) + opt.EPS))
    assert state.t == 1


def test_adam_minimises_a_quadratic():
    theta = np.array([5.0, -3.0])
    state = opt.AdamState.zeros_like(theta)
    for _ in range(2000):
        theta = opt.adam_step(theta, 2 * (theta - [1.0, 2.0]), state, lr=0.05)
    np.testing.assert_allclose(theta, [1.0, 2.0], atol=1e-3)


def test_adamw_decay_is_decoupled():
    theta = np.array([2.0])
    state = opt.AdamState.zeros_like(theta)
    new = opt.adam_step(theta, np.array([0.0]), state, lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(new, [2.0 * (1 - 0.05)])


def test_adam_state_keeps_float32():
    state = opt.AdamState.zeros_like(np.zeros(3, np.float32))
    assert state.m.dtype == np.float32
    assert opt.AdamState.zeros_like(3).m.dtype == np.float64


def test_adam_rejects_nan_gradient():
    with pytest.raises(opt.OptimizationError):
        opt.adam_step(np.zeros(2), np.array([np.nan, 0.0]), opt.AdamState.zeros_like(np.zeros(2)), 0.1)


# -- colour correction matrix -----------------------------------------------


def test_fit_ccm_recovers_linear_camera():
    rng = np.random.default_rng(4)
    composite = np.array([[1.6, -0.4, -0.1], [-0.3, 1.5, -0.2], [0.05, -0.35, 1.3]])
    reference = rng.uniform(0.05, 0.95, (48, 3))
    captured = reference @ np.linalg.inv(composite).T
    model = opt.fit_ccm(captured, reference)
    np.testing.assert_allclose(model.composite, composite, rtol=0, atol=1e-3)
    np.testing.assert_allclose(model.apply(captured), reference, atol=1e-3)
    assert np.count_nonzero(model.white_balance - np.diag(np.diag(model.white_balance))) == 0


def test_fit_ccm_json_round_trip():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.1, 0.9, (20, 3))
    model = opt.fit_ccm(x, x * [1.2, 1.0, 0.8], k1=50, k2=50)
    back = opt.CCMModel.from_json(model.to_json())
    np.testing.assert_array_equal(back.composite, model.composite)


def test_fit_ccm_input_validation():
    with pytest.raises(ValueError):
        opt.fit_ccm(np.ones((8, 3)), np.ones((8, 3)))
    with pytest.raises(ValueError):
        opt.fit_ccm(np.ones((12, 3)), np.ones((10, 3)))


def test_fit_ccm_divergence_is_reported():
    x = np.random.default_rng(0).uniform(0.1, 0.9, (20, 3))
    with pytest.raises(opt.OptimizationError):
        opt.fit_ccm(x, x, k1=200, k2=10, lr_w=100.0)


# -- full objective gradient ------------------------------------------------


def _objective_fd_check(rig, flags, s=0.9, seed=0):
    n = rig.propagation.height
    rng = np.random.default_rng(seed)
    phase = rng.uniform(-np.pi, np.pi, (3, n, n))
    target = np.moveaxis(_target(n), -1, 0)

    def loss_at(p, scale=s):
        return opt.objective(p, scale, target, rig, rig.laser, flags)[0]

    _, g_phase, g_s, _, _ = opt.objective(phase, s, target, rig, rig.laser, flags)
    h = 1e-6
    for idx in [(0, 0, 0), (1, 3, 5), (2, 7, 2), (2, 4, 4)]:
        pp, pm = phase.copy(), phase.copy()
        pp[idx] += h
        pm[idx] -= h
        fd = (loss_at(pp) - loss_at(pm)) / (2 * h)
        assert abs(g_phase[idx] - fd) <= 1e-4 * max(abs(fd), 1e-12), idx
    d = rng.standard_normal(phase.shape)
    fd = (loss_at(phase + h * d) - loss_at(phase - h * d)) / (2 * h)
    assert abs(np.sum(g_phase * d) - fd) <= 1e-4 * abs(fd)
    fd_s = (loss_at(phase, s + h) - loss_at(phase, s - h)) / (2 * h)
    assert abs(g_s - fd_s) <= 1e-4 * abs(fd_s)


def test_full_objective_gradient_matches_finite_difference():
    _objective_fd_check(LinearRig(), {"cst": True, "mlp": True, "cbc": True})


def test_objective_gradient_without_cst_stage():
    rig = LinearRig(seed=2)
    rig.capture = lambda intensity, laser: np.moveaxis(intensity, 0, -1)  # restore() output is compared directly
    _objective_fd_check(rig, {"cst": False, "mlp": True, "cbc": True}, seed=3)


def test_straight_through_uses_captured_value_in_forward():
    rig = LinearRig(gain=2.0)
    n = rig.propagation.height
    phase = np.zeros((3, n, n))
    target = np.moveaxis(_target(n), -1, 0)
    flags = {"cst": True, "mlp": True, "cbc": False}
    loss, g_phase, _, _, captured = opt.objective(phase, 1.0, target, rig, rig.laser, flags)
    intensity = rig.propagation.intensity(phase)
    np.testing.assert_allclose(np.moveaxis(captured, -1, 0), 2 * intensity, rtol=1e-12)
    assert loss == pytest.approx(opt.mse_loss(2 * intensity, target), rel=1e-12)
    # the gradient flows through the simulated intensity with the captured residual
    g_expected = rig.propagation.backprop_to_phase(phase, opt.mse_grad(2 * intensity, target))
    np.testing.assert_allclose(g_phase, g_expected, rtol=1e-10, atol=1e-16)


# -- optimisation loop ------------------------------------------------------


@pytest.mark.parametrize("kwargs", [
    {"method": "nope"},
    {"iterations": 7},
    {"iterations": 0},
    {"lr_phase": 0.0},
    {"lr_scale": -1.0},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        opt.OptimizationConfig(**kwargs)


def test_baseline_flags_are_fixed():
    assert opt.OptimizationConfig("citl", cst=True, mlp=True).flags == {"cst": False, "mlp": False, "cbc": False}
    assert opt.OptimizationConfig("citl_ccm").flags == {"cst": True, "mlp": False, "cbc": False}


def test_optimize_reduces_loss_and_refines_once():
    rig = LinearRig(n=16)
    target = _target(16)
    run = opt.optimize(target, opt.OptimizationConfig(iterations=40, lr_phase=0.1, seed=1), rig)
    assert len(run.loss) == 40
    assert run.loss[-1] < 0.5 * run.loss[0]
    assert run.laser_updates == [20]
    assert run.captured_raw.shape == run.restored_holo.shape == (16, 16, 3)
    assert run.scale > 0


def test_laser_durations_start_from_target_and_only_change_at_refine():
    rig = LinearRig(n=16)
    target = _target(16)
    run = opt.optimize(target, opt.OptimizationConfig(iterations=20, seed=0), rig)
    mean_xyz = cst(target.reshape(-1, 3), rig.holo, XYZ).mean(axis=0)
    np.testing.assert_allclose(run.duration_trace[0], cb.cbc_init(mean_xyz, rig.laser, rig.cmf_matrix))
    changes = [k + 1 for k in range(1, 20) if not np.array_equal(run.duration_trace[k], run.duration_trace[k - 1])]
    assert set(changes) <= {11}


def test_extra_refines_are_scheduled_in_second_half():
    rig = LinearRig(n=8)
    cfg = opt.OptimizationConfig(iterations=20, seed=0, extra_refines=2)
    run = opt.optimize(_target(8), cfg, rig)
    assert run.laser_updates[0] == 10 and len(run.laser_updates) == 3
    assert all(10 < k <= 20 for k in run.laser_updates[1:])


def test_no_refine_when_cbc_disabled():
    rig = LinearRig(n=8)
    run = opt.optimize(_target(8), opt.OptimizationConfig(iterations=10, cbc=False), rig)
    assert run.laser_updates == []


def test_optimize_is_deterministic():
    rig = LinearRig(n=8)
    cfg = opt.OptimizationConfig(iterations=12, seed=5)
    a = opt.optimize(_target(8), cfg, rig)
    b = opt.optimize(_target(8), cfg, rig)
    assert a.loss == b.loss
    np.testing.assert_array_equal(a.phase, b.phase)


def test_optimize_argument_errors():
    rig = LinearRig(n=8)
    with pytest.raises(ValueError):
        opt.optimize(_target(8), opt.OptimizationConfig("citl_ccm", iterations=2), rig)
    with pytest.raises(ValueError):
        opt.optimize(_target(8), opt.OptimizationConfig("citl", iterations=2), rig)


def test_nan_capture_aborts():
    rig = LinearRig(n=8)
    rig.restore = lambda raw: np.full_like(raw, np.nan)
    with pytest.raises(opt.OptimizationError):
        opt.optimize(_target(8), opt.OptimizationConfig(iterations=2), rig)


def test_cbc_mean_nonzero_ignores_black_pixels():
    rig = LinearRig(n=8)
    target = _target(8)
    padded = target.copy()
    padded[:4] = 0.0
    a = opt.optimize(padded, opt.OptimizationConfig(iterations=2, cbc_mean="nonzero"), rig)
    mean_xyz = cst(padded[4:].reshape(-1, 3), rig.holo, XYZ).mean(axis=0)
    np.testing.assert_allclose(a.duration_trace[0], cb.cbc_init(mean_xyz, rig.laser, rig.cmf_matrix), rtol=1e-12)
    with pytest.raises(ValueError):
        opt.OptimizationConfig(cbc_mean="median")
    with pytest.raises(ValueError):
        opt.optimize(np.zeros((8, 8, 3)), opt.OptimizationConfig(iterations=2, cbc_mean="nonzero"), rig)
