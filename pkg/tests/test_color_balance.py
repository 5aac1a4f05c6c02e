import json

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from holochroma import color_balance as cb
from holochroma.colorimetry import cie1931, white_point

M = cb.cmfs_matrix()
LASER = cb.LaserModel.balanced_to(white_point("d65"), M)


def _xy(xyz):
    xyz = np.asarray(xyz, dtype=float)
    return xyz[:2] / xyz.sum()


def _mixture_xyz(laser, perturb=np.ones(3)):
    return M @ (laser.max_intensity * perturb * laser.durations)


def test_cmfs_matrix_columns_are_cmf_samples():
    cmf = cie1931()
    for i, wl in enumerate(cb.DEFAULT_WAVELENGTHS_NM):
        np.testing.assert_array_equal(M[:, i], cmf(np.array([wl]))[0])


def test_cmfs_matrix_rejects_degenerate_lines():
    with pytest.raises(cb.ColorBalanceError):
        cb.cmfs_matrix((550.0, 550.0, 450.0))


def test_balanced_laser_reproduces_white():
    np.testing.assert_allclose(_mixture_xyz(LASER), white_point("d65"), rtol=1e-12)


@pytest.mark.parametrize("target", [[0.3, 0.4, 0.5], [0.2, 0.1, 0.3], [0.9505, 1.0, 1.089]])
def test_cbc_init_preserves_chromaticity(target):
    t = cb.cbc_init(target, LASER, M)
    assert t.max() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(_xy(_mixture_xyz(LASER.with_durations(t))), _xy(target), rtol=0, atol=1e-9)


@given(st.lists(st.floats(0.02, 1.0), min_size=3, max_size=3))
def test_cbc_init_chromaticity_property(weights):
    # any nonnegative laser mixture is inside the gamut by construction
    target = M @ (LASER.max_intensity * np.asarray(weights))
    t = cb.cbc_init(target, LASER, M)
    assert np.all(t >= 0) and t.max() == pytest.approx(1.0)
    np.testing.assert_allclose(_xy(_mixture_xyz(LASER.with_durations(t))), _xy(target), atol=1e-9)


def test_cbc_init_rejects_out_of_gamut_colour():
    # spectral 560 nm is outside the triangle spanned by the three lasers
    outside = cie1931()(np.array([560.0]))[0]
    with pytest.raises(cb.ColorBalanceError):
        cb.cbc_init(outside, LASER, M)


def test_refine_fixed_point_at_unit_ratio():
    laser = LASER.with_durations(cb.cbc_init([0.3, 0.35, 0.4], LASER, M))
    t = cb.cbc_refine(_mixture_xyz(laser), laser, M)
    np.testing.assert_allclose(t, laser.durations, rtol=1e-12)


@given(st.floats(0.1, 10.0))
def test_refine_is_invariant_to_overall_brightness(gain):
    laser = LASER.with_durations([1.0, 0.6, 0.8])
    t = cb.cbc_refine(gain * _mixture_xyz(laser), laser, M)
    np.testing.assert_allclose(t, laser.durations, rtol=1e-10)


def test_refine_without_normalisation_returns_raw_ratio():
    laser = LASER.with_durations([1.0, 1.0, 1.0])
    captured = _mixture_xyz(laser, np.array([2.0, 1.0, 0.5]))
    np.testing.assert_allclose(cb.cbc_refine(captured, laser, M, normalize=False), [0.5, 1.0, 2.0], rtol=1e-12)


@pytest.mark.parametrize("channel", [0, 1, 2])
@pytest.mark.parametrize("factor", [0.85, 1.15])
def test_closed_loop_refine_reduces_chromaticity_error(channel, factor):
    target = np.array([0.35, 0.37, 0.33])
    laser = LASER.with_durations(cb.cbc_init(target, LASER, M))
    perturb = np.ones(3)
    perturb[channel] = factor
    before = np.linalg.norm(_xy(_mixture_xyz(laser, perturb)) - _xy(target))
    refined = laser.with_durations(cb.cbc_refine(_mixture_xyz(laser, perturb), laser, M))
    after = np.linalg.norm(_xy(_mixture_xyz(refined, perturb)) - _xy(target))
    assert before > 1e-3
    assert after < before
    assert after < 1e-12  # a noiseless linear loop is corrected in one step


def test_refine_refuses_vanished_channel():
    laser = LASER.with_durations([1.0, 1.0, 1.0])
    captured = M @ (laser.max_intensity * np.array([1.0, 1.0, 0.0]))
    with pytest.raises(cb.ColorBalanceError):
        cb.cbc_refine(captured, laser, M)


def test_laser_model_validation_and_json(tmp_path):
    with pytest.raises(cb.ColorBalanceError):
        cb.LaserModel([1.0, 0.0, 1.0])
    with pytest.raises(cb.ColorBalanceError):
        cb.LaserModel([1.0, 1.0, 1.0], [1.0, -0.1, 1.0])
    with pytest.raises(cb.ColorBalanceError):
        LASER.perturbed([1.0, 0.0, 1.0])
    with pytest.raises(cb.ColorBalanceError):
        cb.normalize_durations([0.0, 0.0, 0.0])
    path = tmp_path / "laser.json"
    path.write_text(json.dumps(LASER.to_json()))
    back = cb.LaserModel.load(path)
    np.testing.assert_array_equal(back.max_intensity, LASER.max_intensity)
    np.testing.assert_array_equal(back.durations, LASER.durations)


def test_perturbed_scales_only_max_intensity():
    p = LASER.perturbed([1.1, 1.0, 0.9])
    np.testing.assert_allclose(p.max_intensity, LASER.max_intensity * [1.1, 1.0, 0.9])
    np.testing.assert_array_equal(p.durations, LASER.durations)


def test_intensity_to_xyz_matches_matrix_product():
    i = np.array([[0.2, 0.5, 0.1], [1.0, 0.0, 0.0]])
    np.testing.assert_allclose(cb.intensity_to_xyz(i, M), (M @ i.T).T)
