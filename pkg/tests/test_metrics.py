import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psnas.metrics import (EvalReport, intensity_error, intensity_scale, mae_light, mae_normal,
                           per_pixel_angles)


def _unit(rng, shape):
    v = rng.standard_normal(shape + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _reference_angle(a, b):
    # atan2 form: numerically independent of the clamped arccos
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), float(np.dot(a, b))))


# ---- mae_light ---------------------------------------------------------------

def test_mae_light_identical_is_zero():
    d = _unit(np.random.default_rng(0), (5,))
    assert mae_light(d, d) == pytest.approx(0.0, abs=1e-5)


def test_mae_light_orthogonal_is_90():
    assert mae_light([[1, 0, 0]], [[0, 1, 0]]) == pytest.approx(90.0, abs=1e-12)


def test_mae_light_mean_of_0_and_60():
    c, s = math.cos(math.pi / 3), math.sin(math.pi / 3)
    pred = [[0, 0, 1], [0, 0, 1]]
    truth = [[0, 0, 1], [s, 0, c]]
    assert mae_light(pred, truth) == pytest.approx(30.0, abs=1e-9)


def test_mae_light_matches_atan2_reference():
    rng = np.random.default_rng(1)
    a, b = _unit(rng, (40,)), _unit(rng, (40,))
    ref = np.mean([_reference_angle(x, y) for x, y in zip(a, b)])
    assert mae_light(a, b) == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("pred,truth", [(np.zeros((0, 3)), np.zeros((0, 3))),
                                        (np.zeros((2, 3)), np.zeros((3, 3)))])
def test_mae_light_rejects_empty_or_mismatched(pred, truth):
    with pytest.raises(ValueError):
        mae_light(pred, truth)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 20))
def test_mae_light_symmetric_and_bounded(seed, n):
    rng = np.random.default_rng(seed)
    a, b = _unit(rng, (n,)), _unit(rng, (n,))
    assert mae_light(a, b) == mae_light(b, a)
    assert 0.0 <= mae_light(a, b) <= 180.0


# ---- mae_normal --------------------------------------------------------------

def _normal_map(rng, h=6, w=5):
    return np.moveaxis(_unit(rng, (h, w)), -1, 0)


def test_mae_normal_identical_and_antipodal():
    rng = np.random.default_rng(2)
    n = _normal_map(rng)
    mask = rng.random(n.shape[1:]) > 0.3
    assert mae_normal(n, n, mask) == pytest.approx(0.0, abs=1e-5)
    assert mae_normal(-n, n, mask) == pytest.approx(180.0, abs=1e-5)


def test_mae_normal_ignores_unmasked_pixels():
    rng = np.random.default_rng(3)
    n = _normal_map(rng)
    mask = np.zeros(n.shape[1:], bool)
    mask[1:3, 2:4] = True
    garbage = n.copy()
    garbage[:, ~mask] = -n[:, ~mask]
    assert mae_normal(garbage, n, mask) == pytest.approx(0.0, abs=1e-5)


def test_mae_normal_reads_attributes():
    class Map:
        def __init__(self, normals, mask):
            self.normals, self.mask = normals, mask

    rng = np.random.default_rng(4)
    a, b = _normal_map(rng), _normal_map(rng)
    mask = np.ones(a.shape[1:], bool)
    mask[0] = False
    assert mae_normal(Map(a, mask), Map(b, mask)) == mae_normal(a, b, mask)


def test_mae_normal_rejects_empty_mask_and_bad_shape():
    n = _normal_map(np.random.default_rng(5))
    with pytest.raises(ValueError, match="empty"):
        mae_normal(n, n, np.zeros(n.shape[1:], bool))
    with pytest.raises(ValueError):
        mae_normal(n[:, :3], n)


def test_per_pixel_angles_average_to_mae():
    rng = np.random.default_rng(6)
    a, b = _normal_map(rng), _normal_map(rng)
    mask = rng.random(a.shape[1:]) > 0.5
    assert per_pixel_angles(a, b, mask).mean() == pytest.approx(mae_normal(a, b, mask), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_clamp_near_unit_parallel_inputs(seed, flip):
    # scaled up by at most 1e-6, the raw dot leaves [-1, 1]; the clamp must land on 0 or 180
    rng = np.random.default_rng(seed)
    a = _unit(rng, (8,)) * (1 + rng.uniform(0, 1e-6, (8, 1)))
    b = a * (1 + rng.uniform(0, 1e-6, (8, 1))) * (-1 if flip else 1)
    exact = 180.0 if flip else 0.0
    got = mae_light(a, b)
    assert np.isfinite(got) and abs(got - exact) < 0.01


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_clamp_keeps_generic_angles(seed):
    rng = np.random.default_rng(seed)
    a = _unit(rng, (8,)) * (1 + rng.uniform(-1e-6, 1e-6, (8, 1)))
    b = _unit(rng, (8,)) * (1 + rng.uniform(-1e-6, 1e-6, (8, 1)))
    ref = np.mean([_reference_angle(x, y) for x, y in zip(a, b)])
    assert abs(mae_light(a, b) - ref) < 0.01


# ---- intensity_error ---------------------------------------------------------

def test_intensity_worked_example():
    # exact rational oracle: s = 3/2, errors |3/2 - 1|/1 and |3/2 - 2|/2
    from fractions import Fraction as F
    s = F(1 * 1 + 1 * 2, 1 + 1)
    expected = (abs(s - 1) / 1 + abs(s - 2) / 2) / 2
    assert expected == F(3, 8)
    assert intensity_scale([1, 1], [1, 2]) == pytest.approx(1.5, abs=1e-15)
    assert intensity_error([1, 1], [1, 2]) == pytest.approx(float(expected), abs=1e-15)


def test_intensity_constant_vectors():
    assert intensity_error([0.7, 0.7, 0.7], [1.3, 1.3, 1.3]) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_intensity_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    e = rng.uniform(0.2, 2.0, 10)
    pred = rng.uniform(0.1, 3.0, 10)
    assert abs(intensity_error(c * pred, e) - intensity_error(pred, e)) <= 1e-12
    assert intensity_error(c * e, e) == pytest.approx(0.0, abs=1e-12)
    assert intensity_scale(c * e, e) == pytest.approx(1 / c, rel=1e-12)


def test_intensity_scale_is_least_squares():
    rng = np.random.default_rng(7)
    pred, e = rng.uniform(0.1, 2, 12), rng.uniform(0.2, 2, 12)
    s_ref = np.linalg.lstsq(pred[:, None], e, rcond=None)[0][0]
    assert intensity_scale(pred, e) == pytest.approx(s_ref, rel=1e-12)


@pytest.mark.parametrize("pred,truth", [([0, 0], [1, 2]), ([1, 1], [0, 2]), ([1], [1, 2]), ([], [])])
def test_intensity_rejects_degenerate(pred, truth):
    with pytest.raises(ValueError):
        intensity_error(pred, truth)


# ---- EvalReport --------------------------------------------------------------

def test_report_text_round_trip():
    r = EvalReport(12.345678901234567, 0.1, 20.5, 96, 4321,
                   {"s0001": {"MAE_light": 1.0, "MAE_normal": 2.5}, "s0002": {"E_err": 0.3}})
    back = EvalReport.parse(r.to_text())
    assert back == r
    for line in r.to_text().splitlines():
        assert " = " in line


def test_report_validate_ranges():
    EvalReport(0.0, 0.0, 180.0, 1, 1).validate()
    with pytest.raises(ValueError):
        EvalReport(181.0, 0.0, 1.0, 1, 1).validate()
    with pytest.raises(ValueError):
        EvalReport(1.0, -0.1, 1.0, 1, 1).validate()


def test_report_parse_rejects_malformed():
    with pytest.raises(ValueError, match="key = value"):
        EvalReport.parse("MAE_light: 3\n")
    with pytest.raises(ValueError, match="missing"):
        EvalReport.parse("MAE_light = 3\n")
