import numpy as np
import pytest
from hypothesis import given, strategies as st

from perfcontrol.errors import LayoutError, PathBlocked
from perfcontrol.geometry import ControlZone, Patch
from perfcontrol.isotopy import build_isotopy, ramp, ramp_accel, ramp_rate


@given(st.floats(0.0, 1.0))
def test_ramp_is_monotone_step(t):
    s = float(ramp(t))
    assert 0.0 <= s <= 1.0
    assert float(ramp_rate(t)) >= 0.0


def test_ramp_endpoints_and_symmetry():
    t = np.linspace(0.0, 1.0, 101)
    assert ramp(0.0) == 0.0 and ramp(1.0) == 1.0
    assert ramp_rate(0.0) == 0.0 and ramp_rate(1.0) == 0.0
    assert np.allclose(ramp(t) + ramp(1 - t), 1.0, atol=1e-14)


def test_ramp_derivatives_match_finite_differences():
    t = np.linspace(0.05, 0.95, 37)
    h = 1e-6
    assert np.allclose((ramp(t + h) - ramp(t - h)) / (2 * h), ramp_rate(t), atol=1e-7)
    assert np.allclose((ramp_rate(t + h) - ramp_rate(t - h)) / (2 * h), ramp_accel(t), atol=1e-5)


def test_ramp_integral_is_one():
    t = np.linspace(0.0, 1.0, 20001)
    assert abs(np.trapezoid(ramp_rate(t), t) - 1.0) < 1e-8


def test_identity_isotopy():
    P = Patch.ball((0.3, 0.3, 0.3), 0.05)
    iso = build_isotopy(P, P)
    for t in (0.0, 0.4, 1.0):
        assert np.allclose(iso.velocity(t), 0.0)
        assert np.allclose(iso.center(t), P.center)


def test_straight_translation_velocity():
    P0 = Patch.ball((0.2, 0.3, 0.3), 0.05)
    P1 = Patch.ball((0.5, 0.3, 0.3), 0.05)
    iso = build_isotopy(P0, P1)
    t = np.linspace(0.0, 1.0, 11)
    expected = ramp_rate(t)[:, None] * np.array([0.3, 0.0, 0.0])
    assert np.allclose(iso.velocity(t), expected, atol=1e-12)
    assert np.allclose(iso.center(1.0), [0.5, 0.3, 0.3])


def test_detour_clearance_matches_dense_minimum():
    zone = ControlZone((0.5, 0.3, 0.3), 0.1)
    P0 = Patch.ball((0.2, 0.3, 0.3), 0.04)
    P1 = Patch.ball((0.8, 0.3, 0.3), 0.04)
    iso = build_isotopy(P0, P1, zone=zone)
    assert iso.d0 > 0
    dense = iso.clearance(np.linspace(0.0, 1.0, 400001)).min()
    assert abs(iso.d0 - dense) <= 1e-6
    assert iso.d0 <= dense + 1e-12


def test_waypoints_through_zone_are_blocked():
    zone = ControlZone((0.5, 0.3, 0.3), 0.1)
    P0 = Patch.ball((0.2, 0.3, 0.3), 0.04)
    P1 = Patch.ball((0.8, 0.3, 0.3), 0.04)
    with pytest.raises(PathBlocked):
        build_isotopy(P0, P1, waypoints=[(0.5, 0.32, 0.3)], zone=zone)


def test_incongruent_patches_rejected():
    with pytest.raises(LayoutError):
        build_isotopy(Patch.ball((0.2, 0.2, 0.2), 0.05), Patch.ball((0.6, 0.2, 0.2), 0.06))
