import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perfcontrol.errors import CoveringGap, FitResidualTooLarge
from perfcontrol.flowmap import ClosedFormVelocity, advect
from perfcontrol.geometry import ControlZone, Patch
from perfcontrol.isotopy import build_isotopy, ramp_rate
from perfcontrol.potential import (
    ChargeLayout,
    Partition,
    PotentialSnapshot,
    assemble_theta,
    fit_isotopy_snapshot,
    fit_potential_snapshot,
    synthesize_theta,
)

ZONE = ControlZone((0.5, 0.5, 0.5), 0.2)
P0 = Patch.ball((0.2, 0.2, 0.5), 0.05)
P1 = Patch.ball((0.8, 0.2, 0.5), 0.05)


@pytest.fixture(scope="module")
def iso():
    return build_isotopy(P0, P1, zone=ZONE)


def test_zero_data_gives_zero_weights():
    lay = ChargeLayout.on_sphere(ZONE, 16)
    pts, normals = P0.boundary_samples(100)
    snap = fit_potential_snapshot(pts, normals, np.zeros(100), lay)
    assert np.all(snap.weights == 0.0)


def test_residual_decreases_with_charge_count(iso):
    res = []
    for m in (16, 64, 256):
        lay = ChargeLayout.on_sphere(ZONE, m, 0.8)
        snap = fit_isotopy_snapshot(iso, 0.5, lay, regularization=1e-14, raise_on_residual=False)
        res.append(snap.residual / snap.data_scale)
        assert abs(snap.weights.sum()) <= 1e-12 * np.abs(snap.weights).sum()
    assert res[0] > res[1] > res[2]


def test_fit_residual_guard(iso):
    lay = ChargeLayout.on_sphere(ZONE, 4)
    with pytest.raises(FitResidualTooLarge):
        fit_isotopy_snapshot(iso, 0.5, lay, tol=1e-6)


def test_fitted_flux_outside_zone_matches_boundary_data(iso):
    lay = ChargeLayout.on_sphere(ZONE, 64, 0.8)
    snap = fit_isotopy_snapshot(iso, 0.3, lay, regularization=1e-12, raise_on_residual=False)
    patch = P0.translated(iso.curve(0.3))
    pts, normals = patch.boundary_samples(200, 0.05)
    flux = np.sum(snap.field(pts).gradient * normals, axis=1)
    data = normals @ iso.curve(0.3, 1)
    assert np.abs(flux - data).max() <= 0.1 * np.abs(data).max()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.floats(0.05, 0.6), st.floats(0.0, 1.0))
def test_partition_of_unity(count, overlap, s):
    part = Partition.uniform(count, overlap)
    w, dw = part.weights_and_rates(np.array([s]))
    assert abs(w.sum() - 1.0) <= 1e-12
    assert abs(dw.sum()) <= 1e-9 * max(1.0, np.abs(dw).max())
    assert np.all(w >= 0)


def test_partition_rates_match_finite_differences():
    part = Partition.uniform(5, 0.3)
    s = np.linspace(0.02, 0.98, 41)
    h = 1e-6
    _, dw = part.weights_and_rates(s)
    fd = (part.weights(s + h) - part.weights(s - h)) / (2 * h)
    assert np.allclose(dw, fd, atol=1e-5)


def test_covering_gap_detected():
    with pytest.raises(CoveringGap):
        Partition(np.array([0.2, 0.8]), np.array([0.25, 0.25])).check_covering()
    with pytest.raises(CoveringGap):
        Partition(np.array([0.5]), np.array([0.3])).check_covering()


def _snapshot(weights, knot=0.5):
    lay = ChargeLayout(np.array([[0.45, 0.5, 0.5], [0.55, 0.5, 0.5]]), 0.04, ChargeLayout.on_sphere(ZONE, 2).op, ZONE)
    return PotentialSnapshot(knot, np.asarray(weights, dtype=float), lay, 0.0, 1.0, 1.0)


def test_single_snapshot_is_ramped():
    snap = _snapshot([1.0, -1.0])
    theta = assemble_theta([snap])
    x = np.array([[0.2, 0.3, 0.4], [0.8, 0.1, 0.6]])
    psi = snap.field(x, 0).potential
    for t in (0.0, 0.2, 0.5, 0.9, 1.0):
        assert np.allclose(theta.theta(t, x), ramp_rate(t) * psi, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("overlap", [0.1, 0.3, 0.6])
def test_identical_snapshots_independent_of_overlap(overlap):
    snaps = [_snapshot([1.0, -1.0], k) for k in (0.2, 0.5, 0.8)]
    theta = assemble_theta(snaps, overlap=overlap)
    ref = assemble_theta([_snapshot([1.0, -1.0])])
    x = np.array([[0.2, 0.3, 0.4]])
    for t in (0.1, 0.45, 0.77):
        assert np.allclose(theta.theta(t, x), ref.theta(t, x), rtol=1e-12)
        assert np.allclose(theta.dt_theta(t, x), ref.dt_theta(t, x), rtol=1e-9)


def test_dt_theta_matches_finite_difference(iso):
    lay = ChargeLayout.on_sphere(ZONE, 16)
    theta = synthesize_theta(iso, lay, 3, raise_on_residual=False)
    x = np.array([[0.25, 0.2, 0.5]])
    h = 1e-6
    for t in (0.3, 0.6):
        fd = (theta.theta(t + h, x) - theta.theta(t - h, x)) / (2 * h)
        assert np.allclose(theta.dt_theta(t, x), fd, rtol=1e-5)


def test_translation_refinement(iso):
    lay = ChargeLayout.on_sphere(ZONE, 128, 0.8)
    target = np.linalg.norm(iso.displacement())
    errors = []
    for knots in (2, 4, 8):
        theta = synthesize_theta(iso, lay, knots, tube_margin=0.02, regularization=1e-12, raise_on_residual=False)
        vel = ClosedFormVelocity(theta.flux, (0.0, 1.0))
        end = advect(np.array(P0.center), vel, (0.0, 1.0), 100)[0]
        errors.append(abs(np.linalg.norm(end - np.array(P0.center)) - target) / target)
    assert errors[-1] <= 0.02
    assert errors[-1] <= errors[0]
