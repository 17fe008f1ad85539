import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perfcontrol.errors import (
    BoxTooSmall,
    DomainSpecError,
    LengthscaleOutOfRange,
    NonSPDMatrix,
    SolverDiverged,
)
from perfcontrol.geometry import DomainSpec, ParticleShape, build_perforated_domain
from perfcontrol.homogenization import (
    ResistanceMatrix,
    build_corrector,
    corrector_bounds_report,
    default_eta,
    exterior_ball_solution,
    resistance_matrix,
    spectral_divergence,
)

SIX_PI = 6.0 * math.pi


def corrector(N, alpha=2.0, eta=None, mode="full", L=1.0):
    dom = build_perforated_domain(DomainSpec(mode, N, alpha, L=L))
    return build_corrector(dom, default_eta(dom.epsilon) if eta is None else eta)


def unit_directions(n, seed=0):
    d = np.random.default_rng(seed).normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def prolate_drag(a, b):
    """Closed-form axial and broadside drag of a prolate spheroid."""
    e = math.sqrt(1.0 - (b / a) ** 2)
    log = math.log((1 + e) / (1 - e))
    axial = 16 * math.pi * a * e**3 / ((1 + e**2) * log - 2 * e)
    broad = 32 * math.pi * a * e**3 / ((3 * e**2 - 1) * log + 2 * e)
    return axial, broad


# -- resistance matrices

def test_analytic_unit_ball_is_six_pi():
    R = resistance_matrix(1.0, "analytic_ball")
    np.testing.assert_allclose(R.entries, SIX_PI * np.eye(3), rtol=1e-15)
    assert R.entries[0, 0] == pytest.approx(18.8496, abs=1e-4)


def test_analytic_reference_ball_scales_linearly():
    R = resistance_matrix(ParticleShape.ball(0.125), "analytic_ball")
    assert R.entries[1, 1] == pytest.approx(2.3562, abs=1e-4)
    np.testing.assert_allclose(R.entries, resistance_matrix(1.0).entries / 8, rtol=1e-15)


def test_analytic_rejects_ellipsoid():
    with pytest.raises(DomainSpecError):
        resistance_matrix((0.1, 0.1, 0.05), "analytic_ball")


def test_numeric_ball_coarse_grid_within_tolerance():
    R = resistance_matrix(1.0, "numeric_exterior", grid=64)
    np.testing.assert_allclose(np.diag(R.entries), SIX_PI, rtol=0.15)
    off = R.entries - np.diag(np.diag(R.entries))
    assert np.abs(off).max() <= 0.05 * SIX_PI
    assert R.error_bar > 0
    assert R.meta["box"] == 16.0 and R.meta["grid"] == 64


def test_numeric_drag_is_symmetric_and_positive_definite():
    R = resistance_matrix((0.125, 0.09, 0.07), "numeric_exterior", grid=64)
    assert np.abs(R.entries - R.entries.T).max() <= 1e-8
    assert np.linalg.eigvalsh(R.entries).min() > 0
    # the ellipsoid resists most across its shortest axis
    d = np.diag(R.entries)
    assert d[0] < d[1] < d[2]


def test_numeric_prolate_spheroid_matches_closed_form():
    a, b = 1.0, 0.6
    axial, broad = prolate_drag(a, b)
    R = resistance_matrix((a, b, b), "numeric_exterior", grid=96)
    np.testing.assert_allclose(np.diag(R.entries), [axial, broad, broad], rtol=0.15)


def test_numeric_drag_scales_with_particle_size():
    big = resistance_matrix(1.0, "numeric_exterior", grid=48)
    small = resistance_matrix(0.125, "numeric_exterior", grid=48)
    np.testing.assert_allclose(small.entries, big.entries / 8, rtol=1e-12)


def test_numeric_refinement_approaches_oracle():
    errs = [
        abs(resistance_matrix(1.0, "numeric_exterior", grid=n).entries[0, 0] - SIX_PI)
        for n in (48, 96)
    ]
    assert errs[1] < errs[0]


def test_penalization_lowers_drag_and_converges():
    exact = resistance_matrix(1.0, "numeric_exterior", grid=48).entries[0, 0]
    loose = resistance_matrix(1.0, "numeric_exterior", grid=48, penalization=1e-1).entries[0, 0]
    tight = resistance_matrix(1.0, "numeric_exterior", grid=48, penalization=1e-4).entries[0, 0]
    assert loose < tight < exact
    assert abs(tight - exact) < 1e-2 * exact


def test_small_box_rejected():
    with pytest.raises(BoxTooSmall):
        resistance_matrix(1.0, "numeric_exterior", grid=64, box=8.0)


def test_oversized_system_reports_solver_failure():
    with pytest.raises(SolverDiverged):
        resistance_matrix(1.0, "numeric_exterior", grid=64, max_unknowns=30)


def test_resistance_type_rejects_asymmetric_entries():
    bad = np.eye(3)
    bad[0, 1] = 1e-3
    with pytest.raises(NonSPDMatrix):
        ResistanceMatrix(bad, "ball", (1.0, 1.0, 1.0), "analytic_ball")
    with pytest.raises(NonSPDMatrix):
        ResistanceMatrix(-np.eye(3), "ball", (1.0, 1.0, 1.0), "analytic_ball")


# -- exterior solution of the translating ball

def test_exterior_solution_boundary_values_and_decay():
    a = 0.125
    d = unit_directions(40)
    w, _ = exterior_ball_solution(a * d, a)
    np.testing.assert_allclose(w, np.broadcast_to(np.eye(3), w.shape), atol=1e-14)
    far, _ = exterior_ball_solution(1e4 * d, a)
    assert np.abs(far).max() < 2 * a / 1e4


def test_exterior_solution_solves_stokes_by_finite_differences():
    a, h = 0.125, 1e-4
    pts = 0.3 * unit_directions(5, seed=3)
    w, q = exterior_ball_solution(pts, a)
    lap = np.zeros_like(w)
    grad_q = np.zeros_like(w)
    div = np.zeros(q.shape)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        wp, qp = exterior_ball_solution(pts + e, a)
        wm, qm = exterior_ball_solution(pts - e, a)
        lap += (wp - 2 * w + wm) / h**2
        grad_q[:, j, :] = (qp - qm) / (2 * h)
        div += (wp[:, j, :] - wm[:, j, :]) / (2 * h)
    assert np.abs(-lap + grad_q).max() < 1e-4 * np.abs(lap).max()
    assert np.abs(div).max() < 1e-6


def test_exterior_solution_drag_from_far_field_stokeslet():
    # the Stokeslet strength 3a/4 times 8 pi is the drag 6 pi a
    a = 0.125
    r = 1e5
    w, _ = exterior_ball_solution(np.array([[0.0, 0.0, r]]), a)
    assert 8 * math.pi * w[0, 0, 0] * r == pytest.approx(SIX_PI * a, rel=1e-6)


# -- correctors

def test_corrector_is_identity_far_from_holes():
    corr = corrector(4)
    center = corr.domain.centers[7]
    far = center + np.array([[0.9, 0.0, 0.0], [0.0, 0.8, 0.6]]) * corr.domain.epsilon / 2
    w, q = corr.evaluate(far)
    assert np.array_equal(w, np.broadcast_to(np.eye(3), w.shape))
    assert np.array_equal(q, np.zeros_like(q))


def test_corrector_is_identity_outside_K():
    corr = corrector(3, mode="partial", L=0.5)
    pts = np.random.default_rng(1).uniform(0, 1, (3000, 3))
    pts = pts[~corr.domain.in_K(pts)]
    w, q, dw = corr.evaluate(pts, gradient=True)
    assert np.array_equal(w, np.broadcast_to(np.eye(3), w.shape))
    assert not q.any() and not dw.any()
    assert corrector_bounds_report(corr, 500).outside_K_exact


def test_corrector_no_slip_on_holes():
    corr = corrector(4)
    a = corr.particle_radius * corr.hole_scale
    pts = corr.domain.centers[3] + a * (1 + 1e-12) * unit_directions(100)
    w, _ = corr.evaluate(pts)
    assert np.abs(w).max() <= 1e-6
    inside, _ = corr.evaluate(corr.domain.centers[3] + 0.5 * a * unit_directions(10))
    assert not inside.any()


@pytest.mark.parametrize("layer", [0.25, 0.5])
def test_corrector_continuous_across_layers(layer):
    corr = corrector(8, eta=0.05)
    d = unit_directions(200)
    radius = layer * corr.eta
    wi, _ = corr.evaluate(corr.domain.centers[0] + radius * (1 - 1e-10) * d)
    wo, _ = corr.evaluate(corr.domain.centers[0] + radius * (1 + 1e-10) * d)
    assert np.abs(wi - wo).max() <= 1e-4


def test_corrector_gradient_matches_finite_differences():
    corr = corrector(4)
    center = corr.domain.centers[2]
    h = 1e-7
    for radius in (2 * corr.hole_scale / 8, 0.35 * corr.eta):
        pts = center + radius * unit_directions(6, seed=5)
        _, _, dw = corr.evaluate(pts, gradient=True)
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            fd = (corr.evaluate(pts + e)[0] - corr.evaluate(pts - e)[0]) / (2 * h)
            np.testing.assert_allclose(dw[..., j], fd, atol=1e-5 * np.abs(dw).max())


def test_corrector_pointwise_divergence_free():
    corr = corrector(4)
    r = np.linspace(1.01, 0.49 * corr.eta / corr.hole_scale, 50) * corr.hole_scale
    pts = corr.domain.centers[0] + r[:, None] * unit_directions(50)
    _, _, dw = corr.evaluate(pts, gradient=True)
    assert np.abs(np.einsum("...iki->...k", dw)).max() < 1e-10 * np.abs(dw).max()


@pytest.mark.parametrize("N,alpha", [(2, 1.5), (4, 2.0)])
def test_corrector_spectral_divergence(N, alpha):
    assert spectral_divergence(corrector(N, alpha)).max() <= 1e-3


def test_spectral_divergence_detects_broken_interface():
    corr = corrector(2, 1.5)
    broken = dataclasses.replace(corr, annulus_coefficients=corr.annulus_coefficients * 1.2)
    assert spectral_divergence(broken).max() > 1e-2


def test_eta_out_of_range():
    dom = build_perforated_domain(DomainSpec("full", 4, 2.0))
    with pytest.raises(LengthscaleOutOfRange):
        build_corrector(dom, 0.5)
    with pytest.raises(LengthscaleOutOfRange):
        build_corrector(dom, 0.01)


def test_corrector_needs_ball_particle():
    shape = ParticleShape("ellipsoid", (0.125, 0.1, 0.1))
    dom = build_perforated_domain(DomainSpec("full", 4, 2.0, shape=shape))
    with pytest.raises(DomainSpecError):
        build_corrector(dom)


@given(
    N=st.sampled_from([2, 4, 8]),
    y=st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 0.2),
    t=st.floats(0.01, 0.99),
)
@settings(max_examples=40, deadline=None)
def test_scale_covariance(N, y, t):
    corr = corrector(N)
    a = corr.particle_radius
    radius = a + t * (corr.eta / 4 / corr.hole_scale - a)
    y = np.asarray(y) / np.linalg.norm(y) * radius
    x = corr.domain.centers[-1] + corr.hole_scale * y
    w, q = corr.evaluate(x[None])
    ref_w, ref_q = exterior_ball_solution(y[None], corr.particle_radius)
    np.testing.assert_allclose(np.eye(3) - w[0], ref_w[0], atol=1e-10)
    np.testing.assert_allclose(q[0], -ref_q[0] / corr.hole_scale, rtol=1e-10, atol=1e-10)


def test_bound_constants_uniform_in_eps():
    reports = [corrector_bounds_report(corrector(N), 20000) for N in (2, 4, 8)]
    for name in ("identity_gap", "gradient", "pressure", "sup_combination"):
        vals = np.array([getattr(r, name) for r in reports])
        assert np.all(np.isfinite(vals)) and vals.min() > 0
        assert vals.max() / vals.min() < 2.0, name


@pytest.mark.parametrize("N", [4, 8])
def test_near_field_gap_is_order_one(N):
    gap = corrector_bounds_report(corrector(N), 100).near_field
    assert 0.1 <= gap <= 10.0


def test_default_eta_within_admissible_range():
    for eps in (1 / 2, 1 / 4, 1 / 8):
        for beta in (0.4, 1.0, 1.5):
            for alpha in (1.8, 2.0):
                eta = default_eta(eps, beta)
                if eps ** max(beta, 1) * eps**0.1 >= eps**alpha:
                    assert eps**alpha <= eta <= eps
