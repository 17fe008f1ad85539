import numpy as np
import pytest

from perfcontrol.bogovskii import BlobDensity, BogovskiiQuadrature, bogovskii, blob_basis
from perfcontrol.errors import MeanNotZero, SupportViolation
from perfcontrol.geometry import ControlZone
from perfcontrol.greens import EllipticOperator
from perfcontrol.spectral import SpectralGrid

ZONE = ControlZone((0.5, 0.5, 0.5), 0.3)
CENTERS = np.array([[0.45, 0.5, 0.55], [0.58, 0.47, 0.45]])


def two_bumps(op=None, radius=0.12):
    return BlobDensity(CENTERS, np.array([1.0, -1.0]), radius, op or EllipticOperator.laplace())


@pytest.fixture(scope="module")
def grid_solution():
    g = two_bumps()
    n = 64
    grid = SpectralGrid(n)
    pts = grid.points.reshape(-1, 3)
    w, dw = bogovskii(g, ZONE).evaluate(pts, True)
    return g, grid, pts, w, dw


def test_zero_density_gives_zero_field():
    g = BlobDensity(CENTERS, np.zeros(2), 0.12, EllipticOperator.laplace())
    x = np.random.default_rng(0).random((50, 3))
    assert np.all(bogovskii(g, ZONE)(x) == 0.0)


def test_spectral_divergence_matches_density(grid_solution):
    g, grid, pts, w, _ = grid_solution
    n = grid.n
    div = grid.divergence(w.T.reshape(3, n, n, n))
    gv = g(pts).reshape(n, n, n)
    assert np.linalg.norm(div - gv) / np.linalg.norm(gv) <= 1e-3


def test_pointwise_divergence_from_gradient(grid_solution):
    g, _, pts, _, dw = grid_solution
    gv = g(pts)
    assert np.abs(np.einsum("pii->p", dw) - gv).max() <= 1e-6 * np.abs(gv).max()


def test_field_vanishes_outside_zone(grid_solution):
    _, _, pts, w, _ = grid_solution
    outside = ~ZONE.contains(pts)
    assert outside.any()
    assert np.abs(w[outside]).max() == 0.0


def test_anisotropic_divergence():
    op = EllipticOperator.a_harmonic(np.diag([2.0, 1.0, 1.0]))
    g = two_bumps(op)
    n = 48
    grid = SpectralGrid(n)
    pts = grid.points.reshape(-1, 3)
    _, dw = bogovskii(g, ZONE, BogovskiiQuadrature.for_operator(op)).evaluate(pts, True)
    gv = g(pts)
    assert np.abs(np.einsum("pii->p", dw) - gv).max() <= 1e-3 * np.abs(gv).max()


def test_quadrature_refinement_converges():
    g = two_bumps()
    x = 0.5 + 0.25 * (np.random.default_rng(1).random((100, 3)) - 0.5)
    ref = bogovskii(g, ZONE, BogovskiiQuadrature(32, 48, 32, 64))(x)
    coarse = bogovskii(g, ZONE, BogovskiiQuadrature(4, 6, 6, 12))(x)
    default = bogovskii(g, ZONE)(x)
    e_coarse = np.abs(coarse - ref).max()
    e_default = np.abs(default - ref).max()
    assert e_default < e_coarse
    assert e_default <= 1e-4 * np.abs(ref).max()


def test_generic_callable_agrees_with_blob_path():
    g = two_bumps()
    x = 0.5 + 0.2 * (np.random.default_rng(2).random((20, 3)) - 0.5)
    blob = bogovskii(g, ZONE)(x)
    generic = bogovskii(lambda y: g(y), ZONE, BogovskiiQuadrature(sphere_polar=24, sphere_azimuth=48, radial=32))(x)
    assert np.abs(generic - blob).max() <= 1e-3 * np.abs(blob).max()


def test_basis_is_linear_in_weights():
    g = two_bumps()
    x = 0.5 + 0.3 * (np.random.default_rng(3).random((30, 3)) - 0.5)
    W, _ = blob_basis(x, g, ZONE)
    assert np.allclose(np.einsum("pmi,m->pi", W, g.weights), bogovskii(g, ZONE)(x), rtol=0, atol=1e-12)


def test_nonzero_mean_rejected():
    g = BlobDensity(CENTERS, np.array([1.0, -0.5]), 0.12, EllipticOperator.laplace())
    with pytest.raises(MeanNotZero):
        bogovskii(g, ZONE)


def test_support_outside_zone_rejected():
    g = BlobDensity(np.array([[0.5, 0.5, 0.5], [0.75, 0.5, 0.5]]), np.array([1.0, -1.0]), 0.1,
                    EllipticOperator.laplace())
    with pytest.raises(SupportViolation):
        bogovskii(g, ZONE)


def test_callable_support_outside_zone_rejected():
    with pytest.raises(SupportViolation):
        bogovskii(lambda y: np.ones(len(y)), ZONE)
