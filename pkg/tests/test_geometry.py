import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perfcontrol.errors import DomainSpecError, ExponentError, LayoutError
from perfcontrol.geometry import (
    ControlZone,
    DeskScaleWarning,
    DomainSpec,
    ParticleShape,
    Patch,
    box_distance,
    build_perforated_domain,
    check_layout,
    epsilon_threshold,
    signed_distance,
    snap_epsilon,
)


def brute_force_sd(domain, x):
    images = np.array(list(itertools.product((-1, 0, 1), repeat=3)), float)
    shifted = domain.centers[None, :, None, :] + images[None, None, :, :]
    dist = np.linalg.norm(x[:, None, None, :] - shifted, axis=-1)
    return dist.reshape(len(x), -1).min(axis=1) - domain.hole_radius


def test_partial_lattice_counts_and_radius():
    dom = build_perforated_domain(DomainSpec("partial", N=2, alpha=2.0, L=0.5))
    assert dom.n_holes == 8
    assert dom.hole_scale == pytest.approx(0.0625, rel=1e-15)
    assert dom.hole_radius == pytest.approx(0.0625 * 0.125, rel=1e-15)
    assert np.all(dom.centers <= 0.5) and np.all(dom.centers >= 0)
    expected = {0.125, 0.375}
    assert set(np.round(dom.centers.ravel(), 12)) == expected


def test_full_lattice_scale():
    dom = build_perforated_domain(DomainSpec("full", N=3, alpha=1.5))
    assert dom.n_holes == 27
    assert dom.epsilon == pytest.approx(1 / 3)
    assert dom.hole_scale == pytest.approx((1 / 3) ** 1.5, rel=1e-14)
    assert dom.hole_scale == pytest.approx(0.19245, abs=1e-5)


def test_hole_volume_monte_carlo():
    dom = build_perforated_domain(DomainSpec("full", N=4, alpha=2.0))
    eps = 0.25
    exact = 64 * (4 * math.pi / 3) * (eps**2 / 8) ** 3
    assert dom.hole_volume == pytest.approx(exact, rel=1e-13)
    rng = np.random.default_rng(7)
    n = 1_000_000
    frac = np.mean(dom.in_hole(rng.random((n, 3))))
    half_width = 1.96 * math.sqrt(exact * (1 - exact) / n)
    assert abs(frac - exact) <= 3 * half_width + 1e-12


def test_signed_distance_center_and_corner():
    dom = build_perforated_domain(DomainSpec("partial", N=3, alpha=2.0, L=0.5))
    c = dom.centers[5]
    assert signed_distance(dom, c[None])[0] == pytest.approx(-dom.hole_radius, abs=1e-15)
    corner = np.zeros((1, 3))
    nearest = dom.centers[np.argmin(np.linalg.norm(dom.centers, axis=1))]
    expected = np.linalg.norm(nearest) - dom.hole_radius
    assert signed_distance(dom, corner)[0] == pytest.approx(expected, abs=1e-14)
    assert expected > 0


@pytest.mark.parametrize(
    "spec",
    [
        DomainSpec("partial", N=3, alpha=2.0, L=0.5, K_origin=(0.7, 0.2, 0.9)),
        DomainSpec("full", N=4, alpha=1.7),
        DomainSpec("partial", N=2, alpha=1.6, L=0.3),
    ],
)
def test_signed_distance_matches_periodic_bruteforce(spec):
    dom = build_perforated_domain(spec)
    x = np.random.default_rng(3).random((1000, 3))
    np.testing.assert_allclose(dom.signed_distance(x), brute_force_sd(dom, x), atol=1e-12)


@pytest.mark.parametrize("spec", [DomainSpec("full", N=2, alpha=1.01), DomainSpec("partial", N=2, alpha=1.51, L=0.9)])
def test_holes_inside_cells_with_margin(spec):
    dom = build_perforated_domain(spec)
    margin = dom.epsilon / 2 - dom.hole_radius * (1 + 1e-12)
    assert margin > 0


def test_mode_ranges_rejected():
    with pytest.raises(DomainSpecError):
        DomainSpec("partial", N=2, alpha=1.5, L=0.5)
    with pytest.raises(DomainSpecError):
        DomainSpec("full", N=2, alpha=3.0)
    with pytest.raises(DomainSpecError):
        DomainSpec("full", N=0, alpha=2.0)
    with pytest.raises(DomainSpecError):
        ParticleShape("ball", (0.2, 0.2, 0.2))


def test_ellipsoid_membership():
    shape = ParticleShape("ellipsoid", (0.125, 0.0625, 0.05))
    dom = build_perforated_domain(DomainSpec("full", N=2, alpha=1.5, shape=shape))
    c = dom.centers[0]
    s = dom.hole_scale
    assert dom.in_hole((c + [0.99 * 0.125 * s, 0, 0])[None])[0]
    assert not dom.in_hole((c + [0, 0.99 * 0.125 * s, 0])[None])[0]
    assert dom.signed_distance(c[None])[0] < 0


def test_epsilon_threshold_examples():
    assert epsilon_threshold(0.5, 1.0, 1.0) == pytest.approx(0.2)
    assert epsilon_threshold(1 - 1e-9, 0.7, 0.8) == pytest.approx(0.4)
    with pytest.warns(DeskScaleWarning):
        val = epsilon_threshold(0.1, 0.2, 0.5)
    assert val == pytest.approx(0.5 / (math.floor(0.1 ** (-10)) + 1), rel=1e-12)
    with pytest.raises(ExponentError):
        epsilon_threshold(0.5, 0.0)
    with pytest.raises(ExponentError):
        epsilon_threshold(1.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0.01, 0.99),
    st.floats(0.01, 0.99),
    st.floats(0.2, 3.0),
)
def test_epsilon_threshold_monotone(eta_a, eta_b, p):
    lo, hi = sorted((eta_a, eta_b))
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeskScaleWarning)
        e_lo, e_hi = epsilon_threshold(lo, p), epsilon_threshold(hi, p)
    assert e_lo <= e_hi <= 0.5


def test_snap_epsilon():
    assert snap_epsilon(0.3, 1.0) == pytest.approx(0.25)
    assert snap_epsilon(0.25, 1.0) == pytest.approx(0.25)
    assert snap_epsilon(0.2, 0.5) == pytest.approx(1 / 6)


def test_patch_sampling_and_volume():
    p = Patch.ball((0.95, 0.5, 0.02), 0.1)
    assert p.volume == pytest.approx(4 / 3 * math.pi * 1e-3)
    pts = p.sample(5000, np.random.default_rng(0))
    assert np.all(p.contains(pts))
    bpts, normals = p.boundary_samples(200)
    np.testing.assert_allclose(np.linalg.norm(p.offset(bpts), axis=1), 0.1, atol=1e-14)
    np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0)


def test_box_distance_periodic():
    assert box_distance(np.array([0.9, 0.25, 0.25]), np.zeros(3), 0.5) == pytest.approx(0.1)
    assert box_distance(np.array([0.6, 0.25, 0.25]), np.zeros(3), 0.5) == pytest.approx(0.1)
    assert box_distance(np.array([0.2, 0.25, 0.25]), np.zeros(3), 0.5) == 0.0


def test_layout_checks():
    dom = build_perforated_domain(DomainSpec("partial", N=3, alpha=2.0, L=0.5))
    P0 = Patch.ball((0.25, 0.25, 0.25), 0.1)
    P1 = Patch.ball((0.75, 0.25, 0.25), 0.1)
    check_layout(dom, P0, P1, ControlZone((0.5, 0.7, 0.25), 0.15))
    with pytest.raises(LayoutError):
        check_layout(dom, P0, P1, ControlZone((0.5, 0.6, 0.25), 0.15))
    with pytest.raises(LayoutError):
        check_layout(dom, P0, Patch.ball((0.75, 0.25, 0.25), 0.11), ControlZone((0.5, 0.7, 0.25), 0.15))
