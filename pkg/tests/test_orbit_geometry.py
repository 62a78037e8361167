import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from hopf_hybrid.coordinate_map import CoordinateMap, LinearMap
from hopf_hybrid.errors import HarmonicMismatch, NonStarShaped, RankDeficient
from hopf_hybrid.normal_form import NormalFormParams
from hopf_hybrid.orbit_geometry import (OrbitDescriptor, PlanarOrbit, descriptor_distance, fit_descriptors_batch,
                                        fit_descriptors_vjp, fourier_eval, fourier_fit, orbit_descriptor,
                                        shape_loss, to_polar)
from hopf_hybrid.reference_systems import LcoRecord, TrainingDataset

SUPER = NormalFormParams.supercritical(0.0, -1.0)


def _ellipse_radius(theta):
    # polar radius of (2 cos t, sin t) about its center
    return 1.0 / np.sqrt(np.cos(theta) ** 2 / 4.0 + np.sin(theta) ** 2)


def _circle_record(mu, radius, n=200, phase=0.0, center=(0.0, 0.0), turns=1.5):
    t = np.arange(n) * 0.05
    ang = phase + 2 * np.pi * np.arange(n) / n * turns
    pts = np.column_stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)])
    return LcoRecord(mu, "stable", t, pts)


# quantised so that distinct vectors differ by more than the squared-underflow scale
descriptor_vectors = st.lists(st.integers(-5_000_000, 5_000_000), min_size=11, max_size=11).map(
    lambda v: np.array(v) * 1e-6)


# -- polar conversion -------------------------------------------------------

def test_unit_circle_polar_form():
    ang = 2 * np.pi * np.arange(100) / 100
    theta, R = to_polar(PlanarOrbit.from_points(np.column_stack([np.cos(ang), np.sin(ang)])))
    np.testing.assert_allclose(R, 1.0, atol=1e-15)
    np.testing.assert_allclose(np.diff(theta), 2 * np.pi / 100, atol=1e-12)


def test_ellipse_radius_matches_analytic_form():
    t = 2 * np.pi * np.arange(300) / 300
    theta, R = to_polar(PlanarOrbit.from_points(np.column_stack([2 * np.cos(t), np.sin(t)]), center=(0, 0)))
    np.testing.assert_allclose(R, _ellipse_radius(theta), rtol=1e-12)


def test_offset_circle_is_still_star_shaped_about_origin():
    t = 2 * np.pi * np.arange(200) / 200
    orbit = PlanarOrbit(np.column_stack([5 + np.cos(t), np.sin(t)]), center=(0.0, 0.0))
    with pytest.raises(NonStarShaped):
        # the origin lies outside the circle, so the samples do not wind around it
        to_polar(orbit)
    theta, R = to_polar(PlanarOrbit.from_points(orbit.points))
    assert R.min() > 0.99 and R.max() < 1.01


def test_offset_circle_radius_range_about_origin():
    t = 2 * np.pi * np.arange(200) / 200
    pts = np.column_stack([5 + np.cos(t), np.sin(t)])
    R = np.hypot(pts[:, 0], pts[:, 1])
    assert R.min() == pytest.approx(4.0, abs=1e-3) and R.max() == pytest.approx(6.0, abs=1e-12)


def test_figure_eight_is_rejected():
    t = 2 * np.pi * (np.arange(400) + 0.5) / 400
    pts = np.column_stack([np.sin(t), np.sin(t) * np.cos(t)])
    with pytest.raises(NonStarShaped):
        orbit_descriptor(PlanarOrbit.from_points(pts))


def test_multivalued_radius_is_rejected():
    # a loop that folds back on itself: two radii at the same angle
    t = 2 * np.pi * np.arange(600) / 600
    R = 1.0 + 0.6 * np.cos(3 * t)
    theta = t + 0.9 * np.sin(3 * t)
    with pytest.raises(NonStarShaped):
        orbit_descriptor(PlanarOrbit(np.column_stack([R * np.cos(theta), R * np.sin(theta)]), (0, 0)))


def test_sample_on_center_is_rejected():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(NonStarShaped):
        to_polar(PlanarOrbit(pts, (0.0, 0.0)), n_h=1)


# -- fitting ----------------------------------------------------------------

def test_constant_radius_fit():
    theta = np.linspace(0, 2 * np.pi, 50, endpoint=False)
    d = fourier_fit(theta, np.full(50, 2.0), 10)
    assert d.a0 == pytest.approx(2.0, abs=1e-12)
    assert np.max(np.abs(d.vector[1:])) < 1e-12


def test_single_cosine_harmonic_fit():
    theta = 2 * np.pi * np.arange(64) / 64
    d = fourier_fit(theta, 1 + 0.3 * np.cos(2 * theta), 5)
    expected = np.zeros(11)
    expected[0], expected[2] = 1.0, 0.3
    np.testing.assert_allclose(d.vector, expected, atol=1e-10)


def test_ellipse_fit_matches_quadrature_projection():
    theta = 2 * np.pi * np.arange(2000) / 2000
    d = fourier_fit(theta, _ellipse_radius(theta), 10)
    a = [quad(lambda x: _ellipse_radius(x), 0, 2 * np.pi, epsabs=1e-13)[0] / (2 * np.pi)]
    for k in range(1, 11):
        a.append(quad(lambda x: _ellipse_radius(x) * np.cos(k * x), 0, 2 * np.pi, epsabs=1e-13, limit=200)[0] / np.pi)
    b = [quad(lambda x: _ellipse_radius(x) * np.sin(k * x), 0, 2 * np.pi, epsabs=1e-13, limit=200)[0] / np.pi
         for k in range(1, 11)]
    np.testing.assert_allclose(d.a, a, atol=1e-6)
    np.testing.assert_allclose(d.b, b, atol=1e-6)
    # the ellipse is symmetric about both axes: only even cosine terms survive
    assert np.max(np.abs(d.a[1::2])) < 1e-10 and np.max(np.abs(d.b)) < 1e-10
    assert np.min(np.abs(d.a[2::2])) > 1e-6


def test_too_few_samples_is_rank_deficient():
    with pytest.raises(RankDeficient):
        fourier_fit(np.linspace(0, 6, 20), np.ones(20), 10)


def test_clustered_angles_are_rank_deficient():
    theta = 1e-3 * np.arange(30)
    with pytest.raises(RankDeficient):
        fourier_fit(theta, np.ones(30), 10)


def test_eval_trivial_cases():
    theta = np.linspace(0, 7, 13)
    assert not np.any(fourier_eval(OrbitDescriptor.zeros(4), theta))
    d = OrbitDescriptor(3, [1.5, 0, 0, 0], [0, 0, 0])
    np.testing.assert_array_equal(fourier_eval(d, theta), 1.5)


def test_fit_then_eval_reproduces_samples_within_residual():
    rng = np.random.default_rng(1)
    theta = np.sort(rng.uniform(0, 2 * np.pi, 150))
    R = 1 + 0.2 * np.cos(theta) + 0.05 * np.sin(7 * theta) + 0.01 * rng.normal(size=150)
    d = fourier_fit(theta, R, 8)
    A = np.column_stack([np.ones_like(theta)] + [np.cos(k * theta) for k in range(1, 9)]
                        + [np.sin(k * theta) for k in range(1, 9)])
    lsq_resid = R - A @ np.linalg.lstsq(A, R, rcond=None)[0]
    np.testing.assert_allclose(R - fourier_eval(d, theta), lsq_resid, atol=1e-12)


@given(descriptor_vectors)
@settings(max_examples=50, deadline=None)
def test_round_trip_from_uniform_samples(v):
    d = OrbitDescriptor.from_vector(v)
    theta = 2 * np.pi * np.arange(4 * d.n_h) / (4 * d.n_h)
    np.testing.assert_allclose(fourier_fit(theta, fourier_eval(d, theta), d.n_h).vector, v, atol=1e-10)


# -- distance ---------------------------------------------------------------

def test_distance_between_concentric_circles():
    c1 = OrbitDescriptor(2, [1, 0, 0], [0, 0])
    c3 = OrbitDescriptor(2, [3, 0, 0], [0, 0])
    assert descriptor_distance(c1, c3) == 2.0


def test_distance_requires_equal_harmonics():
    with pytest.raises(HarmonicMismatch):
        descriptor_distance(OrbitDescriptor.zeros(2), OrbitDescriptor.zeros(3))


@given(descriptor_vectors, descriptor_vectors, descriptor_vectors)
@settings(max_examples=200, deadline=None)
def test_distance_is_a_metric(u, v, w):
    du, dv, dw = (OrbitDescriptor.from_vector(x) for x in (u, v, w))
    assert descriptor_distance(du, du) == 0.0
    assert descriptor_distance(du, dv) == descriptor_distance(dv, du)
    assert (descriptor_distance(du, dv) == 0.0) == np.array_equal(u, v)
    assert descriptor_distance(du, dw) <= descriptor_distance(du, dv) + descriptor_distance(dv, dw) + 1e-12


# -- batched fit and its reverse pass ----------------------------------------

def test_batched_fit_matches_single_fit():
    t = 2 * np.pi * np.arange(80) / 80
    pts = np.column_stack([2 * np.cos(t) + 0.1 * np.cos(3 * t), np.sin(t)])
    center = pts.mean(axis=0)
    fit = fit_descriptors_batch(pts[None], center[None], 6)
    single = orbit_descriptor(PlanarOrbit(pts, center), 6)
    np.testing.assert_allclose(fit.coef[0], single.vector, atol=1e-12)


def test_batched_fit_reverse_pass_matches_central_differences():
    rng = np.random.default_rng(4)
    t = 2 * np.pi * np.arange(40) / 40
    pts = np.column_stack([1.5 * np.cos(t), np.sin(t) + 0.2 * np.cos(2 * t)])[None]
    center = np.array([[0.1, -0.05]])
    g_coef = rng.normal(size=(1, 11))
    g_pts = fit_descriptors_vjp(fit_descriptors_batch(pts, center, 5), g_coef)
    h = 1e-6
    fd = np.zeros_like(pts)
    for i in range(pts.shape[1]):
        for j in range(2):
            p, m = pts.copy(), pts.copy()
            p[0, i, j] += h
            m[0, i, j] -= h
            fd[0, i, j] = (g_coef[0] @ (fit_descriptors_batch(p, center, 5).coef[0]
                                         - fit_descriptors_batch(m, center, 5).coef[0])) / (2 * h)
    assert np.max(np.abs(g_pts - fd)) <= 1e-6 * np.max(np.abs(fd))


# -- shape loss -------------------------------------------------------------

def test_shape_loss_zero_for_matching_circles():
    cmap = CoordinateMap.initial((4,), seed=0)
    ds = TrainingDataset([_circle_record(mu, np.sqrt(mu)) for mu in (0.2, 0.5, 0.9)], {})
    assert shape_loss(ds, cmap, SUPER) < 1e-10


def test_shape_loss_doubled_map_equals_a0_gap():
    # circle of radius r against the same circle mapped by 2: descriptors differ only in a0,
    # and a0 of a circle is the quadrature mean of its radius
    mu = 0.49
    r = np.sqrt(mu)
    ds = TrainingDataset([_circle_record(mu, r, turns=1.0)], {})
    doubled = CoordinateMap.initial((4,), seed=0).with_(linear=LinearMap(np.diag([2.0, 2.0, 1.0])))
    a0_true = quad(lambda x: r, 0, 2 * np.pi)[0] / (2 * np.pi)
    a0_pred = quad(lambda x: 2 * r, 0, 2 * np.pi)[0] / (2 * np.pi)
    assert shape_loss(ds, doubled, SUPER) == pytest.approx(abs(a0_pred - a0_true), rel=1e-10)


@given(st.integers(1, 199))
@settings(max_examples=20, deadline=None)
def test_shape_loss_invariant_to_cyclic_reordering(shift):
    rec = _circle_record(0.5, 1.1, center=(0.3, -0.2))
    rec.states[:, 0] += 0.2 * np.cos(2 * np.arctan2(rec.states[:, 1] + 0.2, rec.states[:, 0] - 0.3))
    rolled = LcoRecord(rec.mu, rec.stability, rec.t, np.roll(rec.states, shift, axis=0))
    cmap = CoordinateMap.initial((4,), seed=0)
    base = shape_loss(TrainingDataset([rec], {}), cmap, SUPER)
    assert base > 0
    assert shape_loss(TrainingDataset([rolled], {}), cmap, SUPER) == pytest.approx(base, rel=1e-10)


def test_shape_loss_positive_for_mismatch():
    cmap = CoordinateMap.initial((4,), seed=0)
    ds = TrainingDataset([_circle_record(0.5, 1.0)], {})
    assert shape_loss(ds, cmap, SUPER) > 0.1
