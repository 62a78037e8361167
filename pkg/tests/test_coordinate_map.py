import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hopf_hybrid.coordinate_map import (AUX_FEATURES, CoordinateMap, LinearMap, TranslationOffset,
                                        fit_auxiliary_maps, invertibility_report, map_forward, map_inverse,
                                        map_jacobian, match_initial_phase, predicted_orbit)
from hopf_hybrid.errors import MissingBranch
from hopf_hybrid.neural_net import Mlp, mlp_init
from hopf_hybrid.normal_form import NormalFormParams
from hopf_hybrid.reference_systems import LcoRecord, TrainingDataset

SUPER = NormalFormParams.supercritical(0.0, -1.0)


def _identity():
    return CoordinateMap.initial((5,), seed=0)


def _smooth_map(seed=3, scale=0.15):
    """Random map that stays invertible on the unit disk: small network on a well-conditioned block."""
    rng = np.random.default_rng(seed)
    nn = mlp_init([3, 8, 8, 2], seed)
    nn = nn.with_params(nn.params * scale)
    lin = LinearMap.from_rows([[1.3, 0.4, 0.2], [-0.3, 0.9, -0.1]])
    return CoordinateMap(lin, TranslationOffset(rng.normal(size=2)), nn, mu_ref=0.5, mu_scale=0.5)


def _rotation(alpha):
    c, s = np.cos(alpha), np.sin(alpha)
    return _identity().with_(linear=LinearMap.from_rows([[c, -s, 0], [s, c, 0]]))


# -- value types -------------------------------------------------------------

@pytest.mark.parametrize("rows", [[[1, 0, 0], [2, 0, 0]], [[0, 0, 1], [0, 0, 1]]])
def test_singular_block_rejected(rows):
    with pytest.raises(ValueError):
        LinearMap.from_rows(rows)


def test_third_row_must_be_projection():
    m = np.eye(3)
    m[2, 0] = 0.1
    with pytest.raises(ValueError):
        LinearMap(m)


def test_network_shape_enforced():
    with pytest.raises(ValueError):
        CoordinateMap(LinearMap.identity(), TranslationOffset(), mlp_init([2, 4, 2], 0))


# -- forward -----------------------------------------------------------------

def test_identity_forward():
    assert map_forward(_identity(), 0.3, -0.7, 5.0) == (0.3, -0.7)


def test_affine_forward_example():
    cmap = _identity().with_(linear=LinearMap(np.diag([2.0, 3.0, 1.0])), offset=TranslationOffset([1.0, 0.0]))
    assert map_forward(cmap, 1.0, 1.0, 42.0) == (3.0, 3.0)


def test_zeroing_network_reproduces_affine_part_bitwise():
    cmap = _smooth_map()
    zero = cmap.with_(nn=cmap.nn.with_params(np.zeros(cmap.nn.n_params)))
    rng = np.random.default_rng(0)
    u1, u2, mu = rng.normal(size=(3, 50))
    X = zero.features(u1, u2, mu)
    expected = X @ zero.linear.rows.T + zero.offset.s
    assert np.array_equal(zero.forward(u1, u2, mu), expected)


def test_forward_is_sum_of_three_terms():
    cmap = _smooth_map()
    rng = np.random.default_rng(1)
    u1, u2, mu = rng.normal(size=(3, 20))
    X = cmap.features(u1, u2, mu)
    terms = X @ cmap.linear.rows.T + cmap.offset.s + cmap.nn.forward(X)
    assert np.array_equal(cmap.forward(u1, u2, mu), terms)


# -- jacobian ----------------------------------------------------------------

def test_jacobian_of_affine_map_is_block():
    cmap = _identity().with_(linear=LinearMap.from_rows([[2, 1, 5], [0, 3, -1]]))
    np.testing.assert_array_equal(map_jacobian(cmap, 0.4, 0.1, 1.0), [[2, 1], [0, 3]])
    np.testing.assert_array_equal(map_jacobian(_identity(), 0.4, 0.1, 1.0), np.eye(2))


def test_jacobian_matches_finite_differences_at_random_points():
    cmap = _smooth_map(scale=1.0)
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, size=(100, 3))
    h = 1e-6
    for u1, u2, mu in pts:
        J = map_jacobian(cmap, u1, u2, mu)
        fd = np.column_stack([
            (np.array(map_forward(cmap, u1 + h, u2, mu)) - map_forward(cmap, u1 - h, u2, mu)) / (2 * h),
            (np.array(map_forward(cmap, u1, u2 + h, mu)) - map_forward(cmap, u1, u2 - h, mu)) / (2 * h),
        ])
        assert np.max(np.abs(J - fd)) <= 1e-5 * np.max(np.abs(fd))


# -- inverse -----------------------------------------------------------------

def test_identity_inverse_is_exact():
    assert map_inverse(_identity(), 0.25, -1.5, 3.0) == (0.25, -1.5)


def test_affine_inverse_is_linear_solve():
    cmap = _identity().with_(linear=LinearMap.from_rows([[2, 1, 0.5], [-1, 3, 0.0]]),
                             offset=TranslationOffset([0.3, -0.2]))
    u = np.linalg.solve([[2, 1], [-1, 3]], np.array([1.0, 2.0]) - [0.3, -0.2] - np.array([0.5, 0.0]) * 0.7)
    np.testing.assert_allclose(map_inverse(cmap, 1.0, 2.0, 0.7), u, atol=1e-14)


@given(st.floats(0, 1), st.floats(0, 2 * np.pi), st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_forward_inverse_round_trip_on_disk(r, phi, mu):
    cmap = _smooth_map()
    u1, u2 = r * np.cos(phi), r * np.sin(phi)
    z1, z2 = map_forward(cmap, u1, u2, mu)
    v1, v2 = map_inverse(cmap, z1, z2, mu)
    assert abs(v1 - u1) < 1e-8 and abs(v2 - u2) < 1e-8
    w1, w2 = map_forward(cmap, v1, v2, mu)
    assert abs(w1 - z1) < 1e-8 and abs(w2 - z2) < 1e-8


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-100, 100))
def test_third_row_returns_mu_exactly(u1, u2, mu):
    assert _smooth_map().linear.matrix[2] @ np.array([u1, u2, mu]) == mu


def test_parameter_rescaling_round_trips():
    cmap = _smooth_map()
    mu = np.array([0.1, 0.2, 0.3])
    X = cmap.features(np.zeros(3), np.zeros(3), mu)
    np.testing.assert_allclose(X[:, 2] * cmap.mu_scale + cmap.mu_ref, mu, rtol=1e-15, atol=1e-16)


# -- phase matching ------------------------------------------------------------

def test_identity_phase_match_preserves_angle():
    u1, u2 = match_initial_phase(_identity(), SUPER, (3.0, 3.0), 0.25, "stable", center=(0.0, 0.0))
    assert np.arctan2(u2, u1) == pytest.approx(np.pi / 4, abs=1e-10)
    assert np.hypot(u1, u2) == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("alpha", [0.3, -1.2, 2.9])
def test_rotation_phase_match_subtracts_rotation(alpha):
    target = 0.8
    u1, u2 = match_initial_phase(_rotation(alpha), SUPER, (np.cos(target), np.sin(target)), 0.25, "stable",
                                 center=(0.0, 0.0))
    assert np.angle(np.exp(1j * (np.arctan2(u2, u1) - (target - alpha)))) == pytest.approx(0.0, abs=1e-10)


def test_phase_match_on_curved_map_hits_data_angle():
    cmap = _smooth_map(scale=0.5)
    center = predicted_orbit(cmap, SUPER, 0.64, "stable").center
    z_init = center + np.array([-0.4, 0.9])
    u1, u2 = match_initial_phase(cmap, SUPER, z_init, 0.64, "stable")
    z = np.array(map_forward(cmap, u1, u2, 0.64)) - center
    assert np.angle(np.exp(1j * (np.arctan2(z[1], z[0]) - np.arctan2(0.9, -0.4)))) == pytest.approx(0, abs=1e-8)


def test_phase_match_needs_branch():
    with pytest.raises(MissingBranch):
        match_initial_phase(_identity(), SUPER, (1.0, 0.0), 0.25, "unstable")


# -- predicted orbit ---------------------------------------------------------------

def test_identity_orbit_four_points():
    orbit = predicted_orbit(_identity(), SUPER, 1.0, "stable", n_points=4)
    np.testing.assert_allclose(orbit.points, [[1, 0], [0, 1], [-1, 0], [0, -1]], atol=1e-15)


def test_predicted_orbit_default_size_and_closure():
    orbit = predicted_orbit(_smooth_map(), SUPER, 0.5, "stable")
    assert len(orbit) == 100
    steps = np.linalg.norm(np.diff(np.vstack([orbit.points, orbit.points[:1]]), axis=0), axis=1)
    # the wrap-around segment is no longer than the typical step
    assert steps[-1] < 2 * np.median(steps)


def test_predicted_orbit_needs_branch():
    with pytest.raises(MissingBranch):
        predicted_orbit(_identity(), SUPER, -0.1, "stable")


# -- auxiliary maps ------------------------------------------------------------

def _aux_dataset(fn):
    recs = []
    for mu in (0.2, 0.5, 0.8):
        r = np.sqrt(mu)
        phi = np.linspace(0, 2 * np.pi, 60, endpoint=False)
        # interior points too, so all cubic features are identifiable
        rr = np.concatenate([r * np.ones(60), 0.5 * r * np.ones(60)])
        pp = np.concatenate([phi, phi + 0.1])
        u1, u2 = rr * np.cos(pp), rr * np.sin(pp)
        recs.append(LcoRecord(mu, "stable", 0.1 * np.arange(120), np.column_stack([u1, u2, fn(u1, u2)])))
    return TrainingDataset(recs, {})


def test_aux_linear_feature_recovered():
    (aux,) = fit_auxiliary_maps(_aux_dataset(lambda u1, u2: 2 * u1), _identity(), SUPER)
    expected = np.zeros(len(AUX_FEATURES))
    expected[AUX_FEATURES.index("u1")] = 2.0
    np.testing.assert_allclose(aux.coefficients, expected, atol=1e-6)


def test_aux_quadratic_feature_recovered():
    (aux,) = fit_auxiliary_maps(_aux_dataset(lambda u1, u2: u1**2), _identity(), SUPER)
    expected = np.zeros(len(AUX_FEATURES))
    expected[AUX_FEATURES.index("u1^2")] = 1.0
    np.testing.assert_allclose(aux.coefficients, expected, atol=1e-6)


def test_aux_ridge_limit_shrinks_to_zero():
    (aux,) = fit_auxiliary_maps(_aux_dataset(lambda u1, u2: 2 * u1 + 1), _identity(), SUPER, ridge=1e12)
    assert np.max(np.abs(aux.coefficients)) < 1e-8


def test_aux_skipped_for_planar_data():
    ds = TrainingDataset([LcoRecord(0.5, "stable", np.arange(3.0), np.zeros((3, 2)))], {})
    assert fit_auxiliary_maps(ds, _identity(), SUPER) == []


# -- invertibility -----------------------------------------------------------------

def test_identity_report():
    rep = invertibility_report(_identity(), SUPER, (0.1, 1.0))
    assert rep["min_abs_det"] == 1.0 and rep["det_max"] == 1.0 and not rep["sign_change"]
    assert rep["radius_max"] == pytest.approx(1.2, rel=1e-12)


def test_network_cancelling_the_block_is_flagged():
    # a linear "network" equal to minus the block makes the Jacobian vanish
    nn = Mlp([3, 2], [np.array([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])], [np.zeros(2)])
    rep = invertibility_report(_identity().with_(nn=nn), SUPER, (0.1, 1.0))
    assert rep["min_abs_det"] == 0.0 and rep["singular"]


def test_fold_in_map_shows_sign_change():
    # z1 = u1 - u1^3-ish through a tanh unit: derivative changes sign inside the disk
    nn = Mlp([3, 1, 2], [np.array([[3.0, 0.0, 0.0]]), np.array([[-1.0], [0.0]])], [np.zeros(1), np.zeros(2)])
    rep = invertibility_report(_identity().with_(nn=nn), SUPER, (0.1, 1.0))
    # d z1/d u1 = 1 - 3 sech^2(3 u1): negative at u1 = 0
    assert rep["sign_change"] and rep["det_min"] == pytest.approx(-2.0, rel=1e-12)
