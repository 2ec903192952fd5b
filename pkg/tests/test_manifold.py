import numpy as np
import pytest

from geodesic_engine import manifold
from geodesic_engine.errors import DomainError, PreconditionError
from geodesic_engine.manifold import (
    Covector,
    GeneralMetric,
    MetricModel,
    boundary_normal,
    check_metric,
    christoffel_at,
    flat_sharp,
    metric_at,
    metric_volume,
    orthonormal_complement,
    riemann_at,
    sectional_curvature,
    symplectic_pairing,
)

POINTS = np.array([[0.1, -0.2], [0.35, 0.4], [-0.6, 0.05]])


@pytest.mark.parametrize("x", POINTS)
def test_sphere_patch_has_unit_curvature(sphere2, x):
    k = sectional_curvature(sphere2, x, np.array([1.0, 0.0]), np.array([0.3, 1.0]))
    assert k == pytest.approx(1.0, abs=1e-10)


def test_sphere_patch_curvature_in_3d():
    m = manifold.sphere_patch(3)
    x = np.array([0.2, -0.1, 0.3])
    for u, w in [((1, 0, 0), (0, 1, 0)), ((0, 1, 0), (0.2, 0, 1)), ((1, 1, 0), (0, 0, 1))]:
        assert sectional_curvature(m, x, np.array(u, float), np.array(w, float)) == pytest.approx(1.0, abs=1e-9)


def test_euclidean_is_flat(flat2):
    assert np.allclose(riemann_at(flat2, np.array([0.2, 0.3])), 0.0)
    assert np.allclose(christoffel_at(flat2, np.array([0.2, 0.3])), 0.0)


def test_conformal_christoffel_matches_metric_formula(focusing_lens):
    closed = focusing_lens.christoffel(POINTS)
    generic = MetricModel.christoffel(focusing_lens, POINTS)
    assert np.allclose(closed, generic, atol=1e-12)


def test_conformal_christoffel_derivative_matches_differences(focusing_lens):
    closed = focusing_lens.christoffel_derivative(POINTS)
    differenced = MetricModel.christoffel_derivative(focusing_lens, POINTS, step=1e-5)
    assert np.allclose(closed, differenced, atol=1e-6)


def test_general_family_reproduces_conformal_connection(focusing_lens):
    general = GeneralMetric(2, focusing_lens.metric, focusing_lens.metric_derivative)
    assert np.allclose(general.christoffel(POINTS), focusing_lens.christoffel(POINTS), atol=1e-12)
    k_general = sectional_curvature(general, POINTS[0], np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    k_closed = sectional_curvature(focusing_lens, POINTS[0], np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert k_general == pytest.approx(k_closed, rel=1e-5)


def test_lens_curvature_at_center(focusing_lens):
    # c(0) = 1/2 and c'' = 8 per axis give K = c^2 * laplacian(log c) = 8
    k = sectional_curvature(focusing_lens, np.zeros(2), np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert k == pytest.approx(8.0, rel=1e-9)


def test_metric_at_rejects_points_outside(flat2, unit_disk):
    with pytest.raises(DomainError):
        metric_at(flat2, np.array([1.2, 0.0]), unit_disk)
    assert metric_at(flat2, np.array([1.0, 0.0]), unit_disk).shape == (2, 2)


def test_restricted_metric_checks_points_without_domain_argument(focusing_lens, unit_disk, unit_ball):
    outside = np.array([0.9, 0.9])
    assert metric_at(focusing_lens, outside).shape == (2, 2)
    focusing_lens.restrict_to(unit_disk)
    with pytest.raises(DomainError):
        metric_at(focusing_lens, outside)
    with pytest.raises(DomainError):
        christoffel_at(focusing_lens, outside)
    with pytest.raises(DomainError):
        flat_sharp(focusing_lens, outside, np.array([1.0, 0.0]))
    assert christoffel_at(focusing_lens, np.array([0.3, 0.1])).shape == (2, 2, 2)
    with pytest.raises(PreconditionError):
        manifold.euclidean(2).restrict_to(unit_ball)


def test_boundary_normal(sphere2, unit_disk):
    nu = boundary_normal(unit_disk, sphere2, np.array([0.0, 1.0]))
    # c = 1 on the unit circle, so the g-unit normal is the Euclidean one
    assert np.allclose(nu, [0.0, 1.0])
    with pytest.raises(PreconditionError):
        boundary_normal(unit_disk, sphere2, np.array([0.0, 0.5]))


def test_flat_sharp_are_inverse(focusing_lens):
    x = np.array([0.1, 0.2])
    v = np.array([0.3, -0.7])
    eta = flat_sharp(focusing_lens, x, v)
    assert isinstance(eta, Covector)
    assert np.allclose(flat_sharp(focusing_lens, x, eta), v)
    assert eta(v) == pytest.approx(float(focusing_lens.inner(x, v, v)))


def test_orthonormal_complement(focusing_lens):
    x = np.array([0.1, 0.2])
    v = np.array([1.0, 1.0])
    basis = orthonormal_complement(focusing_lens, x, v)
    g = focusing_lens.metric(x)
    assert basis.shape == (2, 1)
    assert basis[:, 0] @ g @ v == pytest.approx(0.0, abs=1e-12)
    assert basis[:, 0] @ g @ basis[:, 0] == pytest.approx(1.0)


def test_symplectic_pairing_is_antisymmetric(focusing_lens, rng):
    x = np.array([0.2, -0.1])
    v = np.array([0.4, 0.1])
    a = (rng.standard_normal(2), rng.standard_normal(2))
    b = (rng.standard_normal(2), rng.standard_normal(2))
    assert symplectic_pairing(focusing_lens, x, v, a, b) == pytest.approx(-symplectic_pairing(focusing_lens, x, v, b, a))
    assert symplectic_pairing(focusing_lens, x, v, a, a) == pytest.approx(0.0, abs=1e-12)


def test_hemisphere_area(sphere2, unit_disk):
    # the unit chart disk is a hemisphere of the unit sphere
    assert metric_volume(sphere2, unit_disk) == pytest.approx(2.0 * np.pi, rel=1e-6)


def test_convexity_certificate(sphere2):
    assert manifold.disk(0.8).convexity_certificate(sphere2, samples=64).passed
    # beyond the equator the chart disk is concave for the round metric
    assert not manifold.disk(1.2).convexity_certificate(sphere2, samples=64).passed
    assert manifold.ellipse((1.0, 0.6)).convexity_certificate(manifold.euclidean(2), samples=64).passed


def test_check_metric(focusing_lens, unit_disk):
    assert check_metric(focusing_lens, unit_disk, samples=500)


def test_boundary_parameters_round_trip(unit_ball):
    params = np.array([[0.4, 1.0], [2.0, 5.5]])
    points = unit_ball.boundary_point(params)
    assert np.allclose(unit_ball.boundary_parameters(points), params)
    assert np.all(unit_ball.on_boundary(points))


def test_lens_rejects_mismatched_parameters():
    with pytest.raises(ValueError):
        manifold.gaussian_lens(2, amplitudes=(0.3, 0.2), centers=[(0.0, 0.0)], widths=(0.2,))
