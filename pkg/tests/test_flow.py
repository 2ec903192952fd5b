import math

import numpy as np
import pytest

from geodesic_engine import manifold
from geodesic_engine.errors import DomainError, PreconditionError, TrappedGeodesicError
from geodesic_engine.flow import (
    FlowSettings,
    PhaseState,
    RayGrid,
    batched_map,
    exit_time,
    exp_fibre_derivative,
    exp_map,
    flow_step,
    footpoint,
    integrate_rays,
    jacobi_propagate,
    ray_parameters,
    rays_from_parameters,
    santalo_volume,
    sphere_rule,
    trace_geodesic,
    volume_sm,
)


def test_flow_settings_validation():
    with pytest.raises(ValueError):
        FlowSettings(step=0.0)
    with pytest.raises(ValueError):
        FlowSettings(mu_min=1.0)
    with pytest.raises(KeyError):
        FlowSettings.from_mapping({'stride': 0.1})
    assert FlowSettings.from_mapping({'step': '0.01', 'workers': '3'}).workers == 3


def test_euclidean_flow_is_straight(flat2, unit_disk):
    s = flow_step(flat2, PhaseState(np.array([0.1, 0.2]), np.array([0.6, 0.8])), 0.25, unit_disk)
    assert np.allclose(s.x, [0.25, 0.4])
    assert np.allclose(s.v, [0.6, 0.8])


def test_flow_step_leaving_padded_domain(flat2, unit_disk):
    with pytest.raises(DomainError):
        flow_step(flat2, PhaseState(np.array([0.99, 0.0]), np.array([1.0, 0.0])), 0.2, unit_disk,
                  FlowSettings(rho_pad=0.05))


def test_exit_times_from_center(flat2, unit_disk, settings):
    s = PhaseState(np.zeros(2), np.array([1.0, 0.0]))
    assert exit_time(flat2, unit_disk, s, 'forward', settings) == pytest.approx(1.0, abs=1e-12)
    assert exit_time(flat2, unit_disk, s, 'backward', settings) == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(ValueError):
        exit_time(flat2, unit_disk, s, 'sideways', settings)


def test_exit_time_precondition(flat2, unit_disk):
    with pytest.raises(PreconditionError):
        exit_time(flat2, unit_disk, PhaseState(np.array([1.5, 0.0]), np.array([1.0, 0.0])))


def test_chord_exit_time_off_center(flat2, unit_disk, settings):
    x = np.array([0.3, -0.2])
    v = np.array([0.0, 1.0])
    expected = math.sqrt(1.0 - 0.3 ** 2) + 0.2
    assert exit_time(flat2, unit_disk, PhaseState(x, v), 'forward', settings) == pytest.approx(expected, abs=1e-10)


def test_sphere_exponential_reaches_antipode(sphere2):
    # the unit circle is a great circle of length 2 pi
    x = exp_map(sphere2, np.array([1.0, 0.0]), np.pi * np.array([0.0, 1.0]), FlowSettings(step=1.0 / 128.0))
    assert np.allclose(x, [-1.0, 0.0], atol=1e-7)


def test_trace_keeps_unit_speed(focusing_lens, unit_disk, settings):
    v = np.array([1.0, 0.1])
    x = np.array([-0.7, -0.05])
    v = v / focusing_lens.norm(x, v)
    trace = trace_geodesic(focusing_lens, unit_disk, PhaseState(x, v), settings)
    assert trace.end_on_boundary
    assert trace.speed_drift(focusing_lens) < 1e-8
    assert abs(unit_disk.defining_value(trace.end.x)) < 1e-9


def test_free_flight_trace_runs_to_time_limit(sphere2):
    trace = trace_geodesic(sphere2, None, PhaseState(np.array([1.0, 0.0]), np.array([0.0, 1.0])),
                           FlowSettings(step=0.01), t_max=2.0 * np.pi)
    assert trace.duration == pytest.approx(2.0 * np.pi)
    assert np.allclose(trace.end.x, [1.0, 0.0], atol=1e-7)


def test_trapped_geodesic_raises(sphere2):
    # the equator of the sphere chart never leaves a disk of radius 1.2
    d = manifold.disk(1.2)
    settings = FlowSettings(step=1.0 / 32.0, max_time_factor=3.0)
    with pytest.raises(TrappedGeodesicError):
        integrate_rays(sphere2, d, np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), settings)


def test_footpoint_flows_back_to_state(focusing_lens, unit_disk, settings):
    x = np.array([0.1, 0.2])
    v = np.array([0.5, -0.3])
    v = v / focusing_lens.norm(x, v)
    ray = footpoint(focusing_lens, unit_disk, PhaseState(x, v), settings)
    assert ray.tau < 0.0
    assert 0.0 < ray.mu <= 1.0
    trace = trace_geodesic(focusing_lens, unit_disk, PhaseState(ray.point, ray.direction), settings,
                           t_max=-ray.tau)
    assert np.allclose(trace.end.x, x, atol=1e-7)
    assert np.allclose(trace.end.v, v, atol=1e-7)


def test_flow_is_reversible(focusing_lens, settings):
    x = np.array([-0.4, 0.15])
    v = np.array([1.0, -0.2])
    v = v / focusing_lens.norm(x, v)
    forward_trace = trace_geodesic(focusing_lens, None, PhaseState(x, v), settings, t_max=0.8)
    back = trace_geodesic(focusing_lens, None, forward_trace.end.reversed(), settings, t_max=0.8)
    assert np.allclose(back.end.x, x, atol=1e-6)
    assert np.allclose(back.end.v, -v, atol=1e-6)

    s = PhaseState(x, v)
    for _ in range(80):
        s = flow_step(focusing_lens, s, 0.01)
    for _ in range(80):
        s = flow_step(focusing_lens, s, -0.01)
    assert np.allclose(s.x, x, atol=1e-6)
    assert np.allclose(s.v, v, atol=1e-6)


def test_flow_converges_at_fourth_order(focusing_lens):
    x = np.array([-0.6, 0.1])
    v = np.array([1.0, 0.05])
    v = v / focusing_lens.norm(x, v)

    def end_point(step):
        return trace_geodesic(focusing_lens, None, PhaseState(x, v), FlowSettings(step=step), t_max=1.0).end.x

    reference = end_point(1.0 / 512.0)
    coarse = np.linalg.norm(end_point(1.0 / 32.0) - reference)
    fine = np.linalg.norm(end_point(1.0 / 64.0) - reference)
    assert 8.0 < coarse / fine < 32.0


@pytest.mark.parametrize("dim", [2, 3])
def test_ray_parameters_invert_ray_construction(dim):
    d = manifold.disk() if dim == 2 else manifold.ball()
    m = manifold.gaussian_lens(dim, amplitudes=(0.2,), widths=(0.3,))
    if dim == 2:
        params = np.array([[0.3, 0.2], [4.0, -1.1], [6.0, 0.0]])
    else:
        params = np.array([[0.7, 1.2, 0.4, 2.0], [2.2, 5.0, 1.0, 0.3]])
    points, directions, mu = rays_from_parameters(d, m, params)
    assert np.allclose(m.norm(points, directions), 1.0)
    assert np.all(mu > 0.0)
    assert np.allclose(ray_parameters(d, m, points, directions), params)


@pytest.mark.parametrize("dim, count", [(2, 16), (3, 200)])
def test_sphere_rule(dim, count):
    nodes, weights = sphere_rule(dim, count)
    assert np.allclose(np.linalg.norm(nodes, axis=-1), 1.0)
    assert weights.sum() == pytest.approx(2.0 * np.pi if dim == 2 else 4.0 * np.pi)
    # odd moments vanish on the circle and nearly so on the lattice
    assert np.abs(nodes.T @ weights).max() < (1e-12 if dim == 2 else 0.1)


def test_santalo_volume_matches_sphere_bundle(flat2, unit_disk, settings):
    rays = RayGrid.build(unit_disk, flat2, (128, 128), settings.mu_min)
    expected = volume_sm(flat2, unit_disk)
    assert expected == pytest.approx(2.0 * np.pi ** 2, rel=1e-8)
    assert santalo_volume(flat2, unit_disk, rays, settings) == pytest.approx(expected, rel=1e-3)


def test_ray_grid_weights_integrate_mu(flat2, unit_disk):
    rays = RayGrid.build(unit_disk, flat2, (64, 64), 1e-3)
    # integral of mu^2 over the inward bundle of the unit circle is 2 pi * pi / 2
    assert np.sum(rays.weights * rays.mu) == pytest.approx(np.pi ** 2, rel=1e-3)
    subset = rays.subset(np.arange(10))
    assert len(subset) == 10


def test_batched_map_keeps_chunk_order():
    settings = FlowSettings(chunk_size=3, workers=4)
    chunks = batched_map(lambda a, b: list(range(a, b)), 20, settings)
    assert [i for chunk in chunks for i in chunk] == list(range(20))


def test_euclidean_jacobi_fields(flat2, unit_disk, settings):
    trace = trace_geodesic(flat2, unit_disk, PhaseState(np.array([-0.5, 0.0]), np.array([1.0, 0.0])), settings)
    frame = jacobi_propagate(flat2, trace)
    vertical, _ = frame.vertical_block()
    assert np.allclose(vertical, trace.times[:, None, None] * np.eye(2), atol=1e-12)
    assert np.allclose(exp_fibre_derivative(frame, 0.7), np.eye(2), atol=1e-12)
    assert frame.wronskian_drift() < 1e-12


def test_sphere_jacobi_field_vanishes_at_pi(sphere2):
    d = manifold.disk(1.2)
    trace = trace_geodesic(sphere2, d, PhaseState(np.array([-1.0, 0.0]), np.array([1.0, 0.0])),
                           FlowSettings(step=1.0 / 128.0))
    frame = jacobi_propagate(sphere2, trace)
    assert frame.wronskian_drift() < 1e-8
    x, v, jac, _ = frame.state_at(np.pi)
    normal = np.array([0.0, 1.0])
    # transverse Jacobi field sin(t) vanishes at the conjugate time
    assert np.linalg.norm(jac[:, :2] @ normal) < 1e-7
    assert np.allclose(x, [1.0, 0.0], atol=1e-7)
    with pytest.raises(PreconditionError):
        frame.state_at(trace.duration + 1.0)
