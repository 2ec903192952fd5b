import numpy as np
import pytest

from geodesic_engine import manifold
from geodesic_engine.conjugacy import (
    ConjugateRecord,
    FanSpec,
    LocusSample,
    conjugate_times,
    dense_scan_times,
    etalem_check,
    etalem_residuals,
    find_conjugate_records,
    graph_test,
    locus_scan,
    order_bound_holds,
    reverse_record,
)
from geodesic_engine.flow import PhaseState, jacobi_propagate, trace_geodesic


@pytest.fixture
def sphere_cap():
    # past the equator, so the x-axis geodesic from (-1, 0) reaches its antipode
    return manifold.disk(1.2)


@pytest.fixture
def sphere_record(sphere2, sphere_cap, settings):
    records = find_conjugate_records(sphere2, sphere_cap, PhaseState(np.array([-1.0, 0.0]), np.array([1.0, 0.0])),
                                     settings)
    assert len(records) == 1
    return records[0]


def unit_state(m, x, v):
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    return PhaseState(x, v / m.norm(x, v))


def test_sphere_antipode_is_conjugate(sphere_record):
    assert sphere_record.time == pytest.approx(np.pi, abs=1e-4)
    assert sphere_record.order == 1
    assert sphere_record.converged
    assert np.allclose(sphere_record.conjugate.x, [1.0, 0.0], atol=1e-4)
    assert max(sphere_record.annihilation()) < 1e-6


def test_sphere_ball_conjugate_order_two(settings):
    m = manifold.sphere_patch(3)
    d = manifold.ball(1.2)
    records = find_conjugate_records(m, d, PhaseState(np.array([-1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])),
                                     settings)
    assert records[0].order == 2
    assert records[0].kernel.shape == (3, 2)
    assert order_bound_holds(records, 3)


def test_reverse_record_returns_to_base(sphere2, sphere_cap, settings, sphere_record):
    reverse = reverse_record(sphere2, sphere_cap, sphere_record, settings)
    assert reverse is not None
    assert reverse.time == pytest.approx(-np.pi, abs=1e-4)
    assert np.allclose(reverse.conjugate.x, [-1.0, 0.0], atol=1e-4)
    assert np.allclose(reverse.conjugate.v, [1.0, 0.0], atol=1e-4)


def test_lens_polished_times_match_dense_scan(focusing_lens, unit_disk, settings):
    state = unit_state(focusing_lens, (-0.9, 0.0), (1.0, 0.0))
    trace = trace_geodesic(focusing_lens, unit_disk, state, settings)
    frame = jacobi_propagate(focusing_lens, trace)
    polished = [hit.time for hit in conjugate_times(focusing_lens, trace, frame)]
    reference = dense_scan_times(focusing_lens, frame)
    assert polished
    assert len(polished) == len(reference)
    assert np.allclose(polished, reference, atol=1e-4)


def test_euclidean_geodesics_have_no_conjugate_points(flat2, unit_disk, settings):
    state = PhaseState(np.array([-0.9, 0.1]), np.array([1.0, 0.0]))
    assert find_conjugate_records(flat2, unit_disk, state, settings) == []


def test_common_covector_on_sphere_record(sphere2, sphere_cap, settings, sphere_record):
    report = etalem_check(sphere2, sphere_cap, sphere_record, settings)
    assert report.passed
    assert max(report.residual_base, report.residual_conjugate) < 5e-3
    assert sphere_record.residuals == (report.residual_base, report.residual_conjugate)


def test_common_covector_rejects_wrong_pair(sphere2, sphere_cap, settings, sphere_record):
    # a covector that does not annihilate v~ cannot share a boundary covector
    x_t = sphere_record.conjugate.x
    wrong = sphere2.metric(x_t) @ sphere_record.conjugate.v
    wrong = wrong * np.linalg.norm(sphere_record.eta_tilde[0]) / np.linalg.norm(wrong)
    report = etalem_residuals(sphere2, sphere_cap, sphere_record.base, sphere_record.conjugate,
                              sphere_record.eta[0], wrong, settings)
    assert not report.passed
    assert max(report.residual_base, report.residual_conjugate) > 0.1


def test_scaling_keeps_annihilation(sphere_record):
    scaled = sphere_record.scaled(-3.0)
    assert np.allclose(scaled.eta, -3.0 * sphere_record.eta)
    assert max(scaled.annihilation()) < 1e-5


def test_lens_locus_scan(focusing_lens, unit_disk, coarse_settings):
    fan = FanSpec(boundary_counts=(4,), direction_counts=(3,), alpha_max=0.2)
    sample = locus_scan(focusing_lens, unit_disk, fan, coarse_settings)
    assert sample.rays_scanned == 12
    assert not sample.truncated
    assert sample.records
    assert order_bound_holds(sample.records, 2)
    frame = sample.to_frame()
    assert len(frame) == len(sample.records)
    for column in ('param_0', 'param_1', 'time', 'order', 'eta_0', 'eta_tilde_1', 'regular'):
        assert column in frame.columns


def test_locus_scan_respects_ray_budget(flat2, unit_disk, coarse_settings):
    fan = FanSpec(boundary_counts=(4,), direction_counts=(3,), max_rays=5)
    sample = locus_scan(flat2, unit_disk, fan, coarse_settings)
    assert sample.truncated
    assert sample.rays_scanned == 1
    assert sample.records == []


def test_graph_test_rejects_higher_order_records(settings):
    m = manifold.sphere_patch(3)
    d = manifold.ball(1.2)
    record = ConjugateRecord(
        base=PhaseState(np.array([-1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])),
        conjugate=PhaseState(np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])),
        time=np.pi,
        order=2,
        singular_values=np.zeros(2),
        kernel=np.eye(3)[:, 1:],
        eta=np.eye(3)[1:],
        eta_tilde=-np.eye(3)[1:],
        params=np.array([0.5, 3.1, 0.1, 0.0]),
    )
    reports = graph_test(m, d, LocusSample([record], rays_scanned=1), FanSpec((2, 2), (2, 2)), settings)
    assert len(reports) == 1
    assert not reports[0].passed
    assert reports[0].reason == 'order'


def test_order_bound(sphere_record):
    assert order_bound_holds([sphere_record], 2)
    assert not order_bound_holds([sphere_record], 1)
