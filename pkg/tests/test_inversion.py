import math

import numpy as np
import pytest

from geodesic_engine.errors import PreconditionError
from geodesic_engine.flow import RayGrid
from geodesic_engine.inversion import (
    HilbertScaleSpec,
    TikhonovResult,
    conjugate_gradient,
    data_residual,
    default_ray_counts,
    hilbert_norm,
    masked_gram,
    rate_experiment,
    select_omega,
    smooth_phantom,
    stability_spectrum,
    tikhonov_solve,
)
from geodesic_engine.xray import ScalarGrid, WeightField, assemble_forward


@pytest.fixture
def small_problem(flat2, unit_disk, coarse_settings):
    grid = ScalarGrid.from_function(unit_disk, 12, lambda x: np.exp(-8.0 * np.sum(x ** 2, axis=-1)))
    rays = RayGrid.build(unit_disk, flat2, (24, 24), coarse_settings.mu_min)
    operator = assemble_forward(flat2, unit_disk, grid, WeightField(), rays, coarse_settings)
    return grid, operator, operator.apply(grid)


def test_hilbert_scale_spec_validation():
    with pytest.raises(ValueError):
        HilbertScaleSpec(2.5)
    with pytest.raises(ValueError):
        HilbertScaleSpec(0.5, padding=0.5)


def test_zero_order_norm_is_l2(unit_disk, rng):
    grid = ScalarGrid.for_domain(unit_disk, 20)
    f = grid.with_masked(rng.standard_normal(int(grid.mask.sum())))
    assert hilbert_norm(HilbertScaleSpec(0.0), f) == pytest.approx(f.l2_norm(), rel=1e-12)


@pytest.mark.parametrize("s", [-1.0, -0.5, 0.5, 1.0])
def test_single_fourier_mode(s):
    nodes, spacing, k = 16, 0.1, 3
    index = np.arange(nodes)
    values = np.cos(2.0 * np.pi * k * index / nodes)[:, None] * np.ones(nodes)[None, :]
    f = ScalarGrid(values, np.zeros(2), spacing, np.ones((nodes, nodes), dtype=bool))
    xi = 2.0 * np.pi * k / (nodes * spacing)
    spec = HilbertScaleSpec(s, padding=1.0, check_support=False)
    assert hilbert_norm(spec, f) ** 2 == pytest.approx((1.0 + xi ** 2) ** s * f.l2_norm() ** 2, rel=1e-10)


def test_norm_requires_compact_support():
    f = ScalarGrid(np.ones((8, 8)), np.zeros(2), 0.1, np.ones((8, 8), dtype=bool))
    with pytest.raises(PreconditionError):
        hilbert_norm(HilbertScaleSpec(-0.5), f)


def test_norms_increase_with_order(unit_disk, rng):
    grid = ScalarGrid.for_domain(unit_disk, 24)
    f = grid.with_masked(rng.standard_normal(int(grid.mask.sum())))
    norms = [hilbert_norm(HilbertScaleSpec(s), f) for s in (-1.0, -0.5, 0.0, 0.5)]
    assert all(a < b for a, b in zip(norms, norms[1:]))


def test_masked_gram_is_symmetric(unit_disk, rng):
    grid = ScalarGrid.for_domain(unit_disk, 16)
    gram = masked_gram(grid, -0.5, 2.0)
    size = int(grid.mask.sum())
    u, v = rng.standard_normal(size), rng.standard_normal(size)
    assert float(u @ gram(v)) == pytest.approx(float(v @ gram(u)), rel=1e-10)
    assert float(u @ gram(u)) > 0.0


def test_conjugate_gradient_solves_spd_system(rng):
    base = rng.standard_normal((30, 30))
    matrix = base @ base.T + np.eye(30)
    rhs = rng.standard_normal(30)
    x, iterations, relative, history = conjugate_gradient(lambda v: matrix @ v, rhs, tol=1e-10, max_iter=200)
    assert np.allclose(x, np.linalg.solve(matrix, rhs), atol=1e-8)
    assert relative < 1e-10
    assert 0 < iterations <= 200
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_tikhonov_satisfies_normal_equations(flat2, unit_disk, coarse_settings, small_problem):
    grid, operator, data = small_problem
    result = tikhonov_solve(flat2, unit_disk, WeightField(), data, grid, 1e-2, 0.5, coarse_settings,
                            operator=operator, tol=1e-10)
    assert result.converged
    assert result.omega == 1e-2
    x = result.field.masked_values()
    gram = masked_gram(grid, 0.5, 2.0)
    lhs = operator.data_normal(x) + 1e-2 * gram(x)
    rhs = operator.matrix.T @ (data.rays.weights * data.values)
    assert np.linalg.norm(lhs - rhs) <= 1e-8 * np.linalg.norm(rhs)
    history = result.objective_history
    assert all(b <= a + 1e-10 for a, b in zip(history, history[1:]))
    assert data_residual(operator, grid, data) == pytest.approx(0.0, abs=1e-12)
    assert data_residual(operator, result.field, data) > 0.0


def test_tikhonov_rejects_bad_parameters(flat2, unit_disk, coarse_settings, small_problem):
    grid, operator, data = small_problem
    with pytest.raises(PreconditionError):
        tikhonov_solve(flat2, unit_disk, WeightField(), data, grid, 0.0, 0.5, coarse_settings, operator=operator)
    with pytest.raises(PreconditionError):
        tikhonov_solve(flat2, unit_disk, WeightField(), data, grid, 1e-2, -0.5, coarse_settings, operator=operator)


def fake_solver(grid):
    # the "reconstruction" stores omega, and its residual is sqrt(omega)
    def solve(omega, x0):
        return TikhonovResult(grid.with_values(np.full(grid.shape, omega)), 1, 0.0, True, omega=omega)

    def residual(f):
        return math.sqrt(float(f.values.max()))
    return solve, residual


def test_discrepancy_bisection():
    grid = ScalarGrid(np.zeros((4, 4)), np.zeros(2), 0.5, np.ones((4, 4), dtype=bool))
    solve, residual = fake_solver(grid)
    omega, result, flagged = select_omega(solve, residual, 0.01)
    assert not flagged
    assert omega == pytest.approx(1e-4, rel=0.05)
    assert residual(result.field) == pytest.approx(0.01, rel=0.02)


def test_discrepancy_fallback_is_flagged():
    grid = ScalarGrid(np.zeros((4, 4)), np.zeros(2), 0.5, np.ones((4, 4), dtype=bool))
    solve, residual = fake_solver(grid)
    omega, _, flagged = select_omega(solve, residual, 100.0)
    assert flagged
    assert omega == pytest.approx(1e3)


def test_discrepancy_jump_falls_back_to_grid_search():
    grid = ScalarGrid(np.zeros((4, 4)), np.zeros(2), 0.5, np.ones((4, 4), dtype=bool))
    solve, _ = fake_solver(grid)
    omega, result, flagged = select_omega(solve, lambda f: 0.0 if f.values.max() < 1e-4 else 1.0, 0.5)
    assert flagged
    assert 1e-12 <= omega <= 1e3
    assert result.omega == omega


def test_rate_experiment_preconditions(flat2, unit_disk, coarse_settings):
    grid = ScalarGrid.for_domain(unit_disk, 8)
    rays = RayGrid.build(unit_disk, flat2, (8, 8), coarse_settings.mu_min)
    levels = (1e-1, 3e-2, 1e-2, 3e-3)
    with pytest.raises(PreconditionError):
        rate_experiment(flat2, unit_disk, WeightField(), grid, rays, 2.0, 0.5, levels, coarse_settings)
    with pytest.raises(PreconditionError):
        rate_experiment(flat2, unit_disk, WeightField(), grid, rays, 1.0, 0.75, (1e-1, 5e-2, 2e-2),
                        coarse_settings)
    with pytest.raises(PreconditionError):
        rate_experiment(flat2, unit_disk, WeightField(), grid, rays, 1.0, 0.75, (1e-1, 8e-2, 6e-2, 4e-2),
                        coarse_settings)


def test_smooth_phantom(unit_disk):
    grid = ScalarGrid.for_domain(unit_disk, 32)
    phantom = smooth_phantom(grid, unit_disk, 1.0, seed=7)
    assert phantom.l2_norm() == pytest.approx(1.0)
    near_boundary = unit_disk.defining_value(grid.coordinates()) > -0.1
    assert np.all(phantom.values[near_boundary] == 0.0)
    again = smooth_phantom(grid, unit_disk, 1.0, seed=7)
    assert np.array_equal(phantom.values, again.values)
    assert not np.array_equal(phantom.values, smooth_phantom(grid, unit_disk, 1.0, seed=8).values)


def test_default_ray_counts():
    assert default_ray_counts(2, 16) == (32, 32)
    assert default_ray_counts(3, 16) == (8, 16, 4, 8)
    assert default_ray_counts(3, 8) == (4, 8, 4, 4)


def test_stability_spectrum_rows(flat2, unit_disk, coarse_settings):
    rows = stability_spectrum(flat2, unit_disk, WeightField(), (8, 12), coarse_settings, samples=4,
                              extremal=False)
    assert [row.nodes for row in rows] == [8, 12]
    for row in rows:
        assert 0.0 < row.min_ratio <= row.max_ratio
        assert row.spread >= 1.0
        assert math.isnan(row.extremal_min)


def test_stability_spectrum_smoothing_and_extremal_ratios(flat2, unit_disk, coarse_settings):
    rows = stability_spectrum(flat2, unit_disk, WeightField(), (8, 12), coarse_settings, samples=4)
    for row in rows:
        assert sorted(row.smoothing) == [-1.0, -0.5, 0.0]
        assert all(np.isfinite(value) and value > 0.0 for value in row.smoothing.values())
        assert np.isfinite(row.extremal_min) and np.isfinite(row.extremal_max)
        assert 0.0 <= row.extremal_min <= row.min_ratio * 1.01
        assert row.extremal_max >= row.max_ratio * 0.99
    for s in (-1.0, -0.5, 0.0):
        coarse, fine = rows[0].smoothing[s], rows[1].smoothing[s]
        assert 0.1 < fine / coarse < 10.0


def test_inversion_requires_elliptic_weight(flat2, unit_disk, coarse_settings, small_problem):
    grid, operator, data = small_problem
    band = WeightField('band', axis=(1.0, 0.0), threshold=0.9)
    with pytest.raises(PreconditionError):
        tikhonov_solve(flat2, unit_disk, band, data, grid, 1e-2, 0.5, coarse_settings, operator=operator)
    with pytest.raises(PreconditionError):
        stability_spectrum(flat2, unit_disk, band, (8,), coarse_settings, samples=2, extremal=False)
    rays = RayGrid.build(unit_disk, flat2, (8, 8), coarse_settings.mu_min)
    with pytest.raises(PreconditionError):
        rate_experiment(flat2, unit_disk, band, ScalarGrid.for_domain(unit_disk, 8), rays, 1.0, 0.75,
                        (1e-1, 3e-2, 1e-2, 3e-3), coarse_settings)


def test_rate_experiment_slope(flat2, unit_disk, coarse_settings):
    grid = ScalarGrid.for_domain(unit_disk, 16)
    rays = RayGrid.build(unit_disk, flat2, (32, 32), coarse_settings.mu_min)
    levels = (1e-1, 3e-2, 1e-2, 3e-3)
    report = rate_experiment(flat2, unit_disk, WeightField(), grid, rays, 1.0, 0.75, (0.0,) + levels,
                             coarse_settings, seed=3)
    assert report.expected_slope == pytest.approx(2.0 / 3.0)
    assert len(report.flagged) == len(levels)
    assert report.flagged.dtype == bool
    assert np.all(report.omegas > 0.0)
    assert report.errors[-1] < report.errors[0]
    assert 0.3 < report.slope < 1.3
    assert report.baseline_error is not None
    assert list(report.to_frame().columns) == ['epsilon', 'omega', 'error', 'fallback', 'slope', 'expected_slope']
