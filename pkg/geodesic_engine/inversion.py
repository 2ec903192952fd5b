"""
Hilbert-Scale Inversion

This module provides Sobolev norms realised as Fourier multipliers on a
zero-padded torus, Tikhonov-regularised inversion by conjugate gradients,
the discrepancy-principle convergence-rate experiment and the stability
spectrum of the transform against the H^{-1/2} norm.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft
from scipy.sparse.linalg import LinearOperator, lobpcg
from scipy.stats import linregress

from config.settings import (
    CG_MAX_ITERATIONS,
    CG_TOLERANCE,
    DISCREPANCY_FACTOR,
    DISCREPANCY_ITERATIONS,
    ELLIPTICITY_POINTS,
    HILBERT_PADDING,
    SMOOTHING_ORDERS,
)
from geodesic_engine.errors import PreconditionError
from geodesic_engine.flow import FlowSettings, RayGrid
from geodesic_engine.manifold import DomainModel, MetricModel
from geodesic_engine.xray import ForwardMatrix, ScalarGrid, Sinogram, WeightField, assemble_forward, smooth_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HilbertScaleSpec:
    """H^s on the grid box, padded by `padding` per axis to a periodic torus."""

    s: float
    padding: float = HILBERT_PADDING
    check_support: bool = True

    def __post_init__(self):
        if not -2.0 <= self.s <= 2.0:
            raise ValueError(f"Sobolev exponent must lie in [-2, 2], got {self.s}")
        if self.padding < 1.0:
            raise ValueError("Torus padding must be at least 1")


def _torus_shape(shape: Tuple[int, ...], padding: float) -> Tuple[int, ...]:
    return tuple(int(2 * math.ceil(padding * n / 2)) for n in shape)


def frequency_weight(shape: Tuple[int, ...], spacing: float, exponent: float) -> np.ndarray:
    """(1 + |xi|^2)^(exponent / 2) on the torus of the given shape, xi = 2 pi fftfreq."""
    axes = [2.0 * np.pi * fft.fftfreq(n, d=spacing) for n in shape]
    mesh = np.meshgrid(*axes, indexing='ij')
    return (1.0 + sum(a ** 2 for a in mesh)) ** (exponent / 2.0)


def _check_support(values: np.ndarray) -> None:
    edges = []
    for axis in range(values.ndim):
        edges.append(np.take(values, [0, values.shape[axis] - 1], axis=axis))
    if any(np.any(e != 0.0) for e in edges):
        raise PreconditionError("Field support touches the grid box boundary")


def apply_multiplier(values: np.ndarray, spacing: float, exponent: float, padding: float) -> np.ndarray:
    """R T i: extend by zero to the torus, apply (1 + |xi|^2)^(exponent/2), restrict."""
    torus = _torus_shape(values.shape, padding)
    spectrum = fft.fftn(values, s=torus)
    out = fft.ifftn(spectrum * frequency_weight(torus, spacing, exponent)).real
    return out[tuple(slice(0, n) for n in values.shape)]


def sobolev_gram(values: np.ndarray, spacing: float, s: float, padding: float = HILBERT_PADDING) -> np.ndarray:
    """h^n R (1 + |xi|^2)^s i: the Gram operator of the H^s inner product."""
    return spacing ** values.ndim * apply_multiplier(values, spacing, 2.0 * s, padding)


def hilbert_norm(spec: HilbertScaleSpec, f: ScalarGrid) -> float:
    """||f||_{H^s} = ||(1 + |xi|^2)^(s/2) F(i f)|| by Parseval on the padded torus."""
    if spec.check_support:
        _check_support(f.values)
    torus = _torus_shape(f.shape, spec.padding)
    spectrum = fft.fftn(f.values, s=torus)
    weight = frequency_weight(torus, f.spacing, 2.0 * spec.s)
    total = np.sum(weight * np.abs(spectrum) ** 2) / np.prod(torus)
    return float(np.sqrt(f.spacing ** f.dim * total))


def masked_gram(grid: ScalarGrid, s: float, padding: float) -> Callable[[np.ndarray], np.ndarray]:
    """H^s Gram operator acting on masked node vectors."""
    def apply(masked: np.ndarray) -> np.ndarray:
        values = np.zeros(grid.shape)
        values[grid.mask] = masked
        return sobolev_gram(values, grid.spacing, s, padding)[grid.mask]
    return apply


# --------------------------------------------------------------------------
# Tikhonov inversion
# --------------------------------------------------------------------------

@dataclass
class TikhonovResult:
    field: ScalarGrid
    iterations: int
    residual: float
    converged: bool
    objective_history: List[float] = field(default_factory=list)
    omega: float = 0.0


def conjugate_gradient(apply: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray, x0: Optional[np.ndarray] = None,
                       tol: float = CG_TOLERANCE, max_iter: int = CG_MAX_ITERATIONS,
                       constant: float = 0.0) -> Tuple[np.ndarray, int, float, List[float]]:
    """
    Conjugate gradients for a symmetric positive definite operator.

    Tracks the quadratic objective x^T A x - 2 x^T b + constant, which
    decreases monotonically along the iterates.

    Returns:
        solution, iterations, relative residual and objective history
    """
    x = np.zeros_like(rhs) if x0 is None else x0.copy()
    residual = rhs - apply(x)
    direction = residual.copy()
    delta = float(residual @ residual)
    rhs_norm = float(np.linalg.norm(rhs)) or 1.0
    history = [-float(x @ rhs) - float(x @ residual) + constant]
    iterations = 0
    relative = math.sqrt(delta) / rhs_norm
    while relative >= tol and iterations < max_iter:
        image = apply(direction)
        curvature = float(direction @ image)
        if curvature <= 0.0:
            logger.warning("Conjugate gradients met a non-positive curvature direction")
            break
        alpha = delta / curvature
        x += alpha * direction
        residual -= alpha * image
        new_delta = float(residual @ residual)
        direction = residual + (new_delta / delta) * direction
        delta = new_delta
        iterations += 1
        relative = math.sqrt(delta) / rhs_norm
        history.append(-float(x @ rhs) - float(x @ residual) + constant)
    return x, iterations, relative, history


def require_elliptic(m: MetricModel, phi: WeightField, grid: ScalarGrid,
                     points: int = ELLIPTICITY_POINTS) -> None:
    """Raise PreconditionError unless phi is directionally elliptic on a spread of masked nodes."""
    nodes = grid.masked_points()
    stride = max(1, len(nodes) // points)
    phi.check_ellipticity(m, nodes[::stride])


def tikhonov_solve(m: MetricModel, d: DomainModel, phi: WeightField, data: Sinogram, grid: ScalarGrid,
                   omega: float, p: float, settings: FlowSettings, operator: Optional[ForwardMatrix] = None,
                   padding: float = HILBERT_PADDING, tol: float = CG_TOLERANCE,
                   max_iter: int = CG_MAX_ITERATIONS, x0: Optional[np.ndarray] = None,
                   check_weight: bool = True) -> TikhonovResult:
    """
    Minimise ||X_phi f - g||^2 + omega ||f||^2_{H^p} over grid fields.

    Solves (A^T W A + omega Lambda^{2p}) f = A^T W g by conjugate gradients,
    W being the Santalo weights and Lambda^{2p} the H^p Gram operator.

    Args:
        operator: Pre-assembled forward matrix; assembled from (m, d, phi) when omitted
        x0: Optional starting vector on masked nodes
        check_weight: Verify directional ellipticity of phi on sampled nodes first

    Raises:
        PreconditionError: If omega or p is out of range, or phi is not elliptic
    """
    if omega <= 0:
        raise PreconditionError("Regularisation weight omega must be positive")
    if p < 0:
        raise PreconditionError("Penalty order p must be nonnegative")
    if check_weight:
        require_elliptic(m, phi, grid)
    if operator is None:
        operator = assemble_forward(m, d, grid, phi, data.rays, settings)
    gram = masked_gram(grid, p, padding)
    weights = data.rays.weights

    def apply(x):
        return operator.data_normal(x) + omega * gram(x)

    rhs = operator.matrix.T @ (weights * data.values)
    constant = float(np.sum(weights * data.values ** 2))
    x, iterations, relative, history = conjugate_gradient(apply, rhs, x0, tol, max_iter, constant)
    converged = relative < tol
    if not converged:
        logger.warning(f"Tikhonov CG stopped after {iterations} iterations at relative residual {relative:.2e}")
    return TikhonovResult(grid.with_masked(x), iterations, relative, converged, history, omega)


def data_residual(operator: ForwardMatrix, f: ScalarGrid, data: Sinogram) -> float:
    diff = operator.apply_vector(f.masked_values()) - data.values
    return float(np.sqrt(np.sum(data.rays.weights * diff ** 2)))


def smooth_phantom(grid: ScalarGrid, d: DomainModel, q: float, seed: int = 0,
                   padding: float = HILBERT_PADDING) -> ScalarGrid:
    """
    Random field in H^q but not in H^(q + 1/2), supported inside the domain.

    Fourier coefficients decay like (1 + |xi|^2)^(-(q + n/2 + 0.05)/2); a
    smooth interior cutoff keeps the support away from the boundary. The
    result has unit grid L2 norm.
    """
    rng = np.random.default_rng(seed)
    torus = _torus_shape(grid.shape, padding)
    decay = frequency_weight(torus, grid.spacing, -(q + grid.dim / 2.0 + 0.05))
    noise = rng.standard_normal(torus) + 1j * rng.standard_normal(torus)
    values = fft.ifftn(decay * noise).real[tuple(slice(0, n) for n in grid.shape)]
    cutoff = smooth_step((-d.defining_value(grid.coordinates()) - 0.1) / 0.5)
    phantom = grid.with_values(values * cutoff)
    return phantom.with_values(phantom.values / phantom.l2_norm())


@dataclass
class RateReport:
    noise_levels: np.ndarray
    errors: np.ndarray
    omegas: np.ndarray
    flagged: np.ndarray
    slope: float
    intercept: float
    expected_slope: float
    baseline_error: Optional[float] = None

    def to_frame(self):
        import pandas as pd
        return pd.DataFrame({
            'epsilon': self.noise_levels,
            'omega': self.omegas,
            'error': self.errors,
            'fallback': self.flagged,
            'slope': self.slope,
            'expected_slope': self.expected_slope,
        })


def _noisy_data(clean: Sinogram, epsilon: float, rng: np.random.Generator) -> Sinogram:
    """Additive Gaussian noise scaled to Santalo-weighted L2 size epsilon."""
    noise = rng.standard_normal(len(clean.values))
    size = math.sqrt(float(np.sum(clean.rays.weights * noise ** 2)))
    return clean.with_values(clean.values + epsilon * noise / size)


def _grid_search(solve: Callable[[float, Optional[np.ndarray]], TikhonovResult],
                 residual: Callable[[ScalarGrid], float], target: float,
                 bracket: Tuple[float, float]) -> Tuple[float, TikhonovResult, bool]:
    best = None
    for omega in np.logspace(math.log10(bracket[0]), math.log10(bracket[1]), 31):
        result = solve(float(omega), None)
        gap = abs(residual(result.field) - target)
        if best is None or gap < best[0]:
            best = (gap, float(omega), result)
    return best[1], best[2], True


def select_omega(solve: Callable[[float, Optional[np.ndarray]], TikhonovResult], residual: Callable[[ScalarGrid], float],
                 target: float, bracket: Tuple[float, float] = (1e-12, 1e3),
                 iterations: int = DISCREPANCY_ITERATIONS) -> Tuple[float, TikhonovResult, bool]:
    """
    Discrepancy principle: bisect log(omega) until the data residual matches target.

    Falls back to a log-spaced grid search when the bracket does not enclose
    the target or when bisection stalls short of the 2% tolerance (a residual
    that jumps across the target); the returned flag marks that fallback.
    """
    lo, hi = math.log(bracket[0]), math.log(bracket[1])
    result_lo = solve(math.exp(lo), None)
    result_hi = solve(math.exp(hi), None)
    r_lo = residual(result_lo.field)
    r_hi = residual(result_hi.field)
    if not (r_lo <= target <= r_hi):
        logger.warning(f"Discrepancy bracket misses target {target:.3e} (residuals {r_lo:.3e}, {r_hi:.3e}); "
                       "falling back to grid search")
        return _grid_search(solve, residual, target, bracket)

    result = result_lo
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        result = solve(math.exp(mid), result.field.masked_values())
        r_mid = residual(result.field)
        if abs(r_mid / target - 1.0) < 0.02:
            return math.exp(mid), result, False
        if r_mid > target:
            hi = mid
        else:
            lo = mid
    logger.warning(f"Discrepancy bisection stalled at omega={math.exp(0.5 * (lo + hi)):.3e} after {iterations} "
                   f"steps (target {target:.3e}); falling back to grid search")
    return _grid_search(solve, residual, target, bracket)


def rate_experiment(m: MetricModel, d: DomainModel, phi: WeightField, grid: ScalarGrid, rays: RayGrid,
                    q: float, p: float, noise_levels: Sequence[float], settings: FlowSettings,
                    seed: int = 0, tau: float = DISCREPANCY_FACTOR, omega_floor: float = 1e-8,
                    phantom: Optional[ScalarGrid] = None) -> RateReport:
    """
    Convergence of discrepancy-tuned Tikhonov reconstructions as noise vanishes.

    The fitted log-log slope of error against noise level is compared with
    2q / (1 + 2q). A zero noise level is solved once with omega_floor and
    reported as the discretisation baseline.
    """
    if p < (q - 0.5) / 2.0:
        raise PreconditionError(f"Penalty order p={p} must be at least (q - 1/2)/2 = {(q - 0.5) / 2.0}")
    levels = np.asarray(noise_levels, dtype=float)
    positive = levels[levels > 0]
    if len(positive) < 4 or positive.max() / positive.min() < 10 ** 1.5:
        raise PreconditionError("Noise ladder needs at least 4 positive levels spanning 1.5 decades")
    require_elliptic(m, phi, grid)

    operator = assemble_forward(m, d, grid, phi, rays, settings)
    f0 = phantom if phantom is not None else smooth_phantom(grid, d, q, seed)
    clean = operator.apply(f0)
    reference = f0.l2_norm()

    def error_of(f: ScalarGrid) -> float:
        return float(np.sqrt(np.sum((f.values - f0.values) ** 2) * grid.spacing ** grid.dim) / reference)

    baseline = None
    errors, omegas, flagged = [], [], []
    for j, epsilon in enumerate(levels):
        if epsilon == 0.0:
            result = tikhonov_solve(m, d, phi, clean, grid, omega_floor, p, settings, operator, check_weight=False)
            baseline = error_of(result.field)
            logger.info(f"Noise-free baseline error {baseline:.4e}")
            continue
        data = _noisy_data(clean, float(epsilon), np.random.default_rng([seed, j]))

        def solve(omega, x0, data=data):
            return tikhonov_solve(m, d, phi, data, grid, omega, p, settings, operator, x0=x0,
                                 check_weight=False)

        omega, result, fallback = select_omega(solve, lambda f, data=data: data_residual(operator, f, data),
                                               tau * float(epsilon))
        errors.append(error_of(result.field))
        omegas.append(omega)
        flagged.append(fallback)
        logger.info(f"epsilon={epsilon:.3e}: omega={omega:.3e}, error={errors[-1]:.4e}")

    fit = linregress(np.log(positive), np.log(errors))
    expected = 2.0 * q / (1.0 + 2.0 * q)
    logger.info(f"Rate slope {fit.slope:.3f} (expected {expected:.3f})")
    return RateReport(positive, np.array(errors), np.array(omegas), np.array(flagged),
                      float(fit.slope), float(fit.intercept), expected, baseline)


# --------------------------------------------------------------------------
# Stability spectrum
# --------------------------------------------------------------------------

def transform_ratio(operator: ForwardMatrix, grid: ScalarGrid, masked: np.ndarray,
                    padding: float = HILBERT_PADDING) -> float:
    """||X f||_{L2(mu)} / ||f||_{H^{-1/2}} for a masked node vector."""
    image = operator.apply_vector(masked)
    numerator = math.sqrt(float(np.sum(operator.rays.weights * image ** 2)))
    denominator = hilbert_norm(HilbertScaleSpec(-0.5, padding, check_support=False), grid.with_masked(masked))
    return numerator / denominator


def normal_smoothing_ratio(operator: ForwardMatrix, grid: ScalarGrid, masked: np.ndarray, s: float,
                           padding: float = HILBERT_PADDING) -> float:
    """||N f||_{H^{s+1}} / ||f||_{H^s} with N the discrete normal operator."""
    normal = grid.with_masked(operator.transpose_vector(operator.apply_vector(masked)))
    top = hilbert_norm(HilbertScaleSpec(s + 1.0, padding, check_support=False), normal)
    bottom = hilbert_norm(HilbertScaleSpec(s, padding, check_support=False), grid.with_masked(masked))
    return top / bottom


@dataclass(frozen=True)
class SpectrumRow:
    nodes: int
    min_ratio: float
    max_ratio: float
    extremal_min: float
    extremal_max: float
    smoothing: Dict[float, float] = field(default_factory=dict)

    @property
    def spread(self) -> float:
        return self.max_ratio / self.min_ratio


def default_ray_counts(dim: int, nodes: int) -> Tuple[int, ...]:
    if dim == 2:
        return (2 * nodes, 2 * nodes)
    return (max(4, nodes // 2), nodes, max(4, nodes // 4), max(4, nodes // 2))


def _extremal_ratios(operator: ForwardMatrix, grid: ScalarGrid, padding: float, rng: np.random.Generator,
                     iterations: int = 60) -> Tuple[float, float]:
    size = operator.shape[1]
    gram = masked_gram(grid, -0.5, padding)
    a_op = LinearOperator((size, size), matvec=lambda x: operator.data_normal(np.ravel(x)), dtype=float)
    b_op = LinearOperator((size, size), matvec=lambda x: gram(np.ravel(x)), dtype=float)
    values = []
    for largest in (False, True):
        start = rng.standard_normal((size, 1))
        try:
            eig, _ = lobpcg(a_op, start, B=b_op, largest=largest, maxiter=iterations, tol=1e-6)
            values.append(math.sqrt(max(float(eig[0]), 0.0)))
        except (np.linalg.LinAlgError, ValueError) as exc:
            logger.warning(f"Extremal search failed ({exc}); reporting NaN")
            values.append(float('nan'))
    return values[0], values[1]


def stability_spectrum(m: MetricModel, d: DomainModel, phi: WeightField, grid_ladder: Sequence[int],
                       settings: FlowSettings, samples: int = 16, seed: int = 0,
                       ray_counts: Optional[Callable[[int, int], Tuple[int, ...]]] = None,
                       padding: float = HILBERT_PADDING, extremal: bool = True,
                       smoothing_orders: Sequence[float] = SMOOTHING_ORDERS) -> List[SpectrumRow]:
    """
    Ratio ||X_phi f|| / ||f||_{H^{-1/2}} across a ladder of grid resolutions.

    Each grid is sampled with random masked fields and, optionally, a
    generalised eigenvalue search for the extremal ratios. The largest
    sampled ||N f||_{H^{s+1}} / ||f||_{H^s} is kept for every s in
    smoothing_orders; it stays bounded across the ladder when N gains one
    derivative.
    """
    ray_counts = ray_counts or default_ray_counts
    rows = []
    for level, nodes in enumerate(grid_ladder):
        grid = ScalarGrid.for_domain(d, nodes)
        require_elliptic(m, phi, grid)
        rays = RayGrid.build(d, m, ray_counts(d.dim, nodes), settings.mu_min)
        operator = assemble_forward(m, d, grid, phi, rays, settings)
        rng = np.random.default_rng([seed, level])
        ratios = [transform_ratio(operator, grid, rng.standard_normal(operator.shape[1]), padding)
                  for _ in range(samples)]
        smoothing = {}
        for s in smoothing_orders:
            draws = [normal_smoothing_ratio(operator, grid, rng.standard_normal(operator.shape[1]), s, padding)
                     for _ in range(samples)]
            smoothing[float(s)] = float(np.max(draws))
        low, high = _extremal_ratios(operator, grid, padding, rng) if extremal else (float('nan'),) * 2
        rows.append(SpectrumRow(nodes, float(np.min(ratios)), float(np.max(ratios)), low, high, smoothing))
        logger.info(f"Grid {nodes}: ratio range [{rows[-1].min_ratio:.4e}, {rows[-1].max_ratio:.4e}], "
                    f"extremal [{low:.4e}, {high:.4e}]")
    return rows
