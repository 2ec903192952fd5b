"""
Experiment Runner

This module turns a validated experiment config into a run: it builds the
geometry, dispatches the selected experiment, writes CSV and grid outputs
into the run directory and returns a summary for the manifest.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Tuple

import numpy as np
import pandas as pd

from config.settings import (
    ADJOINT_CHECK_THRESHOLD,
    DEFAULT_FREQUENCY_FACTORS,
    DISCREPANCY_FACTOR,
    STENCIL_RADIUS,
    TOL_GRAPH,
    TOL_RANK,
)
from geodesic_engine.conjugacy import FanSpec, etalem_check, graph_test, locus_scan, order_bound_holds
from geodesic_engine.errors import GeodesicError, PreconditionError
from geodesic_engine.flow import RayGrid
from geodesic_engine.inversion import (
    default_ray_counts,
    rate_experiment,
    smooth_phantom,
    stability_spectrum,
    tikhonov_solve,
)
from geodesic_engine.microlocal import ProbeSpec, artifact_probe, default_frequencies, order_probe, psf_fit
from geodesic_engine.xray import (
    ScalarGrid,
    adjoint_pairing,
    assemble_forward,
    fibre_footprint,
    forward,
    normal_composed,
    normal_direct,
)
from utils.experiment_config import ExperimentConfig
from utils.helpers import load_sinogram, save_frame, save_grid, save_sinogram

logger = logging.getLogger(__name__)

PHANTOMS = ('indicator', 'gaussian', 'smooth')


@dataclass
class ExperimentPlan:
    selector: str
    dim: int
    metric: str
    domain: str
    grid_nodes: int
    masked_nodes: int
    ray_counts: Tuple[int, ...]
    total_rays: int
    sphere_nodes: int
    step: float
    work_units: int

    def rows(self) -> List[Tuple[str, Any]]:
        return [
            ('selector', self.selector),
            ('dimension', self.dim),
            ('metric', self.metric),
            ('domain', self.domain),
            ('field grid', f"{self.grid_nodes}^{self.dim} ({self.masked_nodes} in domain)"),
            ('ray grid', ' x '.join(str(c) for c in self.ray_counts) + f" ({self.total_rays} rays)"),
            ('sphere rule nodes', self.sphere_nodes),
            ('flow step', self.step),
            ('estimated work units', self.work_units),
        ]


@dataclass
class ExperimentResult:
    selector: str
    passed: bool
    summary: Dict[str, Any] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)


def ray_counts_for(config: ExperimentConfig, nodes: int) -> Tuple[int, ...]:
    dim = config.dim
    counts = config.get_ints('grid', 'rays', default_ray_counts(dim, nodes))
    if len(counts) != (2 if dim == 2 else 4):
        raise config.error(f"Ray counts need {2 if dim == 2 else 4} entries in {dim}D", 'grid', 'rays')
    return counts


def describe(config: ExperimentConfig) -> ExperimentPlan:
    """Resolve grids and counts without tracing a single geodesic."""
    d = config.build_domain()
    settings = config.build_flow_settings()
    nodes = config.get_int('grid', 'nodes', 64)
    counts = ray_counts_for(config, nodes)
    directions = config.get_int('grid', 'directions', 64 if d.dim == 2 else 256)
    grid = ScalarGrid.for_domain(d, nodes)
    masked = int(grid.mask.sum())
    rays = int(np.prod(counts))
    steps = int(math.ceil(d.diameter() / settings.step))
    selector = config.selector
    if selector in ('forward', 'invert', 'rate', 'spectrum'):
        work = rays * steps
    elif selector in ('adjoint-check', 'normal'):
        work = rays * steps + masked * directions * 2 * steps
    elif selector in ('probe', 'psf'):
        # transect or radial sample count is resolved at run time; 64 points is typical
        work = directions * 2 * steps * 64
    else:
        fan = _fan_spec(config)
        work = len(fan.parameters(d.dim)) * (1 + 4 * (d.dim - 1)) * steps * 4 * d.dim
    return ExperimentPlan(selector, d.dim, config.get_str('metric', 'family'), d.shape, nodes, masked, counts,
                          rays, directions, settings.step, work)


def _fan_spec(config: ExperimentConfig) -> FanSpec:
    dim = config.dim
    boundary = config.get_ints('experiment', 'fan_boundary', (16,) if dim == 2 else (4, 8))
    directions = config.get_ints('experiment', 'fan_directions', (9,) if dim == 2 else (3, 6))
    if len(boundary) != dim - 1 or len(directions) != dim - 1:
        raise config.error(f"Fan counts need {dim - 1} entries each in {dim}D", 'experiment')
    max_rays = config.get_int('experiment', 'max_rays', 0) or None
    return FanSpec(boundary, directions,
                   alpha_max=config.get_positive('experiment', 'alpha_max', 0.3),
                   base_offset=config.get_positive('experiment', 'base_offset', 0.1),
                   stencil_radius=config.get_positive('experiment', 'stencil_radius', STENCIL_RADIUS),
                   max_pairs=config.get_int('experiment', 'max_pairs', 1),
                   max_rays=max_rays)


def smooth_sinogram_function(rng: np.random.Generator, dim: int) -> Callable[[np.ndarray], np.ndarray]:
    """Random smooth function of the ray parameters, periodic in every angle."""
    count = 2 * dim - 2
    amplitudes = rng.standard_normal((3, count))
    phases = rng.uniform(0.0, 2.0 * np.pi, (3, count))

    def h(params):
        total = np.zeros(len(params))
        for order in range(3):
            total += np.sum(amplitudes[order] * np.cos((order + 1) * params + phases[order]), axis=-1)
        return total
    return h


class ExperimentRunner:
    """
    Runs one experiment selected by the config and records its outputs.

    Outputs are written as they are produced so a failing run still leaves
    its partial results behind.
    """

    def __init__(self, config: ExperimentConfig, run_dir: str):
        self.config = config
        self.run_dir = run_dir
        self.metric = config.build_metric()
        self.domain = config.build_domain(self.metric)
        self.metric.restrict_to(self.domain)
        self.settings = config.build_flow_settings()
        self.weight = config.build_weight()
        self.seed = config.seed
        self.outputs: List[str] = []
        self.notes: List[str] = []

    # ----------------------------------------------------------------
    # Shared building blocks
    # ----------------------------------------------------------------

    def path(self, name: str) -> str:
        path = os.path.join(self.run_dir, name)
        self.outputs.append(path)
        return path

    def grid(self) -> ScalarGrid:
        return ScalarGrid.for_domain(self.domain, self.config.get_int('grid', 'nodes', 64))

    def rays(self, nodes: int) -> RayGrid:
        return RayGrid.build(self.domain, self.metric, ray_counts_for(self.config, nodes), self.settings.mu_min)

    def directions(self) -> int:
        return self.config.get_int('grid', 'directions', 64 if self.domain.dim == 2 else 256)

    def phantom(self, grid: ScalarGrid) -> ScalarGrid:
        kind = self.config.get_str('experiment', 'phantom', 'gaussian')
        center = np.asarray(self.config.get_floats('experiment', 'phantom_center', self.domain.center))
        if kind == 'indicator':
            radius = self.config.get_positive('experiment', 'phantom_radius', 0.5)
            return ScalarGrid.from_function(
                self.domain, grid.shape[0],
                lambda x: (np.linalg.norm(x - center, axis=-1) < radius).astype(float))
        if kind == 'gaussian':
            width = self.config.get_positive('experiment', 'phantom_width', 0.15)
            return ScalarGrid.from_function(
                self.domain, grid.shape[0],
                lambda x: np.exp(-np.sum((x - center) ** 2, axis=-1) / (2.0 * width ** 2)))
        if kind == 'smooth':
            return smooth_phantom(grid, self.domain, self.config.get_positive('experiment', 'q', 1.0), self.seed)
        raise self.config.error(f"Unknown phantom '{kind}'; expected one of {', '.join(PHANTOMS)}",
                                'experiment', 'phantom')

    def note_off_mask(self, hits: int) -> None:
        if hits:
            self.notes.append(f"{hits} quadrature nodes had no in-mask interpolation support")

    # ----------------------------------------------------------------
    # Dispatch
    # ----------------------------------------------------------------

    def run(self) -> ExperimentResult:
        selector = self.config.selector
        handlers = {
            'forward': self.run_forward,
            'adjoint-check': self.run_adjoint_check,
            'normal': self.run_normal,
            'conjugates': self.run_conjugates,
            'graph-test': self.run_graph_test,
            'probe': self.run_probe,
            'psf': self.run_psf,
            'invert': self.run_invert,
            'rate': self.run_rate,
            'spectrum': self.run_spectrum,
        }
        logger.info(f"Running experiment '{selector}' in {self.run_dir}")
        passed, summary = handlers[selector]()
        return ExperimentResult(selector, passed, summary, list(self.outputs), list(self.notes))

    # ----------------------------------------------------------------
    # Transform experiments
    # ----------------------------------------------------------------

    def run_forward(self) -> Tuple[bool, Dict[str, Any]]:
        grid = self.grid()
        f = self.phantom(grid)
        save_grid(f, self.path('phantom.gxr'))
        sinogram = forward(self.metric, self.domain, f, self.weight, self.rays(grid.shape[0]), self.settings)
        save_sinogram(sinogram, self.path('sinogram.csv'))
        self.note_off_mask(sinogram.off_mask_hits)
        return True, {'rays': len(sinogram.values), 'off_mask_hits': sinogram.off_mask_hits,
                      'max_value': float(np.max(sinogram.values))}

    def run_adjoint_check(self) -> Tuple[bool, Dict[str, Any]]:
        """
        <X f, h>_mu against <f, X^t h>_g over random pairs.

        Passes when the fibre-integral adjoint matches the forward transform
        on every pair, relative to ||f|| ||h||. The sinogram-interpolated and
        the matrix-transpose right-hand sides are reported alongside.
        """
        grid = self.grid()
        rays = self.rays(grid.shape[0])
        pairs = self.config.get_int('experiment', 'pairs', 20)
        q = self.config.get_positive('experiment', 'q', 2.0)
        threshold = self.config.get_positive('experiment', 'threshold', ADJOINT_CHECK_THRESHOLD)
        operator = assemble_forward(self.metric, self.domain, grid, self.weight, rays, self.settings)
        footprint = fibre_footprint(self.metric, self.domain, grid, self.weight, self.settings, self.directions())
        if footprint.dropped:
            self.notes.append(f"{footprint.dropped} adjoint directions with grazing footpoints were dropped")
        rows = []
        for k in range(pairs):
            rng = np.random.default_rng([self.seed, k])
            f = smooth_phantom(grid, self.domain, q, seed=int(rng.integers(2 ** 31)))
            pairing = adjoint_pairing(operator, footprint, f, smooth_sinogram_function(rng, self.domain.dim))
            rows.append({'pair': k, 'lhs': pairing.lhs, 'rhs': pairing.continuous,
                         'continuous_error': pairing.continuous_error,
                         'sinogram_error': pairing.sinogram_error,
                         'discrete_error': pairing.discrete_error})
        frame = pd.DataFrame(rows)
        save_frame(frame, self.path('adjoint_check.csv'))
        worst = float(frame['continuous_error'].max())
        summary = {'pairs': pairs, 'max_relative_error': worst, 'threshold': threshold,
                   'max_sinogram_error': float(frame['sinogram_error'].max()),
                   'max_discrete_error': float(frame['discrete_error'].max())}
        passed = worst < threshold
        if not passed:
            logger.error(f"Adjoint identity error {worst:.3e} exceeds {threshold:.1e}")
        return passed, summary

    def run_normal(self) -> Tuple[bool, Dict[str, Any]]:
        grid = self.grid()
        f = self.phantom(grid)
        directions = self.directions()
        direct = normal_direct(self.metric, self.domain, f, self.weight, self.settings, directions)
        composed = normal_composed(self.metric, self.domain, f, self.weight, self.rays(grid.shape[0]),
                                   self.settings, directions)
        discrepancy = float(np.linalg.norm(direct.values - composed.values) / np.linalg.norm(direct.values))
        data = {f'x_{k}': grid.masked_points()[:, k] for k in range(grid.dim)}
        data['direct'] = direct.masked_values()
        data['composed'] = composed.masked_values()
        save_frame(pd.DataFrame(data), self.path('normal.csv'))
        tolerance = self.config.get_positive('experiment', 'tolerance', 1e-2)
        logger.info(f"Normal operator discrepancy {discrepancy:.3e}")
        return discrepancy < tolerance, {'relative_discrepancy': discrepancy, 'tolerance': tolerance}

    # ----------------------------------------------------------------
    # Conjugate locus experiments
    # ----------------------------------------------------------------

    def _scan(self):
        fan = _fan_spec(self.config)
        tol_rank = self.config.get_positive('experiment', 'tol_rank', TOL_RANK)
        sample = locus_scan(self.metric, self.domain, fan, self.settings, tol_rank)
        if sample.truncated:
            self.notes.append(f"Locus scan truncated to {sample.rays_scanned} rays by max_rays")
        if sample.singular_count:
            self.notes.append(f"{sample.singular_count} records flagged singular")
        return fan, tol_rank, sample

    def run_conjugates(self) -> Tuple[bool, Dict[str, Any]]:
        fan, tol_rank, sample = self._scan()
        checked = failed = 0
        for record in sample.records:
            if record.order != 1 or not record.regular:
                continue
            try:
                report = etalem_check(self.metric, self.domain, record, self.settings)
            except GeodesicError as e:
                self.notes.append(f"Common-covector check skipped at s={record.time:.4f}: {e}")
                continue
            checked += 1
            failed += not report.passed
        if failed:
            self.notes.append(f"{failed} of {checked} regular records failed the common-covector check")
        save_frame(sample.to_frame(), self.path('locus.csv'))
        bound = order_bound_holds(sample.records, self.domain.dim)
        return bound, {'rays_scanned': sample.rays_scanned, 'records': len(sample.records),
                       'singular': sample.singular_count, 'checked': checked, 'check_failures': failed,
                       'order_bound_holds': bound}

    def run_graph_test(self) -> Tuple[bool, Dict[str, Any]]:
        fan, tol_rank, sample = self._scan()
        tol_graph = self.config.get_positive('experiment', 'tol_graph', TOL_GRAPH)
        reports = graph_test(self.metric, self.domain, sample, fan, self.settings, tol_graph, tol_rank)
        save_frame(sample.to_frame(), self.path('locus.csv'))
        frame = pd.DataFrame([{'record': r.index, 'passed': r.passed, 'left_margin': r.left_margin,
                               'right_margin': r.right_margin, 'reason': r.reason or ''} for r in reports],
                             columns=['record', 'passed', 'left_margin', 'right_margin', 'reason'])
        save_frame(frame, self.path('graph_test.csv'))
        failures = sum(not r.passed for r in reports)
        if failures:
            self.notes.append(f"{failures} of {len(reports)} records failed the canonical graph test")
        return True, {'records': len(reports), 'passed': len(reports) - failures}

    # ----------------------------------------------------------------
    # Microlocal probes
    # ----------------------------------------------------------------

    def run_probe(self) -> Tuple[bool, Dict[str, Any]]:
        dim = self.domain.dim
        factors = self.config.get_floats('experiment', 'frequency_factors', DEFAULT_FREQUENCY_FACTORS)
        frequencies = self.config.get_floats('experiment', 'frequencies',
                                             default_frequencies(self.domain, factors))
        try:
            spec = ProbeSpec(center=self.config.get_floats('experiment', 'probe_center', (0.0,) * dim),
                             direction=self.config.get_floats('experiment', 'probe_direction',
                                                              (1.0,) + (0.0,) * (dim - 1)),
                             frequencies=frequencies,
                             width=self.config.get_positive('experiment', 'probe_width', 0.15))
        except ValueError as e:
            raise self.config.error(str(e), 'experiment')
        directions = self.config.get_int('grid', 'directions', 256)
        mode = self.config.get_str('experiment', 'probe', 'order')
        if mode == 'order':
            fit = order_probe(self.metric, self.domain, self.weight, spec, self.settings, directions)
            save_frame(pd.DataFrame({'frequency': fit.scales, 'amplitude': fit.amplitudes, 'slope': fit.slope,
                                     'residual': fit.residual, 'half_width': fit.half_width}),
                       self.path('order_probe.csv'))
            if not fit.conclusive:
                self.notes.append(f"Order probe fit inconclusive (residual {fit.residual:.3f})")
            return True, {'slope': fit.slope, 'residual': fit.residual, 'conclusive': fit.conclusive}
        if mode == 'artifact':
            report = artifact_probe(self.metric, self.domain, self.weight, spec, self.settings,
                                    directions=directions)
            save_frame(report.to_frame(), self.path('artifact_probe.csv'))
            if report.control:
                self.notes.append("No conjugate images of the probe; artifact measured at a control point")
            return True, {'primary_slope': report.primary.slope, 'artifact_slope': report.artifact.slope,
                          'ratio_slope': report.ratio_slope, 'control': report.control,
                          'below_noise_floor': report.below_noise_floor()}
        raise self.config.error(f"Unknown probe mode '{mode}'; expected order or artifact", 'experiment', 'probe')

    def run_psf(self) -> Tuple[bool, Dict[str, Any]]:
        dim = self.domain.dim
        fit = psf_fit(self.metric, self.domain, self.weight,
                      self.config.get_floats('experiment', 'psf_center', (0.0,) * dim), self.settings,
                      width=self.config.get_positive('experiment', 'psf_width', 0.01),
                      r_max=self.config.get_positive('experiment', 'psf_r_max', 0.2),
                      radii=self.config.get_int('experiment', 'radii', 12),
                      rays=self.config.get_int('experiment', 'psf_rays', 4),
                      directions=self.config.get_int('grid', 'directions', 1024))
        save_frame(pd.DataFrame({'radius': fit.scales, 'amplitude': fit.amplitudes, 'slope': fit.slope,
                                 'residual': fit.residual, 'half_width': fit.half_width}), self.path('psf.csv'))
        expected = -(dim - 1)
        return True, {'slope': fit.slope, 'expected_slope': expected, 'residual': fit.residual}

    # ----------------------------------------------------------------
    # Inversion
    # ----------------------------------------------------------------

    def run_invert(self) -> Tuple[bool, Dict[str, Any]]:
        grid = self.grid()
        rays = self.rays(grid.shape[0])
        operator = assemble_forward(self.metric, self.domain, grid, self.weight, rays, self.settings)
        omega = self.config.get_positive('experiment', 'omega', 1e-4)
        p = self.config.get_float('experiment', 'p', 0.5)
        truth = None
        if self.config.has('experiment', 'data'):
            data = load_sinogram(self.config.get_str('experiment', 'data'), rays)
        else:
            truth = self.phantom(grid)
            save_grid(truth, self.path('phantom.gxr'))
            data = operator.apply(truth)
            noise = self.config.get_float('experiment', 'noise', 0.0)
            if noise < 0:
                raise self.config.error("Noise level must be nonnegative", 'experiment', 'noise')
            if noise > 0:
                rng = np.random.default_rng([self.seed, 0])
                sample = rng.standard_normal(len(data.values))
                sample *= noise / math.sqrt(float(np.sum(rays.weights * sample ** 2)))
                data = data.with_values(data.values + sample)
        result = tikhonov_solve(self.metric, self.domain, self.weight, data, grid, omega, p, self.settings,
                                operator)
        save_grid(result.field, self.path('reconstruction.gxr'))
        save_frame(pd.DataFrame({'iteration': np.arange(len(result.objective_history)),
                                 'objective': result.objective_history}), self.path('objective.csv'))
        if not result.converged:
            self.notes.append(f"Tikhonov solve did not converge in {result.iterations} iterations")
        summary = {'omega': omega, 'p': p, 'iterations': result.iterations,
                   'relative_residual': result.residual, 'converged': result.converged}
        if truth is not None:
            summary['relative_error'] = float(np.linalg.norm(result.field.values - truth.values)
                                              / np.linalg.norm(truth.values))
        return result.converged, summary

    def run_rate(self) -> Tuple[bool, Dict[str, Any]]:
        grid = self.grid()
        q = self.config.get_positive('experiment', 'q', 1.0)
        p = self.config.get_float('experiment', 'p', (q + 0.5) / 2.0)
        levels = self.config.get_floats('experiment', 'noise_levels', (0.1, 0.03, 0.01, 0.003, 0.001))
        try:
            report = rate_experiment(self.metric, self.domain, self.weight, grid, self.rays(grid.shape[0]), q, p,
                                     levels, self.settings, seed=self.seed,
                                     tau=self.config.get_positive('experiment', 'tau', DISCREPANCY_FACTOR))
        except PreconditionError as e:
            raise self.config.error(str(e), 'experiment')
        save_frame(report.to_frame(), self.path('rate.csv'))
        if report.flagged.any():
            self.notes.append(f"{int(report.flagged.sum())} noise levels fell back to an omega grid search")
        summary = {'slope': report.slope, 'expected_slope': report.expected_slope}
        if report.baseline_error is not None:
            summary['baseline_error'] = report.baseline_error
        return True, summary

    def run_spectrum(self) -> Tuple[bool, Dict[str, Any]]:
        default = (16, 24, 32) if self.domain.dim == 3 else (16, 32, 48)
        ladder = self.config.get_ints('grid', 'ladder', default)
        counts = None
        if self.config.has('grid', 'rays'):
            fixed = ray_counts_for(self.config, ladder[0])

            def counts(dim, nodes):
                return fixed
        rows = stability_spectrum(self.metric, self.domain, self.weight, ladder, self.settings,
                                  samples=self.config.get_int('experiment', 'samples', 16), seed=self.seed,
                                  ray_counts=counts,
                                  extremal=self.config.get_str('experiment', 'extremal', 'yes') != 'no')
        frame = pd.DataFrame([{'nodes': r.nodes, 'min_ratio': r.min_ratio, 'max_ratio': r.max_ratio,
                               'extremal_min': r.extremal_min, 'extremal_max': r.extremal_max,
                               **{f'smoothing_{s:g}': value for s, value in r.smoothing.items()}} for r in rows])
        save_frame(frame, self.path('spectrum.csv'))
        minima = frame['min_ratio'].to_numpy()
        smoothing = frame[[c for c in frame.columns if c.startswith('smoothing_')]].to_numpy()
        return True, {'grids': list(ladder), 'min_ratio_spread': float(minima.max() / minima.min()),
                      'monotone_decreasing': bool(np.all(np.diff(minima) < 0)),
                      'smoothing_spread': float(np.max(smoothing.max(axis=0) / smoothing.min(axis=0)))}
