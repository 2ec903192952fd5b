"""
Conjugate Pair Analysis

This module detects conjugate points along geodesics from Jacobi frames,
classifies their order, builds the covector pair attached to each record,
checks the common-covector conditions through finite differences of the
footpoint map, scans fans of rays for the conjugate locus and tests whether
the order-one relation is a local canonical graph.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from config.settings import (
    ETALEM_MAX_SHRINKS,
    ETALEM_STEP,
    ETALEM_TOLERANCE,
    STENCIL_RADIUS,
    TOL_GRAPH,
    TOL_RANK,
)
from geodesic_engine.errors import DomainError, GeodesicError
from geodesic_engine.flow import (
    FlowSettings,
    JacobiFrame,
    PhaseState,
    batched_map,
    flow_step,
    jacobi_propagate,
    locate_footpoints,
    rays_from_parameters,
    trace_geodesic,
)
from geodesic_engine.manifold import DomainModel, MetricModel, orthonormal_complement

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConjugateTime:
    time: float
    order: int
    kernel: np.ndarray
    singular_values: np.ndarray
    ratio: float
    converged: bool


@dataclass
class ConjugateRecord:
    """A conjugate pair (v, v~) with v~ = Psi(v, s)."""

    base: PhaseState
    conjugate: PhaseState
    time: float
    order: int
    singular_values: np.ndarray
    kernel: np.ndarray
    eta: np.ndarray
    eta_tilde: np.ndarray
    converged: bool = True
    regular: bool = True
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    residuals: Optional[Tuple[float, float]] = None
    graph_margin: Optional[Tuple[float, float]] = None

    def annihilation(self) -> Tuple[float, float]:
        """(|eta(v)|, |eta~(v~)|); both vanish for a genuine record."""
        return (abs(float(self.eta[0] @ self.base.v)), abs(float(self.eta_tilde[0] @ self.conjugate.v)))

    def scaled(self, factor: float) -> 'ConjugateRecord':
        return replace(self, eta=factor * self.eta, eta_tilde=factor * self.eta_tilde)


@dataclass
class LocusSample:
    records: List[ConjugateRecord]
    rays_scanned: int
    truncated: bool = False

    @property
    def singular_count(self) -> int:
        return sum(1 for r in self.records if not r.regular)

    def to_frame(self):
        """One row per record; vector quantities are split into numbered columns."""
        import pandas as pd
        rows = []
        for record in self.records:
            row = {}
            for k, value in enumerate(record.params):
                row[f'param_{k}'] = value
            for prefix, vec in (('x', record.base.x), ('v', record.base.v),
                                ('x_conj', record.conjugate.x), ('v_conj', record.conjugate.v)):
                for k, value in enumerate(vec):
                    row[f'{prefix}_{k}'] = value
            row['time'] = record.time
            row['order'] = record.order
            for k, value in enumerate(record.singular_values):
                row[f'sv_{k}'] = value
            for k, value in enumerate(record.eta[0]):
                row[f'eta_{k}'] = value
            for k, value in enumerate(record.eta_tilde[0]):
                row[f'eta_tilde_{k}'] = value
            row['residual_base'] = record.residuals[0] if record.residuals else np.nan
            row['residual_conjugate'] = record.residuals[1] if record.residuals else np.nan
            row['graph_margin_left'] = record.graph_margin[0] if record.graph_margin else np.nan
            row['graph_margin_right'] = record.graph_margin[1] if record.graph_margin else np.nan
            row['converged'] = record.converged
            row['regular'] = record.regular
            rows.append(row)
        return pd.DataFrame(rows)


# --------------------------------------------------------------------------
# Conjugate times along one geodesic
# --------------------------------------------------------------------------

def _normal_svd(m: MetricModel, x: np.ndarray, jac_v: np.ndarray, djac_v: np.ndarray, basis: np.ndarray):
    """Singular data of the vertical block restricted to the normal space, in g-norms."""
    chol = np.linalg.cholesky(m.metric(x))
    block = np.swapaxes(chol, -1, -2) @ jac_v @ basis
    stacked = np.concatenate([block, np.swapaxes(chol, -1, -2) @ djac_v @ basis], axis=-2)
    scale = np.linalg.svd(stacked, compute_uv=False)[..., 0]
    return block, scale


def _ratio_at(frame: JacobiFrame, basis: np.ndarray, t: float) -> float:
    n = frame.dim
    x, _, jac, djac = frame.state_at(t)
    block, scale = _normal_svd(frame.metric, x, jac[:, :n], djac[:, :n], basis)
    return float(np.linalg.svd(block, compute_uv=False)[-1] / scale)


def _classify(frame: JacobiFrame, basis: np.ndarray, t: float, tol_rank: float):
    n = frame.dim
    x, _, jac, djac = frame.state_at(t)
    block, scale = _normal_svd(frame.metric, x, jac[:, :n], djac[:, :n], basis)
    _, svals, vt = np.linalg.svd(block, full_matrices=False)
    order = int(np.count_nonzero(svals < tol_rank * scale))
    size = max(order, 1)
    kernel = basis @ vt[-size:].T
    return svals, order, kernel, float(svals[-1] / scale)


def conjugate_times(m: MetricModel, trace, frame: JacobiFrame, tol_rank: float = TOL_RANK,
                    max_pairs: Optional[int] = None) -> List[ConjugateTime]:
    """
    Conjugate times of the trace's start point along the trace.

    The indicator is the smallest g-singular value of the vertical Jacobi
    block on the normal space, relative to the largest singular value of the
    stacked (J, nabla J) block. Local minima on the nodes are polished with
    a bounded scalar minimisation; the order counts singular values below
    tol_rank at the polished time.
    """
    basis = orthonormal_complement(m, frame.positions[0], frame.velocities[0])
    jac_v, djac_v = frame.vertical_block()
    blocks, scales = _normal_svd(m, frame.positions, jac_v, djac_v, basis)
    ratios = np.linalg.svd(blocks, compute_uv=False)[:, -1] / scales
    times = frame.times
    found: List[ConjugateTime] = []

    last = len(times) - 1
    for i in range(1, last + 1):
        right = ratios[i + 1] if i < last else np.inf
        if not (ratios[i] <= ratios[i - 1] and ratios[i] <= right):
            continue
        spacing = max(times[i] - times[i - 1], times[min(i + 1, last)] - times[i])
        if ratios[i] > 2.0 * spacing:
            continue
        lo, hi = times[i - 1], times[min(i + 1, last)]
        result = minimize_scalar(lambda t: _ratio_at(frame, basis, t) ** 2, bounds=(lo, hi),
                                 method='bounded', options={'xatol': 1e-12})
        t_star = float(result.x)
        svals, order, kernel, ratio = _classify(frame, basis, t_star, tol_rank)
        converged = ratio < tol_rank
        if i == last and not converged:
            continue
        if not converged:
            logger.warning(f"Conjugate time polish near t={t_star:.6f} stalled at ratio {ratio:.2e}")
        if found and abs(found[-1].time - t_star) < 1e-9:
            continue
        found.append(ConjugateTime(t_star, max(order, 1), kernel, svals, ratio, converged))
        if max_pairs is not None and len(found) >= max_pairs:
            break
    return found


def dense_scan_times(m: MetricModel, frame: JacobiFrame, factor: int = 10,
                     tol_rank: float = TOL_RANK) -> List[float]:
    """
    Reference conjugate times from a refined scan of the indicator.

    The squared indicator is sampled at `factor` times the node density and
    each sampled dip is located by the vertex of a parabola through it.
    """
    basis = orthonormal_complement(m, frame.positions[0], frame.velocities[0])
    count = factor * (len(frame.times) - 1) + 1
    times = np.linspace(frame.times[0], frame.times[-1], count)
    values = np.array([_ratio_at(frame, basis, t) ** 2 for t in times])
    dips = []
    for i in range(1, count - 1):
        if values[i] <= values[i - 1] and values[i] <= values[i + 1]:
            y0, y1, y2 = values[i - 1], values[i], values[i + 1]
            curvature = y0 - 2.0 * y1 + y2
            step = times[1] - times[0]
            offset = 0.5 * step * (y0 - y2) / curvature if curvature > 0 else 0.0
            t_star = times[i] + offset
            if _ratio_at(frame, basis, t_star) < math.sqrt(tol_rank):
                dips.append(float(t_star))
    return dips


def covector_map(m: MetricModel, frame: JacobiFrame, kernel: np.ndarray, t: float
                 ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Covectors (eta, eta~) for vertical kernel vectors a.

    eta = a^i g_ik dx^k at the base point and eta~ = flat(nabla J(t)) at the
    conjugate point, J being the Jacobi field with J(0) = 0, nabla J(0) = a.

    Returns:
        arrays (k, n): one covector pair per kernel column
    """
    n = frame.dim
    g0 = m.metric(frame.positions[0])
    x_t, _, _, djac = frame.state_at(t)
    eta = (g0 @ kernel).T
    eta_tilde = (m.metric(x_t) @ djac[:, :n] @ kernel).T
    return eta, eta_tilde


def find_conjugate_records(m: MetricModel, d: DomainModel, s: PhaseState, settings: FlowSettings,
                           tol_rank: float = TOL_RANK, max_pairs: Optional[int] = 1,
                           params: Optional[np.ndarray] = None) -> List[ConjugateRecord]:
    """Trace s to the boundary and return its conjugate records in time order."""
    trace = trace_geodesic(m, d, s, settings)
    frame = jacobi_propagate(m, trace)
    records = []
    for hit in conjugate_times(m, trace, frame, tol_rank, max_pairs):
        x_t, v_t, _, _ = frame.state_at(hit.time)
        v_t = v_t / m.norm(x_t, v_t)
        eta, eta_tilde = covector_map(m, frame, hit.kernel, hit.time)
        records.append(ConjugateRecord(
            base=PhaseState(trace.positions[0], trace.velocities[0]),
            conjugate=PhaseState(x_t, v_t),
            time=hit.time,
            order=hit.order,
            singular_values=hit.singular_values,
            kernel=hit.kernel,
            eta=eta,
            eta_tilde=eta_tilde,
            converged=hit.converged,
            params=np.zeros(0) if params is None else np.asarray(params, dtype=float),
        ))
    return records


def reverse_record(m: MetricModel, d: DomainModel, record: ConjugateRecord, settings: FlowSettings,
                   tol_rank: float = TOL_RANK) -> Optional[ConjugateRecord]:
    """
    Rerun the search from v~ backward in time.

    Returns the record (v~, v, -s) found nearest to |s|, or None.
    """
    start = PhaseState(record.conjugate.x, -np.asarray(record.conjugate.v))
    candidates = find_conjugate_records(m, d, start, settings, tol_rank, max_pairs=None)
    if not candidates:
        return None
    best = min(candidates, key=lambda r: abs(r.time - abs(record.time)))
    return replace(best,
                   base=PhaseState(record.conjugate.x, np.asarray(record.conjugate.v)),
                   conjugate=PhaseState(best.conjugate.x, -np.asarray(best.conjugate.v)),
                   time=-best.time)


# --------------------------------------------------------------------------
# Common-covector check
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EtalemReport:
    residual_base: float
    residual_conjugate: float
    xi: np.ndarray
    step: float
    passed: bool
    failure: Optional[str] = None


class _StencilExit(GeodesicError):
    pass


def _phase_directions(m: MetricModel, x: np.ndarray, v: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Chart directions of SM at (x, v): n position moves and n - 1 normal direction tilts."""
    n = len(x)
    tilts = orthonormal_complement(m, x, v)
    moves = [(e, np.zeros(n)) for e in np.eye(n)]
    moves += [(np.zeros(n), tilts[:, j]) for j in range(n - 1)]
    return moves


def _footpoint_jacobian(m: MetricModel, d: DomainModel, state: PhaseState, step: float,
                        settings: FlowSettings) -> Tuple[np.ndarray, np.ndarray]:
    """
    Central-difference derivative of the footpoint map at a phase state.

    The footpoint is embedded as (point, direction) in R^{2n}.

    Returns:
        DF (2n, 2n - 1) and D pi (n, 2n - 1) in the chart of _phase_directions
    """
    x = np.asarray(state.x, dtype=float)
    v = np.asarray(state.v, dtype=float)
    moves = _phase_directions(m, x, v)
    xs, vs = [], []
    for sign in (1.0, -1.0):
        for dx, dv in moves:
            xp = x + sign * step * dx
            vp = v + sign * step * dv
            vp = vp / m.norm(xp, vp)
            xs.append(xp)
            vs.append(vp)
    xs = np.array(xs)
    if np.any(d.defining_value(xs) >= 0.0):
        raise _StencilExit("finite-difference stencil leaves the domain")
    batch = locate_footpoints(m, d, xs, np.array(vs), settings)
    embedded = np.concatenate([batch.points, batch.directions], axis=-1)
    half = len(moves)
    df = ((embedded[:half] - embedded[half:]) / (2.0 * step)).T
    dpi = np.stack([dx for dx, _ in moves], axis=-1)
    return df, dpi


def etalem_residuals(m: MetricModel, d: DomainModel, base: PhaseState, conjugate: PhaseState,
                     eta: np.ndarray, eta_tilde: np.ndarray, settings: FlowSettings,
                     step: float = ETALEM_STEP, max_shrinks: int = ETALEM_MAX_SHRINKS,
                     tolerance: float = ETALEM_TOLERANCE) -> EtalemReport:
    """
    Least-squares test for one xi with D pi^t eta = DF^t xi at v and
    D pi^t eta~ = DF^t xi at v~.

    Residuals are relative to |D pi^t eta| and |D pi^t eta~|.
    """
    current = step
    for attempt in range(max_shrinks + 1):
        try:
            df_base, dpi_base = _footpoint_jacobian(m, d, base, current, settings)
            df_conj, dpi_conj = _footpoint_jacobian(m, d, conjugate, current, settings)
            break
        except (_StencilExit, DomainError):
            logger.info(f"Stencil at step {current:.2e} left the domain (attempt {attempt + 1})")
            current *= 0.25
    else:
        return EtalemReport(np.inf, np.inf, np.zeros(0), current, False, failure='stencil')

    rhs_base = dpi_base.T @ np.asarray(eta, dtype=float)
    rhs_conj = dpi_conj.T @ np.asarray(eta_tilde, dtype=float)
    system = np.concatenate([df_base.T, df_conj.T], axis=0)
    rhs = np.concatenate([rhs_base, rhs_conj])
    xi, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    half = len(rhs_base)
    fitted = system @ xi
    residual_base = float(np.linalg.norm(fitted[:half] - rhs_base) / np.linalg.norm(rhs_base))
    residual_conj = float(np.linalg.norm(fitted[half:] - rhs_conj) / np.linalg.norm(rhs_conj))
    passed = max(residual_base, residual_conj) < tolerance
    return EtalemReport(residual_base, residual_conj, xi, current, passed)


def etalem_check(m: MetricModel, d: DomainModel, record: ConjugateRecord, settings: FlowSettings,
                 step: float = ETALEM_STEP, max_shrinks: int = ETALEM_MAX_SHRINKS) -> EtalemReport:
    """Check the record's covector pair against a common boundary covector; stores residuals."""
    report = etalem_residuals(m, d, record.base, record.conjugate, record.eta[0], record.eta_tilde[0],
                              settings, step, max_shrinks)
    record.residuals = (report.residual_base, report.residual_conjugate)
    if not report.passed:
        logger.warning(f"Record at s={record.time:.6f} failed the common-covector check "
                       f"(residuals {report.residual_base:.2e}, {report.residual_conjugate:.2e})")
    return report


# --------------------------------------------------------------------------
# Locus scans
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FanSpec:
    """
    Fan of base states: boundary rays advanced by `base_offset` into the domain.

    2D: boundary_counts = (n_theta,), direction_counts = (n_alpha,) over
    [-alpha_max, alpha_max]. 3D: boundary_counts = (n_theta, n_phi),
    direction_counts = (n_alpha, n_beta) with alpha in (0, alpha_max].
    """

    boundary_counts: Tuple[int, ...] = (16,)
    direction_counts: Tuple[int, ...] = (9,)
    alpha_max: float = 0.3
    base_offset: float = 0.1
    stencil_radius: float = STENCIL_RADIUS
    max_pairs: int = 1
    max_rays: Optional[int] = None

    def parameters(self, dim: int) -> np.ndarray:
        if dim == 2:
            (nt,), (na,) = self.boundary_counts, self.direction_counts
            theta = 2.0 * np.pi * np.arange(nt) / nt
            alpha = np.linspace(-self.alpha_max, self.alpha_max, na) if na > 1 else np.zeros(1)
            axes = [theta, alpha]
        else:
            (nt, nphi), (na, nb) = self.boundary_counts, self.direction_counts
            theta = np.pi * (np.arange(nt) + 0.5) / nt
            phi = 2.0 * np.pi * np.arange(nphi) / nphi
            alpha = self.alpha_max * (np.arange(na) + 1.0) / na
            beta = 2.0 * np.pi * np.arange(nb) / nb
            axes = [theta, phi, alpha, beta]
        mesh = np.meshgrid(*axes, indexing='ij')
        return np.stack([a.ravel() for a in mesh], axis=-1)


def base_state(m: MetricModel, d: DomainModel, params: np.ndarray, offset: float,
               settings: FlowSettings) -> PhaseState:
    """Boundary ray with the given parameters, flowed `offset` into the domain."""
    point, direction, _ = rays_from_parameters(d, m, np.asarray(params, dtype=float)[None])
    state = PhaseState(point[0], direction[0])
    count = max(1, math.ceil(offset / settings.step))
    for _ in range(count):
        state = flow_step(m, state, offset / count, d, settings)
    return state


def _first_order(m, d, params, fan: FanSpec, settings, tol_rank) -> Optional[int]:
    try:
        records = find_conjugate_records(m, d, base_state(m, d, params, fan.base_offset, settings),
                                         settings, tol_rank, max_pairs=1)
    except GeodesicError:
        return None
    return records[0].order if records else None


def locus_scan(m: MetricModel, d: DomainModel, fan: FanSpec, settings: FlowSettings,
               tol_rank: float = TOL_RANK) -> LocusSample:
    """
    Conjugate records over a fan of rays with a regularity probe.

    Each record's order is compared with the first record on the 2(2n-2)
    neighbouring rays at +-stencil_radius in every ray parameter; a record
    whose neighbours disagree (or have no conjugate point) is flagged
    singular.
    """
    params = fan.parameters(d.dim)
    stencil_size = 2 * (2 * d.dim - 2)
    budget_rays = len(params)
    truncated = False
    if fan.max_rays is not None and len(params) * (1 + stencil_size) > fan.max_rays:
        budget_rays = max(0, fan.max_rays // (1 + stencil_size))
        truncated = True
        logger.warning(f"Locus scan budget allows {budget_rays} of {len(params)} fan rays")
    params = params[:budget_rays]
    logger.info(f"Scanning {len(params)} fan rays for conjugate points")

    def scan(start, stop):
        found = []
        for p in params[start:stop]:
            state = base_state(m, d, p, fan.base_offset, settings)
            records = find_conjugate_records(m, d, state, settings, tol_rank, fan.max_pairs, params=p)
            if not records:
                continue
            first = records[0]
            for k in range(len(p)):
                for sign in (1.0, -1.0):
                    neighbour = p.copy()
                    neighbour[k] += sign * fan.stencil_radius
                    if _first_order(m, d, neighbour, fan, settings, tol_rank) != first.order:
                        first.regular = False
            for record in records[1:]:
                record.regular = first.regular
            found.extend(records)
        return found

    chunks = batched_map(scan, len(params), replace(settings, chunk_size=1))
    records = [r for chunk in chunks for r in chunk]
    sample = LocusSample(records, rays_scanned=len(params), truncated=truncated)
    logger.info(f"Locus scan found {len(records)} records ({sample.singular_count} singular)")
    return sample


# --------------------------------------------------------------------------
# Canonical graph test
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GraphReport:
    index: int
    passed: bool
    left_margin: float
    right_margin: float
    reason: Optional[str] = None


def _relation_point(m: MetricModel, d: DomainModel, params: np.ndarray, offset: float,
                    time_hint: float, settings: FlowSettings, tol_rank: float) -> Optional[np.ndarray]:
    """(x, eta, x~, eta~) for the first conjugate record nearest time_hint, eta g-normalised."""
    state = base_state(m, d, params, offset, settings)
    records = find_conjugate_records(m, d, state, settings, tol_rank, max_pairs=None)
    records = [r for r in records if r.order == 1]
    if not records:
        return None
    record = min(records, key=lambda r: abs(r.time - time_hint))
    return _normalised_point(m, record)


def _normalised_point(m: MetricModel, record: ConjugateRecord) -> np.ndarray:
    eta = record.eta[0]
    size = math.sqrt(float(eta @ np.linalg.solve(m.metric(record.base.x), eta)))
    return np.concatenate([record.base.x, eta / size, record.conjugate.x, record.eta_tilde[0] / size])


def graph_test(m: MetricModel, d: DomainModel, sample: LocusSample, fan: FanSpec, settings: FlowSettings,
               tol_graph: float = TOL_GRAPH, tol_rank: float = TOL_RANK,
               step: Optional[float] = None) -> List[GraphReport]:
    """
    Conditioning of both projections of the order-one relation.

    The relation is parameterised near each record by its ray parameters,
    the base offset along the geodesic and the covector scale. Finite
    differences give the 4n x 2n Jacobian; the relative smallest singular
    values of its (x, eta) and (x~, eta~) halves are the margins.
    """
    step = fan.stencil_radius if step is None else step
    n = d.dim
    reports = []
    for index, record in enumerate(sample.records):
        if record.order != 1:
            reports.append(GraphReport(index, False, 0.0, 0.0, reason='order'))
            continue
        centre = _normalised_point(m, record)
        columns = []
        degenerate = False
        for k in range(len(record.params) + 1):
            pair = []
            for sign in (1.0, -1.0):
                params = record.params.copy()
                offset = fan.base_offset
                if k < len(record.params):
                    params[k] += sign * step
                else:
                    offset += sign * step
                try:
                    point = _relation_point(m, d, params, offset, record.time, settings, tol_rank)
                except GeodesicError:
                    point = None
                if point is None:
                    degenerate = True
                    break
                if point[n:2 * n] @ centre[n:2 * n] < 0:
                    point[n:2 * n] *= -1.0
                    point[3 * n:] *= -1.0
                pair.append(point)
            if degenerate:
                break
            columns.append((pair[0] - pair[1]) / (2.0 * step))
        if degenerate:
            logger.warning(f"Record {index}: relation parameterisation degenerate")
            reports.append(GraphReport(index, False, 0.0, 0.0, reason='degenerate'))
            continue
        scale_column = np.concatenate([np.zeros(n), centre[n:2 * n], np.zeros(n), centre[3 * n:]])
        jacobian = np.stack(columns + [scale_column], axis=-1)
        margins = []
        for rows in (slice(0, 2 * n), slice(2 * n, 4 * n)):
            svals = np.linalg.svd(jacobian[rows], compute_uv=False)
            margins.append(float(svals[-1] / svals[0]))
        passed = min(margins) > tol_graph
        record.graph_margin = (margins[0], margins[1])
        reports.append(GraphReport(index, passed, margins[0], margins[1], None if passed else 'margin'))
    passed = sum(r.passed for r in reports)
    logger.info(f"Graph test: {passed}/{len(reports)} records pass")
    return reports


def order_bound_holds(records: Sequence[ConjugateRecord], dim: int) -> bool:
    return all(1 <= r.order <= dim - 1 for r in records)
