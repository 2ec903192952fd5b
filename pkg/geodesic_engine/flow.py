"""
Geodesic Flow

This module integrates the geodesic flow on the unit sphere bundle: single
steps, batched ray integration to the boundary, exit times, the footpoint
map onto the inward boundary bundle, the exponential map and Jacobi frames
that realise the derivative of the flow.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import BISECTION_ITERATIONS, DEFAULT_FLOW_SETTINGS
from geodesic_engine.errors import DomainError, PreconditionError, TrappedGeodesicError
from geodesic_engine.manifold import DomainModel, MetricModel, boundary_normals

logger = logging.getLogger(__name__)

SegmentCallback = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class FlowSettings:
    """Integrator and quadrature knobs shared by every ray computation."""

    step: float = DEFAULT_FLOW_SETTINGS['step']
    rho_pad: float = DEFAULT_FLOW_SETTINGS['rho_pad']
    mu_min: float = DEFAULT_FLOW_SETTINGS['mu_min']
    boundary_tol: float = DEFAULT_FLOW_SETTINGS['boundary_tol']
    unit_speed_tol: float = DEFAULT_FLOW_SETTINGS['unit_speed_tol']
    max_time_factor: float = DEFAULT_FLOW_SETTINGS['max_time_factor']
    chunk_size: int = DEFAULT_FLOW_SETTINGS['chunk_size']
    workers: int = DEFAULT_FLOW_SETTINGS['workers']

    def __post_init__(self):
        for name in ('step', 'rho_pad', 'mu_min', 'boundary_tol', 'unit_speed_tol', 'max_time_factor'):
            if getattr(self, name) <= 0:
                raise ValueError(f"Flow setting '{name}' must be positive")
        if self.mu_min >= 1.0:
            raise ValueError("Grazing cutoff mu_min must be below 1")
        if self.chunk_size < 1 or self.workers < 1:
            raise ValueError("chunk_size and workers must be at least 1")

    @classmethod
    def from_mapping(cls, values: Dict[str, Any]) -> 'FlowSettings':
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise KeyError(f"Unknown flow setting '{key}'")
            kwargs[key] = int(value) if key in ('chunk_size', 'workers') else float(value)
        return cls(**kwargs)

    def with_step(self, step: float) -> 'FlowSettings':
        return replace(self, step=step)

    def as_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class PhaseState:
    """A point of SM: chart position x and a g-unit vector v."""

    x: np.ndarray
    v: np.ndarray

    def reversed(self) -> 'PhaseState':
        return PhaseState(self.x, -np.asarray(self.v))


@dataclass(frozen=True)
class BoundaryRay:
    point: np.ndarray
    direction: np.ndarray
    mu: float
    params: np.ndarray
    tau: float = 0.0


@dataclass(frozen=True)
class RayBatchResult:
    exit_time: np.ndarray
    exit_x: np.ndarray
    exit_v: np.ndarray
    steps: np.ndarray


@dataclass(frozen=True)
class FootpointBatch:
    points: np.ndarray
    directions: np.ndarray
    mu: np.ndarray
    params: np.ndarray
    tau_minus: np.ndarray


@dataclass
class GeodesicTrace:
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    start_on_boundary: bool
    end_on_boundary: bool

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    @property
    def start(self) -> PhaseState:
        return PhaseState(self.positions[0], self.velocities[0])

    @property
    def end(self) -> PhaseState:
        return PhaseState(self.positions[-1], self.velocities[-1])

    def speed_drift(self, m: MetricModel) -> float:
        return float(np.max(np.abs(m.norm(self.positions, self.velocities) - 1.0)))


# --------------------------------------------------------------------------
# Integrator
# --------------------------------------------------------------------------

def _rk4(m: MetricModel, x: np.ndarray, v: np.ndarray, dt) -> Tuple[np.ndarray, np.ndarray]:
    dt = np.asarray(dt, dtype=float)
    if dt.ndim:
        dt = dt[..., None]
    a1 = m.geodesic_acceleration(x, v)
    v2 = v + 0.5 * dt * a1
    a2 = m.geodesic_acceleration(x + 0.5 * dt * v, v2)
    v3 = v + 0.5 * dt * a2
    a3 = m.geodesic_acceleration(x + 0.5 * dt * v2, v3)
    v4 = v + dt * a3
    a4 = m.geodesic_acceleration(x + dt * v3, v4)
    x_new = x + dt / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4)
    v_new = v + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    return x_new, v_new


def _renormalize(m: MetricModel, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    return v / m.norm(x, v)[..., None]


def _hermite_midpoint(xa, va, xb, vb, dt) -> Tuple[np.ndarray, np.ndarray]:
    """Cubic Hermite midpoint position and velocity of a step of length dt."""
    dt = np.asarray(dt, dtype=float)
    if dt.ndim:
        dt = dt[..., None]
    xm = 0.5 * (xa + xb) + dt / 8.0 * (va - vb)
    vm = 1.5 * (xb - xa) / dt - 0.25 * (va + vb)
    return xm, vm


def flow_step(m: MetricModel, s: PhaseState, dt: float, d: Optional[DomainModel] = None,
              settings: Optional[FlowSettings] = None) -> PhaseState:
    """
    Advance a phase state by one RK4 step of the geodesic equation.

    Args:
        m: Metric model
        s: Starting phase state (unit speed)
        dt: Time step, negative values flow backward
        d: Optional domain; when given, leaving the padded domain raises
        settings: Flow settings supplying the padding

    Returns:
        The advanced phase state with |v|_g renormalised to 1
    """
    settings = settings or FlowSettings()
    x = np.asarray(s.x, dtype=float)
    v = np.asarray(s.v, dtype=float)
    x_new, v_new = _rk4(m, x, v, dt)
    if d is not None and np.any(d.defining_value(x_new) > settings.rho_pad):
        raise DomainError(f"Flow step left the padded domain at {np.round(x_new, 6).tolist()}")
    return PhaseState(x_new, _renormalize(m, x_new, v_new))


def _locate_exit(m: MetricModel, d: DomainModel, x: np.ndarray, v: np.ndarray, h: float) -> np.ndarray:
    """Bisect the first time in (0, h] at which rho changes sign along each ray."""
    lo = np.zeros(len(x))
    hi = np.full(len(x), h)
    for _ in range(BISECTION_ITERATIONS):
        mid = 0.5 * (lo + hi)
        x_mid, _ = _rk4(m, x, v, mid)
        outside = d.defining_value(x_mid) > 0.0
        hi = np.where(outside, mid, hi)
        lo = np.where(outside, lo, mid)
    return 0.5 * (lo + hi)


def integrate_rays(m: MetricModel, d: DomainModel, x0: np.ndarray, v0: np.ndarray,
                   settings: FlowSettings, direction: int = 1,
                   on_segment: Optional[SegmentCallback] = None) -> RayBatchResult:
    """
    Integrate a batch of geodesics until each one leaves the domain.

    Every completed step (including the final partial step that ends on the
    boundary) is reported to `on_segment(x_mid, v_mid, ray_index, dt)` with
    the Hermite midpoint state, so callers accumulate midpoint-rule line
    integrals without storing traces. Velocities passed to the callback and
    returned exit velocities are forward-time velocities.

    Returns:
        RayBatchResult with signed exit times
    """
    sign = 1.0 if direction >= 0 else -1.0
    xa = np.array(x0, dtype=float).reshape(-1, m.dim)
    va = sign * np.array(v0, dtype=float).reshape(-1, m.dim)
    count = len(xa)
    h = settings.step
    budget = settings.max_time_factor * d.diameter()

    elapsed = np.zeros(count)
    steps = np.zeros(count, dtype=int)
    exit_x = np.empty((count, m.dim))
    exit_v = np.empty((count, m.dim))
    active = np.arange(count)

    while active.size:
        xn, vn = _rk4(m, xa, va, h)
        vn = _renormalize(m, xn, vn)
        crossed = d.defining_value(xn) > 0.0

        if np.any(crossed):
            hit = np.flatnonzero(crossed)
            dt = _locate_exit(m, d, xa[hit], va[hit], h)
            xe, ve = _rk4(m, xa[hit], va[hit], dt)
            ve = _renormalize(m, xe, ve)
            if on_segment is not None:
                xm, vm = _hermite_midpoint(xa[hit], va[hit], xe, ve, dt)
                on_segment(xm, sign * vm, active[hit], dt)
            rays = active[hit]
            elapsed[rays] += dt
            steps[rays] += 1
            exit_x[rays] = xe
            exit_v[rays] = sign * ve

        keep = ~crossed
        if np.any(keep):
            if on_segment is not None:
                xm, vm = _hermite_midpoint(xa[keep], va[keep], xn[keep], vn[keep], h)
                on_segment(xm, sign * vm, active[keep], np.full(int(keep.sum()), h))
            elapsed[active[keep]] += h
            steps[active[keep]] += 1
        active = active[keep]
        xa = xn[keep]
        va = vn[keep]
        if active.size and elapsed[active[0]] > budget:
            raise TrappedGeodesicError(
                f"{active.size} geodesics still inside after time {budget:.3g} "
                f"({settings.max_time_factor:g} x domain diameter)")

    return RayBatchResult(exit_time=sign * elapsed, exit_x=exit_x, exit_v=exit_v, steps=steps)


def batched_map(fn: Callable[[int, int], Any], count: int, settings: FlowSettings) -> List[Any]:
    """
    Apply fn(start, stop) to consecutive chunks of range(count).

    Results come back in chunk order whatever the worker count, so reductions
    over them are deterministic.
    """
    bounds = [(start, min(start + settings.chunk_size, count))
              for start in range(0, count, settings.chunk_size)]
    if settings.workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            return list(pool.map(lambda b: fn(*b), bounds))
    return [fn(start, stop) for start, stop in bounds]


def trace_geodesic(m: MetricModel, d: Optional[DomainModel], s: PhaseState,
                   settings: Optional[FlowSettings] = None,
                   t_max: Optional[float] = None) -> GeodesicTrace:
    """
    Record the geodesic from s forward in time.

    With a domain and no t_max the trace runs to the exit time tau_+. With
    t_max the trace runs exactly to that time (free flight); a domain given
    alongside t_max only bounds the flight by the padded domain.
    """
    settings = settings or FlowSettings()
    x = np.asarray(s.x, dtype=float)
    v = _renormalize(m, x, np.asarray(s.v, dtype=float))
    h = settings.step
    times = [0.0]
    positions = [x]
    velocities = [v]
    start_on_boundary = bool(d is not None and d.on_boundary(x, settings.boundary_tol))
    end_on_boundary = False

    if t_max is None and d is None:
        raise PreconditionError("trace_geodesic needs a domain or a time limit")
    budget = t_max if t_max is not None else settings.max_time_factor * d.diameter()
    free_flight = t_max is not None

    t = 0.0
    while True:
        dt = min(h, budget - t) if free_flight else h
        if dt <= 1e-15:
            break
        x_new, v_new = _rk4(m, x, v, dt)
        v_new = _renormalize(m, x_new, v_new)
        if d is not None:
            rho = float(d.defining_value(x_new))
            if free_flight and rho > settings.rho_pad:
                raise DomainError(f"Free flight left the padded domain at t={t + dt:.6g}")
            if not free_flight and rho > 0.0:
                dt = float(_locate_exit(m, d, x[None], v[None], dt)[0])
                x_new, v_new = _rk4(m, x, v, dt)
                v_new = _renormalize(m, x_new, v_new)
                end_on_boundary = True
        t += dt
        times.append(t)
        positions.append(x_new)
        velocities.append(v_new)
        x, v = x_new, v_new
        if end_on_boundary:
            break
        if not free_flight and t > budget:
            raise TrappedGeodesicError(f"Geodesic still inside after time {budget:.3g}")

    return GeodesicTrace(np.array(times), np.array(positions), np.array(velocities),
                         start_on_boundary, end_on_boundary)


def exit_time(m: MetricModel, d: DomainModel, s: PhaseState, direction: str = 'forward',
              settings: Optional[FlowSettings] = None) -> float:
    """Signed exit time tau_+ (forward) or tau_- (backward) of the geodesic through s."""
    settings = settings or FlowSettings()
    x = np.asarray(s.x, dtype=float)
    if d.defining_value(x) > settings.boundary_tol:
        raise PreconditionError("exit_time requires a starting point inside the domain")
    if direction not in ('forward', 'backward'):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    sign = 1 if direction == 'forward' else -1
    result = integrate_rays(m, d, x, s.v, settings, direction=sign)
    return float(result.exit_time[0])


def locate_footpoints(m: MetricModel, d: DomainModel, x: np.ndarray, v: np.ndarray,
                      settings: FlowSettings,
                      on_segment: Optional[SegmentCallback] = None) -> FootpointBatch:
    """Vectorised footpoint map F(x, v) = (gamma(tau_-), gamma'(tau_-))."""
    result = integrate_rays(m, d, x, v, settings, direction=-1, on_segment=on_segment)
    normals = boundary_normals(d, m, result.exit_x)
    mu = -np.einsum('...i,...ij,...j->...', result.exit_v, m.metric(result.exit_x), normals)
    params = ray_parameters(d, m, result.exit_x, result.exit_v)
    return FootpointBatch(result.exit_x, result.exit_v, mu, params, result.exit_time)


def footpoint(m: MetricModel, d: DomainModel, s: PhaseState,
              settings: Optional[FlowSettings] = None) -> BoundaryRay:
    """The inward boundary ray F(s) whose geodesic passes through s."""
    settings = settings or FlowSettings()
    if d.defining_value(np.asarray(s.x, dtype=float)) > settings.boundary_tol:
        raise PreconditionError("footpoint requires a starting point inside the domain")
    batch = locate_footpoints(m, d, np.asarray(s.x)[None], np.asarray(s.v)[None], settings)
    return BoundaryRay(batch.points[0], batch.directions[0], float(batch.mu[0]),
                       batch.params[0], float(batch.tau_minus[0]))


def exp_map(m: MetricModel, x: np.ndarray, w: np.ndarray, settings: Optional[FlowSettings] = None,
            d: Optional[DomainModel] = None) -> np.ndarray:
    """
    Exponential map exp_x(w) = gamma_{x, w/|w|}(|w|_g).

    The flight length is split into equal steps no longer than the flow step.
    """
    settings = settings or FlowSettings()
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    length = float(m.norm(x, w))
    if length == 0.0:
        return x.copy()
    count = max(1, math.ceil(length / settings.step))
    dt = length / count
    v = w / length
    for _ in range(count):
        x, v = _rk4(m, x, v, dt)
        v = _renormalize(m, x, v)
        if d is not None and d.defining_value(x) > settings.rho_pad:
            raise DomainError(f"exp_map left the padded domain at {np.round(x, 6).tolist()}")
    return x


# --------------------------------------------------------------------------
# Boundary ray parameterisation
# --------------------------------------------------------------------------

def _ginner(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum('...i,...ij,...j->...', a, g, b)


def boundary_frame(d: DomainModel, m: MetricModel, bparams: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Boundary points and g-orthonormal frames (e0 = inward normal, e1.. tangent).

    Returns:
        points (..., n) and frames (..., n, n) with frame vectors as columns
    """
    bparams = np.asarray(bparams, dtype=float)
    points = d.boundary_point(bparams)
    g = m.metric(points)
    tangents = d.boundary_tangents(bparams)
    e0 = -boundary_normals(d, m, points)
    seeds = [tangents[..., 0]]
    if d.dim == 3:
        seeds.append(np.cross(d.defining_gradient(points), tangents[..., 0]))
    frame = [e0]
    for seed in seeds:
        u = seed.copy()
        for e in frame:
            u = u - _ginner(g, u, e)[..., None] * e
        frame.append(u / np.sqrt(_ginner(g, u, u))[..., None])
    return points, np.stack(frame, axis=-1)


def rays_from_parameters(d: DomainModel, m: MetricModel, params: np.ndarray
                         ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Inward boundary rays from ray parameters.

    In 2D the parameters are (theta, alpha) with w = cos(alpha) e0 + sin(alpha) e1.
    In 3D they are (theta, phi, alpha, beta) with
    w = cos(alpha) e0 + sin(alpha) (cos(beta) e1 + sin(beta) e2).

    Returns:
        points, directions and mu = cos(alpha)
    """
    params = np.asarray(params, dtype=float)
    nb = d.dim - 1
    points, frame = boundary_frame(d, m, params[..., :nb])
    alpha = params[..., nb]
    if d.dim == 2:
        coeffs = np.stack([np.cos(alpha), np.sin(alpha)], axis=-1)
    else:
        beta = params[..., nb + 1]
        coeffs = np.stack([np.cos(alpha), np.sin(alpha) * np.cos(beta), np.sin(alpha) * np.sin(beta)], axis=-1)
    directions = np.einsum('...ij,...j->...i', frame, coeffs)
    return points, directions, np.cos(alpha)


def ray_parameters(d: DomainModel, m: MetricModel, points: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Inverse of rays_from_parameters for boundary points and inward directions."""
    bparams = d.boundary_parameters(points)
    _, frame = boundary_frame(d, m, bparams)
    g = m.metric(points)
    coeffs = np.einsum('...ij,...ik,...k->...j', frame, g, directions)
    if d.dim == 2:
        alpha = np.arctan2(coeffs[..., 1], coeffs[..., 0])
        return np.concatenate([bparams, alpha[..., None]], axis=-1)
    alpha = np.arccos(np.clip(coeffs[..., 0], -1.0, 1.0))
    beta = np.mod(np.arctan2(coeffs[..., 2], coeffs[..., 1]), 2.0 * np.pi)
    return np.concatenate([bparams, alpha[..., None], beta[..., None]], axis=-1)


@dataclass
class RayGrid:
    """
    Tensor-product parameter grid on the inward boundary bundle.

    Weights carry the Santalo density mu dSigma so that sinogram inner
    products are plain weighted sums.
    """

    axes: List[np.ndarray]
    periodic: Tuple[bool, ...]
    shape: Tuple[int, ...]
    params: np.ndarray
    points: np.ndarray
    directions: np.ndarray
    mu: np.ndarray
    weights: np.ndarray
    alpha_max: float
    names: Tuple[str, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.params)

    def subset(self, index: np.ndarray) -> 'RayGrid':
        return RayGrid(self.axes, self.periodic, (len(index),), self.params[index], self.points[index],
                       self.directions[index], self.mu[index], self.weights[index], self.alpha_max, self.names)

    @classmethod
    def build(cls, d: DomainModel, m: MetricModel, counts: Sequence[int], mu_min: float) -> 'RayGrid':
        """
        Args:
            d: Domain
            m: Metric
            counts: (n_theta, n_alpha) in 2D, (n_theta, n_phi, n_alpha, n_beta) in 3D
            mu_min: Grazing cutoff; inward angles satisfy cos(alpha) >= mu_min
        """
        alpha_max = float(np.arccos(mu_min))
        if d.dim == 2:
            if len(counts) != 2:
                raise ValueError("2D ray grids need (n_theta, n_alpha)")
            nt, na = counts
            theta = 2.0 * np.pi * np.arange(nt) / nt
            d_alpha = 2.0 * alpha_max / na
            alpha = -alpha_max + d_alpha * (np.arange(na) + 0.5)
            axes = [theta, alpha]
            periodic = (True, False)
            names = ('theta', 'alpha')
        else:
            if len(counts) != 4:
                raise ValueError("3D ray grids need (n_theta, n_phi, n_alpha, n_beta)")
            nt, nphi, na, nb = counts
            theta = np.pi * (np.arange(nt) + 0.5) / nt
            phi = 2.0 * np.pi * np.arange(nphi) / nphi
            alpha = alpha_max * (np.arange(na) + 0.5) / na
            beta = 2.0 * np.pi * np.arange(nb) / nb
            axes = [theta, phi, alpha, beta]
            periodic = (False, True, False, True)
            names = ('theta', 'phi', 'alpha', 'beta')

        mesh = np.meshgrid(*axes, indexing='ij')
        params = np.stack([a.ravel() for a in mesh], axis=-1)
        points, directions, mu = rays_from_parameters(d, m, params)
        nb_dims = d.dim - 1
        tangents = d.boundary_tangents(params[:, :nb_dims])
        g = m.metric(points)
        area = np.sqrt(np.linalg.det(np.einsum('...ia,...ij,...jb->...ab', tangents, g, tangents)))
        if d.dim == 2:
            cell = (2.0 * np.pi / nt) * (2.0 * alpha_max / na)
            weights = area * mu * cell
        else:
            cell = (np.pi / nt) * (2.0 * np.pi / nphi) * (alpha_max / na) * (2.0 * np.pi / nb)
            weights = area * np.sin(params[:, 2]) * mu * cell
        logger.info(f"Built ray grid {tuple(counts)} with {len(params)} rays (alpha_max={alpha_max:.4f})")
        return cls(axes, periodic, tuple(counts), params, points, directions, mu, weights, alpha_max, names)


def sphere_measure(dim: int) -> float:
    return 2.0 * np.pi if dim == 2 else 4.0 * np.pi


def sphere_rule(dim: int, count: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Quadrature on the Euclidean unit sphere S^{n-1}.

    Midpoint-shifted equispaced angles on the circle, a Fibonacci lattice
    on S^2. Weights are equal and sum to the sphere measure.
    """
    if count < 1:
        raise ValueError("Sphere rule needs at least one node")
    j = np.arange(count)
    if dim == 2:
        angle = 2.0 * np.pi * (j + 0.5) / count
        nodes = np.stack([np.cos(angle), np.sin(angle)], axis=-1)
    elif dim == 3:
        increment = np.pi * (3.0 - np.sqrt(5.0))
        z = 1.0 - (2.0 * j + 1.0) / count
        r = np.sqrt(1.0 - z ** 2)
        angle = j * increment
        nodes = np.stack([r * np.cos(angle), r * np.sin(angle), z], axis=-1)
    else:
        raise ValueError(f"Unsupported dimension {dim}")
    return nodes, np.full(count, sphere_measure(dim) / count)


def unit_directions(m: MetricModel, x: np.ndarray, units: np.ndarray) -> np.ndarray:
    """Map Euclidean unit vectors to g-unit vectors at each x, shape (..., J, n)."""
    chol = np.linalg.cholesky(m.metric(x))
    inv_t = np.swapaxes(np.linalg.inv(chol), -1, -2)
    return np.einsum('...ab,jb->...ja', inv_t, units)


def volume_sm(m: MetricModel, d: DomainModel) -> float:
    """vol(SM) = vol_g(M) * |S^{n-1}|."""
    from geodesic_engine.manifold import metric_volume
    return metric_volume(m, d) * sphere_measure(d.dim)


def santalo_volume(m: MetricModel, d: DomainModel, rays: RayGrid, settings: FlowSettings) -> float:
    """Quadrature of tau_+ against the Santalo density over the inward boundary bundle."""
    def chunk(start, stop):
        result = integrate_rays(m, d, rays.points[start:stop], rays.directions[start:stop], settings)
        return result.exit_time

    tau = np.concatenate(batched_map(chunk, len(rays), settings))
    return float(np.sum(tau * rays.weights))


# --------------------------------------------------------------------------
# Jacobi fields
# --------------------------------------------------------------------------

def _variation_rhs(m: MetricModel, x, v, dx, dv):
    gamma = m.christoffel(x)
    d_gamma = m.christoffel_derivative(x)
    acc = m.geodesic_acceleration(x, v)
    d_acc = (-np.einsum('kijm,i,j,mc->kc', d_gamma, v, v, dx)
             - 2.0 * np.einsum('kij,i,jc->kc', gamma, v, dv))
    return v, acc, dv, d_acc


def _coupled_rk4(m: MetricModel, x, v, dx, dv, dt):
    k1 = _variation_rhs(m, x, v, dx, dv)
    s2 = [a + 0.5 * dt * b for a, b in zip((x, v, dx, dv), k1)]
    k2 = _variation_rhs(m, *s2)
    s3 = [a + 0.5 * dt * b for a, b in zip((x, v, dx, dv), k2)]
    k3 = _variation_rhs(m, *s3)
    s4 = [a + dt * b for a, b in zip((x, v, dx, dv), k3)]
    k4 = _variation_rhs(m, *s4)
    return [a + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
            for a, b1, b2, b3, b4 in zip((x, v, dx, dv), k1, k2, k3, k4)]


def _covariant(m: MetricModel, x, v, dx, dv):
    """J = dx and nabla J = dv + Gamma(v, dx)."""
    return dx, dv + np.einsum('kij,i,jc->kc', m.christoffel(x), v, dx)


@dataclass
class JacobiFrame:
    """
    Matrix Jacobi fields along a geodesic.

    Columns 0..n-1 start with J(0) = 0, nabla J(0) = I (the vertical block
    realising D exp); columns n..2n-1 start with J(0) = I, nabla J(0) = 0.
    The raw coordinate variations (dx, dv) are kept to restart the coupled
    integration at any intermediate time.
    """

    metric: MetricModel
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    dx: np.ndarray
    dv: np.ndarray
    jacobi: np.ndarray
    jacobi_derivative: np.ndarray

    @property
    def dim(self) -> int:
        return self.positions.shape[-1]

    def vertical_block(self) -> Tuple[np.ndarray, np.ndarray]:
        n = self.dim
        return self.jacobi[:, :, :n], self.jacobi_derivative[:, :, :n]

    def horizontal_block(self) -> Tuple[np.ndarray, np.ndarray]:
        n = self.dim
        return self.jacobi[:, :, n:], self.jacobi_derivative[:, :, n:]

    def wronskian(self) -> np.ndarray:
        """W(t) = J^T g nabla J - (nabla J)^T g J for all basis pairs."""
        g = self.metric.metric(self.positions)
        left = np.einsum('tka,tkl,tlb->tab', self.jacobi, g, self.jacobi_derivative)
        return left - np.swapaxes(left, -1, -2)

    def wronskian_drift(self) -> float:
        w = self.wronskian()
        return float(np.max(np.abs(w - w[0])))

    def state_at(self, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(x, v, J, nabla J) at time t by a partial coupled step from the preceding node."""
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise PreconditionError(f"Time {t} outside the frame range [{self.times[0]}, {self.times[-1]}]")
        i = int(np.clip(np.searchsorted(self.times, t, side='right') - 1, 0, len(self.times) - 2))
        dt = t - self.times[i]
        if dt == 0.0:
            return self.positions[i], self.velocities[i], self.jacobi[i], self.jacobi_derivative[i]
        x, v, dx, dv = _coupled_rk4(self.metric, self.positions[i], self.velocities[i],
                                    self.dx[i], self.dv[i], dt)
        jac, djac = _covariant(self.metric, x, v, dx, dv)
        return x, v, jac, djac


def jacobi_propagate(m: MetricModel, trace: GeodesicTrace) -> JacobiFrame:
    """
    Integrate both basis blocks of Jacobi fields along a trace.

    The coordinate variational equation of the geodesic ODE is integrated
    jointly with the geodesic on the trace's time nodes; it is equivalent to
    nabla^2 J + R(J, gamma') gamma' = 0.
    """
    n = m.dim
    x = trace.positions[0].copy()
    v = trace.velocities[0].copy()
    gamma0 = m.christoffel(x)
    dx = np.concatenate([np.zeros((n, n)), np.eye(n)], axis=1)
    dv = np.concatenate([np.eye(n), -np.einsum('kij,i->kj', gamma0, v)], axis=1)

    positions, velocities, dxs, dvs, jacs, djacs = [], [], [], [], [], []
    for i in range(len(trace.times)):
        if i > 0:
            x, v, dx, dv = _coupled_rk4(m, x, v, dx, dv, trace.times[i] - trace.times[i - 1])
        jac, djac = _covariant(m, x, v, dx, dv)
        positions.append(x)
        velocities.append(v)
        dxs.append(dx)
        dvs.append(dv)
        jacs.append(jac)
        djacs.append(djac)

    frame = JacobiFrame(m, trace.times.copy(), np.array(positions), np.array(velocities),
                        np.array(dxs), np.array(dvs), np.array(jacs), np.array(djacs))
    drift = frame.wronskian_drift()
    if drift > 1e-6:
        logger.warning(f"Jacobi frame Wronskian drift {drift:.2e} exceeds 1e-6")
    return frame


def exp_fibre_derivative(frame: JacobiFrame, t: float) -> np.ndarray:
    """D exp_x at t v: the vertical Jacobi block J(t) divided by t."""
    if t <= 0:
        raise PreconditionError("exp_fibre_derivative needs a positive time")
    _, _, jac, _ = frame.state_at(t)
    return jac[:, :frame.dim] / t
