"""
Weighted Geodesic X-ray Transform

This module implements the weighted transform, its adjoint through the
Santalo measure, the explicit phase-space operator N_SM, and the normal
operator by the explicit and the composed route. Functions on M live on a
masked Cartesian grid; functions on the inward boundary bundle live on a
RayGrid.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator

from geodesic_engine.errors import PreconditionError
from geodesic_engine.flow import (
    FlowSettings,
    RayGrid,
    batched_map,
    integrate_rays,
    locate_footpoints,
    sphere_rule,
)
from geodesic_engine.manifold import DomainModel, MetricModel, corner_offsets

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Grid functions on M
# --------------------------------------------------------------------------

@dataclass
class ScalarGrid:
    """Node values on a cubic Cartesian grid with an in-domain mask."""

    values: np.ndarray
    origin: np.ndarray
    spacing: float
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError("Grid values and mask must have the same shape")
        self.values = np.where(self.mask, self.values, 0.0)

    @classmethod
    def for_domain(cls, d: DomainModel, nodes: int) -> 'ScalarGrid':
        """Zero field on nodes^n points spanning the domain's bounding cube."""
        if nodes < 4:
            raise ValueError("A grid needs at least 4 nodes per axis")
        half = float(np.max(d.semi_axes))
        origin = np.asarray(d.center, dtype=float) - half
        spacing = 2.0 * half / (nodes - 1)
        shape = (nodes,) * d.dim
        axes = [origin[k] + spacing * np.arange(nodes) for k in range(d.dim)]
        coords = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)
        mask = d.defining_value(coords) < 0.0
        return cls(np.zeros(shape), origin, spacing, mask)

    @classmethod
    def from_function(cls, d: DomainModel, nodes: int, fn: Callable[[np.ndarray], np.ndarray]) -> 'ScalarGrid':
        grid = cls.for_domain(d, nodes)
        return grid.with_values(fn(grid.coordinates()))

    @property
    def dim(self) -> int:
        return self.values.ndim

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def coordinates(self) -> np.ndarray:
        axes = [self.origin[k] + self.spacing * np.arange(self.shape[k]) for k in range(self.dim)]
        return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)

    def masked_points(self) -> np.ndarray:
        return self.coordinates()[self.mask]

    def masked_values(self) -> np.ndarray:
        return self.values[self.mask]

    def with_values(self, values: np.ndarray) -> 'ScalarGrid':
        return ScalarGrid(np.asarray(values, dtype=float).reshape(self.shape), self.origin, self.spacing, self.mask)

    def with_masked(self, masked: np.ndarray) -> 'ScalarGrid':
        values = np.zeros(self.shape)
        values[self.mask] = masked
        return ScalarGrid(values, self.origin, self.spacing, self.mask)

    def stencil(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Multilinear interpolation stencil of query points.

        Returns:
            flat node indices (P, 2^n) and weights (P, 2^n); weights on
            off-mask nodes and for queries outside the grid box are zero
        """
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        rel = (x - self.origin) / self.spacing
        upper = np.asarray(self.shape) - 1
        inside = np.all((rel >= 0.0) & (rel <= upper), axis=-1)
        base = np.clip(np.floor(rel).astype(int), 0, upper - 1)
        frac = np.clip(rel - base, 0.0, 1.0)
        corners = corner_offsets(self.dim)
        idx = base[:, None, :] + corners[None, :, :]
        weights = np.prod(np.where(corners[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=-1)
        flat = np.ravel_multi_index(tuple(idx[..., k] for k in range(self.dim)), self.shape)
        weights = weights * inside[:, None] * self.mask.ravel()[flat]
        return flat, weights

    def interpolate(self, x: np.ndarray) -> Tuple[np.ndarray, int]:
        """Interpolated values and the number of queries with no in-mask support."""
        flat, weights = self.stencil(x)
        values = np.sum(weights * self.values.ravel()[flat], axis=-1)
        off_mask = int(np.count_nonzero(weights.sum(axis=-1) <= 0.0))
        return values, off_mask

    def volume_weights(self, m: MetricModel) -> np.ndarray:
        """sqrt(det g) h^n at masked nodes."""
        return m.volume_density(self.masked_points()) * self.spacing ** self.dim

    def inner(self, other: 'ScalarGrid', m: MetricModel) -> float:
        return float(np.sum(self.masked_values() * other.masked_values() * self.volume_weights(m)))

    def norm(self, m: MetricModel) -> float:
        return float(np.sqrt(self.inner(self, m)))

    def l2_norm(self) -> float:
        """Euclidean-chart L2 norm, h^n sum f^2."""
        return float(np.sqrt(np.sum(self.values ** 2) * self.spacing ** self.dim))


# --------------------------------------------------------------------------
# Functions on the inward boundary bundle
# --------------------------------------------------------------------------

@dataclass
class Sinogram:
    rays: RayGrid
    values: np.ndarray
    off_mask_hits: int = 0
    _interpolator: Optional[RegularGridInterpolator] = field(default=None, repr=False, compare=False)

    def inner(self, other: 'Sinogram') -> float:
        return float(np.sum(self.values * other.values * self.rays.weights))

    def norm(self) -> float:
        return float(np.sqrt(self.inner(self)))

    def with_values(self, values: np.ndarray) -> 'Sinogram':
        return Sinogram(self.rays, np.asarray(values, dtype=float))

    def to_frame(self):
        """Table with one column per ray parameter, then mu and value."""
        import pandas as pd
        data = {name: self.rays.params[:, k] for k, name in enumerate(self.rays.names)}
        data['mu'] = self.rays.mu
        data['value'] = self.values
        return pd.DataFrame(data)

    def interpolator(self) -> RegularGridInterpolator:
        if self._interpolator is None:
            axes = []
            table = self.values.reshape(self.rays.shape)
            for k, (axis, periodic) in enumerate(zip(self.rays.axes, self.rays.periodic)):
                if periodic:
                    axis = np.append(axis, axis[0] + 2.0 * np.pi)
                    table = np.concatenate([table, np.take(table, [0], axis=k)], axis=k)
                axes.append(axis)
            self._interpolator = RegularGridInterpolator(tuple(axes), table, method='linear')
        return self._interpolator

    def evaluate(self, params: np.ndarray) -> np.ndarray:
        """Multilinear interpolation at ray parameters; periodic axes wrap, others clamp."""
        params = np.array(params, dtype=float)
        for k, (axis, periodic) in enumerate(zip(self.rays.axes, self.rays.periodic)):
            if periodic:
                params[:, k] = axis[0] + np.mod(params[:, k] - axis[0], 2.0 * np.pi)
            else:
                params[:, k] = np.clip(params[:, k], axis[0], axis[-1])
        return self.interpolator()(params)


def smooth_step(t: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide='ignore', over='ignore', invalid='ignore'):
        a = np.where(t > 0.0, np.exp(-1.0 / np.where(t > 0.0, t, 1.0)), 0.0)
        b = np.where(t < 1.0, np.exp(-1.0 / np.where(t < 1.0, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


@dataclass(frozen=True)
class WeightField:
    """
    Closed-form weight phi on SM.

    Kinds:
        constant   phi = value
        position   phi = value * S((radius - |x - center|) / width)
        halfspace  phi = value * S((<v/|v|, axis> - threshold) / width)
        band       phi = value * S((|<v/|v|, axis>| - threshold) / width)

    S is a smooth step; width 0 turns it into an indicator.
    """

    kind: str = 'constant'
    value: float = 1.0
    center: Tuple[float, ...] = ()
    radius: float = 0.5
    axis: Tuple[float, ...] = ()
    threshold: float = 0.0
    width: float = 0.0
    nonnegative: bool = True

    KINDS = ('constant', 'position', 'halfspace', 'band')

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"Unknown weight kind '{self.kind}', expected one of {self.KINDS}")
        if self.nonnegative and self.value < 0:
            raise ValueError("Weight value must be nonnegative in nonnegative mode")
        if self.width < 0:
            raise ValueError("Weight width must be nonnegative")
        if self.kind in ('halfspace', 'band') and not self.axis:
            raise ValueError(f"Weight kind '{self.kind}' needs an axis")

    def _step(self, s: np.ndarray) -> np.ndarray:
        if self.width == 0.0:
            return (s > 0.0).astype(float)
        return smooth_step(s / self.width)

    def __call__(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.kind == 'constant':
            return np.full(x.shape[:-1], self.value)
        if self.kind == 'position':
            center = np.asarray(self.center or (0.0,) * x.shape[-1])
            return self.value * self._step(self.radius - np.linalg.norm(x - center, axis=-1))
        axis = np.asarray(self.axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        cosine = np.sum(v * axis, axis=-1) / np.linalg.norm(v, axis=-1)
        if self.kind == 'halfspace':
            return self.value * self._step(cosine - self.threshold)
        return self.value * self._step(np.abs(cosine) - self.threshold)

    def is_elliptic(self, m: MetricModel, points: np.ndarray, samples: int = 64) -> bool:
        """
        Sampled directional ellipticity: for every covector xi at each point
        some direction nu with xi(nu) = 0 carries phi(nu) > 0.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[-1]
        covectors, _ = sphere_rule(n, samples)
        for x in points:
            g = m.metric(x)
            for xi in covectors:
                _, _, vt = np.linalg.svd(xi[None, :])
                kernel = vt[1:]
                if n == 2:
                    candidates = np.concatenate([kernel, -kernel])
                else:
                    angles = np.linspace(0.0, 2.0 * np.pi, 24, endpoint=False)
                    candidates = np.cos(angles)[:, None] * kernel[0] + np.sin(angles)[:, None] * kernel[1]
                candidates = candidates / np.sqrt(np.einsum('ji,ik,jk->j', candidates, g, candidates))[:, None]
                if np.max(self(np.broadcast_to(x, candidates.shape), candidates)) <= 0.0:
                    return False
        return True

    def check_ellipticity(self, m: MetricModel, points: np.ndarray, samples: int = 64) -> None:
        if not self.is_elliptic(m, points, samples):
            raise PreconditionError(f"Weight '{self.kind}' is not directionally elliptic on the sampled points")


# --------------------------------------------------------------------------
# Operators
# --------------------------------------------------------------------------

def forward(m: MetricModel, d: DomainModel, f: ScalarGrid, phi: WeightField, rays: RayGrid,
            settings: FlowSettings) -> Sinogram:
    """
    Weighted transform X_phi f on a ray grid.

    Each value is the midpoint-rule integral of phi(gamma') f(gamma) along
    the geodesic from its boundary ray to the exit point.
    """
    logger.info(f"Forward transform over {len(rays)} rays")

    def chunk(start, stop):
        values = np.zeros(stop - start)
        hits = [0]

        def on_segment(xm, vm, idx, dt):
            fv, off = f.interpolate(xm)
            hits[0] += off
            values[idx] += dt * phi(xm, vm) * fv

        integrate_rays(m, d, rays.points[start:stop], rays.directions[start:stop], settings,
                       on_segment=on_segment)
        return values, hits[0]

    results = batched_map(chunk, len(rays), settings)
    values = np.concatenate([r[0] for r in results])
    hits = sum(r[1] for r in results)
    if hits:
        logger.info(f"{hits} quadrature nodes had no in-mask interpolation support (treated as 0)")
    return Sinogram(rays, values, off_mask_hits=hits)


def fibre_states(m: MetricModel, points: np.ndarray, units: np.ndarray, start: int, stop: int
                 ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Phase states (x_p, v_j) for flat indices q = p * J + j in [start, stop)."""
    q = np.arange(start, stop)
    p, j = np.divmod(q, len(units))
    x = points[p]
    chol = np.linalg.cholesky(m.metric(x))
    v = np.linalg.solve(np.swapaxes(chol, -1, -2), units[j][..., None])[..., 0]
    return p, j, x, v


@dataclass
class FibreFootprint:
    """
    Footpoints F(nu) of the sphere-rule fibres over the masked nodes of a grid.

    Tracing the fibres is the expensive part of the adjoint; the footprint
    keeps only what X^t h needs (node, weight, footpoint parameters) so any
    number of functions h can be pulled back and pushed forward afterwards.
    States with grazing footpoints are dropped.
    """

    grid: ScalarGrid
    node: np.ndarray
    weight: np.ndarray
    params: np.ndarray
    dropped: int = 0

    def pullback(self, h) -> np.ndarray:
        """F^* h at the kept states; h is a Sinogram or a callable on ray parameters."""
        if isinstance(h, Sinogram):
            return h.evaluate(self.params)
        return np.asarray(h(self.params), dtype=float)

    def backproject(self, h) -> ScalarGrid:
        count = int(self.grid.mask.sum())
        return self.grid.with_masked(pushforward_fibre(self.pullback(h), self.node, self.weight, count))


def pushforward_fibre(values: np.ndarray, index: np.ndarray, weights: np.ndarray, count: int) -> np.ndarray:
    """pi_*: sum fibre samples into their base points with sphere-rule weights."""
    return np.bincount(index, weights=values * weights, minlength=count)


def fibre_footprint(m: MetricModel, d: DomainModel, grid: ScalarGrid, phi: WeightField, settings: FlowSettings,
                    directions: int = 64) -> FibreFootprint:
    points = grid.masked_points()
    units, weights = sphere_rule(grid.dim, directions)
    total = len(points) * len(units)
    logger.info(f"Footpoints of {len(points)} nodes x {len(units)} directions")

    def chunk(start, stop):
        p, j, x, v = fibre_states(m, points, units, start, stop)
        batch = locate_footpoints(m, d, x, v, settings)
        grazing = batch.mu < settings.mu_min
        weight = phi(x, v) * weights[j]
        keep = ~grazing & (weight != 0.0)
        return p[keep], weight[keep], batch.params[keep], int(np.count_nonzero(grazing))

    results = batched_map(chunk, total, settings)
    dropped = sum(r[3] for r in results)
    if dropped:
        logger.warning(f"Dropped {dropped} adjoint directions with grazing footpoints")
    return FibreFootprint(grid,
                          np.concatenate([r[0] for r in results]),
                          np.concatenate([r[1] for r in results]),
                          np.concatenate([r[2] for r in results]).reshape(-1, 2 * grid.dim - 2),
                          dropped)


def adjoint(m: MetricModel, d: DomainModel, s: Sinogram, phi: WeightField, grid: ScalarGrid,
            settings: FlowSettings, directions: int = 64) -> ScalarGrid:
    """
    Adjoint X^t_phi h(x) = integral over S_x of phi(nu) h(F(nu)) at every masked node.
    """
    return fibre_footprint(m, d, grid, phi, settings, directions).backproject(s)


def nsm_apply(m: MetricModel, d: DomainModel, h: Callable, chi: Optional[Callable],
              x: np.ndarray, v: np.ndarray, settings: FlowSettings) -> np.ndarray:
    """
    N_SM[h](nu) = integral over (tau_-, tau_+) of chi(nu, gamma'_nu(s)) h(gamma'_nu(s)) ds.

    Args:
        h: Callable h(x, v) on SM
        chi: Callable chi(x0, v0, x, v) or None for chi = 1
        x, v: Phase states nu, shape (P, n)
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))

    def chunk(start, stop):
        bx, bv = x[start:stop], v[start:stop]
        values = np.zeros(stop - start)

        def on_segment(xm, vm, idx, dt):
            integrand = h(xm, vm)
            if chi is not None:
                integrand = integrand * chi(bx[idx], bv[idx], xm, vm)
            values[idx] += dt * integrand

        integrate_rays(m, d, bx, bv, settings, direction=1, on_segment=on_segment)
        integrate_rays(m, d, bx, bv, settings, direction=-1, on_segment=on_segment)
        return values

    return np.concatenate(batched_map(chunk, len(x), settings))


def normal_direct(m: MetricModel, d: DomainModel, f: ScalarGrid, phi: WeightField, settings: FlowSettings,
                  directions: int = 64, points: Optional[np.ndarray] = None):
    """
    Normal operator from its explicit formula,
    N_phi f(x) = integral over S_x of phi(nu) * integral of f(gamma_nu) phi(gamma'_nu) ds.

    With `points` the operator is evaluated at those points only and an
    array is returned; otherwise a ScalarGrid over the masked nodes.
    """
    targets = f.masked_points() if points is None else np.atleast_2d(np.asarray(points, dtype=float))
    units, weights = sphere_rule(f.dim, directions)
    total = len(targets) * len(units)
    logger.info(f"Explicit normal operator at {len(targets)} points x {len(units)} directions")

    def h(xm, vm):
        return f.interpolate(xm)[0] * phi(xm, vm)

    def chi(bx, bv, xm, vm):
        return phi(bx, bv)

    def chunk(start, stop):
        p, j, x, v = fibre_states(m, targets, units, start, stop)
        line = nsm_apply(m, d, h, chi, x, v, replace(settings, chunk_size=max(1, stop - start)))
        return pushforward_fibre(line, p, weights[j], len(targets))

    values = np.sum(batched_map(chunk, total, settings), axis=0)
    if points is not None:
        return values
    return f.with_masked(values)


def normal_composed(m: MetricModel, d: DomainModel, f: ScalarGrid, phi: WeightField, rays: RayGrid,
                    settings: FlowSettings, directions: int = 64) -> ScalarGrid:
    """N_phi = X^t_phi X_phi on the standard grids."""
    return adjoint(m, d, forward(m, d, f, phi, rays, settings), phi, f, settings, directions)


# --------------------------------------------------------------------------
# Sparse discretisation
# --------------------------------------------------------------------------

@dataclass
class ForwardMatrix:
    """
    Sparse matrix of the discrete transform acting on masked node values.

    `transpose` is the exact adjoint for the Santalo-weighted sinogram inner
    product and the volume-weighted grid inner product.
    """

    matrix: sparse.csr_matrix
    rays: RayGrid
    grid: ScalarGrid
    volume: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.matrix.shape

    def apply_vector(self, masked: np.ndarray) -> np.ndarray:
        return self.matrix @ masked

    def apply(self, f: ScalarGrid) -> Sinogram:
        return Sinogram(self.rays, self.apply_vector(f.masked_values()))

    def transpose_vector(self, values: np.ndarray) -> np.ndarray:
        return self.matrix.T @ (self.rays.weights * values) / self.volume

    def transpose(self, s: Sinogram) -> ScalarGrid:
        return self.grid.with_masked(self.transpose_vector(s.values))

    def data_normal(self, masked: np.ndarray) -> np.ndarray:
        """A^T W A x without the volume division, for symmetric solvers."""
        return self.matrix.T @ (self.rays.weights * (self.matrix @ masked))


def assemble_forward(m: MetricModel, d: DomainModel, grid: ScalarGrid, phi: WeightField, rays: RayGrid,
                     settings: FlowSettings) -> ForwardMatrix:
    """Assemble the forward transform as a CSR matrix over masked grid nodes."""
    column = np.full(grid.values.size, -1, dtype=int)
    column[np.flatnonzero(grid.mask.ravel())] = np.arange(int(grid.mask.sum()))
    columns = int(grid.mask.sum())

    def chunk(start, stop):
        rows, cols, vals = [], [], []

        def on_segment(xm, vm, idx, dt):
            flat, weights = grid.stencil(xm)
            scale = (dt * phi(xm, vm))[:, None] * weights
            keep = scale != 0.0
            rows.append(np.broadcast_to(idx[:, None], flat.shape)[keep])
            cols.append(column[flat[keep]])
            vals.append(scale[keep])

        integrate_rays(m, d, rays.points[start:stop], rays.directions[start:stop], settings,
                       on_segment=on_segment)
        if not rows:
            return sparse.csr_matrix((stop - start, columns))
        block = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                  shape=(stop - start, columns))
        return block.tocsr()

    matrix = sparse.vstack(batched_map(chunk, len(rays), settings), format='csr')
    logger.info(f"Assembled forward matrix {matrix.shape} with {matrix.nnz} nonzeros")
    return ForwardMatrix(matrix, rays, grid, grid.volume_weights(m))


@dataclass(frozen=True)
class AdjointPairing:
    """
    Both sides of <X f, h>_mu = <f, X^t h>_g for one pair (f, h).

    The right-hand side comes three ways: `continuous` pulls h back exactly
    at the fibre footpoints, `sinogram` interpolates the sampled sinogram
    there, and `discrete` applies the weighted matrix transpose. Errors are
    relative to ||f||_g ||h||_mu.
    """

    lhs: float
    continuous: float
    sinogram: float
    discrete: float
    scale: float

    def error(self, rhs: float) -> float:
        return abs(self.lhs - rhs) / self.scale

    @property
    def continuous_error(self) -> float:
        return self.error(self.continuous)

    @property
    def sinogram_error(self) -> float:
        return self.error(self.sinogram)

    @property
    def discrete_error(self) -> float:
        return self.error(self.discrete)


def adjoint_pairing(operator: ForwardMatrix, footprint: FibreFootprint, f: ScalarGrid,
                    h: Callable[[np.ndarray], np.ndarray]) -> AdjointPairing:
    """
    Evaluate the Santalo pairing for a grid field f and a function h of the ray parameters.

    The forward side uses the assembled transform on the operator's ray grid,
    so its Santalo weights enter the left-hand side only.
    """
    rays = operator.rays
    masked = f.masked_values()
    samples = np.asarray(h(rays.params), dtype=float)
    image = operator.apply_vector(masked)
    volume = operator.volume

    lhs = float(np.sum(rays.weights * image * samples))
    continuous = float(np.sum(volume * masked * footprint.backproject(h).masked_values()))
    sinogram = float(np.sum(volume * masked * footprint.backproject(Sinogram(rays, samples)).masked_values()))
    discrete = float(np.sum(volume * masked * operator.transpose_vector(samples)))
    scale = float(np.sqrt(np.sum(volume * masked ** 2) * np.sum(rays.weights * samples ** 2)))
    return AdjointPairing(lhs, continuous, sinogram, discrete, max(scale, np.finfo(float).tiny))
