"""
Manifold Geometry

This module defines metric families on a single global chart over a strictly
convex Euclidean domain, and the pointwise geometric data built from them:
metric tensor, Christoffel symbols and their derivatives, curvature, musical
isomorphisms, the coordinate symplectic pairing and the outward unit normal.

All array methods are vectorised over leading axes: a point array of shape
(..., n) yields metric arrays of shape (..., n, n).
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import eigh

from config.settings import BOUNDARY_TOLERANCE, CONVEXITY_SAMPLES
from geodesic_engine.errors import DomainError, PreconditionError

logger = logging.getLogger(__name__)

Point = np.ndarray


# --------------------------------------------------------------------------
# Sound-speed fields for the conformal family g = c(x)^-2 * delta
# --------------------------------------------------------------------------

class GaussianLensSpeed:
    """Sound speed c(x) = 1 + sum_j A_j exp(-|x - x0_j|^2 / (2 sigma_j^2))."""

    def __init__(self, amplitudes: Sequence[float], centers: Sequence[Sequence[float]],
                 widths: Sequence[float]):
        self.amplitudes = np.atleast_1d(np.asarray(amplitudes, dtype=float))
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.widths = np.atleast_1d(np.asarray(widths, dtype=float))
        if not (len(self.amplitudes) == len(self.centers) == len(self.widths)):
            raise ValueError("Lens amplitudes, centers and widths must have equal length")
        if np.any(self.widths <= 0):
            raise ValueError("Lens widths must be positive")

    def evaluate(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return c, grad c and Hessian of c at x."""
        n = x.shape[-1]
        diff = x[..., None, :] - self.centers                  # (..., J, n)
        s2 = self.widths ** 2                                   # (J,)
        bump = self.amplitudes * np.exp(-np.sum(diff ** 2, axis=-1) / (2.0 * s2))
        c = 1.0 + bump.sum(axis=-1)
        grad = -np.sum((bump / s2)[..., None] * diff, axis=-2)
        outer = diff[..., :, None] * diff[..., None, :] / (s2 ** 2)[:, None, None]
        hess = np.sum(bump[..., None, None] * (outer - np.eye(n) / s2[:, None, None]), axis=-3)
        return c, grad, hess


class SphereSpeed:
    """Stereographic round-sphere patch: c(x) = (1 + |x|^2) / 2, curvature 1."""

    def evaluate(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = x.shape[-1]
        c = 0.5 * (1.0 + np.sum(x ** 2, axis=-1))
        grad = x.copy()
        hess = np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)).copy()
        return c, grad, hess


class ConstantSpeed:
    """Constant sound speed c0."""

    def __init__(self, value: float):
        if value <= 0:
            raise ValueError("Constant sound speed must be positive")
        self.value = float(value)

    def evaluate(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = x.shape[-1]
        c = np.full(x.shape[:-1], self.value)
        return c, np.zeros_like(x), np.zeros(x.shape[:-1] + (n, n))


# --------------------------------------------------------------------------
# Metric families
# --------------------------------------------------------------------------

class MetricModel:
    """
    Metric tensor field g_ij on a Euclidean chart.

    Subclasses provide `metric` and `metric_derivative`; the connection,
    its derivative and the geodesic spray follow from those unless a family
    overrides them with closed forms.
    """

    family = 'general'

    def __init__(self, dim: int):
        if dim not in (2, 3):
            raise ValueError(f"Only dimensions 2 and 3 are supported, got {dim}")
        self.dim = dim
        self.domain: Optional['DomainModel'] = None

    def restrict_to(self, d: 'DomainModel') -> 'MetricModel':
        """Bind the closed domain the pointwise accessors check points against."""
        if d.dim != self.dim:
            raise PreconditionError(f"Domain dimension {d.dim} does not match metric dimension {self.dim}")
        self.domain = d
        return self

    def metric(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def metric_derivative(self, x: np.ndarray) -> np.ndarray:
        """Return dg[..., i, j, k] = d g_ij / d x^k."""
        raise NotImplementedError

    def christoffel(self, x: np.ndarray) -> np.ndarray:
        """Return Gamma[..., k, i, j] = Gamma^k_ij."""
        g_inv = np.linalg.inv(self.metric(x))
        dg = self.metric_derivative(x)
        lowered = (np.einsum('...jli->...ijl', dg) + np.einsum('...ilj->...ijl', dg) - dg)
        return 0.5 * np.einsum('...kl,...ijl->...kij', g_inv, lowered)

    def christoffel_derivative(self, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
        """Return dGamma[..., k, i, j, m] = d Gamma^k_ij / d x^m (central differences)."""
        x = np.asarray(x, dtype=float)
        columns = []
        for m in range(self.dim):
            offset = np.zeros(self.dim)
            offset[m] = step
            columns.append((self.christoffel(x + offset) - self.christoffel(x - offset)) / (2.0 * step))
        return np.stack(columns, axis=-1)

    def geodesic_acceleration(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Right-hand side of x'' = -Gamma^k_ij x'^i x'^j."""
        return -np.einsum('...kij,...i,...j->...k', self.christoffel(x), v, v)

    def inner(self, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        return np.einsum('...ij,...i,...j->...', self.metric(x), u, w)

    def norm(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.sqrt(self.inner(x, u, u))

    def volume_density(self, x: np.ndarray) -> np.ndarray:
        """sqrt(det g), the Riemannian density against Lebesgue measure."""
        return np.sqrt(np.linalg.det(self.metric(x)))

    def describe(self) -> str:
        return f"{self.family} metric in dimension {self.dim}"


class EuclideanMetric(MetricModel):
    family = 'euclidean'

    def metric(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.dim), x.shape[:-1] + (self.dim, self.dim)).copy()

    def metric_derivative(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.dim,) * 3)

    def christoffel(self, x):
        return self.metric_derivative(x)

    def christoffel_derivative(self, x, step=None):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.dim,) * 4)

    def geodesic_acceleration(self, x, v):
        return np.zeros_like(v)

    def volume_density(self, x):
        x = np.asarray(x, dtype=float)
        return np.ones(x.shape[:-1])


class ConformalMetric(MetricModel):
    """
    Conformal family g_ij = c(x)^-2 delta_ij with analytic derivatives.

    Writing g = exp(2 f) delta with f = -log c, the connection is
    Gamma^k_ij = delta_ki f_j + delta_kj f_i - delta_ij f_k.
    """

    family = 'conformal'

    def __init__(self, dim: int, speed):
        super().__init__(dim)
        self.speed = speed

    def _log_factor(self, x):
        c, grad, hess = self.speed.evaluate(np.asarray(x, dtype=float))
        if np.any(c <= 0):
            raise DomainError("Sound speed is not positive at a queried point")
        f_grad = -grad / c[..., None]
        f_hess = -hess / c[..., None, None] + grad[..., :, None] * grad[..., None, :] / (c ** 2)[..., None, None]
        return c, f_grad, f_hess

    def speed_at(self, x):
        return self.speed.evaluate(np.asarray(x, dtype=float))[0]

    def metric(self, x):
        c = self.speed_at(x)
        if np.any(c <= 0):
            raise DomainError("Sound speed is not positive at a queried point")
        return (c ** -2.0)[..., None, None] * np.eye(self.dim)

    def metric_derivative(self, x):
        c, grad, _ = self.speed.evaluate(np.asarray(x, dtype=float))
        return (-2.0 * c ** -3.0)[..., None, None, None] * np.eye(self.dim)[:, :, None] * grad[..., None, None, :]

    def christoffel(self, x):
        _, f, _ = self._log_factor(x)
        eye = np.eye(self.dim)
        return (eye[:, :, None] * f[..., None, None, :]
                + eye[:, None, :] * f[..., None, :, None]
                - eye[None, :, :] * f[..., :, None, None])

    def christoffel_derivative(self, x, step=None):
        _, _, h = self._log_factor(x)
        eye = np.eye(self.dim)
        return (eye[:, :, None, None] * h[..., None, None, :, :]
                + eye[:, None, :, None] * h[..., None, :, None, :]
                - eye[None, :, :, None] * h[..., :, None, None, :])

    def geodesic_acceleration(self, x, v):
        _, f, _ = self._log_factor(x)
        fv = np.sum(f * v, axis=-1)
        vv = np.sum(v * v, axis=-1)
        return -2.0 * fv[..., None] * v + vv[..., None] * f

    def volume_density(self, x):
        return self.speed_at(x) ** (-float(self.dim))


class GeneralMetric(MetricModel):
    """
    Callback-style symmetric matrix field.

    `metric_fn(x)` returns (..., n, n), `derivative_fn(x)` returns
    (..., n, n, n) with last index the derivative direction. The optional
    `second_derivative_fn(x)` returns (..., n, n, n, n); without it the
    Christoffel derivative falls back to central differences.
    """

    family = 'general'

    def __init__(self, dim: int, metric_fn: Callable, derivative_fn: Callable,
                 second_derivative_fn: Optional[Callable] = None):
        super().__init__(dim)
        self.metric_fn = metric_fn
        self.derivative_fn = derivative_fn
        self.second_derivative_fn = second_derivative_fn

    def metric(self, x):
        return np.asarray(self.metric_fn(np.asarray(x, dtype=float)), dtype=float)

    def metric_derivative(self, x):
        return np.asarray(self.derivative_fn(np.asarray(x, dtype=float)), dtype=float)

    def christoffel_derivative(self, x, step: float = 1e-5):
        if self.second_derivative_fn is None:
            return super().christoffel_derivative(x, step)
        x = np.asarray(x, dtype=float)
        g_inv = np.linalg.inv(self.metric(x))
        dg = self.metric_derivative(x)
        d2g = np.asarray(self.second_derivative_fn(x), dtype=float)  # [..., i, j, k, m]
        lowered = (np.einsum('...jli->...ijl', dg) + np.einsum('...ilj->...ijl', dg) - dg)
        d_lowered = (np.einsum('...jlim->...ijlm', d2g) + np.einsum('...iljm->...ijlm', d2g) - d2g)
        d_inv = -np.einsum('...ka,...abm,...bl->...klm', g_inv, dg, g_inv)
        return 0.5 * (np.einsum('...klm,...ijl->...kijm', d_inv, lowered)
                      + np.einsum('...kl,...ijlm->...kijm', g_inv, d_lowered))


def euclidean(dim: int = 2) -> EuclideanMetric:
    return EuclideanMetric(dim)


def gaussian_lens(dim: int = 2, amplitudes=(0.3,), centers=None, widths=(0.25,)) -> ConformalMetric:
    if centers is None:
        centers = np.zeros((len(np.atleast_1d(amplitudes)), dim))
    return ConformalMetric(dim, GaussianLensSpeed(amplitudes, centers, widths))


def sphere_patch(dim: int = 2) -> ConformalMetric:
    return ConformalMetric(dim, SphereSpeed())


def constant_speed(dim: int = 2, value: float = 1.0) -> ConformalMetric:
    return ConformalMetric(dim, ConstantSpeed(value))


# --------------------------------------------------------------------------
# Domains
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvexityCertificate:
    passed: bool
    min_curvature: float
    samples: int


@dataclass(frozen=True)
class DomainModel:
    """
    Ellipsoidal chart domain {rho < 0}, rho(x) = sum_i ((x - c)_i / a_i)^2 - 1.

    Disks and balls are the equal-axes case. Boundary points are
    parameterised by an angle theta (n = 2) or polar/azimuth angles (n = 3).
    """

    center: Tuple[float, ...]
    semi_axes: Tuple[float, ...]
    shape: str = 'ellipse'
    boundary_tol: float = BOUNDARY_TOLERANCE

    def __post_init__(self):
        if len(self.center) != len(self.semi_axes):
            raise ValueError("Domain center and semi-axes must have equal length")
        if len(self.center) not in (2, 3):
            raise ValueError("Only dimensions 2 and 3 are supported")
        if min(self.semi_axes) <= 0:
            raise ValueError("Domain semi-axes must be positive")

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def _c(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    @property
    def _a(self) -> np.ndarray:
        return np.asarray(self.semi_axes, dtype=float)

    def defining_value(self, x: np.ndarray) -> np.ndarray:
        y = (np.asarray(x, dtype=float) - self._c) / self._a
        return np.sum(y ** 2, axis=-1) - 1.0

    def defining_gradient(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(x, dtype=float) - self._c) / self._a ** 2

    def defining_hessian(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.diag(2.0 / self._a ** 2), x.shape[:-1] + (self.dim, self.dim))

    def contains(self, x: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return self.defining_value(x) <= tol

    def on_boundary(self, x: np.ndarray, tol: Optional[float] = None) -> np.ndarray:
        tol = self.boundary_tol if tol is None else tol
        return np.abs(self.defining_value(x)) < tol

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._c - self._a, self._c + self._a

    def diameter(self) -> float:
        return 2.0 * float(np.max(self._a))

    def boundary_point(self, params: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        if self.dim == 2:
            theta = params[..., 0]
            unit = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        else:
            theta, phi = params[..., 0], params[..., 1]
            unit = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1)
        return self._c + self._a * unit

    def boundary_tangents(self, params: np.ndarray) -> np.ndarray:
        """Return dp/dparams with shape (..., n, n - 1)."""
        params = np.asarray(params, dtype=float)
        if self.dim == 2:
            theta = params[..., 0]
            d_theta = np.stack([-np.sin(theta), np.cos(theta)], axis=-1) * self._a
            return d_theta[..., None]
        theta, phi = params[..., 0], params[..., 1]
        d_theta = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)], axis=-1)
        d_phi = np.stack([-np.sin(theta) * np.sin(phi), np.sin(theta) * np.cos(phi), np.zeros_like(theta)], axis=-1)
        return np.stack([d_theta * self._a, d_phi * self._a], axis=-1)

    def boundary_parameters(self, x: np.ndarray) -> np.ndarray:
        y = (np.asarray(x, dtype=float) - self._c) / self._a
        if self.dim == 2:
            return np.mod(np.arctan2(y[..., 1], y[..., 0]), 2.0 * np.pi)[..., None]
        r = np.linalg.norm(y, axis=-1)
        theta = np.arccos(np.clip(y[..., 2] / r, -1.0, 1.0))
        phi = np.mod(np.arctan2(y[..., 1], y[..., 0]), 2.0 * np.pi)
        return np.stack([theta, phi], axis=-1)

    def sample_boundary(self, count: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        direction = rng.standard_normal((count, self.dim))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        return self._c + self._a * direction

    def sample_interior(self, count: int, seed: int = 0, shrink: float = 0.95) -> np.ndarray:
        rng = np.random.default_rng(seed)
        direction = rng.standard_normal((count, self.dim))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        radius = shrink * rng.random(count) ** (1.0 / self.dim)
        return self._c + self._a * direction * radius[:, None]

    def radial_extent(self, unit: np.ndarray) -> np.ndarray:
        """Distance from the center to the boundary along Euclidean unit directions."""
        return 1.0 / np.sqrt(np.sum((unit / self._a) ** 2, axis=-1))

    def convexity_certificate(self, m: MetricModel, samples: int = CONVEXITY_SAMPLES,
                              seed: int = 0) -> ConvexityCertificate:
        """
        Sampled strict-convexity check of {rho = 0} with respect to g.

        The g-second fundamental form is Hess_g rho / |d rho|_g restricted to
        the tangent space; the certificate passes when its smallest
        eigenvalue is positive at every sampled point.
        """
        points = self.sample_boundary(samples, seed)
        d_rho = self.defining_gradient(points)
        hess = self.defining_hessian(points) - np.einsum('...kij,...k->...ij', m.christoffel(points), d_rho)
        g = m.metric(points)
        d_rho_norm = np.sqrt(np.einsum('...i,...ij,...j->...', d_rho, np.linalg.inv(g), d_rho))
        worst = np.inf
        for i in range(samples):
            basis = _tangent_basis(d_rho[i])
            form = basis.T @ hess[i] @ basis
            gram = basis.T @ g[i] @ basis
            curvatures = eigh(form, gram, eigvals_only=True) / d_rho_norm[i]
            worst = min(worst, float(curvatures.min()))
        passed = worst > 0.0
        if not passed:
            logger.warning(f"Strict convexity certificate failed: min curvature {worst:.3e}")
        return ConvexityCertificate(passed=passed, min_curvature=worst, samples=samples)


def _tangent_basis(normal: np.ndarray) -> np.ndarray:
    """Euclidean orthonormal basis of the complement of `normal`, shape (n, n - 1)."""
    _, _, vt = np.linalg.svd(normal[None, :])
    return vt[1:].T


def disk(radius: float = 1.0, center=(0.0, 0.0)) -> DomainModel:
    return DomainModel(tuple(map(float, center)), (float(radius),) * 2, shape='disk')


def ball(radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> DomainModel:
    return DomainModel(tuple(map(float, center)), (float(radius),) * 3, shape='ball')


def ellipse(semi_axes=(1.0, 0.8), center=None) -> DomainModel:
    center = (0.0,) * len(semi_axes) if center is None else center
    return DomainModel(tuple(map(float, center)), tuple(map(float, semi_axes)), shape='ellipse')


# --------------------------------------------------------------------------
# Covectors and pointwise operations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Covector:
    base: np.ndarray
    components: np.ndarray

    def __call__(self, v: np.ndarray) -> float:
        return float(np.dot(self.components, v))

    def scaled(self, factor: float) -> 'Covector':
        return Covector(self.base, factor * np.asarray(self.components))


def _check_domain(x: np.ndarray, m: MetricModel, d: Optional[DomainModel]) -> None:
    d = d if d is not None else m.domain
    if d is None:
        return
    if np.any(d.defining_value(x) > d.boundary_tol):
        raise DomainError(f"Point {np.round(np.asarray(x), 6).tolist()} lies outside the closed domain")


def metric_at(m: MetricModel, x: Point, d: Optional[DomainModel] = None) -> np.ndarray:
    """Metric tensor g(x); raises DomainError outside the closed domain."""
    x = np.asarray(x, dtype=float)
    _check_domain(x, m, d)
    return m.metric(x)


def christoffel_at(m: MetricModel, x: Point, d: Optional[DomainModel] = None) -> np.ndarray:
    """Christoffel symbols Gamma[k, i, j] = Gamma^k_ij of the Levi-Civita connection."""
    x = np.asarray(x, dtype=float)
    _check_domain(x, m, d)
    return m.christoffel(x)


def riemann_at(m: MetricModel, x: Point, d: Optional[DomainModel] = None) -> np.ndarray:
    """
    Curvature tensor R[k, l, i, j] with R(d_i, d_j) d_l = R^k_lij d_k.
    """
    x = np.asarray(x, dtype=float)
    _check_domain(x, m, d)
    gamma = m.christoffel(x)
    d_gamma = m.christoffel_derivative(x)
    return (np.einsum('...kjli->...klij', d_gamma)
            - np.einsum('...kilj->...klij', d_gamma)
            + np.einsum('...kim,...mjl->...klij', gamma, gamma)
            - np.einsum('...kjm,...mil->...klij', gamma, gamma))


def sectional_curvature(m: MetricModel, x: Point, u: np.ndarray, w: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    riemann = riemann_at(m, x)
    g = m.metric(x)
    r_uww = np.einsum('klij,l,i,j->k', riemann, w, u, w)
    numerator = float(u @ g @ r_uww)
    denominator = float((u @ g @ u) * (w @ g @ w) - (u @ g @ w) ** 2)
    return numerator / denominator


def flat(m: MetricModel, x: Point, v: np.ndarray) -> Covector:
    x = np.asarray(x, dtype=float)
    return Covector(x, m.metric(x) @ np.asarray(v, dtype=float))


def sharp(m: MetricModel, eta: Covector) -> np.ndarray:
    return np.linalg.solve(m.metric(eta.base), np.asarray(eta.components, dtype=float))


def flat_sharp(m: MetricModel, x: Point, item: Union[np.ndarray, Covector],
               d: Optional[DomainModel] = None) -> Union[Covector, np.ndarray]:
    """Lower a vector to a covector, or raise a covector to a vector."""
    x = np.asarray(x, dtype=float)
    _check_domain(x, m, d)
    if isinstance(item, Covector):
        return sharp(m, Covector(x, item.components))
    return flat(m, x, item)


def boundary_normal(d: DomainModel, m: MetricModel, x: Point) -> np.ndarray:
    """Outward g-unit normal nu_+ = grad_g rho / |d rho|_g at a boundary point."""
    x = np.asarray(x, dtype=float)
    if np.any(~d.on_boundary(x)):
        raise PreconditionError(f"Point {np.round(x, 6).tolist()} is not on the boundary")
    return boundary_normals(d, m, x)


def boundary_normals(d: DomainModel, m: MetricModel, x: np.ndarray) -> np.ndarray:
    """Vectorised outward normals without the on-boundary precondition."""
    d_rho = d.defining_gradient(x)
    raised = np.einsum('...ij,...j->...i', np.linalg.inv(m.metric(x)), d_rho)
    return raised / np.sqrt(np.sum(raised * d_rho, axis=-1))[..., None]


def orthonormal_complement(m: MetricModel, x: Point, v: np.ndarray) -> np.ndarray:
    """g-orthonormal basis of the g-orthogonal complement of v, shape (n, n - 1)."""
    x = np.asarray(x, dtype=float)
    g = m.metric(x)
    n = len(v)
    basis = [np.asarray(v, dtype=float) / np.sqrt(v @ g @ v)]
    for e in np.eye(n):
        u = e.copy()
        for b in basis:
            u = u - (u @ g @ b) * b
        size = np.sqrt(u @ g @ u)
        if size > 1e-8:
            basis.append(u / size)
        if len(basis) == n:
            break
    return np.stack(basis[1:], axis=-1)


def symplectic_pairing(m: MetricModel, x: Point, v: np.ndarray,
                       first: Tuple[np.ndarray, np.ndarray],
                       second: Tuple[np.ndarray, np.ndarray]) -> float:
    """
    omega_g((dx1, dv1), (dx2, dv2)) in natural coordinates (x^i, v^i) on TM,
    omega_g = v^l dg_il/dx^j dx^j ^ dx^i + g_ij dv^j ^ dx^i.
    """
    x = np.asarray(x, dtype=float)
    g = m.metric(x)
    dg = m.metric_derivative(x)
    dx1, dv1 = first
    dx2, dv2 = second
    a = np.einsum('l,ilj->ji', v, dg)          # a[j, i] = v^l d_j g_il
    horizontal = dx1 @ a @ dx2 - dx2 @ a @ dx1
    mixed = (dv1 @ g @ dx2) - (dv2 @ g @ dx1)
    return float(horizontal + mixed)


def metric_volume(m: MetricModel, d: DomainModel, radial: int = 48, angular: int = 256) -> float:
    """vol_g(M) by polar Gauss-Legendre quadrature about the domain center."""
    from geodesic_engine.flow import sphere_rule
    units, weights = sphere_rule(d.dim, angular)
    nodes, gauss_weights = leggauss(radial)
    reach = d.radial_extent(units)                              # (A,)
    r = 0.5 * (nodes[None, :] + 1.0) * reach[:, None]           # (A, R)
    points = np.asarray(d.center) + r[..., None] * units[:, None, :]
    density = m.volume_density(points)
    radial_integral = np.sum(density * r ** (d.dim - 1) * gauss_weights[None, :], axis=1) * 0.5 * reach
    return float(np.sum(radial_integral * weights))


def check_metric(m: MetricModel, d: DomainModel, samples: int = 10000, seed: int = 0) -> bool:
    """Sampled symmetric positive definiteness of g on the domain."""
    points = d.sample_interior(samples, seed, shrink=1.0)
    g = m.metric(points)
    symmetric = np.allclose(g, np.swapaxes(g, -1, -2))
    positive = bool(np.all(np.linalg.eigvalsh(g) > 0))
    if not (symmetric and positive):
        logger.error("Metric failed the positive definiteness check")
    return symmetric and positive


def corner_offsets(dim: int) -> np.ndarray:
    """Vertices of the unit cell, used by multilinear interpolation."""
    return np.array(list(itertools.product((0, 1), repeat=dim)), dtype=int)
