"""
Microlocal Probes

This module estimates operator orders numerically. Oscillatory probes give
the decay exponent of the normal operator near the carrier point and near
its conjugate images; a narrow bump gives the radial singularity of the
Schwartz kernel.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import median_filter
from scipy.stats import linregress

from config.settings import ARTIFACT_NOISE_FLOOR, FIT_RESIDUAL_LIMIT, NYQUIST_MARGIN
from geodesic_engine.conjugacy import LocusSample, find_conjugate_records
from geodesic_engine.errors import PreconditionError
from geodesic_engine.flow import FlowSettings, PhaseState, sphere_rule
from geodesic_engine.manifold import DomainModel, MetricModel, orthonormal_complement
from geodesic_engine.xray import WeightField, fibre_states, nsm_apply, pushforward_fibre

logger = logging.getLogger(__name__)

SAMPLES_PER_WAVELENGTH = 8


@dataclass(frozen=True)
class ProbeSpec:
    center: Tuple[float, ...]
    direction: Tuple[float, ...]
    frequencies: Tuple[float, ...]
    width: float = 0.15

    def __post_init__(self):
        freqs = np.asarray(self.frequencies, dtype=float)
        if len(freqs) < 3:
            raise ValueError("A frequency ladder needs at least 3 frequencies")
        if np.any(np.diff(freqs) <= 0):
            raise ValueError("Frequencies must be strictly increasing")
        if freqs[-1] / freqs[0] < 8.0:
            raise ValueError("Frequency ladder must span at least a factor 8")
        if self.width <= 0:
            raise ValueError("Envelope width must be positive")
        if np.linalg.norm(self.direction) == 0:
            raise ValueError("Probe direction must be nonzero")

    @property
    def unit_direction(self) -> np.ndarray:
        xi = np.asarray(self.direction, dtype=float)
        return xi / np.linalg.norm(xi)

    def field(self, frequency: float):
        """f(x) = exp(-|x - x0|^2 / (2 w^2)) cos(lambda (x - x0) . xi0)."""
        x0 = np.asarray(self.center, dtype=float)
        xi = self.unit_direction

        def f(x, v=None):
            diff = np.asarray(x) - x0
            envelope = np.exp(-np.sum(diff ** 2, axis=-1) / (2.0 * self.width ** 2))
            return envelope * np.cos(frequency * diff @ xi)
        return f


@dataclass(frozen=True)
class ExponentFit:
    """Log-log power law fit amplitude ~ C * scale^slope."""

    scales: np.ndarray
    amplitudes: np.ndarray
    slope: float
    intercept: float
    residual: float
    half_width: float

    @property
    def conclusive(self) -> bool:
        return self.residual < FIT_RESIDUAL_LIMIT

    def claimed_slope(self) -> Optional[float]:
        """The slope, or None when the fit residual is above the claim threshold."""
        return self.slope if self.conclusive else None


def fit_exponent(scales: Sequence[float], amplitudes: Sequence[float]) -> ExponentFit:
    scales = np.asarray(scales, dtype=float)
    amplitudes = np.asarray(amplitudes, dtype=float)
    log_s = np.log(scales)
    log_a = np.log(np.maximum(amplitudes, np.finfo(float).tiny))
    fit = linregress(log_s, log_a)
    residual = float(np.sqrt(np.mean((log_a - (fit.intercept + fit.slope * log_s)) ** 2)))
    if residual >= FIT_RESIDUAL_LIMIT:
        logger.warning(f"Exponent fit inconclusive: residual {residual:.3f}")
    return ExponentFit(scales, amplitudes, float(fit.slope), float(fit.intercept), residual,
                       2.0 * float(fit.stderr))


@dataclass(frozen=True)
class ArtifactReport:
    primary: ExponentFit
    artifact: ExponentFit
    ratio_slope: float
    images: np.ndarray
    centroid: np.ndarray
    control: bool

    def to_frame(self):
        import pandas as pd
        return pd.DataFrame({
            'frequency': self.primary.scales,
            'primary_amplitude': self.primary.amplitudes,
            'artifact_amplitude': self.artifact.amplitudes,
            'primary_slope': self.primary.slope,
            'artifact_slope': self.artifact.slope,
            'ratio_slope': self.ratio_slope,
            'primary_residual': self.primary.residual,
            'artifact_residual': self.artifact.residual,
        })

    def below_noise_floor(self, floor: float = ARTIFACT_NOISE_FLOOR) -> bool:
        return bool(np.all(self.artifact.amplitudes < floor * self.primary.amplitudes))


# --------------------------------------------------------------------------
# Shared evaluation
# --------------------------------------------------------------------------

def evaluate_normal(m: MetricModel, d: DomainModel, f, phi: WeightField, points: np.ndarray,
                    settings: FlowSettings, directions: int) -> np.ndarray:
    """Explicit normal operator of a closed-form function f(x) at scattered points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    units, weights = sphere_rule(points.shape[-1], directions)
    p, j, x, v = fibre_states(m, points, units, 0, len(points) * len(units))
    line = nsm_apply(m, d, lambda xm, vm: f(xm) * phi(xm, vm), lambda bx, bv, xm, vm: phi(bx, bv),
                     x, v, settings)
    return pushforward_fibre(line, p, weights[j], len(points))


def transect(center: np.ndarray, direction: np.ndarray, half_length: float, frequency: float
             ) -> Tuple[np.ndarray, float]:
    """Points on a segment through center, SAMPLES_PER_WAVELENGTH per wavelength."""
    spacing = 2.0 * np.pi / frequency / SAMPLES_PER_WAVELENGTH
    count = 2 * int(math.ceil(half_length / spacing)) + 1
    offsets = spacing * (np.arange(count) - count // 2)
    return np.asarray(center) + offsets[:, None] * direction, spacing


def transect_amplitude(values: np.ndarray, spacing: float) -> float:
    """L2 size of the transect after removing a one-wavelength median background."""
    background = median_filter(values, size=SAMPLES_PER_WAVELENGTH + 1, mode='nearest')
    return float(np.sqrt(np.sum((values - background) ** 2) * spacing))


def _check_support(d: DomainModel, spec: ProbeSpec) -> None:
    center = np.asarray(spec.center, dtype=float)
    if d.defining_value(center) >= 0:
        raise PreconditionError("Probe center must lie inside the domain")
    reach = center + 3.0 * spec.width * np.eye(d.dim)
    if np.any(d.defining_value(np.concatenate([reach, center - 3.0 * spec.width * np.eye(d.dim)])) >= 0):
        raise PreconditionError("Probe envelope (3 widths) must stay inside the domain")


def _check_nyquist(spec: ProbeSpec, settings: FlowSettings) -> None:
    worst = max(spec.frequencies) * settings.step
    if worst >= NYQUIST_MARGIN:
        raise PreconditionError(f"Highest frequency times flow step is {worst:.3f}, must stay below {NYQUIST_MARGIN}")


def default_frequencies(d: DomainModel, factors: Sequence[float]) -> Tuple[float, ...]:
    return tuple(float(f) / d.diameter() for f in factors)


# --------------------------------------------------------------------------
# Probes
# --------------------------------------------------------------------------

def order_probe(m: MetricModel, d: DomainModel, phi: WeightField, spec: ProbeSpec, settings: FlowSettings,
                directions: int = 256) -> ExponentFit:
    """
    Decay exponent of the normal operator on oscillatory probes at x0.

    The amplitude is measured on a transect through x0 along xi0 covering
    three envelope widths each way.
    """
    _check_support(d, spec)
    _check_nyquist(spec, settings)
    amplitudes = []
    for frequency in spec.frequencies:
        points, spacing = transect(np.asarray(spec.center), spec.unit_direction, 3.0 * spec.width, frequency)
        values = evaluate_normal(m, d, spec.field(frequency), phi, points, settings, directions)
        amplitudes.append(transect_amplitude(values, spacing))
        logger.info(f"Order probe lambda={frequency:.3f}: amplitude {amplitudes[-1]:.4e}")
    return fit_exponent(spec.frequencies, amplitudes)


def conjugate_images(m: MetricModel, d: DomainModel, spec: ProbeSpec, settings: FlowSettings,
                     ring: int = 8) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Order-one conjugate images (x~, eta~) of the carrier covector.

    Geodesics leave x0 along directions annihilated by xi0: both signs in
    2D, a ring of `ring` directions in 3D.
    """
    x0 = np.asarray(spec.center, dtype=float)
    xi_sharp = np.linalg.solve(m.metric(x0), spec.unit_direction)
    normal = orthonormal_complement(m, x0, xi_sharp)
    if d.dim == 2:
        directions = [normal[:, 0], -normal[:, 0]]
    else:
        angles = 2.0 * np.pi * np.arange(ring) / ring
        directions = [np.cos(a) * normal[:, 0] + np.sin(a) * normal[:, 1] for a in angles]
    images = []
    for v in directions:
        for record in find_conjugate_records(m, d, PhaseState(x0, v), settings, max_pairs=1):
            if record.order == 1 and record.converged:
                images.append((record.conjugate.x, record.eta_tilde[0]))
    return images


def artifact_probe(m: MetricModel, d: DomainModel, phi: WeightField, spec: ProbeSpec, settings: FlowSettings,
                   locus: Optional[LocusSample] = None, directions: int = 256) -> ArtifactReport:
    """
    Primary and artifact decay exponents for the same oscillatory probes.

    Artifacts are measured on transects through each conjugate image along
    its covector. Without conjugate images the point reflected through the
    domain center serves as a control location.
    """
    _check_support(d, spec)
    _check_nyquist(spec, settings)
    if locus is not None and not any(r.order == 1 for r in locus.records):
        raise PreconditionError("Locus sample has no order-one records")
    x0 = np.asarray(spec.center, dtype=float)
    images = conjugate_images(m, d, spec, settings)
    control = not images
    if control:
        mirror = 2.0 * np.asarray(d.center) - x0
        images = [(mirror, spec.unit_direction)]
        logger.info("No conjugate images of the probe; measuring at the reflected control point")
    for image, _ in images:
        if np.linalg.norm(image - x0) < 6.0 * spec.width:
            raise PreconditionError("Conjugate image overlaps the probe support")

    primary, artifact = [], []
    centroid_weight = 0.0
    centroid = np.zeros(d.dim)
    for frequency in spec.frequencies:
        f = spec.field(frequency)
        points, spacing = transect(x0, spec.unit_direction, 3.0 * spec.width, frequency)
        blocks = [points]
        for image, eta_tilde in images:
            axis = np.asarray(eta_tilde, dtype=float) / np.linalg.norm(eta_tilde)
            blocks.append(transect(image, axis, 3.0 * spec.width, frequency)[0])
        values = evaluate_normal(m, d, f, phi, np.concatenate(blocks), settings, directions)
        sizes = np.cumsum([0] + [len(b) for b in blocks])
        primary.append(transect_amplitude(values[:sizes[1]], spacing))
        squares = 0.0
        for k in range(1, len(blocks)):
            part = values[sizes[k]:sizes[k + 1]]
            squares += transect_amplitude(part, spacing) ** 2
            energy = (part - median_filter(part, size=SAMPLES_PER_WAVELENGTH + 1, mode='nearest')) ** 2
            centroid += energy @ blocks[k]
            centroid_weight += energy.sum()
        artifact.append(math.sqrt(squares))
        logger.info(f"Artifact probe lambda={frequency:.3f}: primary {primary[-1]:.4e}, artifact {artifact[-1]:.4e}")

    primary_fit = fit_exponent(spec.frequencies, primary)
    artifact_fit = fit_exponent(spec.frequencies, artifact)
    centroid = centroid / centroid_weight if centroid_weight > 0 else np.full(d.dim, np.nan)
    return ArtifactReport(primary_fit, artifact_fit, artifact_fit.slope - primary_fit.slope,
                          np.array([img for img, _ in images]), centroid, control)


def psf_fit(m: MetricModel, d: DomainModel, phi: WeightField, x0: Sequence[float], settings: FlowSettings,
            width: float = 0.01, r_max: float = 0.2, radii: int = 12, rays: int = 4,
            directions: int = 1024) -> ExponentFit:
    """
    Radial exponent of the normal operator's kernel at x0.

    A Gaussian bump of the given width is pushed through the explicit normal
    operator and sampled at log-spaced radii in [4 width, r_max] along
    `rays` directions; the radial profile is the mean over directions.
    """
    x0 = np.asarray(x0, dtype=float)
    r_min = 4.0 * width
    if r_max / r_min < 2.0:
        raise PreconditionError(f"Fit window [{r_min:.3g}, {r_max:.3g}] spans less than a factor 2")
    if d.defining_value(x0) >= 0:
        raise PreconditionError("PSF center must lie inside the domain")
    scales = np.logspace(np.log10(r_min), np.log10(r_max), radii)
    units, _ = sphere_rule(d.dim, rays)
    points = (x0 + scales[:, None, None] * units[None, :, :]).reshape(-1, d.dim)
    if np.any(d.defining_value(points) >= 0):
        raise PreconditionError("PSF sample points leave the domain")

    def bump(x):
        return np.exp(-np.sum((np.asarray(x) - x0) ** 2, axis=-1) / (2.0 * width ** 2))

    values = evaluate_normal(m, d, bump, phi, points, settings, directions).reshape(radii, len(units))
    return fit_exponent(scales, values.mean(axis=1))
