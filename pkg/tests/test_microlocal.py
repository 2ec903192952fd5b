import numpy as np
import pytest

from geodesic_engine.errors import PreconditionError
from geodesic_engine.flow import FlowSettings
from geodesic_engine.microlocal import (
    ProbeSpec,
    artifact_probe,
    default_frequencies,
    fit_exponent,
    order_probe,
    psf_fit,
    transect,
    transect_amplitude,
)
from geodesic_engine.xray import WeightField


def test_probe_spec_validation():
    with pytest.raises(ValueError):
        ProbeSpec((0.0, 0.0), (1.0, 0.0), (8.0, 16.0))
    with pytest.raises(ValueError):
        ProbeSpec((0.0, 0.0), (1.0, 0.0), (8.0, 32.0, 16.0))
    with pytest.raises(ValueError):
        ProbeSpec((0.0, 0.0), (1.0, 0.0), (8.0, 16.0, 32.0))
    with pytest.raises(ValueError):
        ProbeSpec((0.0, 0.0), (0.0, 0.0), (8.0, 16.0, 64.0))
    spec = ProbeSpec((0.0, 0.0), (3.0, 4.0), (8.0, 16.0, 64.0))
    assert np.allclose(spec.unit_direction, [0.6, 0.8])


def test_probe_field_is_modulated_gaussian():
    spec = ProbeSpec((0.1, 0.0), (1.0, 0.0), (4.0, 8.0, 32.0), width=0.2)
    f = spec.field(4.0)
    assert f(np.array([0.1, 0.0])) == pytest.approx(1.0)
    x = np.array([0.1 + np.pi / 8.0, 0.0])
    assert f(x) == pytest.approx(0.0, abs=1e-12)


def test_fit_exponent_recovers_power_law():
    scales = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
    fit = fit_exponent(scales, 3.0 * scales ** -1.5)
    assert fit.slope == pytest.approx(-1.5)
    assert np.exp(fit.intercept) == pytest.approx(3.0)
    assert fit.conclusive
    assert fit.claimed_slope() == pytest.approx(-1.5)


def test_fit_exponent_flags_scatter():
    fit = fit_exponent([1.0, 2.0, 4.0, 8.0], [1.0, 0.1, 2.0, 0.05])
    assert not fit.conclusive
    assert fit.claimed_slope() is None


def test_transect_amplitude_scales_linearly():
    points, spacing = transect(np.zeros(2), np.array([1.0, 0.0]), 1.0, 20.0)
    assert spacing == pytest.approx(2.0 * np.pi / 20.0 / 8.0)
    wave = np.cos(20.0 * points[:, 0])
    single = transect_amplitude(wave, spacing)
    assert single > 0.5
    assert transect_amplitude(2.0 * wave + 5.0, spacing) == pytest.approx(2.0 * single, rel=1e-10)
    assert transect_amplitude(np.full(len(points), 3.0), spacing) == pytest.approx(0.0)


def test_default_frequencies(unit_disk):
    assert default_frequencies(unit_disk, (8.0, 16.0)) == (4.0, 8.0)


def test_probe_preconditions(flat2, unit_disk, settings):
    off_centre = ProbeSpec((0.9, 0.0), (1.0, 0.0), (4.0, 8.0, 32.0), width=0.15)
    with pytest.raises(PreconditionError):
        order_probe(flat2, unit_disk, WeightField(), off_centre, settings)
    too_fast = ProbeSpec((0.0, 0.0), (1.0, 0.0), (8.0, 32.0, 200.0), width=0.15)
    with pytest.raises(PreconditionError):
        order_probe(flat2, unit_disk, WeightField(), too_fast, settings)
    with pytest.raises(PreconditionError):
        psf_fit(flat2, unit_disk, WeightField(), (0.0, 0.0), settings, width=0.05, r_max=0.3)


def test_euclidean_normal_operator_has_order_minus_one(flat2, unit_disk):
    spec = ProbeSpec((0.0, 0.0), (1.0, 0.0), (8.0, 16.0, 32.0, 64.0), width=0.2)
    fit = order_probe(flat2, unit_disk, WeightField(), spec, FlowSettings(step=1.0 / 256.0), directions=256)
    assert -1.25 <= fit.slope <= -0.75


def test_euclidean_kernel_singularity(flat2, unit_disk, settings):
    # the Euclidean normal kernel is 2 / |x - y| in the plane
    fit = psf_fit(flat2, unit_disk, WeightField(), (0.0, 0.0), settings)
    assert fit.slope == pytest.approx(-1.0, abs=0.05)


def test_artifact_probe_control_without_conjugate_points(flat2, unit_disk):
    spec = ProbeSpec((-0.4, 0.0), (1.0, 0.0), (4.0, 8.0, 32.0), width=0.1)
    report = artifact_probe(flat2, unit_disk, WeightField(), spec, FlowSettings(step=1.0 / 128.0),
                            directions=64)
    assert report.control
    assert np.allclose(report.images, [[0.4, 0.0]])
    frame = report.to_frame()
    assert list(frame['frequency']) == [4.0, 8.0, 32.0]
    assert np.all(frame['primary_amplitude'] > frame['artifact_amplitude'])
