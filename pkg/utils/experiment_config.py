"""
Experiment Configuration

This module parses sectioned key-value experiment files, keeps the source
line of every key for error reporting and builds the engine objects
(metric, domain, flow settings, weight) a run needs.
"""
import configparser
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from config.settings import DEFAULT_FLOW_SETTINGS, EXPERIMENT_SELECTORS
from geodesic_engine import manifold
from geodesic_engine.errors import ConfigError
from geodesic_engine.flow import FlowSettings
from geodesic_engine.manifold import DomainModel, MetricModel
from geodesic_engine.xray import WeightField

logger = logging.getLogger(__name__)

SECTIONS = ('metric', 'domain', 'grid', 'flow', 'weight', 'experiment', 'run')
REQUIRED_SECTIONS = ('metric', 'domain', 'experiment')
METRIC_FAMILIES = ('euclidean', 'lens', 'sphere', 'constant')
DOMAIN_SHAPES = ('disk', 'ball', 'ellipse')

_SECTION_RE = re.compile(r'^\s*\[([^\]]+)\]')
_KEY_RE = re.compile(r'^\s*([A-Za-z_][\w\-]*)\s*[=:]')


def _line_index(text: str) -> Tuple[Dict[str, int], Dict[Tuple[str, str], int]]:
    """Source line of every section header and key (1-based)."""
    sections, keys = {}, {}
    current = None
    for number, line in enumerate(text.splitlines(), start=1):
        if line.lstrip().startswith(('#', ';')):
            continue
        match = _SECTION_RE.match(line)
        if match:
            current = match.group(1).strip()
            sections.setdefault(current, number)
            continue
        match = _KEY_RE.match(line)
        if match and current is not None:
            keys.setdefault((current, match.group(1).lower()), number)
    return sections, keys


@dataclass
class ExperimentConfig:
    """Validated view over an experiment file."""

    sections: Dict[str, Dict[str, str]]
    source: Optional[str] = None
    section_lines: Dict[str, int] = field(default_factory=dict)
    key_lines: Dict[Tuple[str, str], int] = field(default_factory=dict)

    # ----------------------------------------------------------------
    # Raw access
    # ----------------------------------------------------------------

    def error(self, message: str, section: Optional[str] = None, key: Optional[str] = None) -> ConfigError:
        line = None
        if section is not None and key is not None:
            line = self.key_lines.get((section, key))
        if line is None and section is not None:
            line = self.section_lines.get(section)
        return ConfigError(message, line, self.source)

    def has(self, section: str, key: str) -> bool:
        return key in self.sections.get(section, {})

    def get_str(self, section: str, key: str, default: Optional[str] = None) -> str:
        value = self.sections.get(section, {}).get(key)
        if value is None:
            if default is None:
                raise self.error(f"Missing key '{key}' in section [{section}]", section)
            return default
        return value.strip()

    def get_float(self, section: str, key: str, default: Optional[float] = None) -> float:
        if not self.has(section, key):
            if default is None:
                raise self.error(f"Missing key '{key}' in section [{section}]", section)
            return float(default)
        raw = self.get_str(section, key)
        try:
            return float(raw)
        except ValueError:
            raise self.error(f"Key '{key}' expects a number, got '{raw}'", section, key)

    def get_int(self, section: str, key: str, default: Optional[int] = None) -> int:
        value = self.get_float(section, key, default)
        if value != int(value):
            raise self.error(f"Key '{key}' expects an integer, got {value}", section, key)
        return int(value)

    def get_positive(self, section: str, key: str, default: Optional[float] = None) -> float:
        value = self.get_float(section, key, default)
        if value <= 0:
            raise self.error(f"Key '{key}' must be positive, got {value}", section, key)
        return value

    def get_floats(self, section: str, key: str, default: Optional[Sequence[float]] = None) -> Tuple[float, ...]:
        if not self.has(section, key):
            if default is None:
                raise self.error(f"Missing key '{key}' in section [{section}]", section)
            return tuple(float(v) for v in default)
        raw = self.get_str(section, key)
        try:
            return tuple(float(v) for v in re.split(r'[,\s]+', raw) if v)
        except ValueError:
            raise self.error(f"Key '{key}' expects a list of numbers, got '{raw}'", section, key)

    def get_ints(self, section: str, key: str, default: Optional[Sequence[int]] = None) -> Tuple[int, ...]:
        values = self.get_floats(section, key, default)
        if any(v != int(v) or v < 1 for v in values):
            raise self.error(f"Key '{key}' expects positive integers", section, key)
        return tuple(int(v) for v in values)

    def get_points(self, section: str, key: str, dim: int,
                   default: Optional[Sequence[Sequence[float]]] = None) -> np.ndarray:
        """Semicolon-separated points, each a comma-separated coordinate list."""
        if not self.has(section, key):
            if default is None:
                raise self.error(f"Missing key '{key}' in section [{section}]", section)
            return np.asarray(default, dtype=float).reshape(-1, dim)
        points = []
        for chunk in self.get_str(section, key).split(';'):
            try:
                coords = [float(v) for v in re.split(r'[,\s]+', chunk.strip()) if v]
            except ValueError:
                raise self.error(f"Key '{key}' has a malformed point '{chunk.strip()}'", section, key)
            if len(coords) != dim:
                raise self.error(f"Key '{key}' expects {dim} coordinates per point, got {len(coords)}",
                                 section, key)
            points.append(coords)
        return np.asarray(points, dtype=float)

    # ----------------------------------------------------------------
    # Built objects
    # ----------------------------------------------------------------

    @property
    def dim(self) -> int:
        dim = self.get_int('metric', 'dim', 2)
        if dim not in (2, 3):
            raise self.error(f"Dimension must be 2 or 3, got {dim}", 'metric', 'dim')
        return dim

    @property
    def selector(self) -> str:
        selector = self.get_str('experiment', 'selector')
        if selector not in EXPERIMENT_SELECTORS:
            raise self.error(f"Unknown selector '{selector}'; valid selectors: {', '.join(EXPERIMENT_SELECTORS)}",
                             'experiment', 'selector')
        return selector

    @property
    def seed(self) -> int:
        return self.get_int('run', 'seed', 0)

    def build_metric(self) -> MetricModel:
        family = self.get_str('metric', 'family')
        dim = self.dim
        if family == 'euclidean':
            return manifold.euclidean(dim)
        if family == 'sphere':
            return manifold.sphere_patch(dim)
        if family == 'constant':
            return manifold.constant_speed(dim, self.get_positive('metric', 'value', 1.0))
        if family == 'lens':
            amplitudes = self.get_floats('metric', 'amplitudes')
            widths = self.get_floats('metric', 'widths', (0.25,) * len(amplitudes))
            centers = self.get_points('metric', 'centers', dim, np.zeros((len(amplitudes), dim)))
            if not (len(amplitudes) == len(widths) == len(centers)):
                raise self.error("Lens amplitudes, widths and centers must have equal length", 'metric')
            if any(a <= -1.0 for a in amplitudes):
                raise self.error("Lens amplitudes must exceed -1 to keep the speed positive",
                                 'metric', 'amplitudes')
            if any(w <= 0 for w in widths):
                raise self.error("Lens widths must be positive", 'metric', 'widths')
            return manifold.gaussian_lens(dim, amplitudes, centers, widths)
        raise self.error(f"Unknown metric family '{family}'; expected one of {', '.join(METRIC_FAMILIES)}",
                         'metric', 'family')

    def build_domain(self, metric: Optional[MetricModel] = None) -> DomainModel:
        """
        Domain from [domain]. With a metric of matching dimension the boundary
        convexity certificate is run and a failure is logged as a warning.
        """
        domain = self._domain()
        if metric is not None and metric.dim == domain.dim:
            certificate = domain.convexity_certificate(metric)
            if not certificate.passed:
                logger.warning(f"{self.source or '<mapping>'}: boundary is not strictly convex for the "
                               f"{metric.family} metric (min curvature {certificate.min_curvature:.3e}); "
                               "geodesics may be trapped")
        return domain

    def _domain(self) -> DomainModel:
        shape = self.get_str('domain', 'shape', 'ball' if self.dim == 3 else 'disk')
        dim = self.dim
        center = self.get_floats('domain', 'center', (0.0,) * dim)
        if len(center) != dim:
            raise self.error(f"Domain center needs {dim} coordinates", 'domain', 'center')
        if shape == 'ellipse':
            axes = self.get_floats('domain', 'semi_axes')
            if len(axes) != dim or any(a <= 0 for a in axes):
                raise self.error(f"Ellipse needs {dim} positive semi-axes", 'domain', 'semi_axes')
            return manifold.ellipse(axes, center)
        if shape not in DOMAIN_SHAPES:
            raise self.error(f"Unknown domain shape '{shape}'; expected one of {', '.join(DOMAIN_SHAPES)}",
                             'domain', 'shape')
        if (shape == 'disk') != (dim == 2):
            raise self.error(f"Domain shape '{shape}' does not match dimension {dim}", 'domain', 'shape')
        radius = self.get_positive('domain', 'radius', 1.0)
        return manifold.disk(radius, center) if dim == 2 else manifold.ball(radius, center)

    def build_flow_settings(self) -> FlowSettings:
        values = {}
        for key, raw in self.sections.get('flow', {}).items():
            if key not in DEFAULT_FLOW_SETTINGS:
                raise self.error(f"Unknown flow setting '{key}'", 'flow', key)
            values[key] = self.get_positive('flow', key)
        if self.has('run', 'workers'):
            values['workers'] = self.get_int('run', 'workers')
        try:
            return FlowSettings.from_mapping(values)
        except (KeyError, ValueError) as e:
            raise self.error(str(e), 'flow')

    def build_weight(self) -> WeightField:
        if 'weight' not in self.sections:
            return WeightField()
        dim = self.dim
        kind = self.get_str('weight', 'kind', 'constant')
        center = self.get_floats('weight', 'center', ())
        axis = self.get_floats('weight', 'axis', ())
        for key, vec in (('center', center), ('axis', axis)):
            if vec and len(vec) != dim:
                raise self.error(f"Weight {key} needs {dim} coordinates", 'weight', key)
        try:
            return WeightField(
                kind=kind,
                value=self.get_float('weight', 'value', 1.0),
                center=center,
                radius=self.get_float('weight', 'radius', 0.5),
                axis=axis,
                threshold=self.get_float('weight', 'threshold', 0.0),
                width=self.get_float('weight', 'width', 0.0),
            )
        except ValueError as e:
            raise self.error(str(e), 'weight')

    def validate(self) -> 'ExperimentConfig':
        """Check required sections and build every object once; raises ConfigError."""
        for section in self.sections:
            if section not in SECTIONS:
                raise self.error(f"Unknown section [{section}]; expected one of {', '.join(SECTIONS)}", section)
        for section in REQUIRED_SECTIONS:
            if section not in self.sections:
                raise ConfigError(f"Missing required section [{section}]", None, self.source)
        _ = self.selector
        metric = self.build_metric()
        domain = self.build_domain()
        if metric.dim != domain.dim:
            raise self.error("Metric and domain dimensions differ", 'domain')
        self.build_flow_settings()
        self.build_weight()
        logger.info(f"Validated config {self.source or '<mapping>'}: {self.selector} in {self.dim}D")
        return self

    def as_dict(self) -> Dict[str, Dict[str, str]]:
        return {section: dict(values) for section, values in self.sections.items()}


def parse_config_text(text: str, source: Optional[str] = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section='__defaults__')
    try:
        parser.read_string(text, source=source or '<string>')
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("Key outside any section", e.lineno, source)
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as e:
        raise ConfigError(e.message.split(': ', 1)[-1], e.lineno, source)
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigError("Malformed line", line, source)
    section_lines, key_lines = _line_index(text)
    sections = {name: dict(parser.items(name)) for name in parser.sections()}
    return ExperimentConfig(sections, source, section_lines, key_lines)


def load_config(path: str) -> ExperimentConfig:
    """Read and validate an experiment file."""
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    with open(path, 'r') as f:
        text = f.read()
    return parse_config_text(text, source=path).validate()


def config_from_mapping(sections: Dict[str, Dict[str, Any]], source: Optional[str] = None) -> ExperimentConfig:
    """Config from nested dicts (manifest echoes, tests); values are stringified."""
    normalised = {name: {str(k).lower(): str(v) for k, v in values.items()} for name, values in sections.items()}
    return ExperimentConfig(normalised, source).validate()
