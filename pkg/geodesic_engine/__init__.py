"""
Geodesic Engine

This package contains the numerical core: metric geometry, geodesic flow,
the weighted geodesic X-ray transform, conjugate point analysis,
microlocal order probes and Hilbert-scale inversion.
"""
from config.settings import TOOL_VERSION

__version__ = TOOL_VERSION
