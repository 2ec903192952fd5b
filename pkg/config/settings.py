"""
Configuration Settings

This module contains default settings for the geodesic X-ray toolkit.
Values here are used whenever an experiment config leaves a key out.
"""

TOOL_VERSION = "0.4.0"

# Environment variable naming the root directory for run outputs
RUNS_DIR_ENV = "GXR_RUNS_DIR"
DEFAULT_RUNS_DIR = "./runs"

# Geometry tolerances
BOUNDARY_TOLERANCE = 1e-9  # |rho(x)| below this counts as on the boundary
UNIT_SPEED_TOLERANCE = 1e-8
CONVEXITY_SAMPLES = 1000
ELLIPTICITY_POINTS = 32  # masked nodes sampled before an inversion or spectrum run

# Flow integration defaults
DEFAULT_FLOW_SETTINGS = {
    'step': 1.0 / 128.0,
    'rho_pad': 0.05,
    'mu_min': 1e-3,
    'boundary_tol': BOUNDARY_TOLERANCE,
    'unit_speed_tol': UNIT_SPEED_TOLERANCE,
    'max_time_factor': 50.0,
    'chunk_size': 32768,
    'workers': 1,
}

# Exit root polish
BISECTION_ITERATIONS = 56

# Conjugate point detection
TOL_RANK = 1e-6
TOL_GRAPH = 1e-4
STENCIL_RADIUS = 1e-2
ETALEM_STEP = 1e-4
ETALEM_MAX_SHRINKS = 3
ETALEM_TOLERANCE = 5e-3

# Microlocal probes
FIT_RESIDUAL_LIMIT = 0.05
DEFAULT_FREQUENCY_FACTORS = (8.0, 16.0, 32.0, 64.0)  # divided by domain diameter
NYQUIST_MARGIN = 0.5  # lambda * h must stay below this
ARTIFACT_NOISE_FLOOR = 1e-2

# Inversion
CG_TOLERANCE = 1e-8
CG_MAX_ITERATIONS = 500
DISCREPANCY_FACTOR = 1.1
DISCREPANCY_ITERATIONS = 40
HILBERT_PADDING = 2.0
SMOOTHING_ORDERS = (-1.0, -0.5, 0.0)  # s in ||N f||_{H^{s+1}} / ||f||_{H^s}

# Experiment selectors understood by the runner
EXPERIMENT_SELECTORS = [
    'forward',
    'adjoint-check',
    'normal',
    'conjugates',
    'graph-test',
    'probe',
    'psf',
    'invert',
    'rate',
    'spectrum',
]

# Adjoint-check acceptance threshold
ADJOINT_CHECK_THRESHOLD = 1e-3
