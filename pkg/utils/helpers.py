"""
Helper Functions

This module contains file-format and run-bookkeeping helpers: timestamped
run directories, grid and sinogram files, content hashes and run manifests.
"""
import hashlib
import json
import logging
import os
import struct
import time
from datetime import datetime
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from config.settings import DEFAULT_RUNS_DIR, RUNS_DIR_ENV, TOOL_VERSION
from geodesic_engine.errors import ConfigError, PreconditionError
from geodesic_engine.flow import RayGrid
from geodesic_engine.xray import ScalarGrid, Sinogram

logger = logging.getLogger(__name__)

GRID_MAGIC = b'GXR1'
GRID_HEADER = struct.Struct('<4sId')
MANIFEST_NAME = 'manifest.json'


def runs_root() -> str:
    return os.environ.get(RUNS_DIR_ENV, DEFAULT_RUNS_DIR)


def create_run_directory(label: str, root: Optional[str] = None) -> str:
    """
    Create a fresh run directory named after the label and a timestamp.

    An existing directory is never reused; a numeric suffix is appended on
    collision.

    Args:
        label: Short run label, usually the experiment selector
        root: Parent directory; defaults to the runs root

    Returns:
        Path to the new directory
    """
    root = root or runs_root()
    os.makedirs(root, exist_ok=True)
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    base = os.path.join(root, f"{label}_{timestamp}")
    path, suffix = base, 1
    while True:
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            path = f"{base}_{suffix}"
            suffix += 1


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


# --------------------------------------------------------------------------
# Grid files
# --------------------------------------------------------------------------

def save_grid(grid: ScalarGrid, path: str) -> str:
    """
    Write a grid file: magic, u32 nodes per axis, f64 spacing, then float32
    node values and one mask byte per node, all little-endian in C order.
    """
    nodes = grid.shape[0]
    if any(n != nodes for n in grid.shape):
        raise PreconditionError("Grid files hold cubic grids only")
    with open(path, 'wb') as f:
        f.write(GRID_HEADER.pack(GRID_MAGIC, nodes, grid.spacing))
        f.write(grid.values.astype('<f4').tobytes(order='C'))
        f.write(grid.mask.astype(np.uint8).tobytes(order='C'))
    logger.info(f"Saved {grid.shape} grid to {path}")
    return path


def load_grid(path: str, origin: Optional[np.ndarray] = None) -> ScalarGrid:
    """
    Read a grid file. The dimension follows from the payload length; the
    origin defaults to a grid centred at 0.
    """
    with open(path, 'rb') as f:
        header = f.read(GRID_HEADER.size)
        payload = f.read()
    if len(header) < GRID_HEADER.size:
        raise PreconditionError(f"Truncated grid file: {path}")
    magic, nodes, spacing = GRID_HEADER.unpack(header)
    if magic != GRID_MAGIC:
        raise PreconditionError(f"Not a grid file (bad magic): {path}")
    for dim in (1, 2, 3):
        count = nodes ** dim
        if len(payload) == 5 * count:
            break
    else:
        raise PreconditionError(f"Grid payload of {len(payload)} bytes matches no dimension for {nodes} nodes")
    shape = (nodes,) * dim
    values = np.frombuffer(payload[:4 * count], dtype='<f4').astype(float).reshape(shape)
    mask = np.frombuffer(payload[4 * count:], dtype=np.uint8).astype(bool).reshape(shape)
    if origin is None:
        origin = np.full(dim, -0.5 * spacing * (nodes - 1))
    return ScalarGrid(values, np.asarray(origin, dtype=float), float(spacing), mask)


# --------------------------------------------------------------------------
# Sinogram files
# --------------------------------------------------------------------------

def save_sinogram(sinogram: Sinogram, path: str) -> str:
    """CSV with one column per ray parameter, then mu and value."""
    sinogram.to_frame().to_csv(path, index=False, float_format='%.17g')
    logger.info(f"Saved sinogram with {len(sinogram.values)} rays to {path}")
    return path


def load_sinogram(path: str, rays: RayGrid) -> Sinogram:
    """Values from a sinogram CSV, checked against the ray grid they belong to."""
    frame = pd.read_csv(path)
    expected = list(rays.names) + ['mu', 'value']
    if list(frame.columns) != expected:
        raise PreconditionError(f"Sinogram columns {list(frame.columns)} do not match {expected}")
    if len(frame) != len(rays):
        raise PreconditionError(f"Sinogram has {len(frame)} rows, ray grid has {len(rays)}")
    if not np.allclose(frame[list(rays.names)].to_numpy(), rays.params, atol=1e-12):
        raise PreconditionError("Sinogram ray parameters differ from the configured ray grid")
    return Sinogram(rays, frame['value'].to_numpy(dtype=float))


def save_frame(frame: pd.DataFrame, path: str) -> str:
    frame.to_csv(path, index=False, float_format='%.17g')
    logger.info(f"Saved {len(frame)} rows to {path}")
    return path


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------

class WarningCollector(logging.Handler):
    """Logging handler that keeps WARNING and above for the run manifest."""

    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages: List[str] = []

    def emit(self, record: logging.LogRecord) -> None:
        self.messages.append(f"{record.name}: {record.getMessage()}")


def build_manifest(config: Dict[str, Dict[str, str]], run_dir: str, outputs: List[str], started: float,
                   status: str, warnings: List[str], summary: Optional[Dict[str, Any]] = None,
                   error: Optional[str] = None) -> Dict[str, Any]:
    files = []
    for path in outputs:
        if os.path.exists(path):
            files.append({'path': os.path.relpath(path, run_dir), 'sha256': file_sha256(path)})
    return {
        'tool_version': TOOL_VERSION,
        'status': status,
        'error': error,
        'config': config,
        'wall_time': round(time.time() - started, 3),
        'warnings': list(warnings),
        'summary': summary or {},
        'outputs': files,
    }


def write_manifest(manifest: Dict[str, Any], run_dir: str) -> str:
    path = os.path.join(run_dir, MANIFEST_NAME)
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=2, default=_json_default)
    logger.info(f"Wrote manifest to {path}")
    return path


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Cannot serialise {type(value).__name__}")


def load_manifest(run_dir: str) -> Dict[str, Any]:
    with open(os.path.join(run_dir, MANIFEST_NAME), 'r') as f:
        return json.load(f)


def validate_manifest(run_dir: str) -> List[str]:
    """
    Re-check a run directory against its manifest.

    Returns:
        List of problems; empty when the echoed config validates and every
        listed output still has its recorded hash
    """
    from utils.experiment_config import config_from_mapping

    problems = []
    try:
        manifest = load_manifest(run_dir)
    except (OSError, json.JSONDecodeError) as e:
        return [f"Manifest unreadable: {e}"]
    try:
        config_from_mapping(manifest.get('config', {}))
    except ConfigError as e:
        problems.append(f"Echoed config does not validate: {e}")
    for entry in manifest.get('outputs', []):
        path = os.path.join(run_dir, entry['path'])
        if not os.path.exists(path):
            problems.append(f"Missing output {entry['path']}")
        elif file_sha256(path) != entry['sha256']:
            problems.append(f"Hash mismatch for {entry['path']}")
    return problems
