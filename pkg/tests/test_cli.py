import json
import os
import textwrap

import numpy as np
import pytest

from geodesic_engine.errors import ConfigError, PreconditionError
from geodesic_engine.experiments import describe
from geodesic_engine.flow import RayGrid
from geodesic_engine.xray import ScalarGrid, Sinogram
from run_experiment import EXIT_SUCCESS, EXIT_USAGE, main
from utils.experiment_config import load_config, parse_config_text
from utils.helpers import (
    file_sha256,
    load_grid,
    load_manifest,
    load_sinogram,
    save_grid,
    save_sinogram,
    validate_manifest,
)

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'data', 'configs')

SMALL_FORWARD = """
    [metric]
    family = euclidean
    dim = 2

    [domain]
    shape = disk

    [grid]
    nodes = 16
    rays = 8, 8

    [flow]
    step = 0.03125

    [experiment]
    selector = forward
    phantom = gaussian
    phantom_width = 0.2

    [run]
    seed = 3
"""


def write_config(directory, text, name='experiment.cfg'):
    path = os.path.join(str(directory), name)
    with open(path, 'w') as f:
        f.write(textwrap.dedent(text).lstrip())
    return path


def only_run_dir(root):
    entries = [os.path.join(root, e) for e in os.listdir(root)]
    assert len(entries) == 1
    return entries[0]


def test_forward_run_writes_outputs_and_manifest(tmp_path):
    config = write_config(tmp_path, SMALL_FORWARD)
    runs = str(tmp_path / 'runs')
    assert main(['run', config, '--runs-dir', runs]) == EXIT_SUCCESS
    run_dir = only_run_dir(runs)
    assert os.path.basename(run_dir).startswith('forward_')
    for name in ('sinogram.csv', 'phantom.gxr', 'run.log', 'manifest.json'):
        assert os.path.exists(os.path.join(run_dir, name))
    manifest = load_manifest(run_dir)
    assert manifest['status'] == 'ok'
    assert manifest['config']['experiment']['selector'] == 'forward'
    assert manifest['summary']['rays'] == 64
    assert {entry['path'] for entry in manifest['outputs']} == {'sinogram.csv', 'phantom.gxr'}
    assert validate_manifest(run_dir) == []


def test_manifest_detects_modified_output(tmp_path):
    config = write_config(tmp_path, SMALL_FORWARD)
    runs = str(tmp_path / 'runs')
    main(['run', config, '--runs-dir', runs])
    run_dir = only_run_dir(runs)
    with open(os.path.join(run_dir, 'sinogram.csv'), 'a') as f:
        f.write('0,0,0,0\n')
    problems = validate_manifest(run_dir)
    assert any('sinogram.csv' in p for p in problems)


def test_runs_are_deterministic(tmp_path):
    config = write_config(tmp_path, SMALL_FORWARD)
    hashes = []
    for label in ('first', 'second'):
        runs = str(tmp_path / label)
        assert main(['run', config, '--runs-dir', runs]) == EXIT_SUCCESS
        hashes.append(file_sha256(os.path.join(only_run_dir(runs), 'sinogram.csv')))
    assert hashes[0] == hashes[1]


def test_unknown_selector_is_a_usage_error(tmp_path, capsys):
    config = write_config(tmp_path, SMALL_FORWARD.replace('selector = forward', 'selector = backproject'))
    runs = str(tmp_path / 'runs')
    assert main(['run', config, '--runs-dir', runs]) == EXIT_USAGE
    out = capsys.readouterr().out
    assert 'backproject' in out
    assert 'adjoint-check' in out
    manifest = load_manifest(only_run_dir(runs))
    assert manifest['status'] == 'invalid'
    assert manifest['error']


def test_describe_names_missing_section(tmp_path, capsys):
    text = SMALL_FORWARD.replace('[metric]', '[metrics]')
    config = write_config(tmp_path, text)
    assert main(['describe', config]) == EXIT_USAGE
    assert 'metric' in capsys.readouterr().out


def test_describe_missing_file(tmp_path):
    assert main(['describe', str(tmp_path / 'absent.cfg')]) == EXIT_USAGE


def test_bad_arguments_are_usage_errors():
    assert main(['frobnicate']) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_describe_prints_plan(tmp_path, capsys):
    config = write_config(tmp_path, SMALL_FORWARD)
    assert main(['describe', config]) == EXIT_SUCCESS
    out = capsys.readouterr().out
    assert 'EXPERIMENT PLAN' in out
    assert '8 x 8 (64 rays)' in out


def test_describe_three_dimensional_defaults():
    plan = describe(load_config(os.path.join(CONFIG_DIR, 'euclidean3d_spectrum.cfg')))
    assert plan.dim == 3
    assert plan.sphere_nodes == 256
    assert plan.ray_counts == (32, 64, 16, 32)


@pytest.mark.parametrize("name", sorted(os.listdir(CONFIG_DIR)))
def test_shipped_configs_validate(name):
    config = load_config(os.path.join(CONFIG_DIR, name))
    assert describe(config).total_rays > 0


def test_adjoint_check_run_passes(tmp_path):
    text = """
        [metric]
        family = lens
        amplitudes = -0.5
        widths = 0.25

        [domain]
        shape = disk

        [grid]
        nodes = 32
        rays = 64, 64
        directions = 64

        [flow]
        step = 0.015625

        [experiment]
        selector = adjoint-check
        pairs = 2

        [run]
        seed = 11
    """
    config = write_config(tmp_path, text)
    runs = str(tmp_path / 'runs')
    assert main(['run', config, '--runs-dir', runs]) == EXIT_SUCCESS
    run_dir = only_run_dir(runs)
    with open(os.path.join(run_dir, 'manifest.json')) as f:
        summary = json.load(f)['summary']
    assert summary['pairs'] == 2
    assert summary['max_relative_error'] < 1e-3
    assert summary['max_discrete_error'] < 1e-10


def test_config_errors_carry_line_numbers():
    text = textwrap.dedent(SMALL_FORWARD).lstrip().replace('nodes = 16', 'nodes = sixteen')
    config = parse_config_text(text, source='inline.cfg').validate()
    with pytest.raises(ConfigError) as info:
        config.get_int('grid', 'nodes')
    assert info.value.line == text.splitlines().index('nodes = sixteen') + 1
    assert 'inline.cfg' in str(info.value)


def test_unknown_flow_key_is_rejected():
    text = textwrap.dedent(SMALL_FORWARD).lstrip().replace('step = 0.03125', 'stride = 0.03125')
    with pytest.raises(ConfigError):
        parse_config_text(text).validate()


def test_grid_file_round_trip(tmp_path, unit_disk):
    grid = ScalarGrid.from_function(unit_disk, 9, lambda x: 1.0 + x[..., 0] - 2.0 * x[..., 1])
    path = save_grid(grid, str(tmp_path / 'field.gxr'))
    loaded = load_grid(path)
    assert loaded.shape == grid.shape
    assert np.array_equal(loaded.mask, grid.mask)
    assert np.allclose(loaded.values, grid.values, rtol=1e-6)
    assert np.allclose(loaded.origin, grid.origin)
    with open(path, 'r+b') as f:
        f.write(b'XXXX')
    with pytest.raises(PreconditionError):
        load_grid(path)


def test_sinogram_file_checks_ray_grid(tmp_path, flat2, unit_disk):
    rays = RayGrid.build(unit_disk, flat2, (8, 8), 1e-3)
    sinogram = Sinogram(rays, np.linspace(0.0, 1.0, len(rays)))
    path = save_sinogram(sinogram, str(tmp_path / 'data.csv'))
    assert np.allclose(load_sinogram(path, rays).values, sinogram.values, rtol=1e-15, atol=0.0)
    with pytest.raises(PreconditionError):
        load_sinogram(path, RayGrid.build(unit_disk, flat2, (8, 4), 1e-3))


def test_concave_chart_domain_is_logged(caplog):
    text = """
        [metric]
        family = sphere

        [domain]
        shape = disk
        radius = 1.2

        [experiment]
        selector = forward
    """
    config = parse_config_text(textwrap.dedent(text).lstrip(), source='concave.cfg').validate()
    with caplog.at_level('WARNING'):
        config.build_domain(config.build_metric())
    assert any('not strictly convex' in record.getMessage() for record in caplog.records)
    caplog.clear()
    with caplog.at_level('WARNING'):
        config.build_domain()
    assert not caplog.records
