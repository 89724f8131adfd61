import json

import numpy as np
import pandas as pd

from tpmhdg.cli import run
from tpmhdg.verification import REPORT_COLUMNS


def config_file(tmp_path, **values):
    filename = tmp_path / 'config.json'
    filename.write_text(json.dumps(values))
    return str(filename)


def test_no_command(capsys):
    assert run([]) == 0


def test_config_error_exit_code(tmp_path):
    out = str(tmp_path / 'out')
    assert run(['solve', '--config', config_file(tmp_path, k=7), '--out', out, '--quiet']) == 1
    assert run(['solve', '--config', str(tmp_path / 'missing.json'), '--out', out, '--quiet']) == 1


def test_numerical_error_exit_code(tmp_path):
    out = str(tmp_path / 'out')
    cfg = config_file(tmp_path, example=1, k=0, n=2)
    assert run(['solve', '--config', cfg, '--out', out, '--quiet']) == 2


def test_solve_zero_data(tmp_path):
    out = tmp_path / 'out'
    cfg = config_file(tmp_path, example=1, k=1, n=8, zero_data=True)
    assert run(['solve', '--config', cfg, '--out', str(out), '--quiet']) == 0
    frame = pd.read_csv(str(out / 'diagnostics.csv'), index_col='quantity')
    for name in ('q', 'y', 'yhat', 'p', 'z', 'zhat'):
        assert abs(float(frame.loc['norm_' + name, 'value'])) <= 1e-10
    assert (out / 'solution_y.csv').exists()
    assert (out / 'log' / 'logfile.log').exists()


def test_solve_reports_errors(tmp_path, capsys):
    out = tmp_path / 'out'
    cfg = config_file(tmp_path, example=1, k=1, n=8)
    assert run(['solve', '--config', cfg, '--out', str(out), '--mode', 'monolithic']) == 0
    printed = capsys.readouterr().out
    assert 'e_y=' in printed
    assert 'mode=monolithic' in printed


def test_mesh_info(tmp_path, capsys):
    out = tmp_path / 'out'
    assert run(['mesh-info', '--out', str(out)]) == 0
    printed = capsys.readouterr().out
    assert 'n_elements=' in printed
    assert 'R=' in printed
    assert (out / 'mesh.txt').exists()
    frame = pd.read_csv(str(out / 'm_conditions.csv'))
    assert frame['cond2'].all()


def test_check_assumptions_fitted(tmp_path):
    out = tmp_path / 'out'
    cfg = config_file(tmp_path, example='custom', domain='square', y='x*y', z='x', beta=[1, 1], n=4, k=1)
    assert run(['check-assumptions', '--config', cfg, '--out', str(out), '--quiet']) == 0
    summary = pd.read_csv(str(out / 'admissibility.summary.csv'), index_col='quantity')
    assert summary.loc['passed', 'value'] in (True, 'True')


def test_study(tmp_path):
    out = tmp_path / 'out'
    cfg = config_file(tmp_path, example=1, k=0, levels=[4, 8])
    assert run(['study', '--config', cfg, '--out', str(out), '--quiet']) == 0
    frame = pd.read_csv(str(out / 'convergence_example1_k0.csv'))
    assert list(frame.columns) == REPORT_COLUMNS
    assert len(frame) == 2
    assert np.isfinite(frame['e_y']).all()
    assert (out / 'convergence_example1_k0.md').exists()


def test_project_tests(tmp_path):
    out = tmp_path / 'out'
    cfg = config_file(tmp_path, example=1, k=0, n=8)
    assert run(['project-tests', '--config', cfg, '--out', str(out), '--quiet']) == 0
    frame = pd.read_csv(str(out / 'property_suites.csv'))
    assert frame['passed'].all()
