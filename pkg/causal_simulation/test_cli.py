import logging
import os
import tempfile
import textwrap

import pandas as pd  # type: ignore
import pytest

from causal_simulation.cli import EXIT_FAILURE, EXIT_INVALID, EXIT_LOCKED, EXIT_OK, main
from causal_simulation.output.file import LOCK_FILE

EXPERIMENTS_DIR = os.path.join(os.path.dirname(__file__), '..', 'experiments')

SMALL_SCM = textwrap.dedent('''\
    version: 1
    model:
      scm:
        beta_a: 0.2
        beta_x: [-0.05]
        beta_u: 0.3
        gamma_x: [0.6]
        gamma_u: 0.3
        var_eps_a: 0.55
        var_eps_y: 0.8435
    run:
      seed: 2021
      n: 200
      replications: 20
    arms:
      - label: control
      - label: direct
        parameter: gamma_u
        value: 0.55
        mode: direct_effect
        hold: [var_a, var_y]
    sweeps:
      - label: gamma_u
        parameter: gamma_u
        grid:
          values: [0.1, 0.3, 0.5]
        modes: [total_effect, direct_effect]
        hold: [var_a, var_y]
        replications_per_point: 10
''')

SMALL_LAB = textwrap.dedent('''\
    version: 1
    model:
      lab:
        arms:
          - label: sigmoid
            mean_function:
              kind: sigmoid_sum
              p: 2
              alphas: [[3, 3], [3, -3]]
              var_eps: 0.08
        net:
          restarts: 1
          max_epochs: 20
        n_train: 20
        n_test: 50
        n_mc: 1000
    run:
      seed: 3
      replications: 2
''')


def _write(directory: str, text: str) -> str:
    path = os.path.join(directory, 'experiment.yaml')
    with open(path, 'w') as f_experiment:
        f_experiment.write(text)
    return path


def _read(directory: str, name: str) -> bytes:
    with open(os.path.join(directory, name), 'rb') as f_result:
        return f_result.read()


def test_validate_shipped(capsys: pytest.CaptureFixture) -> None:  # type: ignore
    path = os.path.join(EXPERIMENTS_DIR, 'gamma_u_arms.yaml')
    assert main(['validate', path]) == EXIT_OK
    assert capsys.readouterr().out == f'{path}: OK\n'


def test_validate_reports_diagnostics(capsys: pytest.CaptureFixture) -> None:  # type: ignore
    with tempfile.TemporaryDirectory() as tmp_dir:
        path = _write(tmp_dir, SMALL_SCM.replace('value: 0.55', 'value: 0.9'))
        assert main(['validate', path]) == EXIT_INVALID
    out = capsys.readouterr().out
    assert out.startswith(f'{path}:19: infeasible error at arms[1].value: ')
    assert '0.8' in out


def test_run_writes_results(capsys: pytest.CaptureFixture) -> None:  # type: ignore
    with tempfile.TemporaryDirectory() as tmp_dir:
        out_dir = os.path.join(tmp_dir, 'results')
        assert main(['run', _write(tmp_dir, SMALL_SCM), '--out', out_dir]) == EXIT_OK
        assert sorted(os.listdir(out_dir)) == [
            'analytic.csv', 'analytic.json', 'arms.csv', 'arms.json', 'summary.txt', 'sweep_gamma_u.csv', 'sweep_gamma_u.json',
        ]
        analytic = pd.read_csv(os.path.join(out_dir, 'analytic.csv'))
        sweep = pd.read_csv(os.path.join(out_dir, 'sweep_gamma_u.csv'))
    assert analytic['label'].tolist() == ['control', 'direct']
    assert analytic['plim_conditional'].tolist() == pytest.approx([0.340625, 0.4578125])
    assert analytic['bias_amplification_ratio'][0] == pytest.approx(2.34375)
    assert sweep.columns[0] == 'grid_value'
    assert 'total_effect.mean_bhat_x' in sweep.columns and 'direct_effect.mean_add_abs_bias' in sweep.columns
    assert sweep['grid_value'].tolist() == [0.1, 0.3, 0.5]
    out = capsys.readouterr().out
    assert '== analytic ==' in out
    assert out.endswith(f'Results written to {out_dir}\n')


def test_run_is_independent_of_thread_count() -> None:
    with tempfile.TemporaryDirectory() as tmp_dir:
        path = _write(tmp_dir, SMALL_SCM)
        outputs = {}
        for threads in (1, 4, 8):
            out_dir = os.path.join(tmp_dir, f'threads_{threads}')
            assert main(['run', path, '--out', out_dir, '--threads', str(threads)]) == EXIT_OK
            outputs[threads] = {name: _read(out_dir, name) for name in ('arms.csv', 'sweep_gamma_u.csv', 'analytic.csv')}
    assert outputs[1] == outputs[4] == outputs[8]


def test_seed_override_changes_results() -> None:
    with tempfile.TemporaryDirectory() as tmp_dir:
        path = _write(tmp_dir, SMALL_SCM)
        assert main(['run', path, '--out', os.path.join(tmp_dir, 'a')]) == EXIT_OK
        assert main(['sweep', path, '--out', os.path.join(tmp_dir, 'b'), '--seed', '7']) == EXIT_OK
        assert _read(os.path.join(tmp_dir, 'a'), 'analytic.csv') == _read(os.path.join(tmp_dir, 'b'), 'analytic.csv')
        assert _read(os.path.join(tmp_dir, 'a'), 'arms.csv') != _read(os.path.join(tmp_dir, 'b'), 'arms.csv')


def test_fast_profile_caps_replications(caplog: pytest.LogCaptureFixture) -> None:
    with tempfile.TemporaryDirectory() as tmp_dir:
        text = SMALL_SCM.replace('replications: 20', 'replications: 5000').replace('n: 200', 'n: 20')
        with caplog.at_level(logging.INFO):
            assert main(['run', _write(tmp_dir, text), '--out', os.path.join(tmp_dir, 'out'), '--profile', 'fast']) == EXIT_OK
    assert 'Fast profile: replications capped at 500' in caplog.text
    assert "(500 replications, n=20)" in caplog.text


def test_existing_results_are_not_overwritten() -> None:
    with tempfile.TemporaryDirectory() as tmp_dir:
        path = _write(tmp_dir, SMALL_SCM)
        out_dir = os.path.join(tmp_dir, 'out')
        assert main(['run', path, '--out', out_dir]) == EXIT_OK
        assert main(['run', path, '--out', out_dir]) == EXIT_FAILURE
        assert main(['run', path, '--out', out_dir, '--overwrite']) == EXIT_OK


def test_locked_output_directory() -> None:
    with tempfile.TemporaryDirectory() as tmp_dir:
        out_dir = os.path.join(tmp_dir, 'out')
        os.makedirs(out_dir)
        with open(os.path.join(out_dir, LOCK_FILE), 'w'):
            pass
        assert main(['run', _write(tmp_dir, SMALL_SCM), '--out', out_dir]) == EXIT_LOCKED
        assert os.listdir(out_dir) == [LOCK_FILE]


def test_invalid_file_does_not_run() -> None:
    with tempfile.TemporaryDirectory() as tmp_dir:
        out_dir = os.path.join(tmp_dir, 'out')
        assert main(['run', _write(tmp_dir, SMALL_SCM.replace('  seed: 2021\n', '')), '--out', out_dir]) == EXIT_INVALID
        assert not os.path.exists(out_dir)


def test_run_lab() -> None:
    with tempfile.TemporaryDirectory() as tmp_dir:
        out_dir = os.path.join(tmp_dir, 'out')
        assert main(['run', _write(tmp_dir, SMALL_LAB), '--out', out_dir]) == EXIT_OK
        lab = pd.read_csv(os.path.join(out_dir, 'lab.csv'))
        raw = pd.read_csv(os.path.join(out_dir, 'lab_raw.csv'))
        with open(os.path.join(out_dir, 'summary.txt')) as f_summary:
            summary = f_summary.read()
    assert lab['label'].tolist() == ['sigmoid']
    assert lab['var_eps'][0] == pytest.approx(0.08)
    assert raw['replication'].tolist() == [0, 1]
    assert '== lab ==' in summary
    assert 'lab_raw' not in summary


def test_run_with_calibration() -> None:
    text = SMALL_SCM.split('sweeps:')[0] + textwrap.dedent('''\
        calibrate:
          - label: numeric_direct
            arm: control
            free_params: [var_eps_a]
            targets: {var_a: 1.2}
            mc_sample_size: 2000
            emit_arm: calibrated
    ''')
    with tempfile.TemporaryDirectory() as tmp_dir:
        out_dir = os.path.join(tmp_dir, 'out')
        assert main(['run', _write(tmp_dir, text), '--out', out_dir]) == EXIT_OK
        calibration = pd.read_csv(os.path.join(out_dir, 'calibration.csv'))
        analytic = pd.read_csv(os.path.join(out_dir, 'analytic.csv'))
    assert calibration['solved_value'][0] == pytest.approx(0.75, rel=1e-6)
    assert bool(calibration['converged'][0])
    assert analytic['label'].tolist() == ['control', 'direct', 'calibrated']
    assert analytic['var_a'][2] == pytest.approx(1.2, rel=1e-6)


def test_explain(capsys: pytest.CaptureFixture) -> None:  # type: ignore
    assert main(['explain', os.path.join(EXPERIMENTS_DIR, 'gamma_u_arms.yaml')]) == EXIT_OK
    out = capsys.readouterr().out
    assert 'Treatment gamma_u -> beta_hat: 3 path(s)' in out
    assert '  direct:      gamma_u -> beta_hat' in out
    assert '  blocking set 1: {' in out


def test_explain_formats_and_treatments(capsys: pytest.CaptureFixture) -> None:  # type: ignore
    assert main(['explain', os.path.join(EXPERIMENTS_DIR, 'gamma_u_arms.yaml'), '--format', 'dot']) == EXIT_OK
    assert capsys.readouterr().out.startswith('digraph influence_diagram {')
    assert main(['explain', os.path.join(EXPERIMENTS_DIR, 'esl_original.yaml')]) == EXIT_OK
    assert 'Treatment p -> relative_mse' in capsys.readouterr().out
    assert main(['explain', os.path.join(EXPERIMENTS_DIR, 'gamma_u_arms.yaml'), '--treatment', 'theta']) == EXIT_INVALID
    assert 'unsupported' in capsys.readouterr().out
