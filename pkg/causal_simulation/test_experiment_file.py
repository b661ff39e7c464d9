import glob
import os
import tempfile
import textwrap

import pytest

from causal_simulation.errors import ValidationError
from causal_simulation.experiment_file import FAST_PROFILE_REPLICATIONS, Diagnostic, DiagnosticKind, GridConfig, Profile, RunConfig, \
    load_experiment, parse_experiment, validate_experiment
from causal_simulation.interventions import InterventionMode

EXPERIMENTS_DIR = os.path.join(os.path.dirname(__file__), '..', 'experiments')

CONTROL = textwrap.dedent('''\
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
''')


def _diagnostics(text: str) -> list:  # type: ignore
    experiment, index, diagnostics = parse_experiment(text)
    if experiment is None:
        return diagnostics
    return validate_experiment(experiment, index)


@pytest.mark.parametrize('path', sorted(glob.glob(os.path.join(EXPERIMENTS_DIR, '*.yaml'))), ids=os.path.basename)
def test_shipped_experiments_are_valid(path: str) -> None:
    experiment, index, diagnostics = load_experiment(path)
    assert diagnostics == []
    assert experiment is not None
    assert validate_experiment(experiment, index) == []


def test_shipped_experiments_exist() -> None:
    names = {os.path.basename(path) for path in glob.glob(os.path.join(EXPERIMENTS_DIR, '*.yaml'))}
    assert {'gamma_u_arms.yaml', 'gamma_x_arms.yaml', 'gamma_u_sweep.yaml', 'calibration.yaml', 'esl_original.yaml', 'esl_original_standardized.yaml', 'esl_noise_sweep.yaml'} <= names


def test_decodes_arms() -> None:
    experiment, _, diagnostics = parse_experiment(CONTROL + textwrap.dedent('''\
        run:
          seed: 7
        arms:
          - label: control
          - label: direct
            parameter: gamma_u
            value: 0.55
            mode: direct_effect
            hold: [var_a, var_y]
    '''))
    assert diagnostics == []
    assert experiment is not None
    assert experiment.run == RunConfig(seed=7)
    assert experiment.arms[1].mode == InterventionMode.DIRECT_EFFECT
    assert experiment.arms[1].hold == ['var_a', 'var_y']
    assert experiment.model.scm is not None and experiment.model.scm.gamma_x == (0.6,)


def test_infeasible_direct_arm_is_anchored() -> None:
    diagnostics = _diagnostics(CONTROL + textwrap.dedent('''\
        run:
          seed: 7
        arms:
          - label: direct
            parameter: gamma_u
            value: 0.9
            mode: direct_effect
            hold: [var_a, var_y]
    '''))
    assert len(diagnostics) == 1
    diagnostic = diagnostics[0]
    assert diagnostic.kind == DiagnosticKind.INFEASIBLE
    assert diagnostic.path == 'arms[0].value'
    assert diagnostic.line == 16
    assert '0.8' in diagnostic.message


def test_infeasible_sweep_grid() -> None:
    diagnostics = _diagnostics(CONTROL + textwrap.dedent('''\
        run:
          seed: 7
        sweeps:
          - label: wide
            parameter: gamma_u
            grid:
              values: [0.0, 0.85]
            modes: [direct_effect]
            hold: [var_a]
    '''))
    assert [d.kind for d in diagnostics] == [DiagnosticKind.INFEASIBLE]
    assert diagnostics[0].path == 'sweeps[0].grid'
    assert '0.85' in diagnostics[0].message


def test_missing_seed() -> None:
    diagnostics = _diagnostics(CONTROL + 'run:\n  n: 100\n')
    assert len(diagnostics) == 1
    assert diagnostics[0].kind == DiagnosticKind.SCHEMA
    assert diagnostics[0].path == 'run'
    assert diagnostics[0].line == 11
    assert "'seed'" in diagnostics[0].message


def test_unknown_key_and_bad_enum() -> None:
    diagnostics = _diagnostics(CONTROL + textwrap.dedent('''\
        run:
          seed: 7
        arms:
          - label: a
            colour: red
          - label: b
            parameter: gamma_u
            value: 0.5
            mode: sideways
    '''))
    assert [(d.path, d.line) for d in diagnostics] == [('arms[0].colour', 15), ('arms[1].mode', 19)]
    assert all(d.kind == DiagnosticKind.SCHEMA for d in diagnostics)


def test_invariant_violation_is_anchored_to_its_block() -> None:
    diagnostics = _diagnostics(CONTROL + textwrap.dedent('''\
        run:
          seed: 7
        arms:
          - label: a
            parameter: gamma_u
    '''))
    assert [(d.kind, d.path, d.line) for d in diagnostics] == [(DiagnosticKind.SCHEMA, 'arms[0]', 14)]
    assert "'parameter' and 'value'" in diagnostics[0].message


def test_model_needs_exactly_one_kind() -> None:
    diagnostics = _diagnostics('version: 1\nmodel: {}\nrun:\n  seed: 1\n')
    assert [d.path for d in diagnostics] == ['model']
    assert 'Exactly one' in diagnostics[0].message


def test_unsupported_version() -> None:
    diagnostics = _diagnostics(CONTROL.replace('version: 1', 'version: 2') + 'run:\n  seed: 7\n')
    assert [d.path for d in diagnostics] == ['version']


def test_invalid_yaml() -> None:
    diagnostics = _diagnostics('version: 1\nmodel: [1\n')
    assert len(diagnostics) == 1
    assert diagnostics[0].message.startswith('Invalid YAML')


def test_duplicate_labels() -> None:
    diagnostics = _diagnostics(CONTROL + textwrap.dedent('''\
        run:
          seed: 7
        arms:
          - label: a
          - label: a
    '''))
    assert [(d.kind, d.path) for d in diagnostics] == [(DiagnosticKind.SEMANTIC, 'arms[1].label')]


def test_unknown_parameter() -> None:
    diagnostics = _diagnostics(CONTROL + textwrap.dedent('''\
        run:
          seed: 7
        arms:
          - label: a
            parameter: gamma_z
            value: 0.5
    '''))
    assert [(d.kind, d.path) for d in diagnostics] == [(DiagnosticKind.SEMANTIC, 'arms[0].parameter')]


def test_calibration_references() -> None:
    diagnostics = _diagnostics(CONTROL + textwrap.dedent('''\
        run:
          seed: 7
        arms:
          - label: control
        calibrate:
          - label: missing_arm
            arm: treated
            free_params: [var_eps_a]
            targets: {var_a: 1.0}
          - label: emits_duplicate
            free_params: [var_eps_a]
            targets: {var_a: 1.0}
            emit_arm: control
          - label: unknown_functional
            free_params: [var_eps_a]
            targets: {snr: 1.0}
    '''))
    assert [(d.kind, d.path) for d in diagnostics] == [
        (DiagnosticKind.SEMANTIC, 'calibrate[1].emit_arm'),
        (DiagnosticKind.SEMANTIC, 'calibrate[0].arm'),
        (DiagnosticKind.SEMANTIC, 'calibrate[2]'),
    ]


LAB = textwrap.dedent('''\
    version: 1
    model:
      lab:
        arms:
          - label: sigmoid
            mean_function:
              kind: sigmoid_sum
              p: 2
              alphas: [[3, 3], [3, -3]]
            snr:
              target_snr: 4
          - label: radial
            mean_function:
              kind: radial_product
              p: 2
            snr:
              target_snr: 4
              mode: fix_signal
              target_signal_variance: 0.01
    run:
      seed: 7
''')


def test_lab_checks() -> None:
    diagnostics = _diagnostics(LAB)
    assert [(d.kind, d.path, d.line) for d in diagnostics] == [(DiagnosticKind.INFEASIBLE, 'model.lab.arms[1].snr.target_signal_variance', 19)]
    diagnostics = _diagnostics(LAB.replace('target_signal_variance: 0.01', 'target_signal_variance: 0.00211085') + 'arms:\n  - label: x\n')
    assert [(d.kind, d.path) for d in diagnostics] == [(DiagnosticKind.SEMANTIC, 'arms')]


def test_lab_arm_needs_snr_or_noise() -> None:
    # Neither an SNR design nor a noise variance:
    text = LAB.replace('        snr:\n          target_snr: 4\n      - label: radial', '      - label: radial')
    diagnostics = _diagnostics(text)
    assert [(d.kind, d.path, d.line) for d in diagnostics] == [(DiagnosticKind.SCHEMA, 'model.lab.arms[0]', 5)]
    assert 'sigmoid' in diagnostics[0].message

    # Both:
    diagnostics = _diagnostics(LAB.replace('          p: 2\n        snr:', '          p: 2\n          var_eps: 0.1\n        snr:'))
    assert [(d.kind, d.path) for d in diagnostics] == [(DiagnosticKind.SCHEMA, 'model.lab.arms[1]')]
    assert 'radial' in diagnostics[0].message


def test_lab_arm_with_noise_only_decodes() -> None:
    text = LAB.replace('          alphas: [[3, 3], [3, -3]]\n        snr:\n          target_snr: 4\n',
                       '          alphas: [[3, 3], [3, -3]]\n          var_eps: 0.08\n')
    experiment, _, diagnostics = parse_experiment(text)
    assert diagnostics == []
    assert experiment is not None and experiment.model.lab is not None
    assert experiment.model.lab.arms[0].snr is None
    assert experiment.model.lab.arms[0].mean_function.var_eps == pytest.approx(0.08)


def test_load_missing_file() -> None:
    with tempfile.TemporaryDirectory() as tmp_dir:
        experiment, _, diagnostics = load_experiment(os.path.join(tmp_dir, 'missing.yaml'))
    assert experiment is None
    assert [d.kind for d in diagnostics] == [DiagnosticKind.IO]


def test_diagnostic_format() -> None:
    diagnostic = Diagnostic(kind=DiagnosticKind.SCHEMA, path='run', line=11, message="Missing required key 'seed' in RunConfig")
    assert diagnostic.format('exp.yaml') == "exp.yaml:11: schema error at run: Missing required key 'seed' in RunConfig"
    assert Diagnostic(kind=DiagnosticKind.IO, path='', line=None, message='gone').format('exp.yaml') == 'exp.yaml: io error at <root>: gone'


def test_run_config() -> None:
    assert RunConfig(seed=1).capped(1000) == 1000
    assert RunConfig(seed=1, profile=Profile.FAST).capped(1000) == FAST_PROFILE_REPLICATIONS
    assert RunConfig(seed=1, profile=Profile.FAST).capped(100) == 100
    with pytest.raises(ValidationError):
        RunConfig(seed=-1)
    with pytest.raises(ValidationError):
        RunConfig(seed=1, threads=0)


def test_grid_config() -> None:
    assert GridConfig(start=-0.75, stop=0.75, num=201).points()[140] == pytest.approx(0.3)
    assert GridConfig(values=[1, 2]).points() == [1.0, 2.0]
    with pytest.raises(ValidationError):
        GridConfig()
    with pytest.raises(ValidationError):
        GridConfig(values=[1.0], start=0.0, stop=1.0, num=2)
    with pytest.raises(ValidationError):
        GridConfig(start=0.0, stop=1.0)


def test_grid_values_are_distinct() -> None:
    assert GridConfig(start=0.5, stop=0.5, num=1).points() == [0.5]
    with pytest.raises(ValidationError):
        GridConfig(values=[0.1, 0.3, 0.1])
    with pytest.raises(ValidationError):
        GridConfig(start=0.5, stop=0.5, num=3)

    diagnostics = _diagnostics(CONTROL + textwrap.dedent('''\
        run:
          seed: 7
        sweeps:
          - label: repeated
            parameter: gamma_u
            grid:
              values: [0.1, 0.1]
            modes: [total_effect]
    '''))
    assert [(d.kind, d.path) for d in diagnostics] == [(DiagnosticKind.SCHEMA, 'sweeps[0]')]
    assert 'distinct' in diagnostics[0].message
