import argparse
import dataclasses
import logging
import math
import sys
import typing

import pandas as pd  # type: ignore

from causal_simulation.calibrate import CalibrationProblem, CalibrationResult, calibrate_numeric
from causal_simulation.errors import OutputLockedError, UndefinedRatioError
from causal_simulation.experiment_file import CalibrationConfig, Diagnostic, ExperimentFile, Profile, load_experiment, validate_experiment
from causal_simulation.influence_graph import InfluenceDiagram, build_bias_amp_diagram, build_esl_diagram, parameter_node, path_report, \
    sufficient_blocking_sets, to_adjacency_text, to_dot
from causal_simulation.interventions import InterventionMode, direct_effect, total_effect
from causal_simulation.montecarlo import RESULT_COLUMNS, grid_sweep, run_experiment
from causal_simulation.mse_lab.mean_function import MeanFunctionSpec
from causal_simulation.mse_lab.snr import apply_snr_design
from causal_simulation.mse_lab.study import noise_sweep, run_lab_study
from causal_simulation.output.file import FileOutputConfig, ResultsWriter
from causal_simulation.scm_core import ScmSpec, additional_bias, bias_amplification_ratio, marginal_moments, plim_conditional, plim_naive
from causal_simulation.util import CodeBlockTimer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2
EXIT_LOCKED = 3

BLOCKING_SET_MAX_SIZE = 8
BLOCKING_SETS_SHOWN = 5

Spec = typing.TypeVar('Spec', ScmSpec, MeanFunctionSpec)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='csim', description="Reproducible simulation experiments on causal and predictive models")
    parser.add_argument('-v', '--verbose', action='store_true', help="log at DEBUG level")
    subparsers = parser.add_subparsers(dest='command', required=True)

    validate = subparsers.add_parser('validate', help="check an experiment file without running it")
    validate.add_argument('path')

    for name, description in (('run', "run every arm, sweep, calibration and lab study"), ('sweep', "alias for run")):
        run = subparsers.add_parser(name, help=description)
        run.add_argument('path')
        run.add_argument('--profile', choices=[profile.value for profile in Profile], default=None)
        run.add_argument('--seed', type=int, default=None)
        run.add_argument('--out', type=str, default=None)
        run.add_argument('--threads', type=int, default=None)
        run.add_argument('--overwrite', action='store_true', default=None)
        run.add_argument('--progress', action='store_true')

    explain = subparsers.add_parser('explain', help="print the influence-diagram path report for each intervened parameter")
    explain.add_argument('path')
    explain.add_argument('--format', choices=['text', 'dot'], default='text')
    explain.add_argument('--treatment', type=str, default=None)
    return parser


def _report(path: str, diagnostics: typing.Sequence[Diagnostic]) -> None:
    for diagnostic in diagnostics:
        print(diagnostic.format(path))


def _load_valid(path: str) -> typing.Tuple[typing.Optional[ExperimentFile], typing.List[Diagnostic]]:
    experiment, index, diagnostics = load_experiment(path)
    if experiment is None:
        return None, diagnostics
    diagnostics = validate_experiment(experiment, index)
    return (None if diagnostics else experiment), diagnostics


def _apply_overrides(experiment: ExperimentFile, args: argparse.Namespace) -> ExperimentFile:
    overrides: typing.Dict[str, typing.Any] = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.profile is not None:
        overrides['profile'] = Profile(args.profile)
    if args.out is not None:
        overrides['out'] = args.out
    if args.threads is not None:
        overrides['threads'] = args.threads
    if args.overwrite is not None:
        overrides['overwrite'] = args.overwrite
    return dataclasses.replace(experiment, run=dataclasses.replace(experiment.run, **overrides))


def _calibrate(config: CalibrationConfig, spec: Spec, seed: int) -> typing.Tuple[CalibrationResult, typing.List[typing.List[typing.Any]]]:
    result = calibrate_numeric(CalibrationProblem(
        spec=spec,
        free_params=tuple(config.free_params),
        targets=tuple(config.targets.items()),
        seed=seed if config.seed is None else config.seed,
        held_params=tuple(config.held_params),
        mc_sample_size=config.mc_sample_size,
        tolerance=config.tolerance,
        max_iterations=config.max_iterations,
    ))
    rows = [
        [config.label, name, result.solved_values[name], functional, target, result.achieved[functional].estimate,
         result.achieved[functional].standard_error, result.converged, result.iterations]
        for name, (functional, target) in zip(config.free_params, config.targets.items())
    ]
    return result, rows


CALIBRATION_COLUMNS = ['label', 'free_param', 'solved_value', 'functional', 'target', 'achieved', 'achieved_se', 'converged', 'iterations']


def _run_calibrations(
        experiment: ExperimentFile,
        specs: typing.Dict[str, Spec],
        reference: typing.Optional[Spec],
        writer: ResultsWriter,
) -> typing.List[typing.Tuple[str, Spec]]:
    emitted = []
    rows = []
    for config in experiment.calibrate:
        start = reference if config.arm is None else specs[config.arm]
        assert start is not None
        with CodeBlockTimer(f"Calibration {config.label!r}", logger):
            result, calibration_rows = _calibrate(config, start, experiment.run.seed)
        rows.extend(calibration_rows)
        if config.emit_arm is not None:
            emitted.append((config.emit_arm, typing.cast(Spec, result.spec)))
    if experiment.calibrate:
        writer.add_table('calibration', pd.DataFrame(rows, columns=CALIBRATION_COLUMNS))
    return emitted


def _analytic_row(label: str, spec: ScmSpec) -> typing.List[typing.Any]:
    try:
        ratio = bias_amplification_ratio(spec)
    except UndefinedRatioError:
        ratio = math.nan
    moments = marginal_moments(spec)
    return [label, plim_conditional(spec), plim_naive(spec), additional_bias(spec), ratio, moments.var_a, moments.var_y]


def _sweep_frame(experiment: ExperimentFile, reference: ScmSpec, index: int) -> pd.DataFrame:
    sweep = experiment.sweeps[index]
    replications = experiment.run.capped(sweep.replications_per_point or experiment.run.replications)
    frame: typing.Optional[pd.DataFrame] = None
    for mode in sweep.modes:
        result = grid_sweep(
            reference, sweep.parameter, sweep.grid.points(), mode, sweep.hold if mode == InterventionMode.DIRECT_EFFECT else (),
            n=experiment.run.n, replications_per_point=replications, seed=experiment.run.seed, method=sweep.method,
            threads=experiment.run.threads,
        )
        mode_frame = result.to_frame().rename(columns={column: f'{mode.value}.{column}' for column in RESULT_COLUMNS})
        frame = mode_frame if frame is None else frame.join(mode_frame.drop(columns='grid_value'))
    return frame


def _run_scm(experiment: ExperimentFile, writer: ResultsWriter, progress: bool) -> None:
    reference = experiment.model.scm
    assert reference is not None
    arms: typing.List[typing.Tuple[str, ScmSpec]] = []
    for arm in experiment.arms:
        if arm.parameter is None or arm.value is None:
            arms.append((arm.label, reference))
        elif arm.mode == InterventionMode.TOTAL_EFFECT:
            arms.append((arm.label, total_effect(reference, arm.parameter, arm.value).treated))
        else:
            arms.append((arm.label, direct_effect(reference, arm.parameter, arm.value, arm.hold).treated))
    arms.extend(_run_calibrations(experiment, dict(arms), reference, writer))

    if arms:
        writer.add_table('analytic', pd.DataFrame(
            [_analytic_row(label, spec) for label, spec in arms],
            columns=['label', 'plim_conditional', 'plim_naive', 'additional_bias', 'bias_amplification_ratio', 'var_a', 'var_y'],
        ))
        result = run_experiment(
            arms, n=experiment.run.n, replications=experiment.run.capped(experiment.run.replications), seed=experiment.run.seed,
            threads=experiment.run.threads, progress=progress,
        )
        writer.add_table('arms', result.to_frame())
    for i, sweep in enumerate(experiment.sweeps):
        with CodeBlockTimer(f"Sweep {sweep.label!r}", logger):
            writer.add_table(f'sweep_{sweep.label}', _sweep_frame(experiment, reference, i), summarize=len(sweep.grid.points()) <= 25)


def _run_lab(experiment: ExperimentFile, writer: ResultsWriter, progress: bool) -> None:
    lab = experiment.model.lab
    assert lab is not None
    seed = experiment.run.seed
    arms: typing.List[typing.Tuple[str, MeanFunctionSpec]] = []
    for arm in lab.arms:
        genspec = arm.mean_function if arm.snr is None else apply_snr_design(arm.mean_function, arm.snr, lab.n_mc, seed)
        arms.append((arm.label, genspec))
    arms.extend(_run_calibrations(experiment, dict(arms), None, writer))

    if lab.noise_sweep is None:
        study = run_lab_study(
            arms, lab.net, lab.n_train, lab.n_test, experiment.run.capped(experiment.run.replications), seed,
            n_mc=lab.n_mc, threads=experiment.run.threads, progress=progress,
        )
        writer.add_table('lab', study.to_frame())
        writer.add_table('lab_raw', study.raw_frame(), summarize=False)
    else:
        replications = experiment.run.capped(lab.noise_sweep.replications_per_point or experiment.run.replications)
        sweep = noise_sweep(
            arms, lab.noise_sweep.sigma_grid.points(), lab.net, lab.n_train, lab.n_test, replications, seed,
            n_mc=lab.n_mc, threads=experiment.run.threads,
        )
        writer.add_table('noise_sweep', sweep.to_frame())
        writer.add_table('noise_sweep_raw', sweep.raw_frame(), summarize=False)


def _command_validate(args: argparse.Namespace) -> int:
    _, diagnostics = _load_valid(args.path)
    _report(args.path, diagnostics)
    if diagnostics:
        return EXIT_INVALID
    print(f"{args.path}: OK")
    return EXIT_OK


def _command_run(args: argparse.Namespace) -> int:
    experiment, diagnostics = _load_valid(args.path)
    if experiment is None:
        _report(args.path, diagnostics)
        return EXIT_INVALID
    experiment = _apply_overrides(experiment, args)
    if experiment.run.profile == Profile.FAST:
        logger.info("Fast profile: replications capped at %d", experiment.run.capped(experiment.run.replications))

    try:
        with ResultsWriter(FileOutputConfig(path=experiment.run.out, overwrite=experiment.run.overwrite)) as writer:
            with CodeBlockTimer(f"Experiment {args.path}", logger):
                if experiment.model.scm is not None:
                    _run_scm(experiment, writer, args.progress)
                else:
                    _run_lab(experiment, writer, args.progress)
            summary = writer.summary_text()
    except OutputLockedError as e:
        logger.error("%s", e)
        return EXIT_LOCKED
    except (ArithmeticError, ValueError, OSError) as e:
        logger.error("Run failed: %s: %s", type(e).__name__, e)
        return EXIT_FAILURE
    print(summary, end='')
    print(f"Results written to {experiment.run.out}")
    return EXIT_OK


def _explain_treatments(experiment: ExperimentFile, override: typing.Optional[str]) -> typing.List[str]:
    if override is not None:
        return [override]
    if experiment.model.lab is not None:
        return ['p']
    parameters = [arm.parameter for arm in experiment.arms if arm.parameter is not None] + [sweep.parameter for sweep in experiment.sweeps]
    return list(dict.fromkeys(parameter_node(parameter) for parameter in parameters))


def _explain_one(diagram: InfluenceDiagram, treatment: str) -> str:
    report = path_report(diagram, treatment, diagram.outcome)
    lines = [f"Treatment {treatment} -> {diagram.outcome}: {len(report.direct_paths) + len(report.indirect_paths)} path(s)"]
    lines.extend(f"  direct:      {' -> '.join(path)}" for path in report.direct_paths)
    lines.extend(f"  indirect:    {' -> '.join(path)}" for path in report.indirect_paths)
    lines.extend(f"  confounding: {' -> '.join(path)}" for path in report.confounding_paths)
    blocking = sufficient_blocking_sets(diagram, treatment, diagram.outcome, BLOCKING_SET_MAX_SIZE)
    if not blocking:
        lines.append(f"  no blocking set of at most {BLOCKING_SET_MAX_SIZE} nodes")
    for rank, nodes in enumerate(blocking[:BLOCKING_SETS_SHOWN], start=1):
        lines.append(f"  blocking set {rank}: {{{', '.join(sorted(nodes))}}}")
    return '\n'.join(lines)


def _command_explain(args: argparse.Namespace) -> int:
    experiment, diagnostics = _load_valid(args.path)
    if experiment is None:
        _report(args.path, diagnostics)
        return EXIT_INVALID
    diagram = build_bias_amp_diagram() if experiment.model.scm is not None else build_esl_diagram()
    if args.format == 'dot':
        print(to_dot(diagram), end='')
        return EXIT_OK

    print(to_adjacency_text(diagram))
    node_ids = {node.id for node in diagram.nodes}
    status = EXIT_OK
    treatments = _explain_treatments(experiment, args.treatment)
    if not treatments:
        print("No intervened parameters to explain; pass --treatment")
    for treatment in treatments:
        if treatment not in node_ids:
            print(f"Treatment {treatment}: no such node in the built-in diagram; unsupported for explain")
            status = EXIT_INVALID
            continue
        print(_explain_one(diagram, treatment))
    return status


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    commands: typing.Dict[str, typing.Callable[[argparse.Namespace], int]] = {
        'validate': _command_validate,
        'run': _command_run,
        'sweep': _command_run,
        'explain': _command_explain,
    }
    return commands[args.command](args)


if __name__ == '__main__':
    sys.exit(main())
