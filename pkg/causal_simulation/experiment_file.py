"""
Declarative experiment files: YAML decoded into frozen config dataclasses, with every problem reported as a
diagnostic anchored to a line of the file.
"""
import dataclasses
import enum
import logging
import math
import typing

import dataclasses_json
import numpy as np
import yaml

from causal_simulation.calibrate import CalibrationProblem
from causal_simulation.errors import InfeasibleInterventionError, ValidationError
from causal_simulation.interventions import InterventionMode, direct_effect, feasible_range, total_effect
from causal_simulation.montecarlo import SweepMethod
from causal_simulation.mse_lab.mean_function import MeanFunctionKind, MeanFunctionSpec, radial_signal_variance
from causal_simulation.mse_lab.network import NetConfig
from causal_simulation.mse_lab.snr import RADIAL_MATCH_TOLERANCE, SnrDesign, SnrMode
from causal_simulation.scm_core import ScmSpec, get_parameter

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FAST_PROFILE_REPLICATIONS = 500

_LOADER = getattr(yaml, 'CSafeLoader', yaml.SafeLoader)

PathKey = typing.Tuple[typing.Union[str, int], ...]


class Profile(enum.Enum):
    FULL = 'full'
    FAST = 'fast'


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class GridConfig:
    values: typing.Optional[typing.List[float]] = dataclasses.field(default=None)
    start: typing.Optional[float] = dataclasses.field(default=None)
    stop: typing.Optional[float] = dataclasses.field(default=None)
    num: typing.Optional[int] = dataclasses.field(default=None)

    def __post_init__(self) -> None:
        ranged = (self.start, self.stop, self.num)
        if not ((self.values is None) ^ all(v is None for v in ranged)):
            raise ValidationError("Exactly one of 'values' and 'start'/'stop'/'num' must be specified")
        if self.values is None and any(v is None for v in ranged):
            raise ValidationError("'start', 'stop' and 'num' must be given together")
        if self.values is not None and len(self.values) == 0:
            raise ValidationError("Grid needs at least one value")
        if self.num is not None and self.num < 1:
            raise ValidationError(f"Grid needs at least one point, got num={self.num}")
        points = self.points()
        if len(set(points)) != len(points):
            raise ValidationError(f"Grid values must be distinct, got {points}")

    def points(self) -> typing.List[float]:
        if self.values is not None:
            return [float(v) for v in self.values]
        assert self.start is not None and self.stop is not None and self.num is not None
        return [float(v) for v in np.linspace(self.start, self.stop, self.num)]


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class ArmConfig:
    """An arm without a parameter is the reference (control) spec."""
    label: str
    parameter: typing.Optional[str] = dataclasses.field(default=None)
    value: typing.Optional[float] = dataclasses.field(default=None)
    mode: InterventionMode = InterventionMode.TOTAL_EFFECT
    hold: typing.List[str] = dataclasses.field(default_factory=list)

    def __post_init__(self) -> None:
        if (self.parameter is None) != (self.value is None):
            raise ValidationError(f"Arm {self.label!r}: 'parameter' and 'value' must be given together")
        if self.mode == InterventionMode.TOTAL_EFFECT and self.hold:
            raise ValidationError(f"Arm {self.label!r}: total_effect arms hold nothing")
        if self.mode == InterventionMode.DIRECT_EFFECT and not self.hold:
            raise ValidationError(f"Arm {self.label!r}: direct_effect arms must hold at least one functional")


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class SweepConfig:
    label: str
    parameter: str
    grid: GridConfig
    modes: typing.List[InterventionMode] = dataclasses.field(default_factory=lambda: [InterventionMode.TOTAL_EFFECT])
    hold: typing.List[str] = dataclasses.field(default_factory=list)
    method: SweepMethod = SweepMethod.MONTE_CARLO
    replications_per_point: typing.Optional[int] = dataclasses.field(default=None)

    def __post_init__(self) -> None:
        if not self.modes or len(set(self.modes)) != len(self.modes):
            raise ValidationError(f"Sweep {self.label!r}: modes must be non-empty and distinct")
        if InterventionMode.DIRECT_EFFECT in self.modes and not self.hold:
            raise ValidationError(f"Sweep {self.label!r}: direct_effect sweeps must hold at least one functional")
        if self.replications_per_point is not None and self.replications_per_point < 1:
            raise ValidationError(f"Sweep {self.label!r}: replications_per_point must be positive")


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class CalibrationConfig:
    """
    Solve free_params so the named functionals hit their targets, starting from arm's spec (the reference spec when
    unset). With emit_arm the calibrated spec joins the experiment as an extra arm.
    """
    label: str
    free_params: typing.List[str]
    targets: typing.Dict[str, float]
    arm: typing.Optional[str] = dataclasses.field(default=None)
    emit_arm: typing.Optional[str] = dataclasses.field(default=None)
    held_params: typing.List[str] = dataclasses.field(default_factory=list)
    mc_sample_size: int = 100_000
    seed: typing.Optional[int] = dataclasses.field(default=None)
    tolerance: float = 1e-3
    max_iterations: int = 100


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class LabArmConfig:
    label: str
    mean_function: MeanFunctionSpec
    snr: typing.Optional[SnrDesign] = dataclasses.field(default=None)

    def __post_init__(self) -> None:
        if not ((self.snr is not None) ^ (self.mean_function.var_eps > 0)):
            raise ValidationError(f"Lab arm {self.label!r}: exactly one of 'snr' and a positive 'mean_function.var_eps' must be specified")


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class NoiseSweepConfig:
    sigma_grid: GridConfig
    replications_per_point: typing.Optional[int] = dataclasses.field(default=None)


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class LabModelConfig:
    arms: typing.List[LabArmConfig]
    net: NetConfig = dataclasses.field(default_factory=NetConfig)
    n_train: int = 100
    n_test: int = 10_000
    n_mc: int = 1_000_000
    # When set, only the sweep runs:
    noise_sweep: typing.Optional[NoiseSweepConfig] = dataclasses.field(default=None)

    def __post_init__(self) -> None:
        if not self.arms:
            raise ValidationError("A lab model needs at least one arm")
        if self.n_train < 2 or self.n_test < 1:
            raise ValidationError(f"Need n_train >= 2 and n_test >= 1, got {self.n_train} and {self.n_test}")
        if self.n_mc < 1000:
            raise ValidationError(f"n_mc must be at least 1000, got {self.n_mc}")


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class ModelConfig:
    scm: typing.Optional[ScmSpec] = dataclasses.field(default=None)
    lab: typing.Optional[LabModelConfig] = dataclasses.field(default=None)

    def __post_init__(self) -> None:
        if not ((self.scm is None) ^ (self.lab is None)):
            raise ValidationError("Exactly one of 'scm' and 'lab' must be specified")


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int
    n: int = 10_000
    replications: int = 1000
    out: str = 'results'
    overwrite: bool = False
    profile: Profile = Profile.FULL
    threads: int = 1

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValidationError(f"seed must be non-negative, got {self.seed}")
        if self.n < 3:
            raise ValidationError(f"n must be at least 3, got {self.n}")
        if self.replications < 1:
            raise ValidationError(f"replications must be at least 1, got {self.replications}")
        if self.threads < 1:
            raise ValidationError(f"threads must be at least 1, got {self.threads}")

    def capped(self, replications: int) -> int:
        return min(replications, FAST_PROFILE_REPLICATIONS) if self.profile == Profile.FAST else replications


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class ExperimentFile:
    version: int
    model: ModelConfig
    run: RunConfig
    arms: typing.List[ArmConfig] = dataclasses.field(default_factory=list)
    sweeps: typing.List[SweepConfig] = dataclasses.field(default_factory=list)
    calibrate: typing.List[CalibrationConfig] = dataclasses.field(default_factory=list)

    def __post_init__(self) -> None:
        if self.version != SCHEMA_VERSION:
            raise ValidationError(f"Unsupported schema version {self.version}; expected {SCHEMA_VERSION}")


class DiagnosticKind(enum.Enum):
    IO = 'io'
    SCHEMA = 'schema'
    SEMANTIC = 'semantic'
    INFEASIBLE = 'infeasible'


@dataclasses.dataclass(frozen=True)
class Diagnostic:
    kind: DiagnosticKind
    path: str
    line: typing.Optional[int]
    message: str

    def format(self, filename: str) -> str:
        location = filename if self.line is None else f'{filename}:{self.line}'
        return f'{location}: {self.kind.value} error at {self.path or "<root>"}: {self.message}'


def _render_path(path: PathKey) -> str:
    rendered = ''
    for key in path:
        rendered += f'[{key}]' if isinstance(key, int) else (f'.{key}' if rendered else key)
    return rendered


class LineIndex:
    """1-based source lines of every mapping key and sequence item, looked up by their path in the document."""

    def __init__(self, root: typing.Optional[yaml.Node]) -> None:
        self._lines: typing.Dict[PathKey, int] = {}
        if root is not None:
            self._lines[()] = root.start_mark.line + 1
            self._visit(root, ())

    def _visit(self, node: yaml.Node, path: PathKey) -> None:
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                child = path + (str(key_node.value),)
                self._lines[child] = key_node.start_mark.line + 1
                self._visit(value_node, child)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                self._lines[path + (i,)] = item.start_mark.line + 1
                self._visit(item, path + (i,))

    def line(self, path: PathKey) -> typing.Optional[int]:
        # Falls back to the nearest enclosing entry:
        for end in range(len(path), -1, -1):
            if path[:end] in self._lines:
                return self._lines[path[:end]]
        return None

    def diagnostic(self, kind: DiagnosticKind, path: PathKey, message: str) -> Diagnostic:
        return Diagnostic(kind=kind, path=_render_path(path), line=self.line(path), message=message)


_NUMBER = (int, float)


def _check_value(hint: typing.Any, value: typing.Any, path: PathKey, index: LineIndex) -> typing.List[Diagnostic]:
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return []
        hint = next(arg for arg in args if arg is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        return _check_schema(hint, value, path, index)
    if origin in (list, tuple):
        if not isinstance(value, list):
            return [index.diagnostic(DiagnosticKind.SCHEMA, path, f"Expected a list, got {type(value).__name__}")]
        return [d for i, item in enumerate(value) for d in _check_value(args[0], item, path + (i,), index)]
    if origin is dict:
        if not isinstance(value, dict):
            return [index.diagnostic(DiagnosticKind.SCHEMA, path, f"Expected a mapping, got {type(value).__name__}")]
        return [d for key, item in value.items() for d in _check_value(args[1], item, path + (str(key),), index)]
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        choices = [member.value for member in hint]
        if value not in choices:
            return [index.diagnostic(DiagnosticKind.SCHEMA, path, f"Expected one of {choices}, got {value!r}")]
        return []
    expected = {float: _NUMBER, int: (int,), str: (str,), bool: (bool,)}.get(hint)
    if expected is not None and (not isinstance(value, expected) or (hint is not bool and isinstance(value, bool))):
        return [index.diagnostic(DiagnosticKind.SCHEMA, path, f"Expected {hint.__name__}, got {value!r}")]
    return []


def _check_schema(cls: typing.Any, data: typing.Any, path: PathKey, index: LineIndex) -> typing.List[Diagnostic]:
    """Required keys, unknown keys and leaf types of a config dataclass, before decoding."""
    if not isinstance(data, dict):
        return [index.diagnostic(DiagnosticKind.SCHEMA, path, f"Expected a mapping for {cls.__name__}, got {type(data).__name__}")]
    diagnostics = []
    hints = typing.get_type_hints(cls)
    fields = {field.name: field for field in dataclasses.fields(cls)}
    for name in sorted(set(data) - set(fields), key=str):
        diagnostics.append(index.diagnostic(DiagnosticKind.SCHEMA, path + (str(name),), f"Unknown key {name!r} in {cls.__name__}"))
    for name, field in fields.items():
        if name not in data:
            if field.default is dataclasses.MISSING and field.default_factory is dataclasses.MISSING:
                diagnostics.append(index.diagnostic(DiagnosticKind.SCHEMA, path, f"Missing required key {name!r} in {cls.__name__}"))
            continue
        diagnostics.extend(_check_value(hints[name], data[name], path + (name,), index))
    return diagnostics


def _decode_lab_arms(data: typing.Dict[str, typing.Any], index: LineIndex) -> typing.List[Diagnostic]:
    model = data.get('model')
    lab = model.get('lab') if isinstance(model, dict) else None
    arms = lab.get('arms') if isinstance(lab, dict) else None
    diagnostics = []
    for i, arm in enumerate(arms if isinstance(arms, list) else []):
        try:
            LabArmConfig.from_dict(arm)  # type: ignore
        except (ValueError, TypeError, KeyError) as e:
            diagnostics.append(index.diagnostic(DiagnosticKind.SCHEMA, ('model', 'lab', 'arms', i), str(e)))
    return diagnostics


def _decode_sections(data: typing.Dict[str, typing.Any], index: LineIndex) -> typing.Tuple[typing.Optional[ExperimentFile], typing.List[Diagnostic]]:
    """Decode block by block so invariant violations are anchored to the block that raised them."""
    diagnostics = []
    hints = typing.get_type_hints(ExperimentFile)
    for name in ('model', 'run', 'arms', 'sweeps', 'calibrate'):
        if name not in data:
            continue
        items: typing.List[typing.Tuple[PathKey, typing.Any, typing.Any]]
        if typing.get_origin(hints[name]) is list:
            items = [((name, i), typing.get_args(hints[name])[0], item) for i, item in enumerate(data[name])]
        else:
            items = [((name,), hints[name], data[name])]
        if name == 'model':
            # Lab arms first, so a failing arm is reported against itself rather than the whole model:
            arm_diagnostics = _decode_lab_arms(data, index)
            if arm_diagnostics:
                diagnostics.extend(arm_diagnostics)
                continue
        for path, cls, value in items:
            try:
                cls.from_dict(value)
            except (ValueError, TypeError, KeyError) as e:
                diagnostics.append(index.diagnostic(DiagnosticKind.SCHEMA, path, str(e)))
    if diagnostics:
        return None, diagnostics
    try:
        return ExperimentFile.from_dict(data), []  # type: ignore
    except (ValueError, TypeError, KeyError) as e:
        return None, [index.diagnostic(DiagnosticKind.SCHEMA, ('version',), str(e))]


def parse_experiment(text: str) -> typing.Tuple[typing.Optional[ExperimentFile], LineIndex, typing.List[Diagnostic]]:
    try:
        root = yaml.compose(text, Loader=_LOADER)
        data = yaml.load(text, Loader=_LOADER)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        return None, LineIndex(None), [Diagnostic(DiagnosticKind.SCHEMA, '', None if mark is None else mark.line + 1, f"Invalid YAML: {e}")]
    index = LineIndex(root)
    diagnostics = _check_schema(ExperimentFile, data, (), index)
    if diagnostics:
        return None, index, diagnostics
    experiment, diagnostics = _decode_sections(data, index)
    return experiment, index, diagnostics


def load_experiment(path: str) -> typing.Tuple[typing.Optional[ExperimentFile], LineIndex, typing.List[Diagnostic]]:
    try:
        with open(path) as f_experiment:
            text = f_experiment.read()
    except OSError as e:
        return None, LineIndex(None), [Diagnostic(DiagnosticKind.IO, '', None, f"Cannot read {path}: {e}")]
    return parse_experiment(text)


def _check_labels(labels: typing.Sequence[typing.Tuple[PathKey, str]], index: LineIndex) -> typing.List[Diagnostic]:
    diagnostics = []
    seen: typing.Set[str] = set()
    for path, label in labels:
        if label in seen:
            diagnostics.append(index.diagnostic(DiagnosticKind.SEMANTIC, path, f"Duplicate label {label!r}"))
        seen.add(label)
    return diagnostics


def _check_arm(reference: ScmSpec, arm: ArmConfig, path: PathKey, index: LineIndex) -> typing.List[Diagnostic]:
    if arm.parameter is None or arm.value is None:
        return []
    try:
        get_parameter(reference, arm.parameter)
    except ValidationError as e:
        return [index.diagnostic(DiagnosticKind.SEMANTIC, path + ('parameter',), str(e))]
    try:
        if arm.mode == InterventionMode.TOTAL_EFFECT:
            total_effect(reference, arm.parameter, arm.value)
        else:
            direct_effect(reference, arm.parameter, arm.value, arm.hold)
    except InfeasibleInterventionError as e:
        return [index.diagnostic(DiagnosticKind.INFEASIBLE, path + ('value',), str(e))]
    except ValidationError as e:
        return [index.diagnostic(DiagnosticKind.SEMANTIC, path, str(e))]
    return []


def _check_sweep(reference: ScmSpec, sweep: SweepConfig, path: PathKey, index: LineIndex) -> typing.List[Diagnostic]:
    try:
        get_parameter(reference, sweep.parameter)
    except ValidationError as e:
        return [index.diagnostic(DiagnosticKind.SEMANTIC, path + ('parameter',), str(e))]
    if InterventionMode.DIRECT_EFFECT not in sweep.modes:
        return []
    try:
        feasible = feasible_range(reference, sweep.parameter, sweep.hold)
    except InfeasibleInterventionError as e:
        return [index.diagnostic(DiagnosticKind.INFEASIBLE, path + ('hold',), str(e))]
    except ValidationError as e:
        return [index.diagnostic(DiagnosticKind.SEMANTIC, path, str(e))]
    outside = [value for value in sweep.grid.points() if value not in feasible]
    if outside:
        return [index.diagnostic(
            DiagnosticKind.INFEASIBLE, path + ('grid',),
            f"{len(outside)} grid point(s) outside the feasible range {feasible}, e.g. {outside[0]!r}",
        )]
    return []


def _check_lab_arm(arm: LabArmConfig, path: PathKey, index: LineIndex) -> typing.List[Diagnostic]:
    design, genspec = arm.snr, arm.mean_function
    if design is None or design.mode != SnrMode.FIX_SIGNAL:
        return []
    if genspec.kind == MeanFunctionKind.SIGMOID_SUM and design.target_signal_variance is None:
        return [index.diagnostic(DiagnosticKind.SEMANTIC, path + ('snr',), "fix_signal needs target_signal_variance for sigmoid_sum mean functions")]
    if genspec.kind == MeanFunctionKind.RADIAL_PRODUCT and design.target_signal_variance is not None:
        signal = radial_signal_variance(genspec.p)
        if abs(signal - design.target_signal_variance) > RADIAL_MATCH_TOLERANCE * signal:
            return [index.diagnostic(
                DiagnosticKind.INFEASIBLE, path + ('snr', 'target_signal_variance'),
                f"radial_product with p={genspec.p} has signal_variance {signal:.6g}; it cannot be rescaled",
            )]
    return []


def _check_calibration(
        experiment: ExperimentFile,
        calibration: CalibrationConfig,
        path: PathKey,
        index: LineIndex,
        arm_labels: typing.Set[str],
) -> typing.List[Diagnostic]:
    if calibration.arm is not None and calibration.arm not in arm_labels:
        return [index.diagnostic(DiagnosticKind.SEMANTIC, path + ('arm',), f"Unknown arm {calibration.arm!r}")]
    spec: typing.Union[ScmSpec, MeanFunctionSpec]
    if experiment.model.scm is not None:
        spec = experiment.model.scm
    else:
        assert experiment.model.lab is not None
        if calibration.arm is None:
            return [index.diagnostic(DiagnosticKind.SEMANTIC, path, "Lab calibrations must name the arm they start from")]
        spec = next(arm.mean_function for arm in experiment.model.lab.arms if arm.label == calibration.arm)
    try:
        CalibrationProblem(
            spec=spec,
            free_params=tuple(calibration.free_params),
            targets=tuple(calibration.targets.items()),
            seed=experiment.run.seed if calibration.seed is None else calibration.seed,
            held_params=tuple(calibration.held_params),
            mc_sample_size=calibration.mc_sample_size,
            tolerance=calibration.tolerance,
            max_iterations=calibration.max_iterations,
        )
    except ValidationError as e:
        return [index.diagnostic(DiagnosticKind.SEMANTIC, path, str(e))]
    return []


def validate_experiment(experiment: ExperimentFile, index: LineIndex) -> typing.List[Diagnostic]:
    """Semantic checks, including feasibility of every direct-effect arm and sweep point, so a clean file runs through."""
    diagnostics: typing.List[Diagnostic] = []
    model = experiment.model
    if model.scm is not None:
        reference = model.scm
        arm_labels = [(('arms', i, 'label'), arm.label) for i, arm in enumerate(experiment.arms)]
        for i, arm in enumerate(experiment.arms):
            diagnostics.extend(_check_arm(reference, arm, ('arms', i), index))
        diagnostics.extend(_check_labels([(('sweeps', i, 'label'), sweep.label) for i, sweep in enumerate(experiment.sweeps)], index))
        for i, sweep in enumerate(experiment.sweeps):
            diagnostics.extend(_check_sweep(reference, sweep, ('sweeps', i), index))
    else:
        assert model.lab is not None
        if experiment.arms or experiment.sweeps:
            diagnostics.append(index.diagnostic(DiagnosticKind.SEMANTIC, ('arms',) if experiment.arms else ('sweeps',),
                                                "Top-level arms and sweeps apply to scm models; lab arms go under model.lab.arms"))
        arm_labels = [(('model', 'lab', 'arms', i, 'label'), arm.label) for i, arm in enumerate(model.lab.arms)]
        for i, lab_arm in enumerate(model.lab.arms):
            diagnostics.extend(_check_lab_arm(lab_arm, ('model', 'lab', 'arms', i), index))
        if model.lab.noise_sweep is not None:
            sigmas = model.lab.noise_sweep.sigma_grid.points()
            if any(not (math.isfinite(s) and s > 0) for s in sigmas):
                diagnostics.append(index.diagnostic(DiagnosticKind.SEMANTIC, ('model', 'lab', 'noise_sweep', 'sigma_grid'), "Noise levels must be positive"))
            if len(model.lab.arms) < 2:
                diagnostics.append(index.diagnostic(DiagnosticKind.SEMANTIC, ('model', 'lab', 'noise_sweep'), "A noise sweep compares at least two arms"))

    emitted = [(('calibrate', i, 'emit_arm'), c.emit_arm) for i, c in enumerate(experiment.calibrate) if c.emit_arm is not None]
    diagnostics.extend(_check_labels(arm_labels + emitted, index))
    diagnostics.extend(_check_labels([(('calibrate', i, 'label'), c.label) for i, c in enumerate(experiment.calibrate)], index))
    for i, calibration in enumerate(experiment.calibrate):
        diagnostics.extend(_check_calibration(experiment, calibration, ('calibrate', i), index, {label for _, label in arm_labels}))
    return diagnostics
