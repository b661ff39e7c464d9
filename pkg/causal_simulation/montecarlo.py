import concurrent.futures
import dataclasses
import enum
import logging
import typing

import numpy as np
import pandas as pd  # type: ignore
import scipy.linalg  # type: ignore
import tqdm  # type: ignore

from causal_simulation.errors import InfeasibleInterventionError, SingularDesignError, ValidationError
from causal_simulation.interventions import InterventionMode, direct_effect, total_effect
from causal_simulation.scm_core import ScmSpec, additional_bias, plim_conditional, plim_naive
from causal_simulation.util import CodeBlockTimer, FloatArray, stable_key, standard_normal_columns

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ('mean_bhat_x', 'se_bhat_x', 'mean_bhat_naive', 'se_bhat_naive', 'mean_add_abs_bias', 'se_add_abs_bias')

_RANK_TOLERANCE = 1e-10


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    n: int
    columns: typing.Dict[str, FloatArray]

    def __post_init__(self) -> None:
        for name, column in self.columns.items():
            if column.shape != (self.n,):
                raise ValidationError(f"Column {name!r} has shape {column.shape}, expected ({self.n},)")

    def __getitem__(self, name: str) -> FloatArray:
        try:
            return self.columns[name]
        except KeyError:
            raise ValidationError(f"Unknown column {name!r}; available: {sorted(self.columns)}") from None

    def matrix(self, names: typing.Sequence[str]) -> FloatArray:
        return np.column_stack([self[name] for name in names]) if names else np.empty((self.n, 0))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.columns)


@dataclasses.dataclass(frozen=True)
class EstimatorResult:
    conditioning: typing.FrozenSet[str]
    beta_a_hat: float
    full_coefficients: typing.Dict[str, float]
    n: int


@dataclasses.dataclass(frozen=True)
class ArmSummary:
    label: str
    spec: ScmSpec
    mean_bhat_x: float
    se_bhat_x: float
    mean_bhat_naive: float
    se_bhat_naive: float
    mean_add_abs_bias: float
    se_add_abs_bias: float
    singular_count: int = 0


@dataclasses.dataclass(frozen=True)
class ExperimentResult:
    arms: typing.Tuple[ArmSummary, ...]
    replications: int
    n: int
    seed: int

    def arm(self, label: str) -> ArmSummary:
        for arm in self.arms:
            if arm.label == label:
                return arm
        raise KeyError(label)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [[arm.label] + [getattr(arm, column) for column in RESULT_COLUMNS] + [arm.singular_count] for arm in self.arms],
            columns=['label'] + list(RESULT_COLUMNS) + ['singular_count'],
        )


class SweepMethod(enum.Enum):
    ANALYTIC = 'analytic'
    MONTE_CARLO = 'monte_carlo'


@dataclasses.dataclass(frozen=True)
class SweepResult:
    parameter: str
    mode: InterventionMode
    method: SweepMethod
    grid: typing.Tuple[float, ...]
    rows: typing.Tuple[typing.Tuple[float, ...], ...]  # per grid point, RESULT_COLUMNS order

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(list(self.rows), columns=list(RESULT_COLUMNS))
        frame.insert(0, 'grid_value', list(self.grid))
        return frame

    @property
    def additional_bias(self) -> FloatArray:
        return np.array([row[RESULT_COLUMNS.index('mean_add_abs_bias')] for row in self.rows])


# Variable indices within a (seed, arm, replication) stream:
_U, _EPS_A, _EPS_Y, _X0 = 0, 1, 2, 3


def _sample_columns(spec: ScmSpec, n: int, seed: int, stream: typing.Sequence[int], moment_matching: bool) -> typing.Dict[str, FloatArray]:
    z = standard_normal_columns(seed, stream, n, spec.p + 3, moment_matching=moment_matching)
    x = spec.vector('mu_x') + z[:, _X0:] * np.sqrt(spec.vector('var_x'))
    u = spec.mu_u + z[:, _U] * np.sqrt(spec.var_u)
    a = spec.alpha_a + x @ spec.vector('gamma_x') + spec.gamma_u * u + z[:, _EPS_A] * np.sqrt(spec.var_eps_a)
    y = spec.alpha_y + spec.beta_a * a + x @ spec.vector('beta_x') + spec.beta_u * u + z[:, _EPS_Y] * np.sqrt(spec.var_eps_y)
    columns = {'Y': y, 'A': a}
    columns.update({label: x[:, j] for j, label in enumerate(spec.x_labels)})
    columns['U'] = u
    return columns


def sample_dataset(spec: ScmSpec, n: int, seed: int, stream: typing.Sequence[int] = (), moment_matching: bool = False) -> Dataset:
    """
    Draw n units from the structural equations. Each exogenous variable comes from its own substream
    (seed, *stream, variable), so the draw is bit-reproducible and reusable as common random numbers.
    """
    if n < 1:
        raise ValidationError(f"n must be at least 1, got {n}")
    return Dataset(n=n, columns=_sample_columns(spec, n, seed, stream, moment_matching))


def _least_squares(design: FloatArray, y: FloatArray) -> FloatArray:
    q, r = np.linalg.qr(design, mode='reduced')
    diagonal = np.abs(np.diag(r))
    if diagonal.size == 0 or diagonal.min() <= _RANK_TOLERANCE * max(diagonal.max(), 1.0) * design.shape[0] ** 0.5:
        raise SingularDesignError(f"Design matrix of shape {design.shape} is rank deficient")
    coefficients: FloatArray = scipy.linalg.solve_triangular(r, q.T @ y)
    return coefficients


def ols_fit(data: Dataset, conditioning: typing.Iterable[str]) -> EstimatorResult:
    """Regress Y ~ 1 + A + S by QR least squares and report the coefficient on A."""
    conditioning = sorted(set(conditioning))
    if 'A' in conditioning or 'Y' in conditioning:
        raise ValidationError("The conditioning set may not contain A or Y")
    names = ['intercept', 'A'] + conditioning
    design = np.column_stack([np.ones(data.n), data['A'], data.matrix(conditioning)])
    coefficients = _least_squares(design, data['Y'])
    return EstimatorResult(
        conditioning=frozenset(conditioning),
        beta_a_hat=float(coefficients[1]),
        full_coefficients={name: float(c) for name, c in zip(names, coefficients)},
        n=data.n,
    )


def _replicate(spec: ScmSpec, n: int, seed: int, arm_key: int, replication: int, beta_a_true: float) -> typing.Optional[typing.Tuple[float, float, float]]:
    columns = _sample_columns(spec, n, seed, (arm_key, replication), moment_matching=False)
    ones = np.ones(n)
    try:
        b_x = _least_squares(np.column_stack([ones, columns['A']] + [columns[label] for label in spec.x_labels]), columns['Y'])[1]
        b_naive = _least_squares(np.column_stack([ones, columns['A']]), columns['Y'])[1]
    except SingularDesignError:
        return None
    return float(b_x), float(b_naive), abs(b_x - beta_a_true) - abs(b_naive - beta_a_true)


def _mean_and_se(values: FloatArray) -> typing.Tuple[float, float]:
    if len(values) == 0:
        return float('nan'), float('nan')
    if len(values) == 1:
        return float(values[0]), float('nan')
    return float(np.mean(values)), float(np.std(values, ddof=1) / np.sqrt(len(values)))


def _run_arm(
        label: str,
        spec: ScmSpec,
        n: int,
        replications: int,
        seed: int,
        beta_a_true: float,
        executor: typing.Optional[concurrent.futures.Executor],
        progress: bool,
) -> ArmSummary:
    arm_key = stable_key(label)
    if executor is None:
        outcomes = [_replicate(spec, n, seed, arm_key, r, beta_a_true) for r in tqdm.tqdm(range(replications), desc=label, disable=not progress)]
    else:
        futures = [executor.submit(_replicate, spec, n, seed, arm_key, r, beta_a_true) for r in range(replications)]
        outcomes = [future.result() for future in tqdm.tqdm(futures, desc=label, disable=not progress)]
    completed = np.array([outcome for outcome in outcomes if outcome is not None]).reshape(-1, 3)
    singular = replications - len(completed)
    if singular:
        logger.warning("Arm %r: %d of %d replications had a singular design", label, singular, replications)
    mean_x, se_x = _mean_and_se(completed[:, 0])
    mean_naive, se_naive = _mean_and_se(completed[:, 1])
    mean_bias, se_bias = _mean_and_se(completed[:, 2])
    return ArmSummary(
        label=label,
        spec=spec,
        mean_bhat_x=mean_x,
        se_bhat_x=se_x,
        mean_bhat_naive=mean_naive,
        se_bhat_naive=se_naive,
        mean_add_abs_bias=mean_bias,
        se_add_abs_bias=se_bias,
        singular_count=singular,
    )


def run_experiment(
        arms: typing.Sequence[typing.Tuple[str, ScmSpec]],
        n: int,
        replications: int,
        seed: int,
        beta_a_true: typing.Optional[float] = None,
        threads: int = 1,
        progress: bool = False,
) -> ExperimentResult:
    """
    Replicate both estimators on every arm. Arm streams are keyed by a hash of the label rather than the arm's position,
    so reordering arms reorders the result without changing it. Thread count never affects the values.

    beta_a_true defaults to each arm's own beta_a.
    """
    if replications < 1:
        raise ValidationError(f"replications must be at least 1, got {replications}")
    if n < 3:
        raise ValidationError(f"n must be at least 3, got {n}")
    labels = [label for label, _ in arms]
    if len(set(labels)) != len(labels):
        raise ValidationError(f"Arm labels must be unique: {labels}")

    summaries = []
    executor = concurrent.futures.ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for label, spec in arms:
            with CodeBlockTimer(f"Arm {label!r} ({replications} replications, n={n})", logger):
                summaries.append(_run_arm(label, spec, n, replications, seed, spec.beta_a if beta_a_true is None else beta_a_true, executor, progress))
    finally:
        if executor is not None:
            executor.shutdown()
    return ExperimentResult(arms=tuple(summaries), replications=replications, n=n, seed=seed)


def _plan(reference: ScmSpec, parameter: str, value: float, mode: InterventionMode, hold: typing.Sequence[str]) -> ScmSpec:
    if mode == InterventionMode.TOTAL_EFFECT:
        return total_effect(reference, parameter, value).treated
    return direct_effect(reference, parameter, value, hold).treated


def grid_sweep(
        reference: ScmSpec,
        parameter: str,
        grid: typing.Sequence[float],
        mode: InterventionMode,
        hold: typing.Sequence[str],
        n: int,
        replications_per_point: int,
        seed: int,
        method: SweepMethod = SweepMethod.MONTE_CARLO,
        threads: int = 1,
) -> SweepResult:
    treated = []
    for value in grid:
        try:
            treated.append(_plan(reference, parameter, value, mode, hold))
        except InfeasibleInterventionError as e:
            raise InfeasibleInterventionError(f"Grid point {parameter}={value!r} is infeasible: {e}", constraint=e.constraint) from e

    rows: typing.List[typing.Tuple[float, ...]] = []
    if method == SweepMethod.ANALYTIC:
        for spec in treated:
            rows.append((plim_conditional(spec), 0.0, plim_naive(spec), 0.0, additional_bias(spec), 0.0))
    else:
        labels = [f'{mode.value}:{parameter}[{i}]={value!r}' for i, value in enumerate(grid)]
        result = run_experiment(list(zip(labels, treated)), n=n, replications=replications_per_point, seed=seed, threads=threads)
        for arm in result.arms:
            rows.append(tuple(float(getattr(arm, column)) for column in RESULT_COLUMNS))
    return SweepResult(parameter=parameter, mode=mode, method=method, grid=tuple(float(v) for v in grid), rows=tuple(rows))
