import concurrent.futures
import dataclasses
import logging
import math
import typing

import numpy as np
import pandas as pd  # type: ignore
import tqdm  # type: ignore

from causal_simulation.errors import UndefinedRatioError, ValidationError
from causal_simulation.montecarlo import Dataset
from causal_simulation.mse_lab.mean_function import MeanFunctionKind, MeanFunctionSpec, generate, signal_variance
from causal_simulation.mse_lab.network import FittedNet, NetConfig, feature_labels, fit_net
from causal_simulation.mse_lab.snr import signal_level
from causal_simulation.util import CodeBlockTimer, FloatArray, stable_key

logger = logging.getLogger(__name__)

LAB_RESULT_COLUMNS = (
    'median_relative_mse', 'mean_relative_mse', 'se_relative_mse',
    'median_modified_mse', 'mean_modified_mse', 'se_modified_mse',
)

_TRAIN, _TEST = 0, 1


@dataclasses.dataclass(frozen=True)
class LabOutcome:
    relative_mse: float
    modified_mse: float
    test_mse: float


def evaluate(net: FittedNet, test: Dataset, genspec: MeanFunctionSpec, signal_var: float) -> LabOutcome:
    """
    relative_mse divides the test MSE by the designed noise variance (the Bayes risk); modified_mse subtracts both the
    noise and the signal variance from it.
    """
    if genspec.var_eps == 0:
        raise UndefinedRatioError("relative_mse is undefined for var_eps = 0")
    mse = float(np.mean((net.predict(test.matrix(feature_labels(test))) - test['Y']) ** 2))
    return LabOutcome(relative_mse=mse / genspec.var_eps, modified_mse=mse - genspec.var_eps - signal_var, test_mse=mse)


@dataclasses.dataclass(frozen=True)
class LabArmSummary:
    label: str
    genspec: MeanFunctionSpec
    signal_variance: float
    median_relative_mse: float
    mean_relative_mse: float
    se_relative_mse: float
    median_modified_mse: float
    mean_modified_mse: float
    se_modified_mse: float


@dataclasses.dataclass(frozen=True)
class LabStudyResult:
    arms: typing.Tuple[LabArmSummary, ...]
    outcomes: typing.Dict[str, typing.Tuple[LabOutcome, ...]]  # per arm label, in replication order
    replications: int
    seed: int

    def arm(self, label: str) -> LabArmSummary:
        for arm in self.arms:
            if arm.label == label:
                return arm
        raise KeyError(label)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [[arm.label, arm.signal_variance, arm.genspec.var_eps] + [getattr(arm, column) for column in LAB_RESULT_COLUMNS] for arm in self.arms],
            columns=['label', 'signal_variance', 'var_eps'] + list(LAB_RESULT_COLUMNS),
        )

    def raw_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [[arm.label, r, o.relative_mse, o.modified_mse, o.test_mse] for arm in self.arms for r, o in enumerate(self.outcomes[arm.label])],
            columns=['label', 'replication', 'relative_mse', 'modified_mse', 'test_mse'],
        )


def _replicate(genspec: MeanFunctionSpec, signal_var: float, config: NetConfig, n_train: int, n_test: int, seed: int, arm_key: int, replication: int) -> LabOutcome:
    train = generate(genspec, n_train, seed, (arm_key, replication, _TRAIN))
    test = generate(genspec, n_test, seed, (arm_key, replication, _TEST))
    return evaluate(fit_net(train, config, stream=(arm_key, replication)), test, genspec, signal_var)


def _summarize(label: str, genspec: MeanFunctionSpec, signal_var: float, outcomes: typing.Sequence[LabOutcome]) -> LabArmSummary:
    relative = np.array([o.relative_mse for o in outcomes])
    modified = np.array([o.modified_mse for o in outcomes])

    def se(values: FloatArray) -> float:
        return float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else float('nan')

    return LabArmSummary(
        label=label,
        genspec=genspec,
        signal_variance=signal_var,
        median_relative_mse=float(np.median(relative)),
        mean_relative_mse=float(np.mean(relative)),
        se_relative_mse=se(relative),
        median_modified_mse=float(np.median(modified)),
        mean_modified_mse=float(np.mean(modified)),
        se_modified_mse=se(modified),
    )


def run_lab_study(
        arms: typing.Sequence[typing.Tuple[str, MeanFunctionSpec]],
        config: NetConfig,
        n_train: int,
        n_test: int,
        replications: int,
        seed: int,
        n_mc: int = 100_000,
        threads: int = 1,
        progress: bool = False,
) -> LabStudyResult:
    """
    Fit and evaluate the network on fresh train/test draws per replication. As in montecarlo, each arm's streams are
    keyed by its label so results do not depend on arm order or thread count.
    """
    if replications < 1:
        raise ValidationError(f"replications must be at least 1, got {replications}")
    if n_train < 2 or n_test < 1:
        raise ValidationError(f"Need n_train >= 2 and n_test >= 1, got {n_train} and {n_test}")
    labels = [label for label, _ in arms]
    if len(set(labels)) != len(labels):
        raise ValidationError(f"Arm labels must be unique: {labels}")

    summaries = []
    outcomes: typing.Dict[str, typing.Tuple[LabOutcome, ...]] = {}
    executor = concurrent.futures.ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for label, genspec in arms:
            signal_var = signal_level(genspec, n_mc, seed)
            arm_key = stable_key(label)
            with CodeBlockTimer(f"Lab arm {label!r} ({replications} replications, n_train={n_train})", logger):
                if executor is None:
                    arm_outcomes = [
                        _replicate(genspec, signal_var, config, n_train, n_test, seed, arm_key, r)
                        for r in tqdm.tqdm(range(replications), desc=label, disable=not progress)
                    ]
                else:
                    futures = [executor.submit(_replicate, genspec, signal_var, config, n_train, n_test, seed, arm_key, r) for r in range(replications)]
                    arm_outcomes = [future.result() for future in tqdm.tqdm(futures, desc=label, disable=not progress)]
            outcomes[label] = tuple(arm_outcomes)
            summaries.append(_summarize(label, genspec, signal_var, arm_outcomes))
    finally:
        if executor is not None:
            executor.shutdown()
    return LabStudyResult(arms=tuple(summaries), outcomes=outcomes, replications=replications, seed=seed)


@dataclasses.dataclass(frozen=True)
class LabSweepResult:
    grid: typing.Tuple[float, ...]
    studies: typing.Tuple[LabStudyResult, ...]  # one per sigma in grid

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for sigma, study in zip(self.grid, self.studies):
            frame = study.to_frame()
            frame.insert(0, 'sigma_eps', sigma)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)

    def raw_frame(self) -> pd.DataFrame:
        frames = []
        for sigma, study in zip(self.grid, self.studies):
            frame = study.raw_frame()
            frame.insert(0, 'sigma_eps', sigma)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)


def _check_equal_signal(arms: typing.Sequence[typing.Tuple[str, MeanFunctionSpec]], n_mc: int, seed: int) -> None:
    levels = []
    for label, genspec in arms:
        if genspec.kind == MeanFunctionKind.RADIAL_PRODUCT:
            levels.append((label, signal_level(genspec, n_mc, seed), 0.0))
        else:
            estimate = signal_variance(genspec, n_mc, seed, moment_matching=True)
            levels.append((label, estimate.estimate, estimate.standard_error))
    for (label_a, level_a, se_a), (label_b, level_b, se_b) in zip(levels, levels[1:]):
        if abs(level_a - level_b) > 3 * math.hypot(se_a, se_b) + 1e-9 * max(level_a, level_b):
            raise ValidationError(f"Noise sweeps need equal signal across arms: {label_a} has {level_a:.6g}, {label_b} has {level_b:.6g}")


def noise_sweep(
        arms: typing.Sequence[typing.Tuple[str, MeanFunctionSpec]],
        sigma_grid: typing.Sequence[float],
        config: NetConfig,
        n_train: int,
        n_test: int,
        replications_per_point: int,
        seed: int,
        n_mc: int = 100_000,
        threads: int = 1,
) -> LabSweepResult:
    """Relative MSE per arm as the noise standard deviation varies, with the signal held fixed and equal across arms."""
    if len(arms) < 2:
        raise ValidationError("A noise sweep compares at least two arms")
    if any(not (math.isfinite(sigma) and sigma > 0) for sigma in sigma_grid):
        raise ValidationError(f"Noise standard deviations must be positive: {list(sigma_grid)}")
    _check_equal_signal(arms, n_mc, seed)
    studies = []
    for sigma in sigma_grid:
        logger.info("Noise sweep at sigma_eps=%s", sigma)
        studies.append(run_lab_study(
            [(label, dataclasses.replace(genspec, var_eps=sigma ** 2)) for label, genspec in arms],
            config, n_train, n_test, replications_per_point, seed, n_mc=n_mc, threads=threads,
        ))
    return LabSweepResult(grid=tuple(float(sigma) for sigma in sigma_grid), studies=tuple(studies))
