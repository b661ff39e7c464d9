"""
Numerical fallback for holding functionals constant when no closed form is at hand: each target functional is matched by
a one-dimensional root find over one free parameter, with the Monte Carlo estimate evaluated on common random numbers so
the objective is a deterministic function of the parameter.
"""
import dataclasses
import enum
import logging
import math
import typing

import numpy as np
import scipy.optimize  # type: ignore

from causal_simulation.errors import InfeasibleInterventionError, ValidationError
from causal_simulation.montecarlo import sample_dataset
from causal_simulation.mse_lab.mean_function import MeanFunctionKind, MeanFunctionSpec, signal_variance
from causal_simulation.scm_core import ScmSpec, get_parameter, replace_parameter
from causal_simulation.util import FunctionalEstimate, batch_variance

logger = logging.getLogger(__name__)

Spec = typing.Union[ScmSpec, MeanFunctionSpec]

# Upstream functionals are solved first:
STRUCTURAL_ORDER = ('var_a', 'var_y', 'signal_variance', 'snr')
SCM_FUNCTIONALS = ('var_a', 'var_y')
LAB_FUNCTIONALS = ('signal_variance', 'snr')

_BRACKET_SCAN_POINTS = 8
_MAX_EXPANSIONS = 60


class Coordinate(enum.Enum):
    """Search coordinate for a free parameter: value = c**2 (c >= 0) or value = exp(c)."""
    STD = 'std'
    LOG = 'log'


SCM_FREE_PARAMETERS = {
    'var_eps_a': Coordinate.STD,
    'var_eps_y': Coordinate.STD,
    'var_u': Coordinate.LOG,
}
LAB_FREE_PARAMETERS = {
    'var_eps': Coordinate.LOG,
    'alpha_scale': Coordinate.LOG,
}


class Loss(enum.Enum):
    SQUARED_ERROR = 'squared_error'


@dataclasses.dataclass(frozen=True)
class CalibrationProblem:
    spec: Spec
    free_params: typing.Tuple[str, ...]
    targets: typing.Tuple[typing.Tuple[str, float], ...]
    seed: int
    held_params: typing.Tuple[str, ...] = ()
    loss: Loss = Loss.SQUARED_ERROR
    mc_sample_size: int = 100_000
    tolerance: float = 1e-3
    max_iterations: int = 100
    moment_matching: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, 'free_params', tuple(self.free_params))
        object.__setattr__(self, 'held_params', tuple(self.held_params))
        object.__setattr__(self, 'targets', tuple((str(name), float(value)) for name, value in self.targets))
        overlap = set(self.free_params) & set(self.held_params)
        if overlap:
            raise ValidationError(f"Parameters cannot be both free and held: {sorted(overlap)}")
        if self.mc_sample_size < 1000:
            raise ValidationError(f"mc_sample_size must be at least 1000, got {self.mc_sample_size}")
        if not self.tolerance > 0:
            raise ValidationError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValidationError(f"max_iterations must be at least 1, got {self.max_iterations}")
        if len(self.free_params) != len(self.targets):
            raise ValidationError(f"Need one free parameter per target: {len(self.free_params)} free, {len(self.targets)} targets")
        if len(set(self.free_params)) != len(self.free_params) or len({name for name, _ in self.targets}) != len(self.targets):
            raise ValidationError("Free parameters and target functionals must be distinct")
        allowed_params, allowed_functionals = (SCM_FREE_PARAMETERS, SCM_FUNCTIONALS) if isinstance(self.spec, ScmSpec) \
            else (LAB_FREE_PARAMETERS, LAB_FUNCTIONALS)
        for name in self.free_params:
            if name not in allowed_params:
                raise ValidationError(f"Unknown free parameter {name!r} for {type(self.spec).__name__}; choose from {list(allowed_params)}")
        for name, value in self.targets:
            if name not in allowed_functionals:
                raise ValidationError(f"Unknown functional {name!r} for {type(self.spec).__name__}; choose from {list(allowed_functionals)}")
            if not value > 0:
                raise ValidationError(f"Target for {name} must be positive, got {value}")
        if isinstance(self.spec, MeanFunctionSpec) and 'alpha_scale' in self.free_params and self.spec.kind != MeanFunctionKind.SIGMOID_SUM:
            raise ValidationError("alpha_scale is only defined for sigmoid_sum mean functions")


@dataclasses.dataclass(frozen=True)
class CalibrationResult:
    solved_values: typing.Dict[str, float]
    achieved: typing.Dict[str, FunctionalEstimate]
    converged: bool
    iterations: int
    spec: Spec


def estimate_functional(spec: Spec, functional: str, n_mc: int, seed: int, moment_matching: bool = False) -> FunctionalEstimate:
    if isinstance(spec, ScmSpec) and functional in SCM_FUNCTIONALS:
        data = sample_dataset(spec, n_mc, seed, moment_matching=moment_matching)
        return batch_variance(data['A' if functional == 'var_a' else 'Y'])
    if isinstance(spec, MeanFunctionSpec) and functional in LAB_FUNCTIONALS:
        signal = signal_variance(spec, n_mc, seed, moment_matching=moment_matching)
        if functional == 'signal_variance':
            return signal
        if spec.var_eps <= 0:
            raise ValidationError("SNR is undefined for var_eps = 0")
        return FunctionalEstimate(signal.estimate / spec.var_eps, signal.standard_error / spec.var_eps)
    raise ValidationError(f"Unknown functional {functional!r} for {type(spec).__name__}")


class _Solver:
    def __init__(self, problem: CalibrationProblem) -> None:
        self._problem = problem
        self._cache: typing.Dict[typing.Tuple[typing.Any, str], FunctionalEstimate] = {}

    def estimate(self, spec: Spec, functional: str) -> FunctionalEstimate:
        # The signal does not depend on var_eps, so lab estimates are shared across noise levels:
        key = (dataclasses.replace(spec, var_eps=1.0) if isinstance(spec, MeanFunctionSpec) and functional == 'signal_variance' else spec, functional)
        if key not in self._cache:
            if isinstance(spec, MeanFunctionSpec) and functional == 'snr':
                signal = self.estimate(spec, 'signal_variance')
                self._cache[key] = FunctionalEstimate(signal.estimate / spec.var_eps, signal.standard_error / spec.var_eps)
            else:
                self._cache[key] = estimate_functional(spec, functional, self._problem.mc_sample_size, self._problem.seed, self._problem.moment_matching)
        return self._cache[key]

    def current_value(self, spec: Spec, name: str) -> float:
        if isinstance(spec, ScmSpec):
            return get_parameter(spec, name)
        if name == 'alpha_scale':
            return 1.0
        return float(getattr(spec, name))

    def with_value(self, spec: Spec, name: str, value: float) -> Spec:
        if isinstance(spec, ScmSpec):
            return replace_parameter(spec, name, value)
        if name == 'alpha_scale':
            assert isinstance(self._problem.spec, MeanFunctionSpec)
            return dataclasses.replace(spec, alphas=self._problem.spec.scaled(value).alphas)
        return dataclasses.replace(spec, **{name: value})

    def coordinate(self, name: str) -> Coordinate:
        return {**SCM_FREE_PARAMETERS, **LAB_FREE_PARAMETERS}[name]

    def solve(self, spec: Spec, name: str, functional: str, target: float) -> typing.Tuple[Spec, float, bool, int]:
        coordinate = self.coordinate(name)

        def to_value(c: float) -> float:
            return c * c if coordinate == Coordinate.STD else math.exp(c)

        def residual(c: float) -> float:
            return (self.estimate(self.with_value(spec, name, to_value(c)), functional).estimate - target) / target

        lower, upper = self._bracket(spec, name, functional, target, coordinate, residual)
        if lower == upper:
            return self.with_value(spec, name, to_value(lower)), to_value(lower), True, 0
        self._warn_on_multiple_roots(name, functional, lower, upper, residual)
        root, info = scipy.optimize.brentq(
            residual, lower, upper, xtol=1e-12, rtol=1e-12, maxiter=self._problem.max_iterations, full_output=True, disp=False)
        logger.debug("Solved %s for %s=%s in %d iterations (converged=%s)", name, functional, target, info.iterations, info.converged)
        return self.with_value(spec, name, to_value(root)), to_value(root), bool(info.converged), int(info.iterations)

    def _bracket(
            self,
            spec: Spec,
            name: str,
            functional: str,
            target: float,
            coordinate: Coordinate,
            residual: typing.Callable[[float], float],
    ) -> typing.Tuple[float, float]:
        current = self.current_value(spec, name)
        if coordinate == Coordinate.STD:
            lower = 0.0
            r_lower = residual(lower)
            if r_lower == 0.0:
                return lower, lower
            upper = max(math.sqrt(current), math.sqrt(target), 1e-8)
            for _ in range(_MAX_EXPANSIONS):
                if np.sign(residual(upper)) != np.sign(r_lower):
                    return lower, upper
                logger.debug("Expanding bracket for %s: upper=%s", name, upper ** 2)
                upper *= 2
        else:
            centre = math.log(current) if current > 0 else 0.0
            width = 1.0
            for _ in range(_MAX_EXPANSIONS // 6):
                lower, upper = centre - width, centre + width
                if np.sign(residual(lower)) != np.sign(residual(upper)):
                    return lower, upper
                logger.debug("Expanding bracket for %s: log-width=%s", name, width)
                width *= 2
        constraint = f"{functional} = {target:.6g} is not reachable by varying {name}"
        raise InfeasibleInterventionError(f"Calibration bracketing failed: {constraint}", constraint=constraint)

    def _warn_on_multiple_roots(self, name: str, functional: str, lower: float, upper: float, residual: typing.Callable[[float], float]) -> None:
        signs = [np.sign(residual(c)) for c in np.linspace(lower, upper, _BRACKET_SCAN_POINTS + 2)]
        changes = sum(1 for a, b in zip(signs, signs[1:]) if a != b and a != 0 and b != 0)
        if changes > 1:
            logger.warning("%s has %d sign changes in %s over the bracket; the calibrated value may not be unique", functional, changes, name)


def calibrate_numeric(problem: CalibrationProblem) -> CalibrationResult:
    solver = _Solver(problem)
    pairs = sorted(zip(problem.free_params, problem.targets), key=lambda pair: STRUCTURAL_ORDER.index(pair[1][0]))
    spec = problem.spec
    solved: typing.Dict[str, float] = {}
    converged = True
    iterations = 0
    for name, (functional, target) in pairs:
        spec, value, solve_converged, solve_iterations = solver.solve(spec, name, functional, target)
        solved[name] = value
        converged = converged and solve_converged
        iterations += solve_iterations

    achieved = {functional: solver.estimate(spec, functional) for functional, _ in problem.targets}
    for functional, target in problem.targets:
        estimate = achieved[functional]
        if abs(estimate.estimate - target) > problem.tolerance * abs(target) + 2 * estimate.standard_error:
            logger.warning("%s = %s misses target %s beyond tolerance", functional, estimate.estimate, target)
            converged = False
    logger.info("Calibration solved %s in %d iterations (converged=%s)", solved, iterations, converged)
    return CalibrationResult(solved_values=solved, achieved=achieved, converged=converged, iterations=iterations, spec=spec)
