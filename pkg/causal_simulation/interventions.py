import dataclasses
import enum
import logging
import math
import typing

import numpy as np

from causal_simulation.errors import InfeasibleInterventionError, ValidationError
from causal_simulation.scm_core import CovarianceMatrix, ScmSpec, explained_treatment_variance, is_positive_semidefinite, \
    marginal_moments, replace_parameter, split_parameter

logger = logging.getLogger(__name__)

# Held functional -> absorbing error variance, in absorption order (treatment is upstream of outcome):
ABSORBERS: typing.Dict[str, str] = {
    'var_a': 'var_eps_a',
    'var_y': 'var_eps_y',
}
RANGE_PARAMETERS = ('gamma_u', 'gamma_x', 'beta_a', 'beta_u', 'beta_x')


class InterventionMode(enum.Enum):
    TOTAL_EFFECT = 'total_effect'
    DIRECT_EFFECT = 'direct_effect'


@dataclasses.dataclass(frozen=True)
class InterventionPlan:
    reference: ScmSpec
    treated: ScmSpec
    mode: InterventionMode
    parameter: str
    new_value: float
    held: typing.Tuple[str, ...] = ()
    absorbers: typing.Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.mode == InterventionMode.TOTAL_EFFECT and self.held:
            raise ValidationError("A total-effect plan holds no functionals")
        if tuple(ABSORBERS[h] for h in self.held) != self.absorbers:
            raise ValidationError(f"Absorbers {self.absorbers} do not match held functionals {self.held}")


@dataclasses.dataclass(frozen=True)
class FeasibleRange:
    """Open interval of parameter values for which every absorber variance stays positive."""
    parameter: str
    lower: float
    upper: float
    binding_constraints: typing.Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.lower <= self.upper:
            raise ValidationError(f"Empty feasible range for {self.parameter}: ({self.lower}, {self.upper})")

    def __contains__(self, value: float) -> bool:
        return self.lower < value < self.upper

    def __str__(self) -> str:
        return f"{self.parameter} in ({self.lower:.6g}, {self.upper:.6g})"


@dataclasses.dataclass(frozen=True, eq=False)
class ExtensionCheck:
    valid: bool
    min_eigenvalue: float
    omega: CovarianceMatrix


def normalize_hold(hold: typing.Iterable[str]) -> typing.Tuple[str, ...]:
    hold = set(hold)
    unknown = hold - set(ABSORBERS)
    if unknown:
        raise ValidationError(f"Cannot hold {sorted(unknown)}; holdable functionals are {list(ABSORBERS)}")
    return tuple(h for h in ABSORBERS if h in hold)


def total_effect(reference: ScmSpec, parameter: str, new_value: float) -> InterventionPlan:
    return InterventionPlan(
        reference=reference,
        treated=replace_parameter(reference, parameter, new_value),
        mode=InterventionMode.TOTAL_EFFECT,
        parameter=parameter,
        new_value=float(new_value),
    )


def _outcome_explained_variance(spec: ScmSpec, var_a: float) -> float:
    """b' Var([A, X, U]) b with Var(A) pinned to var_a."""
    beta_x, gamma_x, var_x = spec.vector('beta_x'), spec.vector('gamma_x'), spec.vector('var_x')
    cov_ay = float(np.sum(beta_x * gamma_x * var_x)) + spec.beta_u * spec.gamma_u * spec.var_u
    return spec.beta_a ** 2 * var_a + float(np.sum(beta_x ** 2 * var_x)) + spec.beta_u ** 2 * spec.var_u + 2 * spec.beta_a * cov_ay


def _required_error_variances(reference: ScmSpec, treated: ScmSpec, hold: typing.Tuple[str, ...]) -> typing.Dict[str, float]:
    """Absorber values that restore each held functional, possibly negative."""
    target = marginal_moments(reference)
    required: typing.Dict[str, float] = {}
    explained_a = explained_treatment_variance(treated)
    if 'var_a' in hold:
        required['var_eps_a'] = target.var_a - explained_a
        var_a = target.var_a
    else:
        var_a = explained_a + treated.var_eps_a
    if 'var_y' in hold:
        required['var_eps_y'] = target.var_y - _outcome_explained_variance(treated, var_a)
    return required


def _check_not_absorber(parameter: str, hold: typing.Tuple[str, ...]) -> None:
    field, _ = split_parameter(parameter)
    if field in (ABSORBERS[h] for h in hold):
        raise ValidationError(f"{parameter} absorbs a held functional and cannot also be intervened on")


def direct_effect(reference: ScmSpec, parameter: str, new_value: float, hold: typing.Iterable[str]) -> InterventionPlan:
    held = normalize_hold(hold)
    _check_not_absorber(parameter, held)
    treated = replace_parameter(reference, parameter, new_value)
    required = _required_error_variances(reference, treated, held)
    for absorber, value in required.items():
        if value < 0:
            constraint = f"{absorber} = {value:.6g} < 0 at {parameter} = {new_value:.6g}"
            message = f"Direct effect infeasible: {constraint}"
            try:
                message += f"; feasible range holding {list(held)} is {feasible_range(reference, parameter, held)}"
            except (ValidationError, InfeasibleInterventionError):
                pass
            raise InfeasibleInterventionError(message, constraint=constraint)
    return InterventionPlan(
        reference=reference,
        treated=dataclasses.replace(treated, **required),
        mode=InterventionMode.DIRECT_EFFECT,
        parameter=parameter,
        new_value=float(new_value),
        held=held,
        absorbers=tuple(ABSORBERS[h] for h in held),
    )


def _positive_interval(c2: float, c1: float, c0: float) -> typing.Optional[typing.Tuple[float, float]]:
    """Open interval {v : c2 v^2 + c1 v + c0 > 0} for concave (c2 <= 0) quadratics, None when empty."""
    scale = max(abs(c0), abs(c1), abs(c2))
    if scale == 0.0:
        return None
    if abs(c2) <= 1e-12 * scale:
        if abs(c1) <= 1e-12 * scale:
            return (-math.inf, math.inf) if c0 > 0 else None
        root = -c0 / c1
        return (root, math.inf) if c1 > 0 else (-math.inf, root)
    if c2 > 0:
        raise ValidationError("Absorber requirement is convex in the parameter; the feasible set is not an interval")
    discriminant = c1 * c1 - 4 * c2 * c0
    if discriminant <= 0:
        return None
    q = -0.5 * (c1 + math.copysign(math.sqrt(discriminant), c1))
    lower, upper = sorted((q / c2, c0 / q))
    return lower, upper


def feasible_range(reference: ScmSpec, parameter: str, hold: typing.Iterable[str]) -> FeasibleRange:
    field, _ = split_parameter(parameter)
    if field not in RANGE_PARAMETERS:
        raise ValidationError(f"Feasible ranges are available for {RANGE_PARAMETERS}, not {parameter!r}")
    held = normalize_hold(hold)
    _check_not_absorber(parameter, held)

    def requirements(value: float) -> typing.Dict[str, float]:
        return _required_error_variances(reference, replace_parameter(reference, parameter, value), held)

    # Each requirement is a polynomial of degree <= 2 in the parameter; recover it from three evaluations:
    at_minus, at_zero, at_plus = requirements(-1.0), requirements(0.0), requirements(1.0)
    lower, upper = -math.inf, math.inf
    lower_constraint: typing.Optional[str] = None
    upper_constraint: typing.Optional[str] = None
    for absorber in at_zero:
        c0 = at_zero[absorber]
        c1 = (at_plus[absorber] - at_minus[absorber]) / 2
        c2 = (at_plus[absorber] + at_minus[absorber]) / 2 - c0
        interval = _positive_interval(c2, c1, c0)
        if interval is None:
            constraint = f"{absorber} > 0 cannot hold for any {parameter}"
            raise InfeasibleInterventionError(f"No feasible value of {parameter} holding {list(held)}: {constraint}", constraint=constraint)
        logger.debug("%s > 0 requires %s in (%s, %s)", absorber, parameter, *interval)
        if interval[0] > lower:
            lower, lower_constraint = interval[0], f"{absorber} = 0 at {parameter} = {interval[0]:.6g}"
        if interval[1] < upper:
            upper, upper_constraint = interval[1], f"{absorber} = 0 at {parameter} = {interval[1]:.6g}"
    if lower >= upper:
        constraint = f"{lower_constraint} and {upper_constraint} leave no room"
        raise InfeasibleInterventionError(f"No feasible value of {parameter} holding {list(held)}: {constraint}", constraint=constraint)
    return FeasibleRange(
        parameter=parameter,
        lower=lower,
        upper=upper,
        binding_constraints=tuple(c for c in (lower_constraint, upper_constraint) if c is not None),
    )


def extend_correlation_matrix(observed: CovarianceMatrix, candidate_row: typing.Sequence[float], var_u: float) -> ExtensionCheck:
    """
    Append U to an observed (Y, A, X) covariance block using candidate correlations with U, and check the result
    is a valid covariance.
    """
    if len(candidate_row) != len(observed.labels):
        raise ValidationError(f"Candidate row has {len(candidate_row)} entries for {len(observed.labels)} observed variables")
    if 'U' in observed.labels:
        raise ValidationError("Observed block already contains U")
    if var_u <= 0:
        raise ValidationError(f"var_u must be positive, got {var_u}")
    k = len(observed.labels)
    scale = np.sqrt(np.diag(observed.entries))
    entries = np.zeros((k + 1, k + 1))
    entries[:k, :k] = observed.entries
    entries[:k, k] = entries[k, :k] = np.asarray(candidate_row, dtype=np.float64) * scale * math.sqrt(var_u)
    entries[k, k] = var_u
    omega = CovarianceMatrix(labels=observed.labels + ('U',), entries=entries)
    return ExtensionCheck(valid=is_positive_semidefinite(entries), min_eigenvalue=omega.min_eigenvalue(), omega=omega)
