import dataclasses
import math

import numpy as np
import pytest

from causal_simulation.errors import InfeasibleInterventionError, ValidationError
from causal_simulation.interventions import FeasibleRange, InterventionMode, InterventionPlan, direct_effect, extend_correlation_matrix, \
    feasible_range, normalize_hold, total_effect
from causal_simulation.scm_core import ScmSpec, additional_bias, build_covariance, marginal_moments, plim_conditional, plim_naive

HOLD = ['var_a', 'var_y']


@pytest.fixture
def control() -> ScmSpec:
    return ScmSpec(beta_a=0.2, beta_x=(-0.05,), beta_u=0.3, gamma_x=(0.6,), gamma_u=0.3, var_eps_a=0.55, var_eps_y=0.8435)


def test_total_effect_gamma_u(control: ScmSpec) -> None:
    plan = total_effect(control, 'gamma_u', 0.55)
    assert plan.mode == InterventionMode.TOTAL_EFFECT
    assert plan.treated.var_eps_a == control.var_eps_a
    assert marginal_moments(plan.treated).var_a == pytest.approx(1.2125)
    assert plim_conditional(plan.treated) == pytest.approx(0.39355, abs=1e-5)
    assert plim_naive(plan.treated) == pytest.approx(0.3113, abs=1e-4)
    assert additional_bias(plan.treated) == pytest.approx(0.0822, abs=1e-4)


def test_direct_effect_gamma_u(control: ScmSpec) -> None:
    plan = direct_effect(control, 'gamma_u', 0.55, HOLD)
    assert plan.held == ('var_a', 'var_y')
    assert plan.absorbers == ('var_eps_a', 'var_eps_y')
    assert plan.treated.var_eps_a == pytest.approx(0.3375)
    moments = marginal_moments(plan.treated)
    assert moments.var_a == pytest.approx(1.0, abs=1e-12)
    assert moments.var_y == pytest.approx(1.0, abs=1e-12)
    assert plim_conditional(plan.treated) == pytest.approx(0.4578, abs=1e-4)
    assert plim_naive(plan.treated) == pytest.approx(0.335, abs=1e-12)
    assert additional_bias(plan.treated) == pytest.approx(0.1228, abs=1e-4)


def test_gamma_x_arms(control: ScmSpec) -> None:
    direct = direct_effect(control, 'gamma_x', 0.8, HOLD).treated
    total = total_effect(control, 'gamma_x', 0.8).treated
    assert plim_conditional(direct) == pytest.approx(0.45, abs=1e-12)
    assert additional_bias(direct) == pytest.approx(0.20, abs=1e-12)
    assert plim_conditional(total) == plim_conditional(control)
    assert additional_bias(total) == pytest.approx(0.1015625, abs=1e-12)


def test_feasible_range_gamma_u(control: ScmSpec) -> None:
    for hold in (['var_a'], HOLD):
        feasible = feasible_range(control, 'gamma_u', hold)
        assert feasible.lower == pytest.approx(-0.8, abs=1e-12)
        assert feasible.upper == pytest.approx(0.8, abs=1e-12)
        assert 0.79 in feasible
        assert 0.8 not in feasible
        assert any('var_eps_a' in constraint for constraint in feasible.binding_constraints)
    assert str(feasible_range(control, 'gamma_u', ['var_a'])) == 'gamma_u in (-0.8, 0.8)'


@pytest.mark.parametrize('value', [-0.79, 0.79])
def test_direct_effect_inside_bound(control: ScmSpec, value: float) -> None:
    plan = direct_effect(control, 'gamma_u', value, HOLD)
    assert plan.treated.var_eps_a > 0


@pytest.mark.parametrize('value', [-0.81, 0.81])
def test_direct_effect_outside_bound(control: ScmSpec, value: float) -> None:
    with pytest.raises(InfeasibleInterventionError) as e:
        direct_effect(control, 'gamma_u', value, HOLD)
    assert 'var_eps_a' in e.value.constraint
    assert '0.8' in str(e.value)


def test_direct_effect_with_wider_gamma_x(control: ScmSpec) -> None:
    with pytest.raises(InfeasibleInterventionError):
        direct_effect(control, 'gamma_u', 0.9, HOLD)


def test_absorber_cannot_be_intervened_on(control: ScmSpec) -> None:
    with pytest.raises(ValidationError):
        direct_effect(control, 'var_eps_a', 0.3, ['var_a'])
    with pytest.raises(ValidationError):
        feasible_range(control, 'var_u', ['var_a'])
    with pytest.raises(ValidationError):
        normalize_hold(['var_x'])


def test_plan_and_range_validation(control: ScmSpec) -> None:
    with pytest.raises(ValidationError):
        InterventionPlan(reference=control, treated=control, mode=InterventionMode.TOTAL_EFFECT, parameter='gamma_u', new_value=0.3,
                         held=('var_a',), absorbers=('var_eps_a',))
    with pytest.raises(ValidationError):
        FeasibleRange(parameter='gamma_u', lower=1.0, upper=0.0)


def test_extend_correlation_matrix(control: ScmSpec) -> None:
    full = build_covariance(control)
    observed = full.submatrix(['Y', 'A', 'X1'])
    correlations = [full.correlation()[label, 'U'] for label in observed.labels]
    check = extend_correlation_matrix(observed, correlations, var_u=1.0)
    assert check.valid
    assert check.omega['Y', 'U'] == pytest.approx(full['Y', 'U'])
    assert check.min_eigenvalue >= 0

    invalid = extend_correlation_matrix(observed, [0.99, 0.99, 0.99], var_u=1.0)
    assert not invalid.valid
    assert invalid.min_eigenvalue < 0

    with pytest.raises(ValidationError):
        extend_correlation_matrix(observed, [0.1, 0.1], var_u=1.0)


def _random_spec(seed: int) -> ScmSpec:
    rng = np.random.default_rng(seed)
    return ScmSpec(
        beta_a=rng.uniform(-0.8, 0.8),
        beta_x=tuple(rng.uniform(-0.8, 0.8, 2)),
        beta_u=rng.uniform(-0.8, 0.8),
        gamma_x=tuple(rng.uniform(-0.6, 0.6, 2)),
        gamma_u=rng.uniform(0.2, 0.6),
        var_eps_a=rng.uniform(0.5, 2.0),
        var_eps_y=rng.uniform(0.5, 2.0),
        var_u=rng.uniform(0.5, 2.0),
        var_x=tuple(rng.uniform(0.5, 2.0, 2)),
    )


@pytest.mark.parametrize('seed', [0, 1, 2, 3])
def test_flipping_gamma_u_keeps_var_a(seed: int) -> None:
    reference = _random_spec(seed)
    total = total_effect(reference, 'gamma_u', -reference.gamma_u).treated
    direct = direct_effect(reference, 'gamma_u', -reference.gamma_u, ['var_a']).treated
    assert marginal_moments(total).var_a == pytest.approx(marginal_moments(reference).var_a, rel=1e-12)
    assert marginal_moments(direct).var_a == pytest.approx(marginal_moments(total).var_a, rel=1e-12)
    assert direct.var_eps_a == pytest.approx(reference.var_eps_a, rel=1e-12)


@pytest.mark.parametrize('seed', [4, 5])
def test_direct_effect_at_reference_value_is_the_reference(seed: int) -> None:
    reference = _random_spec(seed)
    treated = direct_effect(reference, 'gamma_u', reference.gamma_u, HOLD).treated
    for field in dataclasses.fields(ScmSpec):
        assert getattr(treated, field.name) == pytest.approx(getattr(reference, field.name), abs=1e-12)


def test_feasible_range_endpoints_are_sharp(control: ScmSpec) -> None:
    feasible = feasible_range(control, 'gamma_u', HOLD)
    assert direct_effect(control, 'gamma_u', feasible.lower + 1e-9, HOLD).treated.var_eps_a > 0
    assert direct_effect(control, 'gamma_u', feasible.upper - 1e-9, HOLD).treated.var_eps_a > 0
    for value in (feasible.lower - 1e-6, feasible.upper + 1e-6):
        with pytest.raises(InfeasibleInterventionError) as e:
            direct_effect(control, 'gamma_u', value, HOLD)
        assert 'var_eps_a' in e.value.constraint


def test_outcome_side_bound_binds(control: ScmSpec) -> None:
    # Holding Var(Y) while moving beta_u leaves var_eps_y = 0.9695 - 0.12 b - b^2:
    root = math.sqrt(0.12 ** 2 + 4 * 0.9695)
    feasible = feasible_range(control, 'beta_u', ['var_y'])
    assert feasible.lower == pytest.approx((-0.12 - root) / 2, abs=1e-12)
    assert feasible.upper == pytest.approx((-0.12 + root) / 2, abs=1e-12)
    assert all('var_eps_y' in constraint for constraint in feasible.binding_constraints)
    assert feasible_range(control, 'beta_u', HOLD) == feasible

    assert direct_effect(control, 'beta_u', feasible.upper - 1e-9, ['var_y']).treated.var_eps_y > 0
    assert direct_effect(control, 'beta_u', feasible.lower + 1e-9, ['var_y']).treated.var_eps_y > 0
    for value in (feasible.lower - 1e-6, feasible.upper + 1e-6):
        with pytest.raises(InfeasibleInterventionError) as e:
            direct_effect(control, 'beta_u', value, HOLD)
        assert 'var_eps_y' in e.value.constraint


@pytest.mark.parametrize('seed', range(5))
def test_shrinking_candidate_row_never_breaks_validity(seed: int) -> None:
    rng = np.random.default_rng(200 + seed)
    observed = build_covariance(_random_spec(seed)).submatrix(['Y', 'A', 'X1', 'X2'])
    row = rng.uniform(-1.0, 1.0, 4)
    checks = [extend_correlation_matrix(observed, scale * row, var_u=1.5) for scale in np.linspace(0.0, 2.0, 41)]
    assert checks[0].valid
    eigenvalues = [check.min_eigenvalue for check in checks]
    assert all(later <= earlier + 1e-12 for earlier, later in zip(eigenvalues, eigenvalues[1:]))
    # Once invalid, every larger scaling stays invalid:
    validity = [check.valid for check in checks]
    assert validity == sorted(validity, reverse=True)
