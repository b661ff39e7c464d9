"""
Linear-Gaussian structural causal model and its closed-form population quantities.

    A = alpha_a + gamma_x'X + gamma_u U + eps_a
    Y = alpha_y + beta_a A + beta_x'X + beta_u U + eps_y

with X_1..X_p, U, eps_a, eps_y mutually independent normals.
"""
import dataclasses
import enum
import math
import re
import typing

import dataclasses_json
import numpy as np

from causal_simulation.errors import DegenerateDesignError, UndefinedRatioError, ValidationError
from causal_simulation.util import FloatArray

PSD_TOLERANCE = 1e-8

SCALAR_PARAMETERS = ('alpha_a', 'alpha_y', 'beta_a', 'beta_u', 'gamma_u', 'mu_u', 'var_u', 'var_eps_a', 'var_eps_y')
VECTOR_PARAMETERS = ('beta_x', 'gamma_x', 'mu_x', 'var_x')

_PARAMETER_PATTERN = re.compile(r'^(?P<field>[a-z_]+)(\[(?P<index>\d+)\])?$')


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class ScmSpec:
    beta_a: float
    beta_u: float
    beta_x: typing.Tuple[float, ...]
    gamma_u: float
    gamma_x: typing.Tuple[float, ...]
    var_eps_a: float
    var_eps_y: float
    alpha_y: float = 0.0
    alpha_a: float = 0.0
    mu_u: float = 0.0
    var_u: float = 1.0
    # Empty means all-zero means / unit variances:
    mu_x: typing.Tuple[float, ...] = ()
    var_x: typing.Tuple[float, ...] = ()

    def __post_init__(self) -> None:
        p = len(self.beta_x)
        for name in SCALAR_PARAMETERS:
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValidationError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        for name, default in (('mu_x', 0.0), ('var_x', 1.0)):
            if len(getattr(self, name)) == 0:
                object.__setattr__(self, name, (default,) * p)
        for name in VECTOR_PARAMETERS:
            values = tuple(float(v) for v in getattr(self, name))
            if not all(math.isfinite(v) for v in values):
                raise ValidationError(f"{name} must be finite, got {values}")
            object.__setattr__(self, name, values)

        if p < 1:
            raise ValidationError("At least one regressor is required (len(beta_x) >= 1)")
        lengths = {name: len(getattr(self, name)) for name in VECTOR_PARAMETERS}
        if len(set(lengths.values())) != 1:
            raise ValidationError(f"beta_x, gamma_x, mu_x and var_x must have identical length: {lengths}")
        if self.var_u <= 0:
            raise ValidationError(f"var_u must be positive, got {self.var_u}")
        if any(v <= 0 for v in self.var_x):
            raise ValidationError(f"Every entry of var_x must be positive, got {self.var_x}")
        if self.var_eps_a < 0 or self.var_eps_y < 0:
            raise ValidationError(f"Error variances must be non-negative, got var_eps_a={self.var_eps_a}, var_eps_y={self.var_eps_y}")

    @property
    def p(self) -> int:
        return len(self.beta_x)

    @property
    def x_labels(self) -> typing.Tuple[str, ...]:
        return tuple(f'X{j + 1}' for j in range(self.p))

    def vector(self, name: str) -> FloatArray:
        return np.asarray(getattr(self, name), dtype=np.float64)


@dataclasses.dataclass(frozen=True)
class MarginalMoments:
    var_a: float
    var_y: float
    mean_a: float
    mean_y: float


@dataclasses.dataclass(frozen=True, eq=False)
class CovarianceMatrix:
    labels: typing.Tuple[str, ...]
    entries: FloatArray

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.shape != (len(self.labels), len(self.labels)):
            raise ValidationError(f"Covariance of shape {entries.shape} does not match {len(self.labels)} labels")
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError(f"Duplicate labels: {self.labels}")
        if not np.allclose(entries, entries.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.max(np.abs(entries), initial=0.0)))):
            raise ValidationError("Covariance matrix must be symmetric")
        object.__setattr__(self, 'entries', entries)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValidationError(f"Unknown variable {label!r}; known: {self.labels}") from None

    def __getitem__(self, key: typing.Tuple[str, str]) -> float:
        return float(self.entries[self.index(key[0]), self.index(key[1])])

    def submatrix(self, labels: typing.Sequence[str]) -> 'CovarianceMatrix':
        idx = [self.index(label) for label in labels]
        return CovarianceMatrix(labels=tuple(labels), entries=self.entries[np.ix_(idx, idx)])

    def conditional(self, targets: typing.Sequence[str], given: typing.Sequence[str]) -> 'CovarianceMatrix':
        """Gaussian conditional covariance of targets given `given`, by Schur complement."""
        tt = self.submatrix(targets).entries
        if len(given) == 0:
            return CovarianceMatrix(labels=tuple(targets), entries=tt)
        t_idx = [self.index(label) for label in targets]
        g_idx = [self.index(label) for label in given]
        tg = self.entries[np.ix_(t_idx, g_idx)]
        gg = self.entries[np.ix_(g_idx, g_idx)]
        schur = tt - tg @ np.linalg.solve(gg, tg.T)
        return CovarianceMatrix(labels=tuple(targets), entries=(schur + schur.T) / 2)

    def correlation(self) -> 'CovarianceMatrix':
        scale = np.sqrt(np.diag(self.entries))
        return CovarianceMatrix(labels=self.labels, entries=self.entries / np.outer(scale, scale))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.entries)[0])

    def is_positive_semidefinite(self) -> bool:
        return is_positive_semidefinite(self.entries)


class Conditioning(enum.Enum):
    ON_X = 'on_x'
    NAIVE = 'naive'


def is_positive_semidefinite(entries: FloatArray, tolerance: float = PSD_TOLERANCE) -> bool:
    eigenvalues = np.linalg.eigvalsh(entries)
    return bool(eigenvalues[0] >= -tolerance * max(abs(eigenvalues[-1]), abs(eigenvalues[0])))


def split_parameter(name: str) -> typing.Tuple[str, typing.Optional[int]]:
    match = _PARAMETER_PATTERN.match(name)
    if match is None or match.group('field') not in SCALAR_PARAMETERS + VECTOR_PARAMETERS:
        raise ValidationError(f"Unknown parameter {name!r}")
    field, index = match.group('field'), match.group('index')
    if index is not None and field not in VECTOR_PARAMETERS:
        raise ValidationError(f"Parameter {field!r} is a scalar and cannot be indexed")
    return field, (int(index) if index is not None else None)


def get_parameter(spec: ScmSpec, name: str) -> float:
    field, index = split_parameter(name)
    if field in SCALAR_PARAMETERS:
        return float(getattr(spec, field))
    values = getattr(spec, field)
    if index is None:
        if len(set(values)) != 1:
            raise ValidationError(f"{field} has distinct components {values}; address one as {field}[i]")
        return float(values[0])
    if index >= spec.p:
        raise ValidationError(f"{name}: index out of range for p={spec.p}")
    return float(values[index])


def replace_parameter(spec: ScmSpec, name: str, value: float) -> ScmSpec:
    """
    Copy of spec with one parameter set. `gamma_x[1]` addresses a single component, a bare vector name sets every
    component to value.
    """
    field, index = split_parameter(name)
    if field in SCALAR_PARAMETERS:
        return dataclasses.replace(spec, **{field: float(value)})
    values = list(getattr(spec, field))
    if index is None:
        values = [float(value)] * spec.p
    elif index >= spec.p:
        raise ValidationError(f"{name}: index out of range for p={spec.p}")
    else:
        values[index] = float(value)
    return dataclasses.replace(spec, **{field: tuple(values)})


def _loadings(spec: ScmSpec) -> typing.Tuple[FloatArray, FloatArray]:
    """Rows (Y, A, X.., U) as linear maps of the exogenous block (X.., U, eps_a, eps_y), and its variances."""
    p = spec.p
    k = p + 3
    row_a = np.zeros(k)
    row_a[:p] = spec.vector('gamma_x')
    row_a[p] = spec.gamma_u
    row_a[p + 1] = 1.0
    row_y = spec.beta_a * row_a
    row_y[:p] += spec.vector('beta_x')
    row_y[p] += spec.beta_u
    row_y[p + 2] = 1.0
    loadings = np.vstack([row_y, row_a, np.eye(k)[:p + 1]])
    variances = np.concatenate([spec.vector('var_x'), [spec.var_u, spec.var_eps_a, spec.var_eps_y]])
    return loadings, variances


def build_covariance(spec: ScmSpec) -> CovarianceMatrix:
    loadings, variances = _loadings(spec)
    entries = (loadings * variances) @ loadings.T
    return CovarianceMatrix(labels=('Y', 'A') + spec.x_labels + ('U',), entries=(entries + entries.T) / 2)


def explained_treatment_variance(spec: ScmSpec) -> float:
    return float(np.sum(spec.vector('gamma_x') ** 2 * spec.vector('var_x')) + spec.gamma_u ** 2 * spec.var_u)


def explained_outcome_variance(spec: ScmSpec) -> float:
    """b' Var([A, X, U]) b for b = (beta_a, beta_x, beta_u)."""
    cov = build_covariance(spec)
    labels = ('A',) + spec.x_labels + ('U',)
    b = np.concatenate([[spec.beta_a], spec.vector('beta_x'), [spec.beta_u]])
    return float(b @ cov.submatrix(labels).entries @ b)


def marginal_moments(spec: ScmSpec) -> MarginalMoments:
    mean_a = spec.alpha_a + float(spec.vector('gamma_x') @ spec.vector('mu_x')) + spec.gamma_u * spec.mu_u
    mean_y = spec.alpha_y + spec.beta_a * mean_a + float(spec.vector('beta_x') @ spec.vector('mu_x')) + spec.beta_u * spec.mu_u
    return MarginalMoments(
        var_a=explained_treatment_variance(spec) + spec.var_eps_a,
        var_y=explained_outcome_variance(spec) + spec.var_eps_y,
        mean_a=mean_a,
        mean_y=mean_y,
    )


def _residual_treatment_variance(spec: ScmSpec) -> float:
    # var_a - gamma_x' diag(var_x) gamma_x, without the cancellation
    residual = spec.gamma_u ** 2 * spec.var_u + spec.var_eps_a
    if residual <= 0:
        raise DegenerateDesignError("Treatment is fully explained by X: var_a - gamma_x' diag(var_x) gamma_x <= 0")
    return residual


def plim_conditional(spec: ScmSpec) -> float:
    return spec.beta_a + spec.beta_u * spec.gamma_u * spec.var_u / _residual_treatment_variance(spec)


def plim_naive(spec: ScmSpec) -> float:
    var_a = marginal_moments(spec).var_a
    if var_a <= 0:
        raise DegenerateDesignError("Treatment variance is zero")
    confounding = spec.beta_u * spec.gamma_u * spec.var_u
    x_bias = float(np.sum(spec.vector('beta_x') * spec.vector('gamma_x') * spec.vector('var_x')))
    return spec.beta_a + (confounding + x_bias) / var_a


def additional_bias(spec: ScmSpec) -> float:
    """Population additional absolute bias |plim b(X) - beta_a| - |plim b() - beta_a|."""
    return abs(plim_conditional(spec) - spec.beta_a) - abs(plim_naive(spec) - spec.beta_a)


def bias_amplification_ratio(spec: ScmSpec) -> float:
    naive_bias = plim_naive(spec) - spec.beta_a
    if naive_bias == 0.0:
        raise UndefinedRatioError("Naive estimator is asymptotically unbiased; the amplification ratio is undefined")
    return abs(plim_conditional(spec) - spec.beta_a) / abs(naive_bias)


def asymptotic_variance(spec: ScmSpec, conditioning: Conditioning) -> float:
    """
    Var(sqrt(n) (b - beta_a)) of the OLS treatment coefficient.

    Under joint normality Var(Y | A, S) is constant, so E[Var(Y|A,S) v^2] / E[v^2]^2 reduces to
    Var(Y|A,S) / Var(A|S) with v the residual of A on S.
    """
    cov = build_covariance(spec)
    given = spec.x_labels if conditioning == Conditioning.ON_X else ()
    var_a_given = cov.conditional(['A'], given).entries[0, 0]
    if var_a_given <= 0:
        raise DegenerateDesignError(f"Var(A | {', '.join(given) or 'nothing'}) is not positive")
    var_y_given = cov.conditional(['Y'], ('A',) + tuple(given)).entries[0, 0]
    return float(var_y_given / var_a_given)
