import dataclasses
import enum
import math
import typing

import dataclasses_json
import numpy as np
import scipy.special  # type: ignore
import scipy.stats  # type: ignore

from causal_simulation.errors import ValidationError
from causal_simulation.montecarlo import Dataset
from causal_simulation.util import FloatArray, FunctionalEstimate, batch_variance, standard_normal_columns


class MeanFunctionKind(enum.Enum):
    SIGMOID_SUM = 'sigmoid_sum'
    RADIAL_PRODUCT = 'radial_product'


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class MeanFunctionSpec:
    """
    sigmoid_sum:     mu(x) = sum_i sigmoid(alpha_i' x)
    radial_product:  mu(x) = prod_j phi(x_j), phi the standard normal density
    """
    kind: MeanFunctionKind
    p: int
    alphas: typing.Tuple[typing.Tuple[float, ...], ...] = ()
    var_eps: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, 'alphas', tuple(tuple(float(a) for a in alpha) for alpha in self.alphas))
        object.__setattr__(self, 'var_eps', float(self.var_eps))
        if self.p < 1:
            raise ValidationError(f"p must be at least 1, got {self.p}")
        if not (math.isfinite(self.var_eps) and self.var_eps >= 0):
            raise ValidationError(f"var_eps must be non-negative, got {self.var_eps}")
        if self.kind == MeanFunctionKind.SIGMOID_SUM:
            if len(self.alphas) == 0:
                raise ValidationError("sigmoid_sum needs at least one alpha vector")
            if any(len(alpha) != self.p for alpha in self.alphas):
                raise ValidationError(f"Every alpha vector must have length p={self.p}")
        elif len(self.alphas) != 0:
            raise ValidationError("radial_product takes no alphas")

    def mean(self, x: FloatArray) -> FloatArray:
        if x.ndim != 2 or x.shape[1] != self.p:
            raise ValidationError(f"Expected covariates of shape (n, {self.p}), got {x.shape}")
        if self.kind == MeanFunctionKind.SIGMOID_SUM:
            values: FloatArray = scipy.special.expit(x @ np.asarray(self.alphas).T).sum(axis=1)
        else:
            values = np.prod(scipy.stats.norm.pdf(x), axis=1)
        return values

    def scaled(self, factor: float) -> 'MeanFunctionSpec':
        if self.kind != MeanFunctionKind.SIGMOID_SUM:
            raise ValidationError("Only sigmoid_sum mean functions can be rescaled")
        return dataclasses.replace(self, alphas=tuple(tuple(factor * a for a in alpha) for alpha in self.alphas))

    @property
    def x_labels(self) -> typing.Tuple[str, ...]:
        return tuple(f'X{j + 1}' for j in range(self.p))


def _covariates(genspec: MeanFunctionSpec, n: int, seed: int, stream: typing.Sequence[int], moment_matching: bool = False) -> FloatArray:
    return standard_normal_columns(seed, tuple(stream) + (0,), n, genspec.p, moment_matching=moment_matching)


def generate(genspec: MeanFunctionSpec, n: int, seed: int, stream: typing.Sequence[int] = ()) -> Dataset:
    """
    Covariates and noise come from separate substreams under (seed, *stream); callers keep train and test sets
    independent by giving them different stream keys.
    """
    if n < 1:
        raise ValidationError(f"n must be at least 1, got {n}")
    x = _covariates(genspec, n, seed, stream)
    mu = genspec.mean(x)
    noise = standard_normal_columns(seed, tuple(stream) + (1,), n, 1)[:, 0]
    columns = {label: x[:, j] for j, label in enumerate(genspec.x_labels)}
    columns['mu'] = mu
    columns['Y'] = mu + math.sqrt(genspec.var_eps) * noise
    return Dataset(n=n, columns=columns)


def signal_variance(genspec: MeanFunctionSpec, n_mc: int, seed: int, moment_matching: bool = False) -> FunctionalEstimate:
    """Monte Carlo Var(mu(X)) with a batch-means standard error."""
    if n_mc < 1000:
        raise ValidationError(f"n_mc must be at least 1000, got {n_mc}")
    return batch_variance(genspec.mean(_covariates(genspec, n_mc, seed, (), moment_matching=moment_matching)))


def radial_signal_variance(p: int) -> float:
    """Exact Var(prod_j phi(X_j)) for iid standard normal X: E[phi(X)^2] = 1/(2 pi sqrt 3), E[phi(X)] = 1/(2 sqrt pi)."""
    return (1.0 / (2 * math.pi * math.sqrt(3))) ** p - (1.0 / (2 * math.sqrt(math.pi))) ** (2 * p)
