import dataclasses
import enum
import logging
import math
import typing

import dataclasses_json
import numpy as np
import scipy.optimize  # type: ignore
import scipy.special  # type: ignore

from causal_simulation.errors import DivergenceError, ValidationError
from causal_simulation.montecarlo import Dataset
from causal_simulation.util import FloatArray, substream

logger = logging.getLogger(__name__)

_ARMIJO = 1e-4
_MIN_STEP = 1e-20


class Optimizer(enum.Enum):
    GRADIENT_DESCENT = 'gradient_descent'
    LBFGS = 'lbfgs'


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class NetConfig:
    hidden_units: int = 2
    weight_decay: float = 5e-4
    max_epochs: int = 2000
    restarts: int = 10
    init_scale: float = 0.7
    seed: int = 0
    # Stop once the penalized training objective is below abs_tol (an essentially perfect fit):
    abs_tol: float = 1e-4
    # Stop once an epoch improves the objective by less than rel_tol relative:
    rel_tol: float = 1e-8
    optimizer: Optimizer = Optimizer.GRADIENT_DESCENT
    # Fit on centred, unit-variance responses; weight decay and tolerances then no longer depend on the scale of Y.
    standardize: bool = False

    def __post_init__(self) -> None:
        if self.hidden_units < 1:
            raise ValidationError(f"hidden_units must be at least 1, got {self.hidden_units}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.max_epochs < 1 or self.restarts < 1:
            raise ValidationError(f"max_epochs and restarts must be positive, got {self.max_epochs} and {self.restarts}")
        if not self.init_scale > 0:
            raise ValidationError(f"init_scale must be positive, got {self.init_scale}")
        if self.abs_tol < 0 or self.rel_tol < 0:
            raise ValidationError("Tolerances must be non-negative")


def parameter_count(p: int, hidden_units: int) -> int:
    return hidden_units * p + 2 * hidden_units + 1


def _unpack(theta: FloatArray, p: int, hidden_units: int) -> typing.Tuple[FloatArray, FloatArray, FloatArray, float]:
    h = hidden_units
    w1 = theta[:h * p].reshape(h, p)
    b1 = theta[h * p:h * p + h]
    w2 = theta[h * p + h:h * p + 2 * h]
    return w1, b1, w2, float(theta[-1])


def _forward(theta: FloatArray, x: FloatArray, hidden_units: int) -> typing.Tuple[FloatArray, FloatArray]:
    w1, b1, w2, b2 = _unpack(theta, x.shape[1], hidden_units)
    hidden: FloatArray = scipy.special.expit(x @ w1.T + b1)
    return hidden, hidden @ w2 + b2


def penalized_loss(theta: FloatArray, x: FloatArray, y: FloatArray, hidden_units: int, weight_decay: float) -> typing.Tuple[float, FloatArray]:
    """
    Sum of squared errors plus weight_decay * |theta|^2 (biases included) for a single sigmoid hidden layer with a
    linear output, and its analytic gradient.
    """
    hidden, prediction = _forward(theta, x, hidden_units)
    _, _, w2, _ = _unpack(theta, x.shape[1], hidden_units)
    d_prediction = 2 * (prediction - y)
    d_hidden_input = np.outer(d_prediction, w2) * hidden * (1 - hidden)
    gradient = np.concatenate([
        (d_hidden_input.T @ x).ravel(),
        d_hidden_input.sum(axis=0),
        hidden.T @ d_prediction,
        [d_prediction.sum()],
    ]) + 2 * weight_decay * theta
    value = float(np.sum((prediction - y) ** 2) + weight_decay * theta @ theta)
    return value, gradient


@dataclasses.dataclass(frozen=True, eq=False)
class FittedNet:
    theta: FloatArray
    p: int
    hidden_units: int
    objective: float
    epochs: int
    # Predictions are y_mean + y_scale * network output:
    y_mean: float = 0.0
    y_scale: float = 1.0

    def predict(self, x: FloatArray) -> FloatArray:
        if x.ndim != 2 or x.shape[1] != self.p:
            raise ValidationError(f"Expected covariates of shape (n, {self.p}), got {x.shape}")
        return self.y_mean + self.y_scale * _forward(self.theta, x, self.hidden_units)[1]


def feature_labels(data: Dataset) -> typing.List[str]:
    return sorted((name for name in data.columns if name.startswith('X') and name[1:].isdigit()), key=lambda name: int(name[1:]))


def _gradient_descent(theta: FloatArray, x: FloatArray, y: FloatArray, config: NetConfig) -> typing.Tuple[FloatArray, float, int]:
    value, gradient = penalized_loss(theta, x, y, config.hidden_units, config.weight_decay)
    step = 1.0 / len(y)
    epochs = 0
    for _ in range(config.max_epochs):
        if not math.isfinite(value):
            raise DivergenceError(f"Training objective became non-finite after {epochs} epochs")
        if value < config.abs_tol:
            break
        squared_norm = float(gradient @ gradient)
        if squared_norm == 0.0:
            break
        # Backtracking line search on the Armijo condition:
        while step > _MIN_STEP:
            candidate = theta - step * gradient
            candidate_value, candidate_gradient = penalized_loss(candidate, x, y, config.hidden_units, config.weight_decay)
            if math.isfinite(candidate_value) and candidate_value <= value - _ARMIJO * step * squared_norm:
                break
            step /= 2
        else:
            break
        improvement = value - candidate_value
        theta, value, gradient = candidate, candidate_value, candidate_gradient
        epochs += 1
        if improvement <= config.rel_tol * (abs(value) + config.rel_tol):
            break
        step *= 2
    return theta, value, epochs


def _lbfgs(theta: FloatArray, x: FloatArray, y: FloatArray, config: NetConfig) -> typing.Tuple[FloatArray, float, int]:
    result = scipy.optimize.minimize(
        penalized_loss,
        theta,
        args=(x, y, config.hidden_units, config.weight_decay),
        jac=True,
        method='L-BFGS-B',
        options={'maxiter': config.max_epochs, 'ftol': config.rel_tol, 'gtol': 1e-10},
    )
    if not math.isfinite(result.fun):
        raise DivergenceError(f"L-BFGS ended on a non-finite objective: {result.message}")
    return np.asarray(result.x, dtype=np.float64), float(result.fun), int(result.nit)


def fit_net(train: Dataset, config: NetConfig, stream: typing.Sequence[int] = ()) -> FittedNet:
    """
    Best of config.restarts fits by training objective. Restart r starts from uniform(-init_scale, init_scale)
    weights drawn from substream (config.seed, *stream, r). With config.standardize the objective is in units of the
    standardized response.
    """
    labels = feature_labels(train)
    if not labels:
        raise ValidationError("Training data has no X columns")
    x = train.matrix(labels)
    y = train['Y']
    y_mean, y_scale = 0.0, 1.0
    if config.standardize and np.all(np.isfinite(y)):
        y_mean, y_scale = float(np.mean(y)), float(np.std(y))
        if y_scale == 0.0:
            y_scale = 1.0
        y = (y - y_mean) / y_scale
    size = parameter_count(len(labels), config.hidden_units)
    optimize = _gradient_descent if config.optimizer == Optimizer.GRADIENT_DESCENT else _lbfgs

    best: typing.Optional[FittedNet] = None
    for restart in range(config.restarts):
        initial = substream(config.seed, *stream, restart).uniform(-config.init_scale, config.init_scale, size)
        theta, value, epochs = optimize(initial, x, y, config)
        logger.debug("Restart %d: objective %.6g after %d epochs", restart, value, epochs)
        if best is None or value < best.objective:
            best = FittedNet(theta=theta, p=len(labels), hidden_units=config.hidden_units, objective=value, epochs=epochs,
                             y_mean=y_mean, y_scale=y_scale)
    assert best is not None
    return best
