import dataclasses
import enum
import logging
import math
import typing

import dataclasses_json

from causal_simulation.calibrate import CalibrationProblem, calibrate_numeric
from causal_simulation.errors import InfeasibleInterventionError, ValidationError
from causal_simulation.mse_lab.mean_function import MeanFunctionKind, MeanFunctionSpec, radial_signal_variance, signal_variance

logger = logging.getLogger(__name__)

# Radial arms cannot be rescaled, so a requested signal level must already match theirs:
RADIAL_MATCH_TOLERANCE = 1e-3


class SnrMode(enum.Enum):
    VARY_NOISE = 'vary_noise'
    FIX_SIGNAL = 'fix_signal'


@dataclasses_json.dataclass_json(undefined='raise')
@dataclasses.dataclass(frozen=True)
class SnrDesign:
    target_snr: float
    mode: SnrMode = SnrMode.VARY_NOISE
    target_signal_variance: typing.Optional[float] = dataclasses.field(default=None)

    def __post_init__(self) -> None:
        if not (math.isfinite(self.target_snr) and self.target_snr > 0):
            raise ValidationError(f"target_snr must be positive, got {self.target_snr}")
        if self.target_signal_variance is not None:
            if self.mode != SnrMode.FIX_SIGNAL:
                raise ValidationError("target_signal_variance only applies to fix_signal designs")
            if not self.target_signal_variance > 0:
                raise ValidationError(f"target_signal_variance must be positive, got {self.target_signal_variance}")


def signal_level(genspec: MeanFunctionSpec, n_mc: int, seed: int) -> float:
    """Var(mu(X)): exact for radial products, Monte Carlo (moment matched) for sigmoid sums."""
    if genspec.kind == MeanFunctionKind.RADIAL_PRODUCT:
        return radial_signal_variance(genspec.p)
    return signal_variance(genspec, n_mc, seed, moment_matching=True).estimate


def apply_snr_design(genspec: MeanFunctionSpec, design: SnrDesign, n_mc: int, seed: int) -> MeanFunctionSpec:
    """
    vary_noise keeps the mean function and sets var_eps = Var(mu(X)) / target_snr.

    fix_signal first brings Var(mu(X)) to target_signal_variance: sigmoid alphas are multiplied by a calibrated factor,
    radial arms must already sit at that level (or leave the target unset to keep their own). The noise is then
    target_signal_variance / target_snr, equal across arms sharing the design.
    """
    if design.mode == SnrMode.VARY_NOISE:
        signal = signal_level(genspec, n_mc, seed)
        if signal <= 0:
            raise InfeasibleInterventionError("A constant mean function has no SNR", constraint="Var(mu(X)) > 0")
        return dataclasses.replace(genspec, var_eps=signal / design.target_snr)

    if genspec.kind == MeanFunctionKind.RADIAL_PRODUCT:
        signal = radial_signal_variance(genspec.p)
        if design.target_signal_variance is not None and abs(signal - design.target_signal_variance) > RADIAL_MATCH_TOLERANCE * signal:
            constraint = f"signal_variance = {signal:.6g} for radial_product with p={genspec.p}"
            raise InfeasibleInterventionError(
                f"Cannot fix a radial_product signal at {design.target_signal_variance:.6g}: {constraint}", constraint=constraint)
        return dataclasses.replace(genspec, var_eps=signal / design.target_snr)

    if design.target_signal_variance is None:
        raise ValidationError("fix_signal needs target_signal_variance for sigmoid_sum mean functions")
    result = calibrate_numeric(CalibrationProblem(
        spec=genspec,
        free_params=('alpha_scale',),
        targets=(('signal_variance', design.target_signal_variance),),
        seed=seed,
        mc_sample_size=n_mc,
    ))
    scale = result.solved_values['alpha_scale']
    logger.info("Scaled alphas by %.6g to fix the signal at %.6g", scale, design.target_signal_variance)
    return dataclasses.replace(genspec.scaled(scale), var_eps=design.target_signal_variance / design.target_snr)
