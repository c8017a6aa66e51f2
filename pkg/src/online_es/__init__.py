"""Online evolution-strategies gradient estimation for unrolled computation graphs."""

from .estimators import (KINDS, EstimatorConfig, GradientSample, NoiseConfig, TruncationClock, fulles_estimate,
                         make_step_unlocked_pool, make_workers, mod_dagger, pool_gradient)
from .graphs import (DivergenceError, LinearGraph, LinearLossSpec, LorenzGraph, LorenzTestLoss, UnrolledGraph,
                     episode_mean_loss, lorenz_test_loss, unroll_step)
from .trainer import SGD, Adam, Schedule, TrainLog, make_optimizer, train
from .variance import (VarianceReport, closed_form_fulles_variance, closed_form_gpes_variance,
                       fourth_moment_check, mc_total_variance, theorem2_condition)

__version__ = "0.1.0"
