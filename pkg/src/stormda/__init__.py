"""Score-based ensemble data assimilation with tiled, context-compressed attention denoisers."""
from .errors import CapabilityError, ConfigError, NumericalError, StormDAError
from .fields import GridSpec, GrfParams, StateField, TemporalContext, ToyDynamics, evolve_context, sample_grf
from .rng import RngState
from .diffusion import NoiseSchedule, build_schedule, add_noise, reverse_step, sample_prior, score_from_denoiser
from .guidance import (GuidanceSchedule, ObservationOperator, ObservationSet, assimilate, likelihood_score,
                       observe, posterior_score)
from .tiling import TilePlan, hanning_weights, plan_tiles, tiled_denoise
from .ensemble import Ensemble, crps, generate_ensemble, rmse, spread, spread_skill
from . import kernels

__version__ = "0.1.0"
