"""Sampling laboratory for jointly guided reverse-diffusion particles.

The package samples small particle sets whose reverse diffusion is coupled
through a time-evolving repulsive potential, on analytic mixture targets
where scores, densities, and noised marginals all have closed forms. It
ships the samplers themselves, fixed and learned coupling potentials, a
path-integral density estimator for validating the joint law, diversity
metrics, and a config-driven experiment runner with deterministic outputs.
"""

__version__ = "0.1.0"

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .experiments import ExperimentReport, emit_plots, run_experiment
from .learned import (
    CorrectionGrid,
    ProductFormModel,
    SetNetModel,
    TrainConfig,
    corrected_log_phi,
    fixed_pair_log_phi,
    load_grid,
    load_model,
    model_guidance,
    sample_learned_pg,
    save_grid,
    save_model,
    train_gamma,
    train_phi,
)
from .metrics import (
    SampleReport,
    coupon_collector_mean,
    expected_log_phi,
    expected_modes_iid,
    feynman_kac_density,
    in_batch_similarity,
    mode_counts,
    mode_coverage,
    observe_sets,
    reweighted_sampler,
)
from .potentials import (
    BandwidthRule,
    Kernel,
    Normalization,
    PotentialSpec,
    log_potential,
    median_bandwidth,
    potential_gradient,
    potential_terms,
)
from .samplers import (
    GuidanceConfig,
    LowTempConfig,
    MetaBias,
    Mode,
    pfgm_guided_ode,
    potential_guidance,
    sample_batch,
    sample_low_temp,
    sample_metadynamics_batch,
    sample_metadynamics_seq,
    sample_pg,
    svgd_equiv_pg_step,
    svgd_run,
)
from .schedule import NoiseSchedule, ParticleSet, RngStream, ScheduledValue, Space
from .targets import (
    MixtureTarget,
    draw_mixture,
    mixture_box_masses,
    mixture_density,
    mixture_log_density,
    mixture_score,
    ring_mixture,
    sample_target,
)

__all__ = [name for name in dir() if not name.startswith("_")]
