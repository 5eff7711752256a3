from .forward import GridMessages, emission_table, episode_log_likelihood
from .sampling import (
    BackwardSampler,
    SamplerError,
    backward_sampling,
    bar_sampler,
    initiality_probability,
    tr_sampler,
    truncated_gamma,
)
from .em import (
    EmConfig,
    EmIterate,
    EmResult,
    SampledTrajectorySet,
    bic_select,
    canonicalize,
    ffbs_mcem,
    initialize,
    m_step,
    mc_e_step,
    parameter_count,
    relabel,
)
