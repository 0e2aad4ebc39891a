"""Goal-oriented Bayesian boundary detection for parallel-beam X-ray CT.

Simulate sinograms of piecewise-constant phantoms, then recover inclusion
boundaries and their uncertainty with a two-stage MCMC pipeline: a
level-set posterior localizes inclusions, and per-inclusion star-shaped
posteriors estimate each boundary with highest-posterior-density
credibility bands.
"""

from .diagnostics import acf, ess, hpd_1d, multi_chain_mean_check
from .forward import (
    NoiseModel,
    ScanGeometry,
    Sinogram,
    add_noise,
    radon_functional,
    radon_grid,
    ray,
    read_sinogram_csv,
    snr,
    write_sinogram_csv,
)
from .inference import (
    ChainState,
    LevelSetForward,
    LikelihoodContext,
    NumericalError,
    Rect,
    SamplerConfig,
    StarShapeForward,
    gibbs_sweep,
    make_state,
    neg_log_likelihood,
    pcn_step,
    run_chain,
    rwm_center_step,
    tune,
)
from .pipeline import (
    EmptyResultError,
    InclusionFailure,
    PosteriorSummary,
    RadialBand,
    Stage1Config,
    Stage1Result,
    Stage2Config,
    bounding_boxes,
    global_variance,
    radial_band,
    segment,
    stage1,
    stage2,
)
from .priors import (
    AttenuationLevels,
    BackgroundConfig,
    InfeasibleConfigurationError,
    Phantom,
    PhantomConfig,
    StarInclusion,
    contains,
    evaluate_attenuation,
    level_set_map,
    load_phantom,
    log_gaussian_map,
    sample_phantom,
    save_phantom,
    star_radius,
    validate_configuration,
)
from .randfield import (
    BoundaryCoeffs,
    Field2D,
    Grid2D,
    MaternParams,
    SpectralField2D,
    evaluate_boundary_field,
    kl_weight,
    sample_boundary_coeffs,
    sample_field_2d,
)

__version__ = "0.1.0"
