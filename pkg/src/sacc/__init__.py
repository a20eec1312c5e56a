"""Scale-aware density modelling of noisy crowd annotations.

Annotation noise and head-size scale are folded into a per-pixel Gaussian
model of the density map; predictions are scored by a low-rank Gaussian
negative log-likelihood plus a per-head count regularizer.
"""

from .annotation import (
    AnnotatedScene,
    Annotation,
    HeadSizeDistribution,
    ScaleParams,
    build_scale_params,
    read_scene,
    rescale_annotations,
    sample_scene,
    write_scene,
)
from .density import (
    DensityField,
    GaussianApprox,
    approx_cov,
    approx_mean,
    approx_variance,
    gaussian_kernel_2d,
    mixture_density,
    render_density,
)
from .estimators import DensityCounter, DensityMapTransformer, ScaleParamEstimator
from .exceptions import (
    DegenerateDistributionError,
    FitDivergedError,
    GridMismatchError,
    GridTooLargeError,
    ShapeError,
    SingularFormError,
)
from .fitting import fit_blocks, l2_blocks, scale_aware_blocks
from .fusion import (
    FeatureTensor,
    LayerSpec,
    count_params_macs,
    ifm_block,
    interpolation_down,
    interpolation_up,
    scb_split_block,
    sfm_fuse,
)
from .harness import CountReport, ExperimentConfig, fit_scene, load_config
from .loss import (
    LossBreakdown,
    ScaleAwareObjective,
    baseline_l2_loss,
    loss_gradient,
    precompute_terms,
    regularizer,
    total_loss,
)
from .lowrank import RankMApprox, neg_log_likelihood, select_pixels, truncate_cov

__version__ = "0.1.0"
