"""Adversarially trained coordinate-MLP image generator.

A residual-MLP hypernetwork maps latent vectors to the parameters of a
multi-scale per-pixel decoder through factorized multiplicative weight
modulation. Because the decoder consumes raw coordinates, a trained model
can be re-evaluated on denser grids (superresolution), sparser grids
(cheaper low-res inference) or larger extents (zoom-out) with no extra
training; the metrics suite quantifies those properties.
"""

from .coords import (
    CoordGrid,
    Extent,
    FourierEmbedding,
    UNIT_EXTENT,
    fourier_embed,
    fourier_features,
    frequency_histogram,
    make_grid,
)
from .fmm import (
    FMMFactors,
    FMMLayerSpec,
    apply_affine,
    init_shared_weight,
    modulate,
    simulate_direct_hypernet,
)
from .inr import (
    ArchConfig,
    BlockSpec,
    DirectParams,
    INRArchitecture,
    INRParams,
    build_architecture,
    evaluate,
    evaluate_lowres,
    lerp_params,
    reference_arch_config,
    superresolve,
    upsample_features,
    zoom,
)
from .hypernet import (
    Generator,
    GeneratorConfig,
    load_generator_checkpoint,
    sample_latent,
    save_generator_checkpoint,
    truncate,
)
from .gan import (
    Discriminator,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    d_logistic_loss,
    fit_reconstruction,
    g_nonsaturating_loss,
    r1_penalty,
    train_loop,
)
from .metrics import (
    FeatureStats,
    KplResult,
    MacReport,
    MetricReport,
    NumericalStabilityError,
    ProjectionDiverged,
    count_macs,
    fid_proxy,
    frechet_distance,
    kpl,
    project_latent,
    upsampled_fid,
)
from .data import (
    DataError,
    ImageDataset,
    SyntheticShapeSpec,
    centroid_keypoints,
    load_folder,
    make_synthetic,
)
from .config import ConfigError, RunConfig, config_hash, load_config

__version__ = "0.1.0"
