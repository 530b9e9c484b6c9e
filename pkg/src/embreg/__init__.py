"""Cross-modality 3D registration via self-supervised voxel embeddings."""

from .augment import (
    AffineMap,
    AugmentConfig,
    MonotoneCurve,
    PatchPair,
    SuperpixelLabeling,
    augment,
    random_monotone_curve,
    sample_patch_pair,
    slic_superpixels,
)
from .encoder import (
    EmbeddingField,
    EncoderConfig,
    VoxelEncoder,
    build_encoder,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from .errors import ToolkitError
from .evaluate import MedReport, apply_to_landmarks, med, report
from .matching import (
    CorrespondenceSet,
    GridMatchConfig,
    extract_grid_points,
    match_points,
)
from .phantom import (
    ModalityMap,
    PhantomSpec,
    generate_phantom_pair,
    standard_cohort_specs,
    tissue_field,
    write_phantom_pair,
)
from .pipeline import (
    DeformableConfig,
    InferenceResult,
    PipelineConfig,
    RegisteredPair,
    deformable_block_match,
    inference,
    register_once,
    run_pipeline,
)
from .rigid import (
    FitResult,
    RigidTransform,
    fit_affine,
    fit_rigid,
    fit_rigid_robust,
    load_transform,
    save_transform,
)
from .training import (
    LossConfig,
    TrainConfig,
    TrainingSample,
    info_nce_loss,
    loss_gradient,
    sgd_step,
    train_cross_modality,
    train_self_supervised,
)
from .volume import (
    LandmarkSet,
    Mask,
    SpatialMeta,
    VoxelBox,
    VoxelGrid,
    apply_rigid_resample,
    crop_with_margin,
    load_landmarks,
    load_volume,
    resample_isotropic,
    save_landmarks,
    save_volume,
    trilinear_sample,
    voxel_to_world,
    world_to_voxel,
)

__version__ = "0.1.0"
