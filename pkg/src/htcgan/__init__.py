"""Attention-guided unpaired MRI-to-HTC synthesis with cascaded binary
segmentation."""

from .data_io import (
    BBox,
    CropWindow,
    LabeledSlice,
    Modality,
    PhantomSpec,
    Volume,
    compute_crop_window,
    crop_to_bbox,
    extract_slices,
    generate_phantom,
    load_nifti,
    load_slices,
    normalize_volume,
    save_nifti,
    save_slices,
    to_unit_range,
)
from .errors import (
    CorruptFileError,
    DegenerateVolumeError,
    HtcganError,
    MissingClassError,
    ShapeError,
    TrainingDivergedError,
    UnsupportedDatatypeError,
    UnsupportedFormatError,
)
from .htc_target import (
    ClassStats,
    TargetDistribution,
    build_htc_target,
    class_overlap_report,
    class_stats,
)
from .metrics import (
    MetricsReport,
    dice,
    evaluate_stage,
    hd95,
    ks_statistic,
    psnr,
    ssim,
)
from .pipeline import (
    CascadeResult,
    ExperimentConfig,
    StageConfig,
    StageModels,
    StageResult,
    cascade_infer,
    cascade_predict,
    load_experiment,
    run_stage,
    total_loss,
    train_cascade,
    validate_cascade,
)
from .segmentation import (
    SegmentationResult,
    SegmenterModel,
    SegTrainConfig,
    batch_class_weights,
    mask_to_bbox,
    segment,
    train_segmenter,
    weighted_cross_entropy,
)
from .synthesis import (
    LossWeights,
    SynthesisModel,
    SynthesisTrainConfig,
    SynthLossBreakdown,
    adversarial_loss,
    compose_translation,
    cycle_loss,
    derive_seed,
    reconstruct,
    synthesis_loss,
    synthesize,
    train_synthesis,
)

__version__ = "0.1.0"
