"""regeval: bias-aware evaluation harness for deformable image registration.

The package covers the full loop: NIfTI I/O with strict geometry handling,
resampling and displacement-field algebra, probabilistic label transport,
overlap metrics with principled trimming, the paired statistics used to
compare methods, modality-invariant features, a multiresolution greedy
registration engine, and a harness that runs protocols over subject cohorts
and emits deterministic reports.
"""
from .errors import (
    DegenerateStatisticsError,
    GridMismatchError,
    LabelIntegrityError,
    ManifestError,
    NiftiCorruptionError,
    NiftiFormatError,
    NonFiniteDataError,
    OptimizationFailureError,
    RegevalError,
    TransformIntegrityError,
)
from .features import HistogramProfile, MindConfig, histogram_profile, mind, mind_ssd
from .geometry import (
    AffineTransform,
    DisplacementField,
    GridSpec,
    apply_affine,
    apply_warp,
    compose_displacements,
    crop_or_pad,
    exp_velocity_field,
    jacobian_determinant,
    resample,
    sample_nearest,
    sample_trilinear,
    warp_points,
)
from .harness import (
    EvalRecord,
    HarnessConfig,
    MethodSpec,
    Pair,
    PairManifest,
    SubjectData,
    SubjectEntry,
    emit_report,
    enumerate_pairs,
    load_subject_data,
    load_subjects,
    run_ablation,
    run_protocol,
    select_subset,
)
from .metrics import DiceRecord, dice, dice_binary, trim_lower_percentile
from .nifti import (
    read_displacement_field,
    read_volume,
    write_displacement_field,
    write_volume,
)
from .register import (
    RegistrationConfig,
    RegistrationResult,
    affine_register,
    gaussian_smooth,
    greedy_register,
    lncc,
)
from .stats import (
    EffectSizeReport,
    PairedTResult,
    Summary,
    ViolinData,
    cohens_d,
    effect_size_report,
    paired_t_test,
    summary,
    violin,
)
from .transport import (
    LabelTransportConfig,
    TransportComparison,
    compare_transport_modes,
    warp_labels,
)
from .volume import LabelVolume, Volume, VolumeHeader, reorient

__version__ = "0.1.0"

__all__ = [
    "AffineTransform", "DiceRecord", "DisplacementField",
    "DegenerateStatisticsError", "EffectSizeReport", "EvalRecord",
    "GridMismatchError", "GridSpec", "HarnessConfig", "HistogramProfile",
    "LabelIntegrityError", "LabelTransportConfig", "LabelVolume",
    "ManifestError", "MethodSpec", "MindConfig", "NiftiCorruptionError",
    "NiftiFormatError", "NonFiniteDataError", "OptimizationFailureError",
    "Pair", "PairManifest", "PairedTResult", "RegevalError",
    "RegistrationConfig", "RegistrationResult", "SubjectData", "SubjectEntry",
    "Summary", "TransformIntegrityError", "TransportComparison", "ViolinData",
    "Volume", "VolumeHeader", "affine_register", "apply_affine", "apply_warp",
    "cohens_d", "compare_transport_modes", "compose_displacements",
    "crop_or_pad", "dice", "dice_binary", "effect_size_report", "emit_report",
    "enumerate_pairs", "exp_velocity_field", "gaussian_smooth",
    "greedy_register", "histogram_profile", "jacobian_determinant",
    "lncc", "load_subject_data", "load_subjects", "mind", "mind_ssd",
    "paired_t_test", "read_displacement_field", "read_volume", "reorient",
    "resample", "run_ablation", "run_protocol", "sample_nearest",
    "sample_trilinear", "select_subset", "summary", "trim_lower_percentile",
    "violin", "warp_labels", "warp_points", "write_displacement_field",
    "write_volume",
]
