"""ECG multi-label classification with decoupled morphology and rhythm.

Pipeline: bandpass + instance normalization + overlapping slices;
deterministic convolutional morphology features with fold-aware PCA;
whole-record HRV descriptors; a bidirectional selective state-space
encoder with cross-modal attention over the static features; power-mean
aggregation of slice probabilities; and a subject-aware, fixed-threshold
evaluation harness.
"""

__version__ = "0.1.0"

from .ingest import (  # noqa: F401
    EcgRecord, DatasetCatalog, CatalogEntry, SynthSpec,
    read_record, write_record, synth_ecg, catalog_build,
    LEAD_NAMES, PRECORDIAL_LEADS,
)
from .preprocess import SliceBag, bandpass_filter, znorm_instance, slice_record  # noqa: F401
from .morphology import (  # noqa: F401
    RocketConfig, PcaProjection,
    minirocket_fit, minirocket_transform, pca_fit, pca_apply,
)
from .rhythm import (  # noqa: F401
    RrSeries, HrvVector, HRV_FEATURE_NAMES,
    detect_rpeaks, hrv_features, broadcast_rhythm,
)
from .backbone import (  # noqa: F401
    BackboneConfig, EcgBackbone, zoh_discretize, linear_recurrence,
    model_backward, saliency, save_checkpoint, load_checkpoint,
)
from .aggregate import RecordPrediction, power_mean, pool_record, q_sweep  # noqa: F401
from .traineval import (  # noqa: F401
    EvalReport, FoldSplit, StudyConfig, TrainSettings,
    bce_loss, asl_loss, ema_init, ema_update, subject_kfold,
    roc_auc, pr_auc, macro_f1, run_cv, ablation_run, lead_dropout_eval,
    scan_scaling_bench, make_study_records,
)
from .errors import (  # noqa: F401
    EcgFusionError, ConfigError, DataError, NumericError, LeakageError,
)
