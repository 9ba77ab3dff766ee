"""Long-tailed classification with a noise-trained teacher and feature-distilled students."""

from .errors import CheckpointError, ConfigError, DivergenceError, ValidationError
from .longtail_data import (
    DatasetSplit,
    LongTailSpec,
    SynthMixtureSpec,
    class_balanced_sampler,
    instance_sampler,
    load_split,
    make_synthetic_mixture,
    per_class_counts,
    save_split,
    subsample_longtail,
)
from .loss_zoo import (
    LossSpec,
    balanced_softmax_loss,
    ce_loss,
    class_balanced_loss,
    class_balanced_weights,
    classification_loss,
    feature_distill_loss,
    focal_loss,
    student_loss,
)
from .model_core import (
    BackboneSpec,
    LTModel,
    build_model,
    forward_gn,
    forward_std,
    load_checkpoint,
    parameter_digest,
    save_checkpoint,
)
from .propheter_layer import (
    KernelMask,
    PropheterParams,
    apply_gn,
    apply_gn_masked,
    init_params,
    project_params,
    sample_residual,
)
from .training import (
    DistillConfig,
    MetricsRecord,
    ScheduleConfig,
    evaluate,
    select_high_conf_kernels,
    train_baseline,
    train_student_decouple,
    train_student_kernels,
    train_student_scratch,
    train_teacher,
)

__version__ = "0.1.0"
