"""Jointly learned class-specific training augmentation and test-time augmentation for segmentation."""

from .data import Dataset, Shift, TaskSpec, gen_task, load_dataset, load_task, save_dataset, save_task
from .errors import ConfigError, DataError, DatasetFormatError, DatasetValidationError, JointAugError, NumericError
from .meta import RunConfig, TrainResult, evaluate, refine_tea, train
from .metrics import MetricsReport, dsc, hd95
from .policy import ClassPolicy, TeaPolicy, gumbel_softmax_draw
from .tea_infer import AggregationPlan, aggregate, build_plan, identity_plan
from .tensor_net import SegNet, load_checkpoint, save_checkpoint
from .transforms import default_tea_registry, default_tra_registry

__version__ = "0.1.0"

__all__ = [
    "AggregationPlan", "ClassPolicy", "ConfigError", "DataError", "Dataset", "DatasetFormatError",
    "DatasetValidationError", "JointAugError", "MetricsReport", "NumericError", "RunConfig", "SegNet", "Shift",
    "TaskSpec", "TeaPolicy", "TrainResult", "aggregate", "build_plan", "default_tea_registry",
    "default_tra_registry", "dsc", "evaluate", "gen_task", "gumbel_softmax_draw", "hd95", "identity_plan",
    "load_checkpoint", "load_dataset", "load_task", "refine_tea", "save_checkpoint", "save_dataset", "save_task",
    "train",
]
