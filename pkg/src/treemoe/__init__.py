"""Tree-gated mixture-of-experts cascade for pose-robust landmark regression."""

from .autodiff import Adam, Tape, Tensor, backward, record
from .cascade import (CascadeModel, TrainConfig, build_cascade_model,
                      cascade_forward, run_cascade_batch, train)
from .checkpoint import (checkpoint_load, checkpoint_save,
                         pose_checkpoint_load, pose_checkpoint_save)
from .errors import DataError, NumericError
from .metrics import EvalReport, evaluate, nme_bbox, nme_interpupil
from .moe import VARIANTS, ModelDims, build_variant, count_parameters
from .pose import PoseAngles, pose_forward, train_pose
from .synthdata import (Sample, generate_dataset, generate_sample, load_split,
                        read_sample, write_sample)

__version__ = "0.1.0"

__all__ = [
    "Adam", "Tape", "Tensor", "backward", "record",
    "CascadeModel", "TrainConfig", "build_cascade_model", "cascade_forward",
    "run_cascade_batch", "train",
    "checkpoint_load", "checkpoint_save",
    "pose_checkpoint_load", "pose_checkpoint_save",
    "DataError", "NumericError",
    "EvalReport", "evaluate", "nme_bbox", "nme_interpupil",
    "VARIANTS", "ModelDims", "build_variant", "count_parameters",
    "PoseAngles", "pose_forward", "train_pose",
    "Sample", "generate_dataset", "generate_sample", "load_split",
    "read_sample", "write_sample",
    "__version__",
]
