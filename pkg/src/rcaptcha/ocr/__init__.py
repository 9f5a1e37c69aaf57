from .models import (
    ArchSpec,
    CrackerModel,
    CrackerNet,
    build_model,
    crack,
    decode,
    decode_logits,
    load_checkpoint,
    logits_shape,
    predict_logits,
    predict_logits_batch,
    save_checkpoint,
)
from .training import TrainConfig, load_dataset, sequence_accuracy, train

__all__ = [
    "ArchSpec",
    "CrackerModel",
    "CrackerNet",
    "TrainConfig",
    "build_model",
    "crack",
    "decode",
    "decode_logits",
    "load_checkpoint",
    "load_dataset",
    "logits_shape",
    "predict_logits",
    "predict_logits_batch",
    "save_checkpoint",
    "sequence_accuracy",
    "train",
]
