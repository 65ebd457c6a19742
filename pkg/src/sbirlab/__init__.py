"""Desk-scale lab for fine-grained sketch-to-photo retrieval with triplet networks."""

from .autodiff import Tensor, Tape, backward
from .dataset import DatasetIndex, InstanceRecord
from .encoders import CnnEncoderConfig, EmbeddingPool, VitEncoderConfig, embed, forward, init_params
from .retrieval import (EmbeddingIndex, category_mismatch_rate, evaluate, flip_confusion_rate,
                        improvement_percentage, knn, recall_at_k)
from .sampling import BatchSpec, Strategy, sample_batch
from .synth import SynthSpec, generate_dataset, split
from .training import Checkpoint, LossConfig, TrainSchedule, finetune, multitask_loss, train, triplet_loss

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Tape", "backward",
    "DatasetIndex", "InstanceRecord",
    "CnnEncoderConfig", "VitEncoderConfig", "EmbeddingPool", "embed", "forward", "init_params",
    "EmbeddingIndex", "knn", "evaluate", "recall_at_k", "flip_confusion_rate",
    "category_mismatch_rate", "improvement_percentage",
    "BatchSpec", "Strategy", "sample_batch",
    "SynthSpec", "generate_dataset", "split",
    "Checkpoint", "LossConfig", "TrainSchedule", "train", "finetune", "triplet_loss", "multitask_loss",
]
