"""CAD-Unet: capsule-assisted attention Unet for lesion segmentation, on a small numpy autodiff engine."""

from .autodiff import NonFiniteError, ShapeError, Tensor, backward
from .data import SegmentationSample, SyntheticSpec, load_dataset, save_dataset, synth_generate
from .losses import LossWeights, hybrid_loss
from .metrics import ConfusionCounts, Scores, SeverityLabel, confusion, metrics, severity, wilcoxon_rank_sum
from .model import CADUnet, ModelConfig, ModelOutput, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainingDiverged, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CADUnet", "ConfusionCounts", "LossWeights", "ModelConfig", "ModelOutput", "NonFiniteError", "Scores",
    "SegmentationSample", "SeverityLabel", "ShapeError", "SyntheticSpec", "Tensor", "TrainConfig",
    "TrainingDiverged", "backward", "confusion", "evaluate", "hybrid_loss", "load_checkpoint", "load_dataset",
    "metrics", "save_checkpoint", "save_dataset", "severity", "synth_generate", "train", "wilcoxon_rank_sum",
]
