from .convert import ConversionResult, convert, renormalize_units
from .data import FeatureBank, pair_entries
from .model import AlignmentConfig, AlignmentModel, alignment_loss
from .train import AlignStage, StageRecipe, finetune_schedule, pretrain, run_stage, train_step

__all__ = [
    "AlignStage",
    "AlignmentConfig",
    "AlignmentModel",
    "ConversionResult",
    "FeatureBank",
    "StageRecipe",
    "alignment_loss",
    "convert",
    "finetune_schedule",
    "pair_entries",
    "pretrain",
    "renormalize_units",
    "run_stage",
    "train_step",
]
