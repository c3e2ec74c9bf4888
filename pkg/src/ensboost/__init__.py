"""Boost gridded monthly climate ensembles with a conditional VAE."""

from .data import FieldSeries, Normalizer, SyntheticConfig, read_field_series, write_field_series
from .cvae import CvaeModel, TrainConfig, load_checkpoint, save_checkpoint, train
from .inference import GenerationConfig, LatentPrior, DecoderNoiseModel, generate_ensemble
from .report import EvalReport, read_report, write_report

__all__ = ["FieldSeries", "Normalizer", "SyntheticConfig", "read_field_series",
           "write_field_series", "CvaeModel", "TrainConfig", "load_checkpoint",
           "save_checkpoint", "train", "GenerationConfig", "LatentPrior", "DecoderNoiseModel",
           "generate_ensemble", "EvalReport", "read_report", "write_report"]

__version__ = "0.1.0"
