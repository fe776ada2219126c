"""Set-embedding multi-modal fusion for irregular, partially observed EHR-like data."""

from .cohort import PatientRecord, Window, load_cohort
from .metrics import MetricReport, auprc, auroc
from .model import FusionConfig, FusionModel, build_model, load_model, save_model
from .synth import SynthConfig, synth_generate
from .train import TrainConfig, prepare, train

__all__ = [
    "FusionConfig",
    "FusionModel",
    "MetricReport",
    "PatientRecord",
    "SynthConfig",
    "TrainConfig",
    "Window",
    "auprc",
    "auroc",
    "build_model",
    "load_cohort",
    "load_model",
    "prepare",
    "save_model",
    "synth_generate",
    "train",
]

__version__ = "0.1.0"
