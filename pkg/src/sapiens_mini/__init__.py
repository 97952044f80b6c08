"""Desk-scale human-centric vision transformer: joint masked-reconstruction and
self-distillation pretraining, five dense task heads, metrics and a CLI."""
from .backbone import Backbone, BackboneOutput, TokenGrid
from .config import AttentionLayout, BackboneConfig, RunConfig, load_run_config, preset
from .errors import (CheckpointMismatchError, ConfigError, DegenerateInputError, FrozenWeightDriftError,
                     NaNGradientError, UsageError)
from .estimators import DenseTaskEstimator, SapiensPretrainer, check_images
from .evaluation import MetricReport, dense_probe
from .masking import Mask, MaskSpec, sample_mask
from .synth import SyntheticSceneSpec, TaskSample, generate_dataset, synth_generate
from .training import FineTuner, Pretrainer

__version__ = "0.1.0"

__all__ = [
    "AttentionLayout", "Backbone", "BackboneConfig", "BackboneOutput", "CheckpointMismatchError",
    "ConfigError", "DegenerateInputError", "DenseTaskEstimator", "FineTuner", "FrozenWeightDriftError",
    "Mask", "MaskSpec", "MetricReport", "NaNGradientError", "Pretrainer", "RunConfig", "SapiensPretrainer",
    "SyntheticSceneSpec", "TaskSample", "TokenGrid", "UsageError", "check_images", "dense_probe",
    "generate_dataset", "load_run_config", "preset", "sample_mask", "synth_generate",
]
