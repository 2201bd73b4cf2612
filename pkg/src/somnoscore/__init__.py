"""Sleep-stage scoring from single-channel EEG.

EDF ingestion, context-window datasets with class-balanced sampling, a
from-scratch trainable convolutional network, subject-wise cross-validation,
class-balanced evaluation with bootstrap confidence intervals, and spectral
analysis of the learned filters.
"""

from .edf_ingest import Recording, SleepStage
from .model import ModelConfig

__all__ = ["Recording", "SleepStage", "ModelConfig"]
__version__ = "0.1.0"
