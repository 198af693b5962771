"""Modality- and instance-aware visual prompts for visible-infrared person re-identification."""

from mipreid.config import ModelConfig, TrainConfig
from mipreid.model import MIPNet

__all__ = ["ModelConfig", "TrainConfig", "MIPNet"]
__version__ = "0.1.0"
