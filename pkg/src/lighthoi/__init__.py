"""Pace-induced guidance for modality-wise diffusion forcing on a toy HOI world."""

__version__ = "0.1.0"

from .core import GridLayout, HOIDataset, HOISequence, ModalityPartition, TokenGrid, pack, unpack
from .sampler import GuidanceConfig, NoiseSource, Sampler, UniformTrajectory
from .schedule import ModalityNoiseLevels, NoiseSchedule, corrupt, renoise

__all__ = [
    "GridLayout",
    "GuidanceConfig",
    "HOIDataset",
    "HOISequence",
    "ModalityNoiseLevels",
    "ModalityPartition",
    "NoiseSchedule",
    "NoiseSource",
    "Sampler",
    "TokenGrid",
    "UniformTrajectory",
    "corrupt",
    "pack",
    "renoise",
    "unpack",
]
