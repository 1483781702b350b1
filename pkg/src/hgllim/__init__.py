"""Hybrid GLLiM inverse regression with an optional Potts-MRF spatial prior."""
__version__ = "0.1.0"

from .data import Normalizer, SpectralDataset, SpectralImage, nrmse, paired_ttest
from .errors import HGLLiMError
from .forward import ForwardModel, SpatialOptions, predict, predict_spatial, to_forward
from .model import Dims, InverseModel, ModelArchive, load_model, log_likelihood, save_model
from .potts import NeighborGraph, PottsField
from .selection import bic, select_lw
from .vem import TrainConfig, TrainReport, train

__all__ = [
    "Dims", "ForwardModel", "HGLLiMError", "InverseModel", "ModelArchive", "NeighborGraph",
    "Normalizer", "PottsField", "SpatialOptions", "SpectralDataset", "SpectralImage",
    "TrainConfig", "TrainReport", "bic", "load_model", "log_likelihood", "nrmse", "paired_ttest",
    "predict", "predict_spatial", "save_model", "select_lw", "to_forward", "train",
]
