"""Additive multi-bit image watermarking: train, embed, detect, decode."""

from addmark.tensor import ImageTensor, Message, SeededRng, flatten, unflatten, psnr
from addmark.lowdim import LowDimModel, ModelSample
from addmark.losses import MarginLoss, PopulationCurve, solve_r_star
from addmark.trainer import TrainConfig, WatermarkSet, train
from addmark.codec import Dictionary, DetectionReport, embed, inner_products

__version__ = "0.1.0"
