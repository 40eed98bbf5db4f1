"""Unsupervised feature extractors for ultrasound-tongue-style images.

A small numpy library with five extractors behind one contract
(low-frequency DCT selection plus dense and convolutional autoencoders,
each with a denoising variant), the from-scratch training machinery they
need, the evaluation metrics (8-bit-scale MSE and CW-SSIM), a synthetic
corpus generator, and a benchmark CLI.
"""

from .data import NoiseConfig, SynthConfig, corrupt, generate_synthetic, load_pgm, save_pgm
from .extractors import (ExtractorModel, FeatureSize, TrainConfig,
                         build_conv_autoencoder, build_dct_extractor,
                         build_dense_autoencoder, build_extractor, load_model,
                         save_model, train)
from .signal import CwSsimConfig, cw_ssim, cwt, dct2, idct2, mse
from .tensor import Rng, Tensor

__all__ = [
    "CwSsimConfig", "ExtractorModel", "FeatureSize", "NoiseConfig", "Rng",
    "SynthConfig", "Tensor", "TrainConfig", "build_conv_autoencoder",
    "build_dct_extractor", "build_dense_autoencoder", "build_extractor",
    "corrupt", "cw_ssim", "cwt", "dct2", "generate_synthetic", "idct2",
    "load_model", "load_pgm", "mse", "save_model", "save_pgm", "train",
]

__version__ = "0.1.0"
