"""Variable-rate learned image codec with LiDAR depth-map guidance.

The public surface:

* :mod:`ldic.config` -- model/training dataclasses and the size presets.
* :mod:`ldic.model` -- the conditional autoencoder and checkpoint I/O.
* :mod:`ldic.codec` -- :class:`ImageCodec`, image <-> byte-stream coding.
* :mod:`ldic.data` -- RGB-D containers, PNG I/O, the synthetic corpus.
* :mod:`ldic.training` -- single-stage rate-distortion trainer.
* :mod:`ldic.evaluation` -- PSNR/SSIM, Bjontegaard deltas, rate sweeps.
* :mod:`ldic.experiment` -- the end-to-end depth-guidance experiment.
"""

from ldic.codec import CodecError, DecodeResult, EncodeResult, ImageCodec
from ldic.config import (
    ConfigError,
    ModelConfig,
    TrainConfig,
    paper_model,
    tiny_model,
    toy_model,
)
from ldic.data import AlignedDepth, DataError, DepthMap, RgbdPair, RgbImage
from ldic.model import CheckpointError, CodecModel, load_checkpoint
from ldic.training import Trainer, train_model

__version__ = "0.1.0"

__all__ = [
    "AlignedDepth",
    "CheckpointError",
    "CodecError",
    "CodecModel",
    "ConfigError",
    "DataError",
    "DecodeResult",
    "DepthMap",
    "EncodeResult",
    "ImageCodec",
    "ModelConfig",
    "RgbImage",
    "RgbdPair",
    "TrainConfig",
    "Trainer",
    "load_checkpoint",
    "paper_model",
    "tiny_model",
    "toy_model",
    "train_model",
    "__version__",
]
