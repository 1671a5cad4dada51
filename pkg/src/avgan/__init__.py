"""avgan: attention-guided varifocal GAN for unpaired stain translation."""

from .config import TrainConfig
from .color_space import HEDImage, h_channel, hed_to_rgb, rgb_to_hed
from .data import SyntheticStyle, TilingSpec, UnpairedSampler, tile_image
from .losses import LossWeights
from .metrics import MetricReport, ToyConvExtractor, css, fid, kid
from .region_selection import RegionSelector, RegionSet
from .training import ModelBundle, build_models, train, train_step, translate

__version__ = "0.1.0"

__all__ = [
    "TrainConfig",
    "HEDImage",
    "h_channel",
    "hed_to_rgb",
    "rgb_to_hed",
    "SyntheticStyle",
    "TilingSpec",
    "UnpairedSampler",
    "tile_image",
    "LossWeights",
    "MetricReport",
    "ToyConvExtractor",
    "css",
    "fid",
    "kid",
    "RegionSelector",
    "RegionSet",
    "ModelBundle",
    "build_models",
    "train",
    "train_step",
    "translate",
]
