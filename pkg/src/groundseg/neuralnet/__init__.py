"""Layer set, loss, optimizer and complexity accounting for the segmentation net."""

from .layers import (CBAM, DSConv, DoubleDSC, LinearBNReLU, cbam, conv2d, dsc,
                     linear_bn_relu, maxpool2, sigmoid, upsample_bilinear2)
from .loss import focal_loss
from .optim import Adam, OptimState, PlateauScheduler, adam_step

__all__ = [
    "CBAM", "DSConv", "DoubleDSC", "LinearBNReLU", "cbam", "conv2d", "dsc",
    "linear_bn_relu", "maxpool2", "sigmoid", "upsample_bilinear2", "focal_loss",
    "Adam", "OptimState", "PlateauScheduler", "adam_step",
]
