"""Dense NCHW tensor kernels with a hand-written gradient tape.

Hot loops (depthwise 3x3 conv, 2x2 max pooling) come from a compiled Cython
extension when available and from numpy otherwise; see :mod:`.kernels`.
"""
from .kernels import BACKEND
from .ops import (
    BnParams,
    ConvWeights,
    ShapeError,
    bn_forward,
    concat_channels,
    dwconv3_forward,
    inverse_reorder,
    maxpool2_forward,
    pwconv1_forward,
    relu6_forward,
    reorder_forward,
)
from .tape import GradTape, backward
from .optim import sgd_step
from .head import detection_head_decode
