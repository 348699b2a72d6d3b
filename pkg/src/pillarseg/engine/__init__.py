"""Minimal reverse-mode autodiff engine used by the segmentation network."""

from .checkpoint import decode_checkpoint, encode_checkpoint
from .gradcheck import analytic_grad, grad_check, is_smooth_at, numeric_grad
from .ops import (
    BatchNormState,
    add,
    batchnorm,
    concat_channels,
    conv2d,
    crop_spatial,
    linear,
    log_softmax_channels,
    max_over_axis,
    maxpool2,
    mean,
    mul,
    pad_spatial,
    place,
    record_kinks,
    relu,
    reshape,
    softmax_channels,
    square,
    stack,
    sub,
    sum,
    take_rows,
    upsample2,
    weighted_cross_entropy,
)
from .optim import AdamState, adam_step
from .tensor import Tensor, as_tensor, backward, no_grad, tape
