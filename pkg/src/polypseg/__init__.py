"""Dilated-convolution encoder-decoder for binary polyp segmentation.

Subpackages/modules:
  tensor       rank-4 float32 autodiff core (conv/bn/pool/upsample/loss)
  kernels      compiled + numpy convolution backends
  model        encoder (dilated stage 5), decoder, configs, checkporting
  train        Adam, cosine LR schedule, fit loop, checkpoints
  postprocess  threshold, morphology, components, box merging
  metrics      Dice, center-in-box detection matching, P/R/F1
  data         preprocessing, augmentation, synthetic data, dataset IO
  cli          synth / train / infer / eval subcommands
"""

from .errors import (CheckpointError, DataError, NumericError, PolypsegError,
                     ShapeError)
from .tensor import (ConvSpec, Tape, Tensor, add, backward, batch_norm2d,
                     bilinear_upsample, concat_channels, conv2d,
                     effective_field_of_view, masked_sum, max_pool2d, relu,
                     sigmoid_bce_loss)

__version__ = "0.1.0"
