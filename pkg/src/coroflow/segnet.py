"""3-D U-Net patch segmentation with multi-scale feature taps.

The encoder halves resolution `depth` times while doubling channels from
`base_channels`; the decoder mirrors it with nearest-neighbor upsampling and
skip concatenation.  Besides the 2-class voxel logits, the forward pass
returns one feature grid per decoder level (full, half, quarter resolution),
each linearly projected to `feature_channels` channels; point clouds sample
these grids trilinearly to build per-point descriptors.

Training loss is cross-entropy plus a soft Dice term computed globally over
the batch from the lumen-class probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, concat, conv3d, maxpool3d, no_grad, relu,
                       softmax, softmax_cross_entropy, tensor_sum,
                       upsample3d_nearest)
from .errors import ValidationError

INTENSITY_SHIFT = 50.0   # background level subtracted before the network
INTENSITY_SCALE = 400.0  # lumen level; normalized lumen sits near 0.875


@dataclass(frozen=True)
class SegConfig:
    """Architecture sizes for the patch segmentation network."""

    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    feature_channels: int = 8
    num_classes: int = 2
    patch_size: int = 32

    def __post_init__(self):
        if min(self.in_channels, self.base_channels, self.depth,
               self.feature_channels, self.num_classes, self.patch_size) < 1:
            raise ValidationError("segmentation config sizes must be positive")
        if self.patch_size % (2 ** self.depth) != 0:
            raise ValidationError(
                f"patch size {self.patch_size} not divisible by 2^depth={2 ** self.depth}")

    @classmethod
    def debug(cls):
        """A tiny variant for finite-difference checks of the whole net."""
        return cls(base_channels=2, depth=2, patch_size=8)

    def encoder_channels(self):
        return [self.base_channels * 2 ** level for level in range(self.depth)]

    def bottleneck_channels(self):
        return self.base_channels * 2 ** self.depth

    def feature_scales(self):
        return [2 ** level for level in range(self.depth)]


def normalize_intensity(intensity):
    """Map raw imaging values to network inputs, (I - shift) / scale."""
    arr = np.asarray(intensity, dtype=np.float32)
    return (arr - INTENSITY_SHIFT) / INTENSITY_SCALE


def _conv_init(rng, c_out, c_in, k, dtype):
    fan_in = c_in * k ** 3
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k, k))
    return Tensor(w.astype(dtype), requires_grad=True)


def _bias_init(c_out, dtype):
    return Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)


def init_seg_params(config, rng, dtype=np.float32):
    """He-initialized parameter dict keyed by layer name."""
    params = {}

    def block(name, c_in, c_out):
        params[f"{name}.conv1.w"] = _conv_init(rng, c_out, c_in, 3, dtype)
        params[f"{name}.conv1.b"] = _bias_init(c_out, dtype)
        params[f"{name}.conv2.w"] = _conv_init(rng, c_out, c_out, 3, dtype)
        params[f"{name}.conv2.b"] = _bias_init(c_out, dtype)

    enc = config.encoder_channels()
    c_prev = config.in_channels
    for level, c in enumerate(enc):
        block(f"enc{level}", c_prev, c)
        c_prev = c
    block("bottleneck", c_prev, config.bottleneck_channels())
    c_prev = config.bottleneck_channels()
    for level in reversed(range(config.depth)):
        block(f"dec{level}", c_prev + enc[level], enc[level])
        c_prev = enc[level]
        params[f"proj{level}.w"] = _conv_init(rng, config.feature_channels, enc[level], 1, dtype)
        params[f"proj{level}.b"] = _bias_init(config.feature_channels, dtype)
    params["head.w"] = _conv_init(rng, config.num_classes, enc[0], 1, dtype)
    params["head.b"] = _bias_init(config.num_classes, dtype)
    return params


def _block(params, name, x):
    x = relu(conv3d(x, params[f"{name}.conv1.w"], params[f"{name}.conv1.b"], pad=1))
    return relu(conv3d(x, params[f"{name}.conv2.w"], params[f"{name}.conv2.b"], pad=1))


def seg_forward(params, config, x):
    """Voxel logits and multi-scale feature grids for a batch of patches.

    `x` is a Tensor [N, C, D, H, W] of normalized intensities.  Returns
    (logits [N, num_classes, D, H, W], grids) with grids a list of
    (features, scale) pairs ordered finest first: scale 1 at full patch
    resolution, then 2, 4, ... matching the decoder levels.
    """
    if x.ndim != 5 or x.shape[1] != config.in_channels:
        raise ValidationError(f"expected [N,{config.in_channels},D,H,W] input, got {x.shape}")
    skips = []
    h = x
    for level in range(config.depth):
        h = _block(params, f"enc{level}", h)
        skips.append(h)
        h = maxpool3d(h)
    h = _block(params, "bottleneck", h)
    decoded = {}
    for level in reversed(range(config.depth)):
        h = upsample3d_nearest(h)
        h = concat([h, skips[level]], axis=1)
        h = _block(params, f"dec{level}", h)
        decoded[level] = h
    logits = conv3d(decoded[0], params["head.w"], params["head.b"])
    grids = []
    for level in range(config.depth):
        proj = conv3d(decoded[level], params[f"proj{level}.w"], params[f"proj{level}.b"])
        grids.append((proj, 2 ** level))
    return logits, grids


def seg_loss_terms(logits, labels, eps=1e-6):
    """Cross-entropy and soft Dice Tensors, global over batch.

    `labels` is an integer array [N, D, H, W] of {0, 1}.  Returns (ce, dice)
    so callers can weight the two terms independently.
    """
    labels = np.asarray(labels)
    ce = softmax_cross_entropy(logits, labels)
    probs = softmax(logits, axis=1)
    lumen = probs[:, 1]
    y = Tensor(labels.astype(logits.dtype))
    inter = tensor_sum(lumen * y)
    denom = tensor_sum(lumen) + tensor_sum(y)
    dice = (inter * 2.0 + eps) / (denom + eps)
    return ce, dice


def seg_loss(logits, labels, dice_weight=1.0, eps=1e-6):
    """Cross-entropy plus soft Dice complement on the lumen class.

    Returns the total loss Tensor and a dict with the float parts for
    logging.
    """
    ce, dice = seg_loss_terms(logits, labels, eps=eps)
    total = ce + (1.0 - dice) * dice_weight
    return total, {"ce": float(ce.data), "dice": float(dice.data)}


def dice_coefficient(pred_mask, true_mask, eps=1e-6):
    """Hard Dice overlap between two binary masks."""
    p = np.asarray(pred_mask) > 0
    t = np.asarray(true_mask) > 0
    inter = float(np.logical_and(p, t).sum())
    return (2.0 * inter + eps) / (float(p.sum()) + float(t.sum()) + eps)


def predict_patch(params, config, intensity):
    """Inference on one raw-intensity patch [D, H, W].

    Returns (lumen probability [D,H,W], mask uint8, grids) where grids are
    plain-array (features [C, d, h, w], scale) pairs for feature sampling.
    """
    x = normalize_intensity(intensity)[None, None]
    with no_grad():
        logits, grids = seg_forward(params, config, Tensor(x))
        probs = softmax(logits, axis=1)
    lumen = probs.data[0, 1]
    mask = (lumen > 0.5).astype(np.uint8)
    plain = [(g.data[0], scale) for g, scale in grids]
    return lumen, mask, plain
