"""Task operators on images and their losses.

Three decision rules are provided: a 10-class image classifier, a binary
segmenter producing a per-pixel foreground probability map, and an anomaly
detector regressing the difference of an image pair.  Losses are the
cross entropy (classification, segmentation) and squared error (anomaly),
always averaged, with a 1e-12 floor inside every log.
"""

from __future__ import annotations

import numpy as np

from .nn import add_conv, add_dense, apply_conv, apply_dense
from .tensor import (ParamSet, Tensor, ShapeError, add, clip_min, concat,
                     conv2d, log, max_pool2d, mul, neg, relu, reshape,
                     sigmoid, softmax, sub, tmean, tsum, upsample2x)

__all__ = [
    "LOG_FLOOR", "init_classifier_params", "classify", "classification_loss",
    "init_unet_params", "segment", "segmentation_loss",
    "init_anomaly_params", "anomaly", "anomaly_loss",
]

LOG_FLOOR = 1e-12

CLASSIFIER_INPUT = (28, 28)
SEGMENTER_INPUT = (128, 128)
NUM_CLASSES = 10


# ---------------------------------------------------------------------------
# classification


def init_classifier_params(seed: int, dtype=np.float32) -> ParamSet:
    """Three 3x3 conv layers (32, 64, 128 channels), each followed by 2x2
    max pooling, then a dense layer to 10 logits."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = ParamSet()
    add_conv(params, rng, "conv0", 1, 32, dtype=dtype)
    add_conv(params, rng, "conv1", 32, 64, dtype=dtype)
    add_conv(params, rng, "conv2", 64, 128, dtype=dtype)
    add_dense(params, rng, "dense", 128 * 3 * 3, NUM_CLASSES, dtype=dtype)
    return params


def classify(x: Tensor, params: ParamSet) -> Tensor:
    """Class probabilities for 28x28 images; accepts (H,W) or (N,H,W).

    Output rows are softmax-normalized, shape (10,) or (N, 10).
    """
    single = x.ndim == 2
    if x.shape[-2:] != CLASSIFIER_INPUT:
        raise ShapeError(
            f"classifier expects {CLASSIFIER_INPUT} images, got "
            f"{tuple(x.shape)}")
    n = 1 if single else x.shape[0]
    h = reshape(x, (n, 1, 28, 28))
    h = max_pool2d(relu(apply_conv(params, "conv0", h)))   # (n, 32, 14, 14)
    h = max_pool2d(relu(apply_conv(params, "conv1", h)))   # (n, 64, 7, 7)
    h = max_pool2d(relu(apply_conv(params, "conv2", h)))   # (n, 128, 3, 3)
    logits = apply_dense(params, "dense", reshape(h, (n, 128 * 3 * 3)))
    probs = softmax(logits, axis=-1)
    return reshape(probs, (NUM_CLASSES,)) if single else probs


def classification_loss(pred: Tensor, labels) -> Tensor:
    """Mean negative log probability of the true labels.

    ``pred`` is (10,) or (N, 10); ``labels`` an int or int array.
    """
    labels = np.atleast_1d(np.asarray(labels))
    p = reshape(pred, (1, NUM_CLASSES)) if pred.ndim == 1 else pred
    if p.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"{p.shape[0]} predictions vs {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise ValueError(f"labels outside 0..{NUM_CLASSES - 1}")
    onehot = np.zeros(p.shape, p.dtype)
    onehot[np.arange(labels.shape[0]), labels] = 1
    picked = tsum(mul(Tensor(onehot), log(clip_min(p, LOG_FLOOR))))
    return mul(neg(picked), 1.0 / labels.shape[0])


# ---------------------------------------------------------------------------
# binary segmentation


def init_unet_params(seed: int, dtype=np.float32,
                     widths=(16, 32, 64)) -> ParamSet:
    """Three-scale encoder/decoder with skip connections, sigmoid head."""
    rng = np.random.Generator(np.random.PCG64(seed))
    w1, w2, w3 = widths
    params = ParamSet()
    add_conv(params, rng, "enc0a", 1, w1, dtype=dtype)
    add_conv(params, rng, "enc0b", w1, w1, dtype=dtype)
    add_conv(params, rng, "enc1a", w1, w2, dtype=dtype)
    add_conv(params, rng, "enc1b", w2, w2, dtype=dtype)
    add_conv(params, rng, "mid_a", w2, w3, dtype=dtype)
    add_conv(params, rng, "mid_b", w3, w3, dtype=dtype)
    add_conv(params, rng, "dec1a", w3 + w2, w2, dtype=dtype)
    add_conv(params, rng, "dec1b", w2, w2, dtype=dtype)
    add_conv(params, rng, "dec0a", w2 + w1, w1, dtype=dtype)
    add_conv(params, rng, "dec0b", w1, w1, dtype=dtype)
    add_conv(params, rng, "head", w1, 1, ksize=1, dtype=dtype)
    return params


def segment(x: Tensor, params: ParamSet) -> Tensor:
    """Per-pixel foreground probabilities for 128x128 images.

    Accepts (H,W) or (N,H,W); returns the same spatial shape with values
    in [0, 1].
    """
    single = x.ndim == 2
    if x.shape[-2:] != SEGMENTER_INPUT:
        raise ShapeError(
            f"segmenter expects {SEGMENTER_INPUT} images, got "
            f"{tuple(x.shape)}")
    n = 1 if single else x.shape[0]
    hw = SEGMENTER_INPUT
    h = reshape(x, (n, 1) + hw)
    e0 = relu(apply_conv(params, "enc0b", relu(apply_conv(params, "enc0a", h))))
    e1 = relu(apply_conv(params, "enc1b",
                         relu(apply_conv(params, "enc1a", max_pool2d(e0)))))
    mid = relu(apply_conv(params, "mid_b",
                          relu(apply_conv(params, "mid_a", max_pool2d(e1)))))
    d1 = concat([upsample2x(mid), e1], axis=1)
    d1 = relu(apply_conv(params, "dec1b", relu(apply_conv(params, "dec1a", d1))))
    d0 = concat([upsample2x(d1), e0], axis=1)
    d0 = relu(apply_conv(params, "dec0b", relu(apply_conv(params, "dec0a", d0))))
    prob = sigmoid(conv2d(d0, params["head.w"], params["head.b"], padding=0))
    out = reshape(prob, (n,) + hw)
    return reshape(out, hw) if single else out


def segmentation_loss(pred: Tensor, mask) -> Tensor:
    """Mean per-pixel binary cross entropy against a {0,1} mask."""
    mask_arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if pred.shape != mask_arr.shape:
        raise ShapeError(
            f"prediction {tuple(pred.shape)} vs mask {mask_arr.shape}")
    if not np.all((mask_arr == 0) | (mask_arr == 1)):
        raise ValueError("segmentation mask must be binary")
    m = Tensor(np.asarray(mask_arr, pred.dtype))
    one_minus_m = Tensor(np.asarray(1.0 - mask_arr, pred.dtype))
    fg = mul(m, log(clip_min(pred, LOG_FLOOR)))
    bg = mul(one_minus_m, log(clip_min(sub(1.0, pred), LOG_FLOOR)))
    return neg(tmean(add(fg, bg)))


# ---------------------------------------------------------------------------
# anomaly detection


def init_anomaly_params(seed: int, dtype=np.float32,
                        widths=(16, 16)) -> ParamSet:
    """Small CNN on the channel-concatenated image pair; zero-init head."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = ParamSet()
    chain = (2, *widths, 1)
    for i in range(len(chain) - 1):
        add_conv(params, rng, f"conv{i}", chain[i], chain[i + 1], dtype=dtype,
                 zero=i == len(chain) - 2)
    return params


def anomaly(x1: Tensor, x2: Tensor, params: ParamSet,
            num_layers: int = 3) -> Tensor:
    """Predicted difference image of a pair; accepts (H,W) or (N,H,W)."""
    if x1.shape != x2.shape:
        raise ShapeError(
            f"pair shapes differ: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    single = x1.ndim == 2
    n = 1 if single else x1.shape[0]
    hw = x1.shape[-2:]
    a = reshape(x1, (n, 1) + hw)
    b = reshape(x2, (n, 1) + hw)
    h = concat([a, b], axis=1)
    for i in range(num_layers):
        h = apply_conv(params, f"conv{i}", h)
        if i < num_layers - 1:
            h = relu(h)
    out = reshape(h, (n,) + hw)
    return reshape(out, hw) if single else out


def anomaly_loss(pred: Tensor, x1, x2) -> Tensor:
    """Mean squared error against the true difference x1 - x2."""
    a1 = x1.data if isinstance(x1, Tensor) else np.asarray(x1)
    a2 = x2.data if isinstance(x2, Tensor) else np.asarray(x2)
    target = Tensor(np.asarray(a1 - a2, pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(
            f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    diff = sub(pred, target)
    return tmean(mul(diff, diff))
