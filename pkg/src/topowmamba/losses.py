"""Dice + cross-entropy segmentation loss with deep-supervision weighting."""
from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Tensor
from .network import SegOutput

DICE_SMOOTH = 1e-5


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """N,H,W int labels -> N,H,W,C one-hot."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError(f"class id out of range [0, {num_classes})")
    return np.eye(num_classes, dtype=dtype)[labels]


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour label downsampling (top-left sample of each block)."""
    return np.ascontiguousarray(labels[..., ::factor, ::factor])


def dice_ce_loss(logits: Tensor, labels: np.ndarray, smooth: float = DICE_SMOOTH):
    """Soft Dice (per class over the whole batch, averaged over classes) plus
    pixel-mean cross-entropy. Returns (total, dice, ce) tensors."""
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    y = Tensor(one_hot(labels, c, logits.dtype).reshape(n * h * w, c), dtype=logits.dtype)
    flat = ops.reshape(ops.permute(logits, (0, 2, 3, 1)), (n * h * w, c))
    logp = ops.log_softmax(flat)
    probs = ops.exp(logp)

    inter = ops.sum(ops.mul(probs, y), axis=0)
    denom = ops.add(ops.sum(probs, axis=0), Tensor(y.data.sum(axis=0), dtype=logits.dtype))
    dice_c = ops.div(ops.add(ops.mul(inter, 2.0), smooth), ops.add(denom, smooth))
    dice = ops.neg(ops.add(ops.mean(dice_c), -1.0))

    ce = ops.neg(ops.mean(ops.sum(ops.mul(logp, y), axis=1)))
    return ops.add(dice, ce), dice, ce


def seg_loss(output: SegOutput, labels: np.ndarray, aux_decay: float = 0.5) -> Tensor:
    """Full-resolution Dice+CE plus aux terms weighted aux_decay**k at scale 1/2**k."""
    total, _, _ = dice_ce_loss(output.main, labels)
    full = output.main.shape[2]
    for aux in output.aux:
        factor = full // aux.shape[2]
        k = int(round(np.log2(factor)))
        if 2 ** k != factor or aux.shape[3] * factor != output.main.shape[3]:
            raise ValueError(f"aux output {aux.shape} is not a power-of-two scale of {output.main.shape}")
        term, _, _ = dice_ce_loss(aux, downsample_labels(labels, factor))
        total = ops.add(total, ops.mul(term, aux_decay ** k))
    return total
