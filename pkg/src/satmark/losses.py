"""Training objective: weighted image fidelity plus message recovery.

total = l_m + l_I with
  l_m = w_m * MSE(m, sigmoid(logits))
  l_I = w_mse * MSE(I, I') + w_perc * perceptual(I, I') + w_bal * BAL(I, I')

BAL is a brightness-aware term: mean |I - I'| / (I + 1), denominator taken
from the first (original) image so darker regions tolerate less absolute
change. The perceptual term is an LPIPS-style mean squared distance between
channel-normalized feature maps of a frozen seeded extractor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndiff
from .featnet import FeatureNet
from .ndiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    image_mse: float = 1.0
    image_perceptual: float = 0.1
    image_bal: float = 1.0
    message: float = 10.0

    def __post_init__(self):
        vals = (self.image_mse, self.image_perceptual, self.image_bal, self.message)
        if any(v < 0 for v in vals):
            raise ndiff.ContractError("loss weights must be non-negative")
        if all(v == 0 for v in vals):
            raise ndiff.ContractError("at least one loss weight must be positive")


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return (d * d).mean()


def bal(original: Tensor, marked: Tensor) -> Tensor:
    """mean(|I - I'| / (I + 1)); the denominator uses the original image.

    Raises on negative pixels in the original: the denominator is meant for
    [0,1] images and would flip sign or explode otherwise.
    """
    if np.any(original.data < 0):
        raise ndiff.ContractError("bal: original image must be non-negative")
    return (ndiff.abs_(original - marked) / (original + 1.0)).mean()


def perceptual_proxy(a: Tensor, b: Tensor, net: FeatureNet) -> Tensor:
    """Mean squared distance between channel-normalized feature maps,
    averaged over the extractor's stages. Symmetric by construction."""
    total = None
    for fa, fb in zip(net.stages_t(a), net.stages_t(b)):
        na = _unit_channels(fa)
        nb = _unit_channels(fb)
        term = mse(na, nb)
        total = term if total is None else total + term
    return total * (1.0 / len(net.widths))


def _unit_channels(f: Tensor) -> Tensor:
    sq = (f * f).sum(axis=0, keepdims=True)
    return f / ndiff.sqrt(sq + 1e-8)


def image_loss(original: Tensor, marked: Tensor, weights: LossWeights, net: FeatureNet) -> Tensor:
    return (
        weights.image_mse * mse(original, marked)
        + weights.image_perceptual * perceptual_proxy(original, marked, net)
        + weights.image_bal * bal(original, marked)
    )


def message_loss(message_bits: np.ndarray, logits: Tensor, weights: LossWeights) -> Tensor:
    m = np.asarray(message_bits, dtype=logits.data.dtype).reshape(-1)
    if logits.data.size != m.size:
        raise ndiff.DimensionError(
            f"message length {m.size} vs {logits.data.size} logits"
        )
    p = ndiff.sigmoid(logits.reshape(m.size))
    return weights.message * mse(Tensor(m), p)


def total_loss(
    original: Tensor,
    marked: Tensor,
    message_bits: np.ndarray,
    logits: Tensor,
    weights: LossWeights,
    net: FeatureNet,
) -> Tensor:
    """Unified objective l_m + l_I. Training evaluates the logits on the
    attacked image; the theory engine evaluates them on the clean one."""
    return message_loss(message_bits, logits, weights) + image_loss(
        original, marked, weights, net
    )
