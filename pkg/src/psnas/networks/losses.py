"""Training losses for the two networks."""
from __future__ import annotations

import numpy as np

from ..autodiff import Tensor
from ..autodiff import functional as F

LAMBDA_AUX = 0.4


def light_loss(logits, targets) -> Tensor:
    """Sum of the three per-head cross-entropies, each averaged over images."""
    if len(logits) != 3 or len(targets) != 3:
        raise ValueError("light loss needs azimuth, elevation and intensity terms")
    total = None
    for z, t in zip(logits, targets):
        term = F.softmax_cross_entropy(z, np.asarray(t))
        total = term if total is None else F.add(total, term)
    return total


def normal_loss(pred: Tensor, truth, mask) -> Tensor:
    """Mean of ``1 - <pred, truth>`` over masked pixels; pred and truth are [B,3,H,W]."""
    truth = np.asarray(getattr(truth, "data", truth))
    mask = np.asarray(mask, bool)
    if mask.ndim == 2:
        mask = mask[None]
    if pred.shape != truth.shape or pred.shape[0] != mask.shape[0] or pred.shape[2:] != mask.shape[1:]:
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}, mask {mask.shape}")
    m = int(mask.sum())
    if m == 0:
        raise ValueError("normal loss over an empty mask")
    weight = (truth * mask[:, None]).astype(pred.dtype) / m
    return F.sub(1.0, F.sum(F.mul(pred, weight)))


def auxiliary_train_loss(pred: Tensor, aux: Tensor, truth, mask, lam: float = LAMBDA_AUX) -> Tensor:
    main = normal_loss(pred, truth, mask)
    if lam == 0:
        return main
    return F.add(main, F.mul(normal_loss(aux, truth, mask), lam))
