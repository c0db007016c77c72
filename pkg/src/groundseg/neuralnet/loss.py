from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from ..errors import ShapeMismatch

PT_FLOOR = 1e-12


def focal_loss(logits: torch.Tensor, labels: torch.Tensor, a: float = 0.25, b: float = 2.0) -> torch.Tensor:
    """Mean sigmoid focal loss ``-a_t (1 - p_t)^b log(p_t)`` over all elements.

    ``labels`` is 1 for ground (positive) and 0 otherwise; ``a_t`` is ``a`` on
    positives and ``1 - a`` on negatives.  ``log(p_t)`` comes from log-sigmoid
    and is floored at ``log(1e-12)``.
    """
    if logits.shape != labels.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    pos = labels.to(logits.dtype)
    signed = torch.where(pos > 0.5, logits, -logits)
    log_pt = F.logsigmoid(signed).clamp_min(math.log(PT_FLOOR))
    one_minus_pt = torch.sigmoid(-signed)
    a_t = pos * a + (1 - pos) * (1 - a)
    return (-a_t * one_minus_pt.pow(b) * log_pt).mean()
