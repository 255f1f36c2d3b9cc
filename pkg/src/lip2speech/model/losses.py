"""Variance and reconstruction losses.

Per-utterance losses are summed over frames (``reduction="sum"``) or averaged
(``"mean"``); a batch is always averaged over utterances.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from ..errors import InvalidInputError
from .core import VariancePrediction


def _reduce(per_frame: torch.Tensor, reduction: str) -> torch.Tensor:
    # per_frame: (B, T)
    per_utt = per_frame.sum(1) if reduction == "sum" else per_frame.mean(1)
    return per_utt.mean()


def linguistic_loss(logits, target, reduction: str = "sum") -> torch.Tensor:
    ce = F.cross_entropy(logits.transpose(1, 2), target.long(), reduction="none")
    return _reduce(ce, reduction)


def l1_sequence_loss(pred, target, reduction: str = "sum") -> torch.Tensor:
    return _reduce((pred - target).abs(), reduction)


def variance_losses(pred: VariancePrediction, linguistic, pitch, energy,
                    reduction: str = "sum") -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if not (pred.pitch.shape == pitch.shape == energy.shape == linguistic.shape):
        raise InvalidInputError("prediction and target lengths differ")
    return (linguistic_loss(pred.linguistic_logits, linguistic, reduction),
            l1_sequence_loss(pred.pitch, pitch, reduction),
            l1_sequence_loss(pred.energy, energy, reduction))


def mel_loss(y_hat: torch.Tensor, y: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Sum over frames of the L1 norm of each frame difference."""
    if y_hat.shape != y.shape:
        raise InvalidInputError(f"mel shapes differ: {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    if y.dim() == 2:
        y_hat, y = y_hat[None], y[None]
    return _reduce((y_hat - y).abs().sum(-1), reduction)
