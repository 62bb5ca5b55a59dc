"""Parameter-free IRT prediction and the loss terms of the joint objective.

Nothing in this module owns a trainable tensor: the prediction is
``sigmoid(alpha + beta_bar)`` where ``alpha`` is read from the question
acquisition state at the next question and ``beta_bar`` is the mean of the
concept acquisition state over the next question's KCs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import diffcore as dc

EPS = 1e-7


@dataclass
class PredictionTrace:
    """Per target step decomposition; arrays are aligned and unmasked entries only."""

    alpha: np.ndarray
    beta_bar: np.ndarray
    r_hat: np.ndarray
    r: np.ndarray
    question: np.ndarray
    student: list
    step: np.ndarray

    def __len__(self):
        return len(self.r)


def extract_alpha(gamma_q: torch.Tensor, next_question_id: int) -> torch.Tensor:
    if not 0 <= next_question_id < gamma_q.shape[-1]:
        raise IndexError(f"question id {next_question_id} out of range [0, {gamma_q.shape[-1]})")
    return gamma_q[..., next_question_id]


def extract_beta_bar(gamma_c: torch.Tensor, next_kc_ids) -> torch.Tensor:
    kcs = list(next_kc_ids)
    if not kcs:
        raise ValueError("next question has no KCs")
    if any(not 0 <= k < gamma_c.shape[-1] for k in kcs):
        raise IndexError(f"kc ids {kcs} out of range [0, {gamma_c.shape[-1]})")
    return gamma_c[..., kcs].sum(-1) / len(kcs)


def irt_predict(alpha, beta_bar):
    return dc.sigmoid(alpha + beta_bar)


def _bce(p, r, mask=None, reduction="sum"):
    p = p.clamp(EPS, 1.0 - EPS)
    r = r.to(p.dtype)
    ll = -(r * torch.log(p) + (1.0 - r) * torch.log(1.0 - p))
    if mask is not None:
        ll = ll * mask.to(p.dtype)
        count = mask.to(p.dtype).sum()
    else:
        count = torch.tensor(float(ll.numel()), dtype=p.dtype)
    total = ll.sum()
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / count.clamp_min(1.0)
    raise ValueError(f"unknown reduction {reduction!r}")


def kt_loss(r_hat, r, mask=None, reduction="sum"):
    """Binary cross-entropy of predicted probabilities against responses."""
    return _bce(r_hat, r, mask, reduction)


def aux_loss(scores, r, mask=None, reduction="sum"):
    """BCE of ``sigmoid(scores)``: the auxiliary term on raw alpha or beta_bar."""
    return _bce(dc.sigmoid(scores), r, mask, reduction)


def total_loss(l_kt, l_alpha, l_beta, l_cl, lambda1: float, lambda2: float):
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    return l_kt + lambda1 * (l_alpha + l_beta) + lambda2 * l_cl
