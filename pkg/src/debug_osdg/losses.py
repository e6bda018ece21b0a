"""Training objectives: CE, feature distillation, OVA / edge-OVA, and their combination."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .core import DataError, LossBreakdown, NumericError, ShapeError

LOG_EPS = 1e-8


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    k = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in 0..{k - 1}, got range {labels.min().item()}..{labels.max().item()}")
    return F.cross_entropy(logits, labels)


def kd_loss(student: torch.Tensor, teacher: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """KL(teacher || student) of the channel softmax at every location, averaged over H'W' and batch.

    The teacher is detached; only the student receives gradient.
    """
    if student.shape != teacher.shape:
        raise ShapeError(f"student {tuple(student.shape)} and teacher {tuple(teacher.shape)} differ")
    log_t = F.log_softmax(teacher.detach() / tau, dim=1)
    log_s = F.log_softmax(student / tau, dim=1)
    kl = (log_t.exp() * (log_t - log_s)).sum(dim=1)  # B x H' x W'
    return kl.mean(dim=(1, 2)).mean()


def _hard_negative_log(p_neg: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """min over k != y of log p^k(y=0|x), per sample."""
    log_neg = torch.log(p_neg + LOG_EPS)
    own = F.one_hot(labels, p_neg.shape[1]).bool()
    return log_neg.masked_fill(own, math.inf).min(dim=1).values


def _positive_log(p_pos: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return torch.log(p_pos.gather(1, labels[:, None]).squeeze(1) + LOG_EPS)


def ova_loss(p_pos: torch.Tensor, p_neg: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if p_pos.shape[1] < 2:
        raise ShapeError("one-vs-all loss needs at least 2 classes")
    per_sample = -_positive_log(p_pos, labels) - _hard_negative_log(p_neg, labels)
    return per_sample.mean()


def eova_loss(
    edge_pos: torch.Tensor, edge_neg: torch.Tensor, img_neg: torch.Tensor, labels: torch.Tensor
) -> torch.Tensor:
    """Edge maps are the positives; edges and originals each supply a hard negative (own argmin)."""
    if edge_pos.shape[1] < 2:
        raise ShapeError("one-vs-all loss needs at least 2 classes")
    per_sample = (
        -_positive_log(edge_pos, labels)
        - 0.5 * _hard_negative_log(edge_neg, labels)
        - 0.5 * _hard_negative_log(img_neg, labels)
    )
    return per_sample.mean()


def total_loss(
    ce: torch.Tensor | float,
    eova: torch.Tensor | float,
    kd: torch.Tensor | float,
    lambda1: float,
    lambda2: float,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum, plus a float breakdown for logging. Raises NumericError on non-finite parts."""
    parts = {"ce": ce, "eova": eova, "kd": kd}
    values = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise NumericError(f"non-finite loss component(s): {', '.join(f'{k}={values[k]}' for k in bad)}")
    total = ce + lambda1 * eova + lambda2 * kd
    if not torch.is_tensor(total):
        total = torch.tensor(float(total))
    bd = LossBreakdown(
        ce=values["ce"],
        kd=values["kd"],
        eova=values["eova"],
        total=values["ce"] + lambda1 * values["eova"] + lambda2 * values["kd"],
    )
    return total, bd
