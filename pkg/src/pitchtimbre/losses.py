"""Training objectives and their per-variant aggregation."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import AMT_ONLY, MSI, MSI_DIS, MSS_ONLY, MULTI_TASK

MARGIN = 0.125
EPS = 1e-8


def query_loss(anchor, positive, negatives=None, margin: float = MARGIN, n_sources: int | None = None):
    """Contrastive loss for one anchor.

    ``(1/C) * (|q - q'| + sum_j max(m - |q - q_j|, 0))`` where ``C`` defaults to
    one plus the number of negatives (the sources present).
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    pos = torch.linalg.vector_norm(anchor - positive)
    if negatives is None or len(negatives) == 0:
        hinge = pos.new_zeros(())
        n_neg = 0
    else:
        negatives = torch.as_tensor(negatives) if not torch.is_tensor(negatives) else negatives
        dist = torch.linalg.vector_norm(anchor[None] - negatives, dim=-1)
        hinge = torch.clamp(margin - dist, min=0).sum()
        n_neg = negatives.shape[0]
    c = n_sources if n_sources is not None else 1 + n_neg
    return (pos + hinge) / c


def batch_query_loss(anchors, positives, labels, pool=None, pool_labels=None, margin: float = MARGIN):
    """Mean :func:`query_loss` over a batch.

    Negatives for anchor ``b`` are every embedding in ``pool`` (default: the
    anchors) whose instrument label differs from ``labels[b]``.
    """
    if pool is None:
        pool, pool_labels = anchors, labels
    total = anchors.new_zeros(())
    for b in range(anchors.shape[0]):
        mask = [lab != labels[b] for lab in pool_labels]
        neg = pool[torch.tensor(mask, dtype=torch.bool)] if any(mask) else None
        total = total + query_loss(anchors[b], positives[b], neg, margin)
    return total / anchors.shape[0]


def transcription_loss(y_true, y_pred, eps: float = EPS):
    """Frame-wise categorical cross-entropy, averaged over frames."""
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch {tuple(y_true.shape)} vs {tuple(y_pred.shape)}")
    return -(y_true * torch.log(torch.clamp(y_pred, min=eps))).sum(dim=-1).mean()


def separation_loss(s_true, s_pred):
    """Mean absolute error over all spectrogram entries."""
    if s_true.shape != s_pred.shape:
        raise ValueError(f"shape mismatch {tuple(s_true.shape)} vs {tuple(s_pred.shape)}")
    return (s_true - s_pred).abs().mean()


def pti_loss(s_true, model, mix_shifted, y, q):
    """L1 between the target and its rebuild from shifted-mixture timbre and original pitch."""
    if mix_shifted.shape[-2] != y.shape[-2]:
        raise ValueError("shifted mixture and pitch roll disagree on frame count")
    return separation_loss(s_true, model.reconstruct(mix_shifted, q, y))


@dataclass
class LossReport:
    l_query: float | None = None
    l_transcription: float | None = None
    l_separation: float | None = None
    l_pti: float | None = None
    total: float | None = None


REQUIRED = {
    MSI: ("l_query", "l_transcription", "l_separation"),
    MULTI_TASK: ("l_query", "l_transcription", "l_separation"),
    MSI_DIS: ("l_query", "l_transcription", "l_pti"),
    MSS_ONLY: ("l_query", "l_separation"),
    AMT_ONLY: ("l_query", "l_transcription"),
}


def aggregate(variant: str, parts):
    """Unit-weight sum of the terms the variant trains on.

    ``parts`` may be a :class:`LossReport` or a mapping; values may be tensors.
    """
    if variant not in REQUIRED:
        raise ValueError(f"unknown variant {variant!r}")
    get = parts.get if isinstance(parts, dict) else (lambda k: getattr(parts, k))
    total = 0.0
    for name in REQUIRED[variant]:
        value = get(name)
        if value is None:
            raise ValueError(f"{variant} needs {name}")
        total = total + value
    return total
