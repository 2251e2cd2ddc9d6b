"""Multi-label BCE over the answer space and the instance-level contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LossConfig
from .tensor import Tensor, bce_with_logits, masked_logsumexp


def bce_loss(scores: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Sigmoid BCE averaged over every valid (instance, step, slot) element."""
    return bce_with_logits(scores, targets, mask)


@dataclass
class ContrastiveReport:
    used: int
    skipped: int
    clamped: int
    per_instance: np.ndarray  # unclamped loss per used instance


def similarity_logits(pred: Tensor, candidates: np.ndarray, cfg: LossConfig) -> Tensor:
    """(B, C) logits S_j . pred / tau, optionally cosine."""
    B, C, k = candidates.shape
    S = candidates
    if cfg.similarity == "cosine":
        norms = np.linalg.norm(S, axis=-1, keepdims=True)
        S = S / np.where(norms > 0, norms, 1.0)
        pn = ((pred * pred).sum(axis=-1, keepdims=True) + 1e-12) ** 0.5
        pred = pred / pn
    sims = Tensor(S) @ pred.reshape(B, k, 1)
    return sims.reshape(B, C) * (1.0 / cfg.tau)


def contrastive_loss(pred: Tensor, candidates: np.ndarray, y_gt: np.ndarray,
                     valid: np.ndarray, cfg: LossConfig, clamp: bool = True
                     ) -> tuple[Tensor, ContrastiveReport]:
    """Mean over usable instances of -log(sum_pos exp / sum_neg exp).

    ``pred`` ``(B, k)``; ``candidates`` ``(B, C, k)`` word vectors of every OCR
    slot and vocab word; ``y_gt`` / ``valid`` ``(B, C)``. With
    ``denominator_all`` the denominator runs over all valid slots. Instances
    lacking a positive or a negative are skipped. With ``clamp`` each
    instance's loss is floored at ``cfg.ls_floor``.
    """
    valid = np.asarray(valid, bool)
    pos = valid & (np.asarray(y_gt) > 0)
    neg = valid & ~pos
    usable = pos.any(axis=1) & neg.any(axis=1)
    B = pos.shape[0]
    idx = np.flatnonzero(usable)
    if idx.size == 0:
        return Tensor(0.0), ContrastiveReport(0, B, 0, np.zeros(0))
    logits = similarity_logits(pred, candidates, cfg)[idx]
    lse_pos = masked_logsumexp(logits, pos[idx])
    lse_neg = masked_logsumexp(logits, neg[idx])
    if cfg.contrastive_variant == "eq8_verbatim":
        per = lse_neg - lse_pos
    else:
        # log(P + N) - log(P) as log1p(N / P): no cancellation when N << P
        per = (lse_neg - lse_pos).softplus()
    raw = per.data.copy()
    clamped = 0
    if clamp:
        clamped = int((raw < cfg.ls_floor).sum())
        per = per.clamp_min(cfg.ls_floor)
    report = ContrastiveReport(used=int(idx.size), skipped=int(B - idx.size), clamped=clamped,
                               per_instance=raw)
    return per.mean(), report


def total_loss(l_bce, l_s, cfg: LossConfig):
    return l_bce + cfg.alpha_semantic * l_s
