"""Cosine similarity and the Multi-Similarity loss with fixed constants.

The loss per anchor ``i`` is::

    1/2  * log(1 + sum_{k in P_i} exp(-2  * (S_ik - 1/2)))
  + 1/40 * log(1 + sum_{k in N_i} exp( 40 * (S_ik - 1/2)))

averaged over the ``m`` anchors.  ``P_i`` holds the other samples sharing
``i``'s label (self-pairs excluded) and ``N_i`` the samples with a different
label.  Sums run over the full sets unless ``mining=True``.
"""

from __future__ import annotations

import torch

POS_SCALE = 2.0
NEG_SCALE = 40.0
MARGIN = 0.5
MINING_EPS = 0.1


def cosine_similarity_matrix(vectors: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity of the rows of an ``m x d`` tensor."""
    if vectors.ndim != 2:
        raise ValueError(f"expected an m x d batch, got shape {tuple(vectors.shape)}")
    norms = vectors.norm(dim=1)
    zero = (norms == 0).nonzero().flatten()
    if len(zero):
        raise ValueError(f"zero-norm vector at index {int(zero[0])}")
    z = vectors / norms[:, None]
    return (z @ z.T).clamp(-1.0, 1.0)


def _masked_log1p_sum_exp(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    # log(1 + sum_{mask} exp(logits)) per row, shifted through logsumexp
    neg_inf = torch.finfo(logits.dtype).min
    masked = torch.where(mask, logits, torch.full_like(logits, neg_inf))
    zeros = torch.zeros(logits.shape[0], 1, dtype=logits.dtype, device=logits.device)
    return torch.logsumexp(torch.cat([zeros, masked], dim=1), dim=1)


def ms_masks(labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    return same & ~eye, ~same


def _mine(S: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor):
    big = torch.finfo(S.dtype).max
    min_pos = torch.where(pos, S, torch.full_like(S, big)).min(dim=1, keepdim=True).values
    max_neg = torch.where(neg, S, torch.full_like(S, -big)).max(dim=1, keepdim=True).values
    keep_pos = pos & (S - MINING_EPS < max_neg)
    keep_neg = neg & (S + MINING_EPS > min_pos)
    return keep_pos, keep_neg


def multi_similarity_loss(
    S: torch.Tensor, labels: torch.Tensor, mining: bool = False
) -> torch.Tensor:
    """Multi-Similarity loss of a similarity matrix ``S`` under ``labels``.

    Anchors with no positives (singleton classes) contribute only the negative
    term and vice versa.  ``mining`` enables the pair selection of the
    original method; it is off by default.
    """
    labels = torch.as_tensor(labels, device=S.device)
    m = S.shape[0]
    if S.ndim != 2 or S.shape[1] != m:
        raise ValueError(f"similarity matrix must be square, got {tuple(S.shape)}")
    if m < 2:
        raise ValueError(f"need at least 2 samples, got m={m}")
    if labels.shape != (m,):
        raise ValueError(f"label vector of length {labels.numel()} does not match m={m}")
    pos, neg = ms_masks(labels)
    if mining:
        pos, neg = _mine(S, pos, neg)
    pos_term = _masked_log1p_sum_exp(-POS_SCALE * (S - MARGIN), pos) / POS_SCALE
    neg_term = _masked_log1p_sum_exp(NEG_SCALE * (S - MARGIN), neg) / NEG_SCALE
    return (pos_term + neg_term).mean()


def embedding_ms_loss(vectors: torch.Tensor, labels, mining: bool = False) -> torch.Tensor:
    """MS loss on the cosine similarities of raw embeddings."""
    return multi_similarity_loss(cosine_similarity_matrix(vectors), labels, mining=mining)
