"""The three training losses and their weighted combination.

- distillation: 1 - cos(summary, mean of textual entity channels)
- orthogonality: squared Frobenius distance of each channel Gram matrix
  from identity, summed over modalities
- batch classification: softmax cross-entropy over in-batch similarities
  between composed queries and their targets, with temperature tau
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import BatchEmpty


@dataclass(frozen=True)
class LossWeights:
    kappa: float = 0.6
    mu: float = 0.2
    tau: float = 0.07

    def __post_init__(self):
        if self.kappa < 0 or self.mu < 0:
            raise ValueError("kappa and mu must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted component values plus the weighted total."""

    bbc: float
    summ: float
    ortho: float
    total: float


def loss_summ(summary_vec: Node, text_channels: Node) -> Node:
    """Cosine distance between the summary and the pooled entity channels."""
    pooled = ad.mean_rows(text_channels)
    one = ad.constant(np.ones((1, 1)))
    return ad.sub(one, ad.cosine_similarity(summary_vec, pooled))


def gram_identity_penalty(channels: Node) -> Node:
    """|| channels channels^T - I ||_F^2 over the N channel rows."""
    n = channels.shape[0]
    gram = ad.matmul(channels, ad.transpose(channels))
    return ad.frobenius_sq(ad.sub(gram, ad.constant(np.eye(n))))


def loss_ortho(text_channels: Node | None, image_channels: Node | None) -> Node:
    """Sum of Gram-identity penalties over the modalities present."""
    terms = [
        gram_identity_penalty(c)
        for c in (text_channels, image_channels)
        if c is not None
    ]
    if not terms:
        return ad.constant(np.zeros((1, 1)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def loss_bbc(composed: list[Node], targets: list[Node], tau: float) -> Node:
    """In-batch classification loss over unit-norm query/target rows.

    Builds the B x B similarity matrix, scales by 1/tau, and averages the
    negative log-softmax of the diagonal. Exactly zero for B = 1.
    """
    batch = len(composed)
    if batch == 0 or len(targets) == 0:
        raise BatchEmpty("batch classification loss needs at least one pair")
    if len(targets) != batch:
        raise BatchEmpty(f"{batch} queries vs {len(targets)} targets")
    queries = ad.concat_rows(composed)
    candidates = ad.concat_rows(targets)
    logits = ad.scale(ad.matmul(queries, ad.transpose(candidates)), 1.0 / tau)
    log_probs = ad.log_softmax_rows(logits)
    diagonal = ad.mul(log_probs, ad.constant(np.eye(batch)))
    return ad.scale(ad.sum_all(diagonal), -1.0 / batch)


def total_loss(
    bbc: Node,
    summ: Node | None,
    ortho: Node | None,
    weights: LossWeights,
) -> tuple[Node, LossBreakdown]:
    """Weighted objective; terms passed as None contribute zero."""
    total = bbc
    summ_val = 0.0
    ortho_val = 0.0
    if summ is not None and weights.kappa != 0.0:
        total = ad.add(total, ad.scale(summ, weights.kappa))
        summ_val = float(summ.value[0, 0])
    elif summ is not None:
        summ_val = float(summ.value[0, 0])
    if ortho is not None and weights.mu != 0.0:
        total = ad.add(total, ad.scale(ortho, weights.mu))
        ortho_val = float(ortho.value[0, 0])
    elif ortho is not None:
        ortho_val = float(ortho.value[0, 0])
    breakdown = LossBreakdown(
        bbc=float(bbc.value[0, 0]),
        summ=summ_val,
        ortho=ortho_val,
        total=float(total.value[0, 0]),
    )
    return total, breakdown
