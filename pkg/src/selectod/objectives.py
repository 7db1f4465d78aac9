"""Loss terms and their weighted composition.

The joint objective is ``alpha*belief + beta*resp + gamma*span + delta*select``;
``variant="none"`` drops the selection term and gives the three-term baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("none", "after_encoder", "differentiable")


def normalize_variant(name: str) -> str:
    v = str(name).replace("-", "_").lower()
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return v


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    delta: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class LossBreakdown:
    belief_nll: Tensor
    resp_nll: Tensor
    span_ce: Tensor
    select_bce: Tensor | None
    total: Tensor
    variant: str
    weights: LossWeights
    span_empty: bool = False

    def values(self) -> dict:
        out = {
            "belief_nll": self.belief_nll.item(),
            "resp_nll": self.resp_nll.item(),
            "span_ce": self.span_ce.item(),
            "select_bce": None if self.select_bce is None else self.select_bce.item(),
            "total": self.total.item(),
        }
        return out

    def recombine(self) -> float:
        """Weighted sum of the component values, in the graph's dtype and order."""
        return recombine(self.values(), self.weights, self.total.dtype)


def recombine(values: Mapping, weights: LossWeights, dtype=np.float32) -> float:
    f = np.dtype(dtype).type
    total = f(weights.alpha) * f(values["belief_nll"]) + f(weights.beta) * f(values["resp_nll"])
    total = total + f(weights.gamma) * f(values["span_ce"])
    if values.get("select_bce") is not None:
        total = total + f(weights.delta) * f(values["select_bce"])
    return float(total)


def lm_nll(logits: Tensor, targets, pad_id: int = 0) -> Tensor:
    """Mean negative log-likelihood over non-pad target positions."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise T.ShapeError(f"logits {logits.shape} do not align with targets {targets.shape}")
    mask = targets != pad_id
    n = int(mask.sum())
    if n == 0:
        raise ValueError("all target positions are padding")
    logp = T.log_softmax(logits, axis=-1)
    flat = logp.reshape(-1, logits.shape[-1])
    rows = np.nonzero(mask.reshape(-1))[0]
    picked = flat[rows, targets.reshape(-1)[rows]]
    return -picked.sum() * (1.0 / n)


def span_loss(tag_logits: Tensor, tags, mask) -> tuple[Tensor, bool]:
    """Token cross-entropy over masked-in positions.

    Returns ``(loss, empty)``; with an empty mask the loss is a zero that still
    belongs to the graph and ``empty`` is True.
    """
    tags = np.asarray(tags, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if tag_logits.shape[:-1] != tags.shape or tags.shape != mask.shape:
        raise T.ShapeError(f"tag logits {tag_logits.shape}, tags {tags.shape} and mask {mask.shape} disagree")
    if np.any((tags[mask] < 0) | (tags[mask] >= tag_logits.shape[-1])):
        raise ValueError("span tag id out of range")
    n = int(mask.sum())
    if n == 0:
        return tag_logits.sum() * 0.0, True
    logp = T.log_softmax(tag_logits, axis=-1).reshape(-1, tag_logits.shape[-1])
    rows = np.nonzero(mask.reshape(-1))[0]
    picked = logp[rows, tags.reshape(-1)[rows]]
    return -picked.sum() * (1.0 / n), False


def binary_selection_loss(logit_positive: Tensor, logit_negative: Tensor) -> Tensor:
    """``-log sigmoid(pos) - log(1 - sigmoid(neg))`` in softplus form, batch-averaged."""
    loss = T.softplus(-logit_positive) + T.softplus(logit_negative)
    return loss.mean() if loss.ndim else loss


def select_loss_a(logit_truth: Tensor, logit_distractor: Tensor) -> Tensor:
    """Ground-truth vs. distractor encodings (labels 1 and 0)."""
    return binary_selection_loss(logit_truth, logit_distractor)


def select_loss_b(logit_truth: Tensor, logit_generated: Tensor) -> Tensor:
    """Ground-truth one-hots vs. straight-through decoder samples (labels 1 and 0)."""
    return binary_selection_loss(logit_truth, logit_generated)


def total_loss(
    belief_nll: Tensor,
    resp_nll: Tensor,
    span_ce: Tensor,
    select_bce: Tensor | None = None,
    weights: LossWeights = LossWeights(),
    variant: str = "none",
    span_empty: bool = False,
) -> LossBreakdown:
    variant = normalize_variant(variant)
    if variant == "none":
        select_bce = None
    elif select_bce is None:
        raise ValueError(f"variant {variant!r} needs a selection loss")
    belief_nll, resp_nll, span_ce = (T.as_tensor(x) for x in (belief_nll, resp_nll, span_ce))
    total = belief_nll * weights.alpha + resp_nll * weights.beta
    total = total + span_ce * weights.gamma
    if select_bce is not None:
        select_bce = T.as_tensor(select_bce)
        total = total + select_bce * weights.delta
    return LossBreakdown(belief_nll, resp_nll, span_ce, select_bce, total, variant, weights, span_empty)
