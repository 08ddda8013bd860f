"""Dice / cross-entropy objectives and the three multi-view co-training terms."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .errors import ShapeMismatch, DegenerateEmbeddingWarning
from .volume import ALL_VIEWS, IDENTITY, ViewPermutation, inverse_view, permute_array

DICE_SMOOTH = 1.0
BCE_CLAMP = 1e-7
EMBED_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    total: float
    sl: float
    consistency: float
    cosine: float
    loss: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {"total": self.total, "sl": self.sl, "consistency": self.consistency, "cosine": self.cosine}


def _check(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss pooled over every voxel of the input."""
    _check(probs, target)
    inter = (probs * target).sum()
    return 1 - (2 * inter + smooth) / (probs.sum() + target.sum() + smooth)


def bce_loss(probs: torch.Tensor, target: torch.Tensor, clamp: float = BCE_CLAMP) -> torch.Tensor:
    _check(probs, target)
    p = probs.clamp(clamp, 1 - clamp)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def dice_bce(probs, target) -> torch.Tensor:
    return dice_loss(probs, target) + bce_loss(probs, target)


def _batched(patch: torch.Tensor) -> torch.Tensor:
    while patch.ndim < 5:
        patch = patch.unsqueeze(0)
    return patch


def view_outputs(model, patch: torch.Tensor, views: Sequence[ViewPermutation] = ALL_VIEWS):
    """Run every view of a cubic patch through the model in one batch.

    Returns ``(probs, feats)``: ``probs[i]`` is view ``i``'s sigmoid output in
    that view's own orientation, ``feats[i]`` its bottleneck embedding.  The
    views share per-channel statistics (they are spatial permutations of one
    another) so batching them is equivalent under every normalization policy.
    """
    patch = _batched(torch.as_tensor(patch, dtype=model.dtype))
    if len(set(patch.shape[-3:])) != 1:
        raise ShapeMismatch(f"multi-view training needs a cubic patch, got {tuple(patch.shape[-3:])}")
    n = patch.shape[0]
    batch = torch.cat([permute_array(patch, v) for v in views], dim=0)
    logits, feats = model.forward_with_features(batch)
    probs = torch.sigmoid(logits)
    return list(probs.split(n)), list(feats.split(n))


def align(pred: torch.Tensor, view: ViewPermutation) -> torch.Tensor:
    return permute_array(pred, inverse_view(view))


def self_learning_from_outputs(probs, pseudolabel: torch.Tensor, views) -> torch.Tensor:
    pseudolabel = _batched(pseudolabel).to(probs[0].dtype)
    return sum(dice_bce(p, permute_array(pseudolabel, v)) for p, v in zip(probs, views))


def consistency_from_outputs(probs, views, target: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Transformed views (aligned back) against the original-view prediction.

    ``views[0]`` must be the identity; its prediction is the gradient-stopped
    target unless an explicit ``target`` is supplied.
    """
    if views[0] != IDENTITY:
        raise ValueError("the first view must be the identity")
    if target is None:
        target = probs[0].detach()
    target = _batched(target).to(probs[0].dtype)
    return sum(dice_bce(align(p, v), target) for p, v in zip(probs[1:], views[1:]))


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``1 - cos(a, b)`` per row; rows with a degenerate norm contribute 1."""
    a = a.reshape(a.shape[0], -1) if a.ndim > 1 else a.unsqueeze(0)
    b = b.reshape(b.shape[0], -1) if b.ndim > 1 else b.unsqueeze(0)
    na, nb = a.norm(dim=1), b.norm(dim=1)
    degenerate = (na < EMBED_NORM_FLOOR) | (nb < EMBED_NORM_FLOOR)
    if degenerate.any():
        warnings.warn("embedding norm below 1e-12; cosine term set to 1", DegenerateEmbeddingWarning,
                      stacklevel=2)
    safe = (na * nb).clamp_min(EMBED_NORM_FLOOR**2)
    cos = torch.where(degenerate, torch.zeros_like(safe), (a * b).sum(1) / safe)
    return 1 - cos


def cosine_from_outputs(feats) -> torch.Tensor:
    return sum(cosine_distance(feats[0], f).mean() for f in feats[1:])


def self_learning_loss(model, patch, pseudolabel_patch, views=ALL_VIEWS) -> torch.Tensor:
    probs, _ = view_outputs(model, patch, views)
    return self_learning_from_outputs(probs, torch.as_tensor(pseudolabel_patch), views)


def view_consistency_loss(model, patch, views=ALL_VIEWS, target=None) -> torch.Tensor:
    probs, _ = view_outputs(model, patch, views)
    return consistency_from_outputs(probs, views, target)


def cosine_feature_loss(model, patch, views=ALL_VIEWS) -> torch.Tensor:
    _, feats = view_outputs(model, patch, views)
    return cosine_from_outputs(feats)


def total_loss(model, patch, pseudolabel_patch, weights: LossWeights = LossWeights(),
               views=ALL_VIEWS) -> LossReport:
    """Weighted sum of the three terms from a single batched forward pass.

    Terms whose weight is zero are not evaluated and report 0.
    """
    probs, feats = view_outputs(model, patch, views)
    zero = probs[0].new_zeros(())
    sl = self_learning_from_outputs(probs, torch.as_tensor(pseudolabel_patch), views) if weights.lambda1 else zero
    cons = consistency_from_outputs(probs, views) if weights.lambda2 else zero
    cos = cosine_from_outputs(feats) if weights.lambda3 else zero
    loss = weights.lambda1 * sl + weights.lambda2 * cons + weights.lambda3 * cos
    sl_v, cons_v, cos_v = (t.detach().item() for t in (sl, cons, cos))
    total = weights.lambda1 * sl_v + weights.lambda2 * cons_v + weights.lambda3 * cos_v
    return LossReport(total, sl_v, cons_v, cos_v, loss=loss)


def mean_binary_entropy(probs: torch.Tensor, clamp: float = BCE_CLAMP) -> torch.Tensor:
    """Mean voxelwise binary entropy in nats (differentiable)."""
    p = probs.clamp(clamp, 1 - clamp)
    return -(p * torch.log(p) + (1 - p) * torch.log(1 - p)).mean()
