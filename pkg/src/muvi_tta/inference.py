"""Sliding-window prediction and the isotropic working grid shared by every method."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .volume import (
    ALL_VIEWS,
    IDENTITY,
    ProbabilityVolume,
    Volume,
    ViewPermutation,
    inverse_view,
    isotropic_spacing,
    pad_to_patch,
    permute_to_view,
    plan_patch_grid,
    reassemble,
    resample,
)


def _needs_single_batches(model) -> bool:
    # per-call statistics must come from one patch at a time
    return model.norm_kind == "batch_norm" and model.stats_source == "current_input"


def iter_patches(data: np.ndarray, patch_size, overlap: float):
    """Pad ``data`` up to the patch size and tile it.

    Returns ``(padded, crop, grid)``.
    """
    padded, crop = pad_to_patch(data, patch_size)
    grid = plan_patch_grid(padded.shape, patch_size, overlap)
    return padded, crop, grid


@torch.no_grad()
def sliding_window(model, data: np.ndarray, overlap: float = 0.5, weighting: str = "gaussian",
                   batch_size: int = 4) -> np.ndarray:
    """Foreground probabilities for a whole grid under the model's current policy."""
    padded, crop, grid = iter_patches(np.asarray(data), model.patch_size, overlap)
    if _needs_single_batches(model):
        batch_size = 1
    outputs = []
    origins = list(grid.origins)
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        x = np.stack([padded[grid.slices(o)] for o in chunk])[:, None]
        probs = torch.sigmoid(model.forward(torch.from_numpy(np.ascontiguousarray(x))))
        probs = probs.to(torch.float64).numpy()[:, 0]
        outputs.extend(zip(chunk, probs))
    full = reassemble(outputs, padded.shape, weighting).data
    return full[crop]


def predict_view(model, vol: Volume, view: ViewPermutation = IDENTITY, overlap: float = 0.5,
                 weighting: str = "gaussian", batch_size: int = 4) -> ProbabilityVolume:
    """Predict in ``view`` orientation and map the result back to the canonical grid."""
    permuted = permute_to_view(vol, view)
    probs = sliding_window(model, permuted.data, overlap, weighting, batch_size)
    aligned = ProbabilityVolume(probs, spacing=permuted.spacing)
    back = permute_to_view(aligned, inverse_view(view))
    return ProbabilityVolume(back.data, spacing=vol.spacing, origin=vol.origin)


def predict_views(model, vol: Volume, views: Sequence[ViewPermutation] = ALL_VIEWS,
                  **kwargs) -> dict[str, ProbabilityVolume]:
    return {v.id: predict_view(model, vol, v, **kwargs) for v in views}


def mean_probability(probs_by_view: dict) -> ProbabilityVolume:
    first = next(iter(probs_by_view.values()))
    stacked = np.mean([p.data for p in probs_by_view.values()], axis=0)
    return ProbabilityVolume(np.clip(stacked, 0, 1), spacing=first.spacing, origin=first.origin)


def predict_multiview(model, vol: Volume, views: Sequence[ViewPermutation] = ALL_VIEWS,
                      **kwargs) -> ProbabilityVolume:
    return mean_probability(predict_views(model, vol, views, **kwargs))


def to_working_grid(vol: Volume, resample_isotropic: bool = True) -> Volume:
    if not resample_isotropic:
        return vol
    target = isotropic_spacing(vol.spacing)
    if np.allclose(target, vol.spacing):
        return vol
    return resample(vol, target, "trilinear")


def from_working_grid(probs: ProbabilityVolume, reference: Volume) -> ProbabilityVolume:
    """Map working-grid probabilities back onto ``reference``'s grid (nearest)."""
    if probs.shape == reference.shape:
        return ProbabilityVolume(probs.data, spacing=reference.spacing, origin=reference.origin)
    out = resample(probs, reference.spacing, "nearest", shape=reference.shape)
    return ProbabilityVolume(out.data, spacing=reference.spacing, origin=reference.origin)
