"""Volumes, view permutations, patch grids and sliding-window reassembly."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import CoverageGap, OutOfBounds, PatchTooLarge, ShapeMismatch

Triple = tuple[int, int, int]


def _as_triple(values, cast=float) -> tuple:
    values = tuple(cast(v) for v in np.broadcast_to(np.asarray(values), (3,)))
    return values


@dataclass
class Volume:
    """A 3D scalar grid with per-axis voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spacing = _as_triple(self.spacing)
        self.origin = _as_triple(self.origin)
        self._validate()

    def _validate(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeMismatch(f"expected a non-empty 3D grid, got shape {self.data.shape}")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains NaN or Inf")

    @property
    def shape(self) -> Triple:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, cls=None):
        cls = cls or type(self)
        return cls(data, spacing=self.spacing, origin=self.origin)


class LabelVolume(Volume):
    """Binary {0, 1} mask."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype == bool:
            data = data.astype(np.uint8)
        self.data = data
        super().__post_init__()
        if not np.isin(self.data, (0, 1)).all():
            raise ValueError("label volume must be binary")


class ProbabilityVolume(Volume):
    """Foreground probabilities in [0, 1]."""

    def __post_init__(self):
        super().__post_init__()
        if self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")


# --------------------------------------------------------------------------
# views
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewPermutation:
    id: str
    axis_order: Triple

    def __post_init__(self):
        if sorted(self.axis_order) != [0, 1, 2]:
            raise ValueError(f"{self.axis_order} is not a permutation of (0, 1, 2)")


IDENTITY = ViewPermutation("identity", (0, 1, 2))
PI1 = ViewPermutation("pi1", (1, 2, 0))
PI2 = ViewPermutation("pi2", (2, 0, 1))
ALL_VIEWS = (IDENTITY, PI1, PI2)
VIEWS_BY_ID = {v.id: v for v in ALL_VIEWS}


def compose(first: ViewPermutation, second: ViewPermutation) -> Triple:
    """Axis order of applying ``first`` then ``second``."""
    return tuple(first.axis_order[i] for i in second.axis_order)


def inverse_view(view: ViewPermutation) -> ViewPermutation:
    order = tuple(int(i) for i in np.argsort(view.axis_order))
    for candidate in ALL_VIEWS:
        if candidate.axis_order == order:
            return candidate
    return ViewPermutation(f"inv_{view.id}", order)


def permute_array(data, view: ViewPermutation):
    """Reorder the three trailing spatial axes of an ndarray or a torch tensor."""
    lead = data.ndim - 3
    order = tuple(range(lead)) + tuple(lead + a for a in view.axis_order)
    if hasattr(data, "permute"):
        return data.permute(*order)
    return np.transpose(data, order)


def permute_to_view(vol: Volume, view: ViewPermutation) -> Volume:
    data = np.ascontiguousarray(np.transpose(vol.data, view.axis_order))
    spacing = tuple(vol.spacing[a] for a in view.axis_order)
    origin = tuple(vol.origin[a] for a in view.axis_order)
    return type(vol)(data, spacing=spacing, origin=origin)


# --------------------------------------------------------------------------
# patch grids
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchGrid:
    shape: Triple
    patch_size: Triple
    step: Triple
    origins: tuple[Triple, ...] = field(repr=False)

    def __len__(self):
        return len(self.origins)

    @property
    def is_cubic(self) -> bool:
        return len(set(self.patch_size)) == 1

    def slices(self, origin: Sequence[int]) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + p) for o, p in zip(origin, self.patch_size))


def _axis_origins(size: int, patch: int, step: int) -> list[int]:
    origins = list(range(0, size - patch + 1, step))
    if origins[-1] != size - patch:
        origins.append(size - patch)
    return origins


def plan_patch_grid(shape, patch_size, overlap_fraction: float = 0.5) -> PatchGrid:
    shape = _as_triple(shape, int)
    patch_size = _as_triple(patch_size, int)
    if not 0 <= overlap_fraction < 1:
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    if any(p > s for p, s in zip(patch_size, shape)):
        raise PatchTooLarge(f"patch {patch_size} exceeds volume shape {shape}")
    if min(patch_size) < 1:
        raise ValueError("patch_size must be positive")
    step = tuple(max(1, int(np.floor(p * (1 - overlap_fraction)))) for p in patch_size)
    axes = [_axis_origins(s, p, st) for s, p, st in zip(shape, patch_size, step)]
    origins = tuple((a, b, c) for a in axes[0] for b in axes[1] for c in axes[2])
    return PatchGrid(shape, patch_size, step, origins)


def pad_to_patch(data: np.ndarray, patch_size) -> tuple[np.ndarray, tuple[slice, ...]]:
    """Zero-pad symmetrically so every axis is at least ``patch_size``.

    Returns the padded array and the slices that crop it back.
    """
    pads, crop = [], []
    for s, p in zip(data.shape[-3:], _as_triple(patch_size, int)):
        total = max(0, p - s)
        before = total // 2
        pads.append((before, total - before))
        crop.append(slice(before, before + s))
    if not any(sum(pad) for pad in pads):
        return data, tuple(crop)
    lead = [(0, 0)] * (data.ndim - 3)
    return np.pad(data, lead + pads), tuple(crop)


def extract_patch(vol: Volume, origin, patch_size) -> Volume:
    origin = _as_triple(origin, int)
    patch_size = _as_triple(patch_size, int)
    for o, p, s in zip(origin, patch_size, vol.shape):
        if o < 0 or p < 1 or o + p > s:
            raise OutOfBounds(f"patch at {origin} of size {patch_size} exceeds shape {vol.shape}")
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_size))
    return type(vol)(vol.data[sl].copy(), spacing=vol.spacing, origin=vol.origin)


def gaussian_weight(patch_size, sigma_scale: float = 1 / 8, floor: float = 1e-3) -> np.ndarray:
    """Separable Gaussian importance map peaking at the patch centre (max 1)."""
    patch_size = _as_triple(patch_size, int)
    weight = np.ones(patch_size, dtype=np.float64)
    for axis, p in enumerate(patch_size):
        centre = (p - 1) / 2
        sigma = p * sigma_scale
        g = np.exp(-0.5 * ((np.arange(p) - centre) / sigma) ** 2)
        shape = [1, 1, 1]
        shape[axis] = p
        weight = weight * g.reshape(shape)
    weight /= weight.max()
    return np.maximum(weight, floor)


def reassemble(patch_probs: Iterable, shape, weighting: str = "uniform", spacing=(1.0, 1.0, 1.0)):
    """Weighted average of overlapping patch predictions.

    ``patch_probs`` yields ``(origin, patch)`` pairs where ``patch`` is an
    ndarray or a Volume.
    """
    shape = _as_triple(shape, int)
    acc = np.zeros(shape, dtype=np.float64)
    norm = np.zeros(shape, dtype=np.float64)
    weights_cache: dict = {}
    for origin, patch in patch_probs:
        arr = np.asarray(getattr(patch, "data", patch), dtype=np.float64)
        if weighting == "uniform":
            w = 1.0
        elif weighting == "gaussian":
            if arr.shape not in weights_cache:
                weights_cache[arr.shape] = gaussian_weight(arr.shape)
            w = weights_cache[arr.shape]
        else:
            raise ValueError(f"unknown weighting {weighting!r}")
        sl = tuple(slice(o, o + p) for o, p in zip(origin, arr.shape))
        if any(s.stop > n or s.start < 0 for s, n in zip(sl, shape)):
            raise OutOfBounds(f"patch at {origin} exceeds shape {shape}")
        acc[sl] += w * arr
        norm[sl] += w
    if (norm <= 0).any():
        raise CoverageGap(f"{int((norm <= 0).sum())} voxels not covered by any patch")
    out = np.clip(acc / norm, 0.0, 1.0)
    return ProbabilityVolume(out, spacing=spacing)


def resample(vol: Volume, target_spacing, mode: str = "trilinear", shape=None) -> Volume:
    """Resample onto a grid with ``target_spacing`` (voxel-centre aligned).

    ``shape`` forces the output shape, used when inverting a resampling.
    """
    target_spacing = _as_triple(target_spacing)
    if min(target_spacing) <= 0:
        raise ValueError("target spacing must be positive")
    if isinstance(vol, LabelVolume):
        mode = "nearest"
    order = {"trilinear": 1, "nearest": 0}[mode]
    if shape is None:
        shape = tuple(
            max(1, int(round(n * s / t))) for n, s, t in zip(vol.shape, vol.spacing, target_spacing)
        )
    shape = _as_triple(shape, int)
    if shape == vol.shape:
        return type(vol)(vol.data.copy(), spacing=target_spacing, origin=vol.origin)
    scale = np.array(vol.shape, dtype=np.float64) / np.array(shape, dtype=np.float64)
    offset = 0.5 * scale - 0.5
    out = ndimage.affine_transform(
        vol.data.astype(np.float64),
        np.diag(scale),
        offset=offset,
        output_shape=shape,
        order=order,
        mode="nearest",
    )
    if isinstance(vol, LabelVolume):
        out = (out > 0.5).astype(np.uint8)
    elif isinstance(vol, ProbabilityVolume):
        out = np.clip(out, 0.0, 1.0)
    else:
        out = out.astype(vol.data.dtype, copy=False)
    return type(vol)(out, spacing=target_spacing, origin=vol.origin)


def isotropic_spacing(spacing) -> tuple[float, float, float]:
    """Isotropic target: the median of the per-axis spacings (the in-plane value
    for the usual two-fine-one-coarse acquisition)."""
    s = float(np.median(spacing))
    return (s, s, s)
