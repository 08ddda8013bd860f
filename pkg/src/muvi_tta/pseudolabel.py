"""Binary entropy, per-view confidence gating and multi-view pseudolabel fusion."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DomainError, ShapeMismatch
from .inference import predict_view, predict_views  # noqa: F401  (re-exported)
from .volume import LabelVolume, ProbabilityVolume

VIEW_IDS = ("identity", "pi1", "pi2")


def _default_taus():
    return {"identity": 0.4, "pi1": 0.2, "pi2": 0.2}


@dataclass(frozen=True)
class EntropyThresholds:
    """Per-view entropy ceilings; ``native`` names the highest-resolution view."""

    tau_by_view: Mapping[str, float] = field(default_factory=_default_taus)
    native: str = "identity"

    def __post_init__(self):
        taus = dict(self.tau_by_view)
        if set(taus) != set(VIEW_IDS):
            raise ValueError(f"thresholds needed for exactly {VIEW_IDS}, got {sorted(taus)}")
        for view, tau in taus.items():
            if not 0 < tau <= 1:
                raise ValueError(f"tau for {view} must be in (0, 1], got {tau}")
        if any(taus[self.native] < t for t in taus.values()):
            raise ValueError("the native view's threshold must be the largest")
        object.__setattr__(self, "tau_by_view", taus)

    @classmethod
    def from_pair(cls, native_tau: float = 0.4, other_tau: float = 0.2, native: str = "identity"):
        return cls({v: native_tau if v == native else other_tau for v in VIEW_IDS}, native)


@dataclass
class PseudoLabel:
    labels: LabelVolume
    accepted: np.ndarray

    @property
    def foreground_fraction(self) -> float:
        return float(self.labels.data.mean())


def binary_entropy(p) -> np.ndarray:
    """H(p) in bits, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise DomainError("probabilities must lie in [0, 1]")
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log2(p), 0.0) - np.where(q > 0, q * np.log2(q), 0.0)
    return np.clip(h, 0.0, 1.0)


def _unpack(probs_by_view: Mapping) -> dict[str, np.ndarray]:
    arrays = {k: np.asarray(getattr(v, "data", v), dtype=np.float64) for k, v in probs_by_view.items()}
    shapes = {a.shape for a in arrays.values()}
    if len(shapes) != 1:
        raise ShapeMismatch(f"view predictions disagree in shape: {shapes}")
    return arrays


def _spacing(probs_by_view: Mapping):
    first = next(iter(probs_by_view.values()))
    return getattr(first, "spacing", (1.0, 1.0, 1.0))


def fuse_pseudolabel(probs_by_view: Mapping, thresholds: EntropyThresholds = EntropyThresholds()) -> PseudoLabel:
    """Union of confident-foreground votes; everything else is background."""
    arrays = _unpack(probs_by_view)
    shape = next(iter(arrays.values())).shape
    accepted = np.zeros(shape, dtype=bool)
    foreground = np.zeros(shape, dtype=bool)
    for view, p in arrays.items():
        confident = binary_entropy(p) < thresholds.tau_by_view[view]
        accepted |= confident
        foreground |= confident & (p > 0.5)
    labels = LabelVolume(foreground.astype(np.uint8), spacing=_spacing(probs_by_view))
    return PseudoLabel(labels, accepted)


def fuse_mean(probs_by_view: Mapping) -> PseudoLabel:
    arrays = _unpack(probs_by_view)
    mean = np.mean(list(arrays.values()), axis=0)
    labels = LabelVolume((mean > 0.5).astype(np.uint8), spacing=_spacing(probs_by_view))
    return PseudoLabel(labels, np.ones(mean.shape, dtype=bool))


def dump_debug(run_dir, probs_by_view: Mapping[str, ProbabilityVolume], pseudo: PseudoLabel) -> list[Path]:
    """Write per-view probability/entropy maps and the fused label as NIfTI."""
    from .io import save_nifti
    from .volume import Volume

    run_dir = Path(run_dir)
    written = []
    for view, prob in probs_by_view.items():
        written.append(save_nifti(prob, run_dir / f"prob_{view}.nii.gz"))
        ent = Volume(binary_entropy(prob.data).astype(np.float32), spacing=prob.spacing)
        written.append(save_nifti(ent, run_dir / f"entropy_{view}.nii.gz"))
    written.append(save_nifti(pseudo.labels, run_dir / "pseudolabel.nii.gz"))
    return written
