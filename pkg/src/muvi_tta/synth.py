"""Synthetic lesion phantoms with parametric domain shift, and source training."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigError
from .losses import dice_bce
from .model import ModelConfig, SegmentationModel, build_toy_unet
from .volume import LabelVolume, Volume, resample

log = logging.getLogger(__name__)

BASE_NOISE = 0.05
MIN_SHAPE = 32


@dataclass(frozen=True)
class DomainSpec:
    """Acquisition-style degradation applied to a clean 1 mm phantom."""

    name: str = "source"
    intensity_gamma: float = 1.0
    bias_field_amplitude: float = 0.0
    noise_std: float = BASE_NOISE
    blur_sigma_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    contrast_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "blur_sigma_mm", tuple(float(b) for b in self.blur_sigma_mm))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.intensity_gamma <= 0 or self.contrast_scale <= 0:
            raise ConfigError("gamma and contrast scale must be positive")
        if self.bias_field_amplitude < 0 or self.noise_std < 0 or min(self.blur_sigma_mm) < 0:
            raise ConfigError("bias amplitude, noise and blur must be non-negative")
        if min(self.spacing) <= 0:
            raise ConfigError("spacing must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blur_sigma_mm"] = list(self.blur_sigma_mm)
        d["spacing"] = list(self.spacing)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        for key in ("blur_sigma_mm", "spacing"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "DomainSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


SOURCE = DomainSpec()
# gamma 1.4, twice the base noise, 2.3 mm slices along the last axis
SHIFTED = DomainSpec("shifted", intensity_gamma=1.4, noise_std=2 * BASE_NOISE, spacing=(1.0, 1.0, 2.3))


@dataclass
class PhantomCase:
    volume: Volume
    mask: LabelVolume
    seed: int
    domain: DomainSpec
    case_id: str
    clean_tumor: Optional[np.ndarray] = field(default=None, repr=False)


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _ellipsoid(coords, centre, radii, rotation) -> np.ndarray:
    """Implicit function sum((R (x - c) / r)^2); <= 1 inside."""
    local = np.tensordot(rotation, coords - centre[:, None, None, None], axes=1)
    return sum((local[i] / radii[i]) ** 2 for i in range(3))


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _anatomy(rng, shape):
    """Clean 1 mm intensities in [0, 1], tumor mask, and clean tumor signal."""
    shape = tuple(shape)
    coords = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))
    centre = (np.array(shape) - 1) / 2

    # body: a large ellipsoid of fatty tissue with smooth texture
    body_radii = np.array(shape) * rng.uniform(0.40, 0.48, size=3)
    body = _ellipsoid(coords, centre + rng.uniform(-2, 2, 3), body_radii, np.eye(3))
    body_mask = 1 / (1 + np.exp((body - 1) * 12))
    texture = _smooth_noise(rng, shape, 3.0)
    image = 0.03 + body_mask * (0.22 + 0.04 * texture)

    # fibroglandular tissue: thresholded smooth noise, moderately bright
    glands = _smooth_noise(rng, shape, 4.0)
    gland_level = rng.uniform(0.9, 1.3)
    gland = 1 / (1 + np.exp(-(glands - gland_level) * 4)) * body_mask
    image += 0.30 * gland

    # tumor: union of 1-3 lobes inside the body
    n_lobes = int(rng.integers(1, 4))
    tumor_centre = centre + rng.uniform(-0.22, 0.22, 3) * np.array(shape)
    implicit = np.full(shape, np.inf)
    base_radius = rng.uniform(5.0, 10.0)
    for lobe in range(n_lobes):
        offset = np.zeros(3) if lobe == 0 else rng.normal(0, base_radius * 0.6, 3)
        radii = base_radius * rng.uniform(0.6, 1.3, 3)
        implicit = np.minimum(implicit, _ellipsoid(coords, tumor_centre + offset, radii, _random_rotation(rng)))
    mask = implicit <= 1.0
    # bright core with a soft rim that still lies inside the support
    tumor_signal = np.clip((1.0 - implicit) * 2.5, 0, 1) ** 0.7
    tumor_signal[~mask] = 0
    brightness = rng.uniform(0.45, 0.6)
    image = image * (1 - tumor_signal) + (image + brightness) * tumor_signal
    return np.clip(image, 0, None), mask, tumor_signal


def _bias_field(rng, shape, amplitude) -> np.ndarray:
    if amplitude == 0:
        return np.ones(shape)
    axes = [np.linspace(-1, 1, n) for n in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    terms = [x, y, z, x * y, y * z, x * z, x**2, y**2, z**2]
    coefs = rng.uniform(-1, 1, len(terms))
    poly = sum(c * t for c, t in zip(coefs, terms))
    poly /= np.abs(poly).max() + 1e-12
    return np.clip(1 + amplitude * poly, 0.05, None)


def degrade(image: np.ndarray, domain: DomainSpec, rng, base_spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Apply, in order: contrast, gamma, bias field, blur, downsampling, noise."""
    out = image * domain.contrast_scale
    out = np.clip(out, 0, None) ** domain.intensity_gamma
    out = out * _bias_field(rng, out.shape, domain.bias_field_amplitude)
    sigma = [b / s for b, s in zip(domain.blur_sigma_mm, base_spacing)]
    if any(sigma):
        out = ndimage.gaussian_filter(out, sigma, mode="nearest")
    vol = Volume(out.astype(np.float32), spacing=base_spacing)
    if not np.allclose(domain.spacing, base_spacing):
        # slice-thickness partial-volume averaging before decimation
        thick = [max(0.0, (t / s - 1) / 2) for t, s in zip(domain.spacing, base_spacing)]
        vol = Volume(ndimage.gaussian_filter(vol.data.astype(np.float64), thick, mode="nearest").astype(np.float32),
                     spacing=base_spacing)
        vol = resample(vol, domain.spacing, "trilinear")
    noisy = vol.data + rng.normal(0, domain.noise_std, vol.shape) if domain.noise_std else vol.data
    return Volume(noisy.astype(np.float32), spacing=vol.spacing)


def generate_phantom(seed: int, shape=(64, 64, 64), domain: DomainSpec = SOURCE) -> PhantomCase:
    shape = tuple(int(s) for s in np.broadcast_to(shape, (3,)))
    if min(shape) < MIN_SHAPE:
        raise ConfigError(f"phantom shape must be >= {MIN_SHAPE} per axis, got {shape}")
    anatomy_rng = np.random.default_rng([int(seed), *shape])
    image, mask, tumor_signal = _anatomy(anatomy_rng, shape)
    degrade_rng = np.random.default_rng([int(seed), *shape, 7])
    volume = degrade(image, domain, degrade_rng)
    label = LabelVolume(mask.astype(np.uint8))
    if volume.shape != label.shape:
        label = resample(label, volume.spacing, "nearest", shape=volume.shape)
    label = LabelVolume(label.data, spacing=volume.spacing)
    case_id = f"{domain.name}_{int(seed):05d}"
    return PhantomCase(volume, label, int(seed), domain, case_id, tumor_signal)


def generate_dataset(n: int, seed: int = 0, shape=(64, 64, 64), domain: DomainSpec = SOURCE) -> list[PhantomCase]:
    if n < 1:
        raise ConfigError("n must be >= 1")
    return [generate_phantom(seed + i, shape, domain) for i in range(n)]


# --------------------------------------------------------------------------
# source training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch: int = 4
    patch_size: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    samples_per_case: int = 4
    foreground_fraction: float = 0.5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d


def _sample_crop(rng, case: PhantomCase, patch, foreground_fraction) -> tuple[np.ndarray, np.ndarray]:
    shape = np.array(case.volume.shape)
    patch = np.array(patch)
    if rng.random() < foreground_fraction and case.mask.data.any():
        fg = np.argwhere(case.mask.data)
        centre = fg[rng.integers(len(fg))]
        start = centre - patch // 2 + rng.integers(-patch // 4, patch // 4 + 1)
    else:
        start = np.array([rng.integers(0, s - p + 1) for s, p in zip(shape, patch)])
    start = np.clip(start, 0, shape - patch)
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
    return case.volume.data[sl], case.mask.data[sl]


def train_source_model(dataset: Sequence[PhantomCase], model_cfg: ModelConfig, train_cfg: TrainConfig = TrainConfig(),
                       val_set: Sequence[PhantomCase] = (), evaluate: Optional[Callable] = None,
                       progress: bool = False) -> tuple[SegmentationModel, dict]:
    """Supervised Dice + BCE training on random (foreground-biased) crops.

    BN running statistics accumulate by the usual momentum average. Returns
    the model (in eval mode) and a history dict with per-epoch losses and the
    validation DSC when ``val_set`` is given.
    """
    if not dataset:
        raise ConfigError("empty training set")
    if tuple(train_cfg.patch_size) != tuple(model_cfg.patch_size):
        raise ConfigError("train patch size must match the model patch size")
    model = build_toy_unet(model_cfg.channels_base, model_cfg.depth, model_cfg.norm, model_cfg.patch_size,
                           model_cfg.seed, convs_per_block=model_cfg.convs_per_block)
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    optimizer = torch.optim.Adam(model.net.parameters(), lr=train_cfg.lr)
    history = {"epoch_loss": []}
    started = time.perf_counter()
    for epoch in range(train_cfg.epochs):
        model.train()
        order = np.repeat(rng.permutation(len(dataset)), train_cfg.samples_per_case)
        rng.shuffle(order)
        losses = []
        for start in range(0, len(order), train_cfg.batch):
            crops = [_sample_crop(rng, dataset[i], train_cfg.patch_size, train_cfg.foreground_fraction)
                     for i in order[start:start + train_cfg.batch]]
            x = torch.from_numpy(np.stack([c[0] for c in crops])[:, None].astype(np.float32))
            y = torch.from_numpy(np.stack([c[1] for c in crops])[:, None].astype(np.float32))
            optimizer.zero_grad(set_to_none=True)
            loss = dice_bce(torch.sigmoid(model.net(x)), y)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        history["epoch_loss"].append(float(np.mean(losses)))
        if progress:
            log.info("epoch %d/%d loss %.4f (%.0fs)", epoch + 1, train_cfg.epochs, history["epoch_loss"][-1],
                     time.perf_counter() - started)
    model.eval()
    model.metadata.update({"seed": train_cfg.seed, "epochs": train_cfg.epochs, "train": train_cfg.to_dict(),
                           "n_train": len(dataset), "train_time": time.perf_counter() - started})
    if val_set:
        from .baselines import baseline_predict
        from .metrics import dsc

        evaluate = evaluate or baseline_predict
        scores = [dsc(evaluate(model, c.volume).prediction, c.mask) for c in val_set]
        history["val_dsc"] = float(np.mean(scores))
        history["val_dsc_per_case"] = scores
        model.metadata["val_dsc"] = history["val_dsc"]
    return model, history
