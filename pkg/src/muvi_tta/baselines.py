"""Comparison strategies: PTN, Tent, BNAdapt, InTent, MEMO and the unadapted baseline.

Every strategy follows the same single-image contract as MuVi: the model is
snapshotted on entry and restored on exit, and the final prediction uses the
same (default three-view mean) inference as the unadapted baseline.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.special import softmax

from .engine import (
    AdaptationConfig,
    AdaptationResult,
    adapt_single_image,
    ablation_variant,
    final_views,
    make_optimizer,
    make_result,
    prepare_for_adaptation,
)
from .errors import ConfigError, NormUnsupported
from .inference import iter_patches, mean_probability, predict_views, to_working_grid
from .losses import mean_binary_entropy
from .model import SegmentationModel
from .pseudolabel import binary_entropy
from .volume import ProbabilityVolume, Volume

METHODS = ("muvi", "ptn", "tent", "bnadapt", "intent", "memo", "none")
AUGMENTATIONS = {"identity": None, "flip0": 0, "flip1": 1, "flip2": 2}


@dataclass(frozen=True)
class StrategyConfig:
    """Free constants of the comparison methods plus the shared inference knobs."""

    lr: float = 1e-3
    momentum: float = 0.9
    steps_per_patch: int = 1
    rho: float = 0.1
    alphas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    temperature: float = 1.0
    augmentations: tuple[str, ...] = ("identity", "flip0", "flip1", "flip2")
    overlap: float = 0.5
    weighting: str = "gaussian"
    seed: int = 0
    final_views: str = "multiview"
    resample_isotropic: bool = True
    batch_size: int = 4

    def __post_init__(self):
        if not 0 <= self.rho <= 1:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")
        if not self.alphas or any(not 0 <= a <= 1 for a in self.alphas):
            raise ConfigError("alphas must be a non-empty set of values in [0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        unknown = set(self.augmentations) - set(AUGMENTATIONS)
        if unknown or not self.augmentations:
            raise ConfigError(f"unknown augmentations {sorted(unknown)}")

    @property
    def infer(self) -> dict:
        return dict(overlap=self.overlap, weighting=self.weighting, batch_size=self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        d = dict(d)
        for key in ("alphas", "augmentations"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Strategy:
    name: str = "none"
    params: StrategyConfig = field(default_factory=StrategyConfig)

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigError(f"unknown method {self.name!r}; expected one of {METHODS}")


def require_batch_norm(model: SegmentationModel, method: str):
    if model.norm_kind != "batch_norm":
        raise NormUnsupported(f"{method} needs batch normalization, model uses {model.norm_kind}")


def _predict(model, work, cfg: StrategyConfig) -> ProbabilityVolume:
    return mean_probability(predict_views(model, work, final_views(cfg.final_views), **cfg.infer))


class _Reset:
    """Snapshot on enter, restore on exit (also on error)."""

    def __init__(self, model: SegmentationModel):
        self.model = model

    def __enter__(self):
        self.state = self.model.snapshot()
        self.model.eval()
        return self.model

    def __exit__(self, *exc):
        self.model.restore(self.state)
        return False


def baseline_predict(model, vol: Volume, cfg: StrategyConfig = StrategyConfig()) -> AdaptationResult:
    """Unadapted prediction with the checkpoint's own normalization policy."""
    started = time.perf_counter()
    with _Reset(model):
        model.set_stats_source(model.config.norm.stats_source)
        work = to_working_grid(vol, cfg.resample_isotropic)
        return make_result(_predict(model, work, cfg), vol, started=started)


def ptn_predict(model, vol: Volume, cfg: StrategyConfig = StrategyConfig()) -> AdaptationResult:
    """Normalize every BN layer by the statistics of the current patch."""
    require_batch_norm(model, "ptn")
    started = time.perf_counter()
    with _Reset(model):
        model.set_stats_source("current_input")
        work = to_working_grid(vol, cfg.resample_isotropic)
        return make_result(_predict(model, work, cfg), vol, started=started)


def _patch_stream(work: Volume, model, cfg: StrategyConfig):
    padded, _, grid = iter_patches(work.data, model.patch_size, cfg.overlap)
    rng = np.random.default_rng(cfg.seed)
    for idx in rng.permutation(len(grid)):
        patch = padded[grid.slices(grid.origins[idx])]
        yield torch.from_numpy(np.ascontiguousarray(patch)).to(model.dtype)[None, None]


def tent_adapt(model, vol: Volume, cfg: StrategyConfig = StrategyConfig()) -> AdaptationResult:
    """Current-input statistics and entropy minimization over the BN affine parameters."""
    require_batch_norm(model, "tent")
    started = time.perf_counter()
    with _Reset(model):
        model.set_stats_source("current_input")
        work = to_working_grid(vol, cfg.resample_isotropic)
        params = prepare_for_adaptation(model, "norm_affine_only")
        optimizer = make_optimizer(params, cfg.lr, cfg.momentum)
        trace = []
        for patch in _patch_stream(work, model, cfg):
            for _ in range(cfg.steps_per_patch):
                optimizer.zero_grad(set_to_none=True)
                loss = mean_binary_entropy(torch.sigmoid(model.forward(patch)))
                loss.backward()
                optimizer.step()
                trace.append(loss.item())
        for p in params:
            p.requires_grad_(False)
        return make_result(_predict(model, work, cfg), vol, started=started, entropy_trace=trace)


def _padded_whole(work: Volume, model) -> torch.Tensor:
    """The whole working volume, reflect-padded to a size the network accepts."""
    factor = 2**model.config.depth
    data = work.data
    pads = []
    for n, p in zip(data.shape, model.patch_size):
        target = max(p, int(np.ceil(n / factor)) * factor)
        total = target - n
        pads.append((total // 2, total - total // 2))
    mode = "reflect" if all(b <= n - 1 and a <= n - 1 for (b, a), n in zip(pads, data.shape)) else "edge"
    if any(sum(p) for p in pads):
        data = np.pad(data, pads, mode=mode)
    return torch.from_numpy(np.ascontiguousarray(data)).to(model.dtype)[None, None]


@torch.no_grad()
def set_mixed_statistics(model: SegmentationModel, work: Volume, rho: float) -> list[tuple]:
    """One whole-volume pass fixing every BN layer to ``(1 - rho) * source + rho * test``.

    Each layer's test statistics are measured on activations that already
    passed through the mixed upstream layers. Returns the per-layer
    ``(test_mean, test_var)``.
    """
    layers = model.norm_layers
    model.clear_stat_overrides()
    for layer in layers:
        layer.mix_rho = rho
    model.net.forward_features(_padded_whole(work, model))
    recorded = []
    for layer in layers:
        mean_t, var_t = layer.recorded
        recorded.append((mean_t, var_t))
        layer.override = ((1 - rho) * layer.running_mean + rho * mean_t,
                          (1 - rho) * layer.running_var + rho * var_t)
        layer.mix_rho = None
        layer.recorded = None
    return recorded


def bnadapt_predict(model, vol: Volume, cfg: StrategyConfig = StrategyConfig()) -> AdaptationResult:
    require_batch_norm(model, "bnadapt")
    started = time.perf_counter()
    with _Reset(model):
        work = to_working_grid(vol, cfg.resample_isotropic)
        model.set_stats_source("frozen_source")
        set_mixed_statistics(model, work, cfg.rho)
        return make_result(_predict(model, work, cfg), vol, started=started)


def entropy_weights(mean_entropies, temperature: float) -> np.ndarray:
    scores = -np.asarray(mean_entropies, dtype=np.float64) / temperature
    return softmax(scores)


def intent_predict(model, vol: Volume, cfg: StrategyConfig = StrategyConfig()) -> AdaptationResult:
    """Entropy-weighted ensemble over source/test statistic interpolations."""
    require_batch_norm(model, "intent")
    started = time.perf_counter()
    with _Reset(model):
        work = to_working_grid(vol, cfg.resample_isotropic)
        model.set_stats_source("frozen_source")
        candidates, entropies = [], []
        for alpha in cfg.alphas:
            set_mixed_statistics(model, work, alpha)
            p = _predict(model, work, cfg)
            candidates.append(p.data)
            entropies.append(float(binary_entropy(p.data).mean()))
        model.clear_stat_overrides()
        weights = entropy_weights(entropies, cfg.temperature)
        fused = np.zeros_like(candidates[0])
        for w, p in zip(weights, candidates):
            fused += w * p
        probs = ProbabilityVolume(np.clip(fused, 0, 1), spacing=work.spacing, origin=work.origin)
        return make_result(probs, vol, started=started, weights=weights.tolist(), entropies=entropies)


def _augment(x: torch.Tensor, name: str) -> torch.Tensor:
    axis = AUGMENTATIONS[name]
    return x if axis is None else torch.flip(x, dims=(2 + axis,))


def memo_adapt(model, vol: Volume, cfg: StrategyConfig = StrategyConfig()) -> AdaptationResult:
    """Marginal-entropy minimization over flip augmentations, all parameters."""
    started = time.perf_counter()
    with _Reset(model):
        model.set_stats_source(model.config.norm.stats_source)
        work = to_working_grid(vol, cfg.resample_isotropic)
        params = prepare_for_adaptation(model, "all_parameters")
        optimizer = make_optimizer(params, cfg.lr, cfg.momentum)
        trace = []
        for patch in _patch_stream(work, model, cfg):
            for _ in range(cfg.steps_per_patch):
                optimizer.zero_grad(set_to_none=True)
                batch = torch.cat([_augment(patch, a) for a in cfg.augmentations])
                probs = torch.sigmoid(model.forward(batch))
                aligned = [_augment(p[None], a) for p, a in zip(probs, cfg.augmentations)]
                marginal = torch.cat(aligned).mean(dim=0)
                loss = mean_binary_entropy(marginal)
                loss.backward()
                optimizer.step()
                trace.append(loss.item())
        for p in params:
            p.requires_grad_(False)
        return make_result(_predict(model, work, cfg), vol, started=started, entropy_trace=trace)


def run_method(method: str, model, vol: Volume, muvi_cfg: Optional[AdaptationConfig] = None,
               strategy_cfg: Optional[StrategyConfig] = None, ablate: Optional[str] = None,
               log_path=None) -> AdaptationResult:
    """Dispatch by method name (the CLI's ``--method``)."""
    strategy_cfg = strategy_cfg or StrategyConfig()
    if method == "muvi":
        cfg = muvi_cfg or AdaptationConfig()
        if ablate:
            cfg = ablation_variant(cfg, ablate)
        return adapt_single_image(model, vol, cfg, log_path=log_path)
    table = {
        "none": baseline_predict,
        "ptn": ptn_predict,
        "tent": tent_adapt,
        "bnadapt": bnadapt_predict,
        "intent": intent_predict,
        "memo": memo_adapt,
    }
    if method not in table:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    return table[method](model, vol, strategy_cfg)
