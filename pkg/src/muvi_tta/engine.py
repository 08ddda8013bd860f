"""Single-image multi-view co-training adaptation (MuVi)."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError
from .inference import (
    from_working_grid,
    iter_patches,
    mean_probability,
    predict_views,
    to_working_grid,
)
from .losses import LossReport, LossWeights, total_loss
from .model import NormPolicy, SegmentationModel
from .pseudolabel import EntropyThresholds, PseudoLabel, fuse_mean, fuse_pseudolabel
from .volume import ALL_VIEWS, IDENTITY, LabelVolume, ProbabilityVolume, Volume, resample

ABLATIONS = ("no_source_bn", "no_entropy_labels", "no_consistency")


@dataclass(frozen=True)
class Ablation:
    use_entropy_fusion: bool = True
    use_consistency: bool = True
    use_source_bn_stats: bool = True


@dataclass(frozen=True)
class AdaptationConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    thresholds: EntropyThresholds = field(default_factory=EntropyThresholds)
    norm: NormPolicy = field(default_factory=NormPolicy)
    scope: str = "all_parameters"
    epochs: int = 1
    learning_rate: float = 1e-3
    momentum: float = 0.9
    patch_size: Optional[tuple[int, int, int]] = None
    overlap: float = 0.5
    weighting: str = "gaussian"
    ablation: Ablation = field(default_factory=Ablation)
    seed: int = 0
    final_views: str = "multiview"
    resample_isotropic: bool = True
    batch_size: int = 4

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.final_views not in ("multiview", "native"):
            raise ConfigError(f"final_views must be 'multiview' or 'native', got {self.final_views!r}")

    @property
    def stats_source(self) -> str:
        if not self.ablation.use_source_bn_stats:
            return "current_input"
        return self.norm.stats_source

    @property
    def effective_weights(self) -> LossWeights:
        if self.ablation.use_consistency:
            return self.weights
        return LossWeights(self.weights.lambda1, 0.0, 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = {"tau_by_view": dict(self.thresholds.tau_by_view), "native": self.thresholds.native}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["thresholds"] = EntropyThresholds(**d["thresholds"]) if "thresholds" in d else EntropyThresholds()
        d["norm"] = NormPolicy(**d.get("norm", {}))
        d["ablation"] = Ablation(**d.get("ablation", {}))
        if d.get("patch_size") is not None:
            d["patch_size"] = tuple(d["patch_size"])
        return cls(**d)


@dataclass
class AdaptationResult:
    prediction: LabelVolume
    probabilities: ProbabilityVolume
    loss_trace: list[LossReport]
    pseudolabel: Optional[PseudoLabel]
    wall_time: float
    skipped: Optional[str] = None
    extras: dict = field(default_factory=dict, repr=False)


def ablation_variant(cfg: AdaptationConfig, row: str) -> AdaptationConfig:
    if row == "no_source_bn":
        return replace(cfg, norm=replace(cfg.norm, stats_source="current_input"),
                       ablation=replace(cfg.ablation, use_source_bn_stats=False))
    if row == "no_entropy_labels":
        return replace(cfg, ablation=replace(cfg.ablation, use_entropy_fusion=False))
    if row == "no_consistency":
        return replace(cfg, weights=LossWeights(cfg.weights.lambda1, 0.0, 0.0),
                       ablation=replace(cfg.ablation, use_consistency=False))
    raise ConfigError(f"unknown ablation {row!r}; expected one of {ABLATIONS}")


def make_result(probs: ProbabilityVolume, reference: Volume, loss_trace=(), pseudolabel=None,
                started: float = 0.0, **extras) -> AdaptationResult:
    """Map working-grid probabilities back to ``reference`` and threshold at 0.5."""
    back = from_working_grid(probs, reference)
    prediction = LabelVolume((back.data > 0.5).astype(np.uint8), spacing=reference.spacing,
                             origin=reference.origin)
    return AdaptationResult(prediction, back, list(loss_trace), pseudolabel, time.perf_counter() - started,
                            extras=extras)


def final_views(mode: str):
    return ALL_VIEWS if mode == "multiview" else (IDENTITY,)


def _pseudolabel_to(reference: Volume, pseudo: PseudoLabel) -> PseudoLabel:
    if pseudo.labels.shape == reference.shape:
        return pseudo
    labels = resample(pseudo.labels, reference.spacing, "nearest", shape=reference.shape)
    accepted = resample(LabelVolume(pseudo.accepted.astype(np.uint8), spacing=pseudo.labels.spacing),
                        reference.spacing, "nearest", shape=reference.shape)
    return PseudoLabel(LabelVolume(labels.data, spacing=reference.spacing), accepted.data.astype(bool))


def make_optimizer(params, lr: float, momentum: float):
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=0.0)


def prepare_for_adaptation(model: SegmentationModel, scope: str):
    """Eval-mode normalization, gradients only where ``scope`` allows."""
    model.eval()
    trainable = model.trainable_parameters(scope)
    wanted = {id(p) for p in trainable.values()}
    for p in model.net.parameters():
        p.requires_grad_(id(p) in wanted)
    return list(trainable.values())


def adapt_single_image(model: SegmentationModel, vol: Volume, cfg: AdaptationConfig = AdaptationConfig(),
                       log_path=None) -> AdaptationResult:
    """Adapt ``model`` to one volume, predict, and reset the model.

    The model is always restored to its entry state, even on failure.
    """
    started = time.perf_counter()
    state = model.snapshot()
    try:
        if cfg.patch_size is not None and tuple(cfg.patch_size) != model.patch_size:
            raise ConfigError(f"config patch {cfg.patch_size} != model patch {model.patch_size}")
        model.eval()
        model.set_stats_source(cfg.stats_source)
        work = to_working_grid(vol, cfg.resample_isotropic)
        infer = dict(overlap=cfg.overlap, weighting=cfg.weighting, batch_size=cfg.batch_size)

        probs_by_view = predict_views(model, work, ALL_VIEWS, **infer)
        if cfg.ablation.use_entropy_fusion:
            pseudo = fuse_pseudolabel(probs_by_view, cfg.thresholds)
        else:
            pseudo = fuse_mean(probs_by_view)

        padded, _, grid = iter_patches(work.data, model.patch_size, cfg.overlap)
        label_padded, _, _ = iter_patches(pseudo.labels.data, model.patch_size, cfg.overlap)
        if not grid.is_cubic:
            raise ConfigError(f"multi-view co-training needs a cubic patch, got {grid.patch_size}")

        params = prepare_for_adaptation(model, cfg.scope)
        optimizer = make_optimizer(params, cfg.learning_rate, cfg.momentum)
        weights = cfg.effective_weights
        rng = np.random.default_rng(cfg.seed)
        trace: list[LossReport] = []
        log = open(log_path, "a") if log_path else None
        try:
            for epoch in range(cfg.epochs):
                for idx in rng.permutation(len(grid)):
                    sl = grid.slices(grid.origins[idx])
                    patch = torch.from_numpy(np.ascontiguousarray(padded[sl])).to(model.dtype)
                    target = torch.from_numpy(np.ascontiguousarray(label_padded[sl])).to(model.dtype)
                    optimizer.zero_grad(set_to_none=True)
                    report = total_loss(model, patch, target, weights)
                    if report.loss.requires_grad:
                        report.loss.backward()
                        optimizer.step()
                    report.loss = None
                    trace.append(report)
                    if log:
                        log.write(json.dumps({"epoch": epoch, "patch": int(idx), **report.as_dict()}) + "\n")
        finally:
            if log:
                log.close()

        for p in model.net.parameters():
            p.requires_grad_(False)
        final = predict_views(model, work, final_views(cfg.final_views), **infer)
        probs = mean_probability(final)
        return make_result(probs, vol, trace, _pseudolabel_to(vol, pseudo), started,
                           probs_by_view=probs_by_view)
    finally:
        model.restore(state)


def write_run_dir(run_dir, result: AdaptationResult, config: dict) -> Path:
    """config.json, pseudolabel/prediction NIfTIs, loss_trace.jsonl and timing.json."""
    from .io import save_nifti

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    save_nifti(result.prediction, run_dir / "prediction.nii.gz")
    if result.pseudolabel is not None:
        save_nifti(result.pseudolabel.labels, run_dir / "pseudolabel.nii.gz")
    with open(run_dir / "loss_trace.jsonl", "w") as fh:
        for i, report in enumerate(result.loss_trace):
            fh.write(json.dumps({"step": i, **report.as_dict()}) + "\n")
    (run_dir / "timing.json").write_text(json.dumps({"wall_time": result.wall_time}))
    return run_dir
