"""Segmentation-network contract and a small 3D U-Net with switchable normalization."""

from __future__ import annotations

import contextlib
import copy
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeMismatch, StateMismatch

NORM_KINDS = ("batch_norm", "instance_norm")
STATS_SOURCES = ("frozen_source", "current_input")
SCOPES = ("norm_affine_only", "all_parameters")
EPS = 1e-5


@dataclass(frozen=True)
class NormPolicy:
    kind: str = "batch_norm"
    stats_source: str = "frozen_source"
    affine_trainable: bool = True

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ConfigError(f"unknown norm kind {self.kind!r}")
        if self.stats_source not in STATS_SOURCES:
            raise ConfigError(f"unknown stats source {self.stats_source!r}")
        if self.kind == "instance_norm" and self.stats_source != "current_input":
            raise ConfigError("instance normalization always uses current-input statistics")

    @classmethod
    def batch(cls, stats_source="frozen_source", affine_trainable=True):
        return cls("batch_norm", stats_source, affine_trainable)

    @classmethod
    def instance(cls, affine_trainable=True):
        return cls("instance_norm", "current_input", affine_trainable)


class AdaptiveNorm3d(nn.Module):
    """Batch or instance normalization whose statistics source can be swapped at runtime.

    Batch-norm evaluation modes, in order of precedence:

    * ``mix_rho`` set: normalize with ``(1 - rho) * source + rho * current`` and
      remember the current-input statistics in ``recorded``;
    * ``override`` set: normalize with the given ``(mean, var)``;
    * ``stats_source == "current_input"``: per-call input statistics, running
      buffers untouched;
    * otherwise the frozen running (source) statistics.

    In ``train()`` mode batch norm behaves as usual and updates its buffers.
    """

    def __init__(self, channels: int, kind: str = "batch_norm", affine: bool = True,
                 eps: float = EPS, momentum: float = 0.1):
        super().__init__()
        if kind not in NORM_KINDS:
            raise ConfigError(f"unknown norm kind {kind!r}")
        self.channels = channels
        self.kind = kind
        self.eps = eps
        self.momentum = momentum
        if affine:
            self.weight = nn.Parameter(torch.ones(channels))
            self.bias = nn.Parameter(torch.zeros(channels))
        else:
            self.register_parameter("weight", None)
            self.register_parameter("bias", None)
        if kind == "batch_norm":
            self.register_buffer("running_mean", torch.zeros(channels))
            self.register_buffer("running_var", torch.ones(channels))
            self.register_buffer("num_batches_tracked", torch.tensor(0, dtype=torch.long))
        self.stats_source = "frozen_source" if kind == "batch_norm" else "current_input"
        self.override: Optional[tuple[torch.Tensor, torch.Tensor]] = None
        self.mix_rho: Optional[float] = None
        self.recorded: Optional[tuple[torch.Tensor, torch.Tensor]] = None

    def extra_repr(self):
        return f"{self.channels}, kind={self.kind}, eps={self.eps}, stats={self.stats_source}"

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "instance_norm":
            return F.instance_norm(x, weight=self.weight, bias=self.bias, eps=self.eps)
        if self.training:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                                True, self.momentum, self.eps)
        if self.mix_rho is not None:
            dims = [0] + list(range(2, x.ndim))
            mean = x.detach().mean(dims)
            var = x.detach().var(dims, unbiased=False)
            self.recorded = (mean, var)
            rho = self.mix_rho
            mixed_mean = (1 - rho) * self.running_mean + rho * mean
            mixed_var = (1 - rho) * self.running_var + rho * var
            return F.batch_norm(x, mixed_mean, mixed_var, self.weight, self.bias, False, 0.0, self.eps)
        if self.override is not None:
            mean, var = self.override
            return F.batch_norm(x, mean, var, self.weight, self.bias, False, 0.0, self.eps)
        if self.stats_source == "current_input":
            return F.batch_norm(x, None, None, self.weight, self.bias, True, 0.0, self.eps)
        return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                            False, 0.0, self.eps)


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, norm_kind: str, affine: bool, convs: int = 2):
        layers = []
        for i in range(convs):
            layers += [
                nn.Conv3d(cin if i == 0 else cout, cout, 3, padding=1, bias=False),
                AdaptiveNorm3d(cout, norm_kind, affine),
                nn.LeakyReLU(0.01),
            ]
        super().__init__(*layers)


class ToyUNet3D(nn.Module):
    """Encoder-decoder with skip connections and a single-channel logit head.

    ``depth`` counts the 2x downsamplings; the deepest encoder block is the
    bottleneck whose globally pooled activations serve as the feature embedding.
    """

    def __init__(self, channels_base: int = 8, depth: int = 3, norm_kind: str = "batch_norm",
                 affine: bool = True, convs_per_block: int = 2, in_channels: int = 1):
        super().__init__()
        chans = [channels_base * 2**i for i in range(depth + 1)]
        self.encoders = nn.ModuleList()
        cin = in_channels
        for c in chans:
            self.encoders.append(ConvBlock(cin, c, norm_kind, affine, convs_per_block))
            cin = c
        self.ups = nn.ModuleList(
            nn.ConvTranspose3d(chans[i + 1], chans[i], 2, stride=2, bias=False) for i in reversed(range(depth))
        )
        self.decoders = nn.ModuleList(
            ConvBlock(2 * chans[i], chans[i], norm_kind, affine, convs_per_block) for i in reversed(range(depth))
        )
        self.head = nn.Conv3d(chans[0], 1, 1)

    def forward_features(self, x):
        skips = []
        for enc in self.encoders[:-1]:
            x = enc(x)
            skips.append(x)
            x = F.max_pool3d(x, 2)
        bottleneck = self.encoders[-1](x)
        x = bottleneck
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x), bottleneck.mean(dim=(2, 3, 4))

    def forward(self, x):
        return self.forward_features(x)[0]


@dataclass(frozen=True)
class ModelConfig:
    channels_base: int = 8
    depth: int = 3
    norm: NormPolicy = field(default_factory=NormPolicy)
    patch_size: tuple[int, int, int] = (64, 64, 64)
    seed: int = 0
    convs_per_block: int = 2

    def to_dict(self) -> dict:
        out = asdict(self)
        out["patch_size"] = list(self.patch_size)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["norm"] = NormPolicy(**d["norm"])
        d["patch_size"] = tuple(int(p) for p in d["patch_size"])
        return cls(**d)


@dataclass
class ModelState:
    """Exact copy of everything ``restore`` needs to put a model back."""

    signature: tuple
    tensors: dict
    requires_grad: dict
    stats_source: str
    training: bool


class SegmentationModel:
    """Stateful handle around a network: forward/features, parameter groups,
    normalization policy, and snapshot/restore."""

    def __init__(self, net: ToyUNet3D, config: ModelConfig, metadata: Optional[dict] = None):
        self.net = net
        self.config = config
        self.metadata = dict(metadata or {})
        self.set_stats_source(config.norm.stats_source)

    # -- basic properties ------------------------------------------------
    @property
    def patch_size(self) -> tuple[int, int, int]:
        return tuple(self.config.patch_size)

    @property
    def norm_kind(self) -> str:
        return self.config.norm.kind

    @property
    def norm_layers(self) -> list[AdaptiveNorm3d]:
        return [m for m in self.net.modules() if isinstance(m, AdaptiveNorm3d)]

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def to(self, dtype) -> "SegmentationModel":
        self.net.to(dtype)
        return self

    def train(self):
        self.net.train()
        return self

    def eval(self):
        self.net.eval()
        return self

    # -- normalization policy --------------------------------------------
    def set_stats_source(self, source: str):
        if source not in STATS_SOURCES:
            raise ConfigError(f"unknown stats source {source!r}")
        if self.norm_kind == "instance_norm":
            source = "current_input"
        for layer in self.norm_layers:
            layer.stats_source = source

    @property
    def stats_source(self) -> str:
        layers = self.norm_layers
        return layers[0].stats_source if layers else "frozen_source"

    @contextlib.contextmanager
    def stats_mode(self, source: str) -> Iterator["SegmentationModel"]:
        previous = self.stats_source
        self.set_stats_source(source)
        try:
            yield self
        finally:
            self.set_stats_source(previous)

    def clear_stat_overrides(self):
        for layer in self.norm_layers:
            layer.override = None
            layer.mix_rho = None
            layer.recorded = None

    # -- computation -------------------------------------------------------
    def _prepare(self, patch) -> tuple[torch.Tensor, int]:
        if isinstance(patch, torch.Tensor):
            x = patch
        else:
            x = torch.as_tensor(np.asarray(getattr(patch, "data", patch)))
        x = x.to(self.dtype)
        squeeze = 5 - x.ndim
        while x.ndim < 5:
            x = x.unsqueeze(0)
        if tuple(x.shape[-3:]) != self.patch_size:
            raise ShapeMismatch(f"patch shape {tuple(x.shape[-3:])} != model patch {self.patch_size}")
        return x, squeeze

    def forward_with_features(self, patch) -> tuple[torch.Tensor, torch.Tensor]:
        x, squeeze = self._prepare(patch)
        logits, feats = self.net.forward_features(x)
        for _ in range(squeeze):
            logits = logits.squeeze(0)
        if squeeze >= 2:
            feats = feats.squeeze(0)
        return logits, feats

    def forward(self, patch) -> torch.Tensor:
        """Logits with the same leading layout as the input (3D in, 3D out)."""
        return self.forward_with_features(patch)[0]

    __call__ = forward

    def features(self, patch) -> torch.Tensor:
        return self.forward_with_features(patch)[1]

    # -- parameters ------------------------------------------------------
    def trainable_parameters(self, scope: str = "all_parameters") -> dict[str, nn.Parameter]:
        if scope not in SCOPES:
            raise ConfigError(f"unknown parameter scope {scope!r}")
        if scope == "all_parameters":
            return dict(self.net.named_parameters())
        out = {}
        for name, module in self.net.named_modules():
            if isinstance(module, AdaptiveNorm3d) and module.weight is not None:
                out[f"{name}.weight"] = module.weight
                out[f"{name}.bias"] = module.bias
        return out

    # -- state -------------------------------------------------------------
    def _signature(self) -> tuple:
        return tuple((k, tuple(v.shape)) for k, v in self.net.state_dict().items())

    def snapshot(self) -> ModelState:
        return ModelState(
            signature=self._signature(),
            tensors={k: v.detach().clone() for k, v in self.net.state_dict().items()},
            requires_grad={k: p.requires_grad for k, p in self.net.named_parameters()},
            stats_source=self.stats_source,
            training=self.net.training,
        )

    def restore(self, state: ModelState) -> None:
        if state.signature != self._signature():
            raise StateMismatch("model state comes from a different architecture")
        with torch.no_grad():
            for k, v in self.net.state_dict().items():
                v.copy_(state.tensors[k])
        for k, p in self.net.named_parameters():
            p.requires_grad_(state.requires_grad[k])
            p.grad = None
        self.clear_stat_overrides()
        self.set_stats_source(state.stats_source)
        self.net.train(state.training)

    def copy(self) -> "SegmentationModel":
        return SegmentationModel(copy.deepcopy(self.net), self.config, self.metadata)

    def with_patch_size(self, patch_size) -> "SegmentationModel":
        """Same network with a different inference/adaptation window (fully convolutional)."""
        patch_size = tuple(int(p) for p in np.broadcast_to(patch_size, (3,)))
        factor = 2**self.config.depth
        if any(p % factor for p in patch_size):
            raise ConfigError(f"patch {patch_size} not divisible by 2^depth = {factor}")
        return SegmentationModel(copy.deepcopy(self.net), replace(self.config, patch_size=patch_size),
                                 self.metadata)

    # -- checkpoints -----------------------------------------------------
    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "config": self.config.to_dict(),
                "state_dict": self.net.state_dict(),
                "metadata": self.metadata,
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path) -> "SegmentationModel":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        config = ModelConfig.from_dict(blob["config"])
        model = build_toy_unet(config.channels_base, config.depth, config.norm, config.patch_size,
                               config.seed, convs_per_block=config.convs_per_block)
        model.net.load_state_dict(blob["state_dict"])
        model.metadata = blob.get("metadata", {})
        return model.eval()


def build_toy_unet(channels_base: int = 8, depth: int = 3, norm: Optional[NormPolicy] = None,
                   patch_size=(64, 64, 64), seed: int = 0, convs_per_block: int = 2,
                   zero_head: bool = False) -> SegmentationModel:
    norm = norm or NormPolicy()
    if depth < 2:
        raise ConfigError(f"depth must be >= 2, got {depth}")
    patch_size = tuple(int(p) for p in np.broadcast_to(patch_size, (3,)))
    factor = 2**depth
    if any(p % factor for p in patch_size):
        raise ConfigError(f"patch size {patch_size} is not divisible by 2**depth = {factor}")
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = ToyUNet3D(channels_base, depth, norm.kind, norm.affine_trainable, convs_per_block)
    finally:
        torch.random.set_rng_state(gen_state)
    if zero_head:
        nn.init.zeros_(net.head.weight)
        nn.init.zeros_(net.head.bias)
    config = ModelConfig(channels_base, depth, norm, patch_size, seed, convs_per_block)
    return SegmentationModel(net, config, {"seed": seed}).eval()
