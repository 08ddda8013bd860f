"""Shared test utilities (imported by test modules via the tests/ path)."""

import numpy as np
import torch

from muvi_tta.model import NormPolicy, build_toy_unet


def tiny_model(seed=0, stats="frozen_source", kind="batch_norm"):
    """Two-level, one-conv-per-block network in float64 with non-trivial BN state."""
    norm = NormPolicy.batch(stats) if kind == "batch_norm" else NormPolicy.instance()
    model = build_toy_unet(2, 2, norm, (8, 8, 8), seed=seed, convs_per_block=1).to(torch.float64)
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for layer in model.norm_layers:
            layer.weight.copy_(1 + 0.2 * torch.randn(layer.channels, generator=g, dtype=torch.float64))
            layer.bias.copy_(0.1 * torch.randn(layer.channels, generator=g, dtype=torch.float64))
            if kind == "batch_norm":
                layer.running_mean.copy_(0.1 * torch.randn(layer.channels, generator=g, dtype=torch.float64))
                layer.running_var.copy_(0.5 + torch.rand(layer.channels, generator=g, dtype=torch.float64))
    return model


def finite_difference_check(model, loss_fn, n_coords=40, h=1e-5, seed=0) -> float:
    """Relative error between autograd and central differences on sampled coordinates."""
    params = [p for p in model.net.parameters()]
    for p in params:
        p.requires_grad_(True)
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]

    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for _ in range(n_coords):
        k = int(rng.integers(len(params)))
        p = params[k]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss_fn().item()
            p[idx] = orig - h
            down = loss_fn().item()
            p[idx] = orig
        numeric.append((up - down) / (2 * h))
        analytic.append(grads[k][idx].item())
    analytic, numeric = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))
