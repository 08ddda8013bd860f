from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import make_volume
from muvi_tta import engine
from muvi_tta.baselines import StrategyConfig, baseline_predict
from muvi_tta.engine import AdaptationConfig, ablation_variant, adapt_single_image, write_run_dir
from muvi_tta.errors import ConfigError
from muvi_tta.inference import iter_patches
from muvi_tta.losses import LossWeights
from muvi_tta.pseudolabel import fuse_mean, fuse_pseudolabel

CFG = AdaptationConfig(learning_rate=1e-2)


def state_of(model):
    return {k: v.clone() for k, v in model.net.state_dict().items()}


def assert_same_state(model, before):
    after = model.net.state_dict()
    for k, v in before.items():
        assert torch.equal(v, after[k]), k


def n_patches(model, vol):
    return len(iter_patches(vol.data, model.patch_size, 0.5)[2])


class TestConfig:
    def test_epochs(self):
        with pytest.raises(ConfigError):
            AdaptationConfig(epochs=0)

    def test_round_trip(self):
        cfg = ablation_variant(AdaptationConfig(patch_size=(16, 16, 16)), "no_consistency")
        assert AdaptationConfig.from_dict(cfg.to_dict()) == cfg

    def test_patch_mismatch(self, bn_model, volume):
        with pytest.raises(ConfigError):
            adapt_single_image(bn_model, volume, replace(CFG, patch_size=(32, 32, 32)))


class TestAdaptation:
    def test_zero_lr_is_three_view_baseline(self, bn_model, volume):
        adapted = adapt_single_image(bn_model, volume, replace(CFG, learning_rate=0.0))
        base = baseline_predict(bn_model, volume, StrategyConfig())
        np.testing.assert_allclose(adapted.probabilities.data, base.probabilities.data, atol=1e-6, rtol=0)

    def test_prediction_is_thresholded(self, bn_model, volume):
        r = adapt_single_image(bn_model, volume, CFG)
        np.testing.assert_array_equal(r.prediction.data, (r.probabilities.data > 0.5).astype(np.uint8))
        assert r.prediction.shape == volume.shape

    def test_trace_length(self, bn_model, volume):
        n = n_patches(bn_model, volume)
        assert len(adapt_single_image(bn_model, volume, CFG).loss_trace) == n
        assert len(adapt_single_image(bn_model, volume, replace(CFG, epochs=2)).loss_trace) == 2 * n

    def test_parameters_move(self, bn_model, volume):
        a = adapt_single_image(bn_model, volume, CFG)
        b = adapt_single_image(bn_model, volume, replace(CFG, learning_rate=0.0))
        assert np.abs(a.probabilities.data - b.probabilities.data).max() > 0

    def test_determinism(self, bn_model, volume):
        a = adapt_single_image(bn_model, volume, CFG)
        b = adapt_single_image(bn_model, volume, CFG)
        assert [r.as_dict() for r in a.loss_trace] == [r.as_dict() for r in b.loss_trace]
        np.testing.assert_array_equal(a.probabilities.data, b.probabilities.data)

    def test_anisotropic_volume(self, bn_model):
        vol = make_volume(1, shape=(24, 24, 12), spacing=(1.0, 1.0, 2.0))
        r = adapt_single_image(bn_model, vol, CFG)
        assert r.prediction.shape == vol.shape
        assert r.pseudolabel.labels.shape == vol.shape

    def test_instance_norm(self, in_model, volume):
        r = adapt_single_image(in_model, volume, replace(CFG, norm=in_model.config.norm))
        assert len(r.loss_trace) == n_patches(in_model, volume)


class TestReset:
    def test_state_restored(self, bn_model, volume):
        before = state_of(bn_model)
        adapt_single_image(bn_model, volume, CFG)
        assert_same_state(bn_model, before)
        assert bn_model.stats_source == "frozen_source"
        assert not bn_model.net.training

    def test_restored_on_failure(self, bn_model, volume, monkeypatch):
        before = state_of(bn_model)
        real = engine.total_loss
        calls = []

        def failing(*args, **kwargs):
            calls.append(1)
            if len(calls) > 2:
                raise RuntimeError("interrupted")
            return real(*args, **kwargs)

        monkeypatch.setattr(engine, "total_loss", failing)
        with pytest.raises(RuntimeError):
            adapt_single_image(bn_model, volume, CFG)
        assert_same_state(bn_model, before)

    def test_a_then_b_equals_b(self, bn_model):
        a, b = make_volume(1), make_volume(2)
        alone = adapt_single_image(bn_model, b, CFG)
        adapt_single_image(bn_model, a, CFG)
        after = adapt_single_image(bn_model, b, CFG)
        np.testing.assert_allclose(after.probabilities.data, alone.probabilities.data, atol=1e-6, rtol=0)

    def test_frozen_statistics_through_epoch(self, bn_model, volume, monkeypatch):
        before = [(l.running_mean.clone(), l.running_var.clone()) for l in bn_model.norm_layers]
        seen = []
        real_restore = bn_model.restore

        def spy(state):
            seen.append([(l.running_mean.clone(), l.running_var.clone()) for l in bn_model.norm_layers])
            real_restore(state)

        monkeypatch.setattr(bn_model, "restore", spy)
        adapt_single_image(bn_model, volume, CFG)
        for (m0, v0), (m1, v1) in zip(before, seen[0]):
            assert torch.equal(m0, m1) and torch.equal(v0, v1)


class TestAblations:
    def test_unknown(self):
        with pytest.raises(ConfigError):
            ablation_variant(CFG, "no_everything")

    def test_no_consistency(self, bn_model, volume):
        cfg = ablation_variant(CFG, "no_consistency")
        assert cfg.effective_weights == LossWeights(1.0, 0.0, 0.0)
        r = adapt_single_image(bn_model, volume, cfg)
        assert all(t.consistency == 0 and t.cosine == 0 and t.total == t.sl for t in r.loss_trace)

    def test_no_entropy_labels(self, bn_model, volume):
        r = adapt_single_image(bn_model, volume, ablation_variant(CFG, "no_entropy_labels"))
        expected = fuse_mean(r.extras["probs_by_view"])
        np.testing.assert_array_equal(r.pseudolabel.labels.data, expected.labels.data)

    def test_full_uses_entropy_fusion(self, bn_model, volume):
        r = adapt_single_image(bn_model, volume, CFG)
        expected = fuse_pseudolabel(r.extras["probs_by_view"], CFG.thresholds)
        np.testing.assert_array_equal(r.pseudolabel.labels.data, expected.labels.data)

    def test_no_source_bn_routes_stats(self, bn_model, volume, monkeypatch):
        cfg = ablation_variant(CFG, "no_source_bn")
        assert cfg.stats_source == "current_input"
        seen = []
        real = engine.total_loss

        def spy(model, *args, **kwargs):
            seen.append({l.stats_source for l in model.norm_layers})
            return real(model, *args, **kwargs)

        monkeypatch.setattr(engine, "total_loss", spy)
        adapt_single_image(bn_model, volume, cfg)
        assert seen and all(s == {"current_input"} for s in seen)

    def test_no_source_bn_ignores_running_stats(self, bn_model, volume):
        cfg = ablation_variant(replace(CFG, learning_rate=0.0), "no_source_bn")
        a = adapt_single_image(bn_model, volume, cfg)
        with torch.no_grad():
            for layer in bn_model.norm_layers:
                layer.running_mean.add_(3.0)
        b = adapt_single_image(bn_model, volume, cfg)
        np.testing.assert_array_equal(a.probabilities.data, b.probabilities.data)


def test_run_dir(bn_model, volume, tmp_path):
    r = adapt_single_image(bn_model, volume, CFG)
    out = write_run_dir(tmp_path / "run", r, CFG.to_dict())
    names = {p.name for p in out.iterdir()}
    assert names == {"config.json", "prediction.nii.gz", "pseudolabel.nii.gz", "loss_trace.jsonl", "timing.json"}
    assert len((out / "loss_trace.jsonl").read_text().splitlines()) == len(r.loss_trace)
