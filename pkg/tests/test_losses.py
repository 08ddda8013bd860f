import math

import pytest
import torch

from muvi_tta.errors import DegenerateEmbeddingWarning, ShapeMismatch
from muvi_tta.losses import (
    LossWeights,
    bce_loss,
    consistency_from_outputs,
    cosine_distance,
    cosine_feature_loss,
    cosine_from_outputs,
    dice_loss,
    self_learning_from_outputs,
    self_learning_loss,
    total_loss,
    view_consistency_loss,
    view_outputs,
)
from muvi_tta.model import NormPolicy, build_toy_unet
from muvi_tta.volume import ALL_VIEWS, PI1, PI2, permute_array

from helpers import finite_difference_check, tiny_model

N = 8**3


def val(t):
    return t.detach().item()


def rand(seed, shape=(1, 1, 8, 8, 8)):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class PointwiseModel:
    """Voxelwise affine logits: every view prediction aligns exactly with the original."""

    dtype = torch.float64

    def __init__(self, a=1.5, b=-0.3):
        self.a = torch.tensor(a, dtype=torch.float64, requires_grad=True)
        self.b = torch.tensor(b, dtype=torch.float64, requires_grad=True)

    def forward_with_features(self, x):
        logits = self.a * x + self.b
        feats = torch.stack([x.mean((1, 2, 3, 4)), (x**2).mean((1, 2, 3, 4))], dim=1) * self.a
        return logits, feats


class TestDice:
    def test_perfect_overlap(self):
        t = (rand(0) > 0.5).double()
        assert val(dice_loss(t, t)) <= 1.0 / (2 * val(t.sum()) + 1.0) + 1e-15

    def test_disjoint(self):
        p = torch.zeros(N, dtype=torch.float64)
        t = torch.zeros(N, dtype=torch.float64)
        p[:10] = 1
        t[10:30] = 1
        assert val(dice_loss(p, t)) == pytest.approx(1 - 1 / (10 + 20 + 1), abs=1e-15)

    def test_half_probabilities(self):
        p = torch.full((8,), 0.5, dtype=torch.float64)
        t = torch.tensor([1, 1, 1, 1, 0, 0, 0, 0], dtype=torch.float64)
        assert val(dice_loss(p, t, smooth=0.0)) == pytest.approx(0.5, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dice_loss(torch.zeros(3), torch.zeros(4))


class TestBCE:
    def test_perfect(self):
        t = (rand(1) > 0.5).double()
        assert val(bce_loss(t, t)) == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)

    def test_uniform_prediction(self):
        t = (rand(2) > 0.5).double()
        assert val(bce_loss(torch.full_like(t, 0.5), t)) == pytest.approx(math.log(2), abs=1e-15)

    def test_single_voxel(self):
        assert val(bce_loss(torch.tensor([0.9]), torch.tensor([1.0]))) == pytest.approx(0.10536051565782628,
                                                                                              abs=1e-6)

    def test_non_negative(self):
        assert val(bce_loss(rand(3), rand(4))) >= 0


@pytest.mark.parametrize("view", [PI1, PI2], ids=lambda v: v.id)
def test_dice_bce_permutation_equivariant(view):
    p, t = rand(5), (rand(6) > 0.3).double()
    assert val(dice_loss(permute_array(p, view), permute_array(t, view))) == val(dice_loss(p, t))
    assert val(bce_loss(permute_array(p, view), permute_array(t, view))) == val(bce_loss(p, t))


class TestSelfLearning:
    def test_exact_prediction_is_near_zero(self):
        # a pointwise model saturated to the label in every view
        label = (rand(7) > 0.5).double()
        model = PointwiseModel(a=60.0, b=-30.0)
        loss = self_learning_loss(model, label, label)
        assert val(loss) < 3 * (1 / (2 * val(label.sum()) + 1) + 1e-6)

    def test_zero_logits_half_foreground(self):
        model = build_toy_unet(2, 2, NormPolicy.batch(), (8, 8, 8), zero_head=True).to(torch.float64)
        label = torch.zeros(1, 1, 8, 8, 8, dtype=torch.float64)
        label[..., :4] = 1
        single = val(dice_loss(torch.full_like(label, 0.5), label) + bce_loss(torch.full_like(label, 0.5), label))
        assert val(self_learning_loss(model, rand(8), label)) == pytest.approx(3 * single, abs=1e-12)

    def test_zero_logits_empty_label(self):
        model = build_toy_unet(2, 2, NormPolicy.batch(), (8, 8, 8), zero_head=True).to(torch.float64)
        label = torch.zeros(1, 1, 8, 8, 8, dtype=torch.float64)
        per_view = (1 - 1 / (0.5 * N + 1)) + math.log(2)
        assert val(self_learning_loss(model, rand(9), label)) == pytest.approx(3 * per_view, abs=1e-12)


class TestConsistency:
    def test_equivariant_model_hits_floor(self):
        model = PointwiseModel()
        x = rand(10)
        p = torch.sigmoid(model.a * x + model.b).detach()
        floor = val(dice_loss(p, p) + bce_loss(p, p))
        assert val(view_consistency_loss(model, x)) == pytest.approx(2 * floor, abs=1e-12)

    def test_bce_self_target_is_entropy(self):
        p = rand(11) * 0.98 + 0.01
        entropy_nats = val((-(p * torch.log(p) + (1 - p) * torch.log(1 - p))).mean())
        assert val(bce_loss(p, p)) == pytest.approx(entropy_nats, abs=1e-12)

    def test_zero_logits(self):
        model = build_toy_unet(2, 2, NormPolicy.batch(), (8, 8, 8), zero_head=True).to(torch.float64)
        floor = 1 - (0.5 * N + 1) / (N + 1) + math.log(2)
        assert val(view_consistency_loss(model, rand(12))) == pytest.approx(2 * floor, abs=1e-12)

    def test_target_is_gradient_stopped(self):
        model = tiny_model()
        probs, _ = view_outputs(model, rand(13), ALL_VIEWS)
        loss = consistency_from_outputs(probs, ALL_VIEWS)
        (grad_identity,) = torch.autograd.grad(loss, probs[0], allow_unused=True)
        assert grad_identity is None


class TestCosine:
    def g(self, *values):
        return torch.tensor([values], dtype=torch.float64)

    def test_identical(self):
        g = self.g(1.0, 2.0, -1.0)
        assert val(cosine_from_outputs([g, g.clone(), g.clone()])) == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        assert val(cosine_from_outputs([self.g(1, 0, 0), self.g(0, 1, 0), self.g(0, 0, 1)])) == pytest.approx(2.0)

    def test_antiparallel(self):
        g = self.g(1.0, -2.0, 0.5)
        assert val(cosine_from_outputs([g, -g, -g])) == pytest.approx(4.0)

    def test_scale_invariance(self):
        rng = torch.Generator().manual_seed(0)
        g0, g1, g2 = (torch.randn(1, 16, generator=rng, dtype=torch.float64) for _ in range(3))
        base = val(cosine_from_outputs([g0, g1, g2]))
        for c in (1e-3, 0.5, 7.0, 1e4):
            assert val(cosine_from_outputs([g0, c * g1, g2])) == pytest.approx(base, abs=1e-9)

    def test_degenerate_embedding(self):
        with pytest.warns(DegenerateEmbeddingWarning):
            d = cosine_distance(torch.zeros(1, 4), torch.ones(1, 4))
        assert val(d) == 1.0

    def test_range_on_model(self):
        value = val(cosine_feature_loss(tiny_model(), rand(14)))
        assert 0 <= value <= 4


class TestTotal:
    def test_sl_only(self):
        model, x, y = tiny_model(), rand(15), (rand(16) > 0.6).double()
        report = total_loss(model, x, y, LossWeights(1, 0, 0))
        assert report.total == report.sl
        assert report.consistency == 0 and report.cosine == 0
        assert val(report.loss) == pytest.approx(val(self_learning_loss(model, x, y)), abs=1e-12)

    def test_all_zero(self):
        model, x, y = tiny_model(), rand(17), (rand(18) > 0.6).double()
        report = total_loss(model, x, y, LossWeights(0, 0, 0))
        assert report.total == 0
        assert not report.loss.requires_grad

    def test_components(self):
        model, x, y = tiny_model(), rand(19), (rand(20) > 0.6).double()
        report = total_loss(model, x, y, LossWeights(1, 1, 1))
        expected = (val(self_learning_loss(model, x, y)) + val(view_consistency_loss(model, x))
                    + val(cosine_feature_loss(model, x)))
        assert report.total == pytest.approx(expected, abs=1e-12)
        assert report.total == pytest.approx(report.sl + report.consistency + report.cosine, abs=1e-12)

    def test_linearity(self):
        model, x, y = tiny_model(), rand(21), (rand(22) > 0.6).double()
        a = total_loss(model, x, y, LossWeights(1.0, 0.7, 0.3))
        b = total_loss(model, x, y, LossWeights(2.0, 0.7, 0.3))
        assert b.total - a.total == pytest.approx(a.sl, abs=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(-1, 0, 0)


class TestGradients:
    @pytest.mark.parametrize("stats", ["frozen_source", "current_input"])
    @pytest.mark.parametrize("term", ["sl", "consistency", "cosine", "total"])
    def test_finite_differences(self, term, stats):
        model = tiny_model(stats=stats)
        x, y = rand(30), (rand(31) > 0.6).double()
        with torch.no_grad():
            target = torch.sigmoid(model.forward(x)).clone()

        def loss_fn():
            if term == "sl":
                return self_learning_loss(model, x, y)
            if term == "consistency":
                return view_consistency_loss(model, x, target=target)
            if term == "cosine":
                return cosine_feature_loss(model, x)
            probs, feats = view_outputs(model, x, ALL_VIEWS)
            return (1.3 * self_learning_from_outputs(probs, y, ALL_VIEWS)
                    + 0.7 * consistency_from_outputs(probs, ALL_VIEWS, target)
                    + 0.4 * cosine_from_outputs(feats))

        assert finite_difference_check(model, loss_fn) <= 1e-4
