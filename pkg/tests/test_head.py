import math

import pytest
import torch

from exceptions import ShapeError
from head import ce_loss, predict, softmax_probs
from models import IGNORE_INDEX, BackboneOutput
from prompts import bundle
from training import forward_logits


def test_logits_shape(backbone, head, category, source_scene, images):
    logits = forward_logits(backbone, head, images, bundle(category, source_scene))
    assert logits.shape == (2, 3, 8, 8)
    assert bool(torch.isfinite(logits).all())


def test_predict_is_deterministic(backbone, head, category, source_scene, images):
    out = backbone.extract_features(images, bundle(category, source_scene))
    assert torch.equal(predict(head, out), predict(head, out))


def test_attention_channels_are_consumed(backbone, head, category, source_scene, images):
    out = backbone.extract_features(images, bundle(category, source_scene))
    ablated = BackboneOutput(features=out.features, attentions=[torch.zeros_like(a) for a in out.attentions])
    assert not torch.allclose(predict(head, out), predict(head, ablated))


def test_predict_is_batch_order_equivariant(backbone, head, category, source_scene, images):
    out = backbone.extract_features(images, bundle(category, source_scene))
    order = torch.tensor([1, 0])
    swapped = BackboneOutput(features=[f[order] for f in out.features], attentions=[a[order] for a in out.attentions])
    assert torch.allclose(predict(head, swapped), predict(head, out)[order], atol=1e-12)


def test_scale_and_channel_mismatch(backbone, make_head, category, images):
    out = backbone.extract_features(images, bundle(category, None))
    with pytest.raises(ShapeError):
        make_head(num_tokens=4)(out)
    with pytest.raises(ShapeError):
        make_head(num_tokens=3)(BackboneOutput(features=out.features[:1], attentions=out.attentions[:1]))


def test_scene_channel_leaves_the_shared_initialization_alone(make_head):
    without, with_scene = make_head(num_tokens=3), make_head(num_tokens=4)
    for a, b in zip(without.laterals, with_scene.laterals):
        assert torch.equal(a.weight, b.weight[:, : a.in_channels])
        assert torch.equal(a.bias, b.bias)
        assert b.weight[:, a.in_channels :].abs().max() > 0
    for name, value in without.fuse.state_dict().items():
        assert torch.equal(value, with_scene.fuse.state_dict()[name]), name
    assert torch.equal(without.classifier.weight, with_scene.classifier.weight)
    assert not torch.equal(without.laterals[0].weight, make_head(num_tokens=3, seed=1).laterals[0].weight)


def test_head_construction_leaves_the_global_generator_alone(make_head):
    torch.manual_seed(11)
    expected = torch.rand(3)
    torch.manual_seed(11)
    make_head()
    assert torch.equal(torch.rand(3), expected)


def test_softmax_examples():
    probs = softmax_probs(torch.tensor([math.log(2.0), 0.0], dtype=torch.float64).view(1, 2, 1, 1))
    assert probs.flatten().tolist() == pytest.approx([2 / 3, 1 / 3], abs=1e-12)
    uniform = softmax_probs(torch.zeros(1, 4, 2, 2, dtype=torch.float64))
    assert torch.allclose(uniform, torch.full_like(uniform, 0.25))
    logits = torch.randn(2, 5, 3, 3, dtype=torch.float64)
    probs = softmax_probs(logits)
    assert torch.allclose(softmax_probs(logits + 7.5), probs, atol=1e-12)
    assert torch.allclose(probs.sum(dim=1), torch.ones(2, 3, 3, dtype=torch.float64), atol=1e-6)
    assert bool((probs >= 0).all())
    with pytest.raises(ValueError):
        softmax_probs(torch.tensor([[[[float("nan")]]]]))


def test_ce_hand_value():
    probs = torch.tensor([[0.5, 0.25], [0.5, 0.75]], dtype=torch.float64)  # [C, W]
    logits = probs.log().view(1, 2, 1, 2)
    labels = torch.tensor([[[0, 1]]])
    expected = (math.log(2.0) + math.log(4.0 / 3.0)) / 2.0
    assert ce_loss(logits, labels).item() == pytest.approx(expected, abs=1e-12)
    assert ce_loss(logits, labels).item() == pytest.approx(0.49041, abs=1e-5)


def test_ce_limits():
    labels = torch.tensor([[[0, 2], [1, 1]]])
    uniform = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
    assert ce_loss(uniform, labels).item() == pytest.approx(math.log(3.0), abs=1e-12)
    confident = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).double() * 100.0
    assert ce_loss(confident, labels).item() < 1e-30


def test_ce_gradient_matches_finite_differences(numgrad, rel_error):
    generator = torch.Generator().manual_seed(0)
    for _ in range(5):
        logits = torch.randn(1, 3, 2, 2, generator=generator, dtype=torch.float64, requires_grad=True)
        labels = torch.randint(0, 3, (1, 2, 2), generator=generator)
        (grad,) = torch.autograd.grad(ce_loss(logits, labels), logits)
        assert rel_error(grad, numgrad(lambda x: ce_loss(x, labels), logits)) < 1e-4


def test_ignored_pixels_have_no_influence():
    logits = torch.randn(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([[[0, IGNORE_INDEX], [2, 1]]])
    loss = ce_loss(logits, labels)
    (grad,) = torch.autograd.grad(loss, logits)
    assert torch.all(grad[0, :, 0, 1] == 0)
    perturbed = logits.detach().clone()
    perturbed[0, :, 0, 1] += torch.tensor([5.0, -3.0, 1.0], dtype=torch.float64)
    assert torch.equal(ce_loss(perturbed, labels), loss.detach())


def test_ce_errors():
    with pytest.raises(ValueError, match="ignored"):
        ce_loss(torch.zeros(1, 3, 2, 2), torch.full((1, 2, 2), IGNORE_INDEX))
    with pytest.raises(ShapeError):
        ce_loss(torch.zeros(1, 3, 2, 2), torch.zeros(1, 2, 3, dtype=torch.long))
    with pytest.raises(ValueError):
        ce_loss(torch.zeros(1, 3, 2, 2), torch.full((1, 2, 2), 3))
