import os

import pytest
import torch

from backbone import DiffusionBackbone
from config import BackboneConfig, DatasetSpec, LayoutConfig, SplitRange
from head import SegmentationHead
from prompts import build_category_prompt, build_vocabulary, make_scene_prompt
from synthetic import SceneDataset, domain_spec, gen_scene

CLASS_NAMES = ["sky", "road", "car"]
DOMAINS = ["domainA", "domainB", "domainC"]


def pytest_collection_modifyitems(config, items):
    if os.environ.get("PTSEG_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set PTSEG_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def tiny_backbone_config(**overrides) -> BackboneConfig:
    values = dict(
        widths=[4, 8],
        token_dim=6,
        attention_dim=4,
        timesteps=10,
        feature_timestep=1,
        pretrain_steps=0,
        batch_size=2,
        lr=1e-3,
    )
    values.update(overrides)
    return BackboneConfig(**values)


@pytest.fixture
def make_backbone():
    """Factory for tiny backbones; double precision and frozen unless asked otherwise."""

    def factory(seed=0, double=True, freeze=True, **overrides):
        backbone = DiffusionBackbone(tiny_backbone_config(**overrides), build_vocabulary(CLASS_NAMES, DOMAINS), seed=seed)
        if double:
            backbone = backbone.double()
        if freeze:
            backbone.freeze()
        return backbone

    return factory


@pytest.fixture
def backbone(make_backbone):
    return make_backbone()


@pytest.fixture
def category(backbone):
    return build_category_prompt(backbone.text_encoder, CLASS_NAMES)


@pytest.fixture
def source_scene(backbone):
    return make_scene_prompt("source_text", "a domainA photo", backbone)


@pytest.fixture
def make_head():
    def factory(num_tokens=4, num_classes=3, seed=0):
        return SegmentationHead([4, 8], num_tokens, num_classes, width=8, seed=seed).double()

    return factory


@pytest.fixture
def head(make_head):
    return make_head()


@pytest.fixture
def images():
    generator = torch.Generator().manual_seed(7)
    return torch.rand(2, 3, 8, 8, generator=generator, dtype=torch.float64)


@pytest.fixture
def make_dataset():
    """Small in-memory scene dataset rendered at 16x16."""

    def factory(seeds=range(4), domain="domainA", size=16):
        samples = [gen_scene(s, domain_spec(domain), class_names=CLASS_NAMES, height=size, width=size) for s in seeds]
        return SceneDataset.from_samples(samples, DOMAINS)

    return factory


@pytest.fixture
def tiny_spec():
    return DatasetSpec(
        domains=["domainA", "domainC"],
        splits={
            "train": SplitRange(start=0, stop=6),
            "val": SplitRange(start=100, stop=102),
            "test": SplitRange(start=200, stop=203),
        },
        class_names=CLASS_NAMES,
        height=16,
        width=16,
        layout=LayoutConfig(),
    )


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of the scalar ``fn(x)`` by central differences, one coordinate at a time."""
    point = x.detach().clone()
    flat = point.view(-1)
    grad = torch.zeros_like(point)
    for i in range(flat.numel()):
        original = flat[i].item()
        flat[i] = original + h
        plus = float(fn(point))
        flat[i] = original - h
        minus = float(fn(point))
        flat[i] = original
        grad.view(-1)[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(a.abs().max().item(), b.abs().max().item(), 1e-12)
    return (a - b).abs().max().item() / scale


@pytest.fixture
def numgrad():
    return central_difference


@pytest.fixture
def rel_error():
    return relative_error
