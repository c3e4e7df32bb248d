import json

import numpy as np
import pytest
from pydantic import ValidationError

from config import DatasetSpec, LayoutConfig, SplitRange
from exceptions import DatasetError, LayoutError
from log import read_jsonl
from synthetic import (
    DEFAULT_PALETTE,
    SceneDataset,
    apply_domain,
    domain_spec,
    expected_object_fraction,
    gen_dataset,
    gen_scene,
    object_shape,
)


@pytest.mark.parametrize("seed", [0, 7, 123])
def test_labels_are_domain_invariant(seed):
    samples = [gen_scene(seed, domain_spec(name)) for name in ("domainA", "domainB", "domainC")]
    for sample in samples[1:]:
        assert np.array_equal(sample.labels, samples[0].labels)
        assert not np.array_equal(sample.image, samples[0].image)


def test_generation_is_deterministic():
    a, b = gen_scene(5, domain_spec("domainC")), gen_scene(5, domain_spec("domainC"))
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.labels, gen_scene(6, domain_spec("domainC")).labels)


def test_identity_domain_keeps_the_render():
    render = np.random.default_rng(0).integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    assert np.array_equal(apply_domain(render, domain_spec("domainA"), seed=0), (render / 255.0).astype(np.float32))


def test_images_stay_on_the_unit_interval_and_8_bit_grid():
    for seed in range(20):
        for name in ("domainA", "domainB", "domainC"):
            sample = gen_scene(seed, domain_spec(name))
            assert sample.image.dtype == np.float32
            assert sample.image.shape == (3, 64, 64)
            assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0
            scaled = sample.image.astype(np.float64) * 255.0
            assert np.allclose(scaled, np.round(scaled), atol=1e-3)


def test_every_class_is_present():
    for seed in range(50):
        sample = gen_scene(seed, domain_spec("domainA"))
        assert np.unique(sample.labels).tolist() == list(range(len(DEFAULT_PALETTE)))


def test_last_drawn_class_covers_its_expected_area():
    names = list(DEFAULT_PALETTE)
    tree = names.index("tree")
    assert object_shape(tree) == "rectangle"
    fractions = [float((gen_scene(s, domain_spec("domainA")).labels == tree).mean()) for s in range(1000)]
    expected = expected_object_fraction("rectangle", LayoutConfig())
    assert expected == pytest.approx(0.0441)
    assert abs(np.mean(fractions) - expected) <= 0.2 * expected


def test_background_classes_split_the_uncovered_area():
    layout = LayoutConfig()
    labels = [gen_scene(s, domain_spec("domainA"), class_names=["sky", "road", "car"]).labels for s in range(1000)]
    car = expected_object_fraction("rectangle", layout)
    horizon = (layout.horizon_low + layout.horizon_high) / 2.0
    # the single object lands above the horizon with probability ~horizon
    assert np.mean([(m == 0).mean() for m in labels]) == pytest.approx(horizon * (1.0 - car), abs=0.01)
    assert np.mean([(m == 1).mean() for m in labels]) == pytest.approx((1.0 - horizon) * (1.0 - car), abs=0.01)
    assert np.mean([(m == 2).mean() for m in labels]) == pytest.approx(car, rel=0.1)


def test_first_drawn_object_loses_area_to_later_objects():
    names = list(DEFAULT_PALETTE)
    layout = LayoutConfig()
    car = names.index("car")
    assert object_shape(car) == "rectangle"
    visible = np.mean([(gen_scene(s, domain_spec("domainA")).labels == car).mean() for s in range(1000)])
    unoccluded = expected_object_fraction("rectangle", layout)
    later = sum(expected_object_fraction(object_shape(c), layout) for c in range(car + 1, len(names)))
    assert unoccluded * (1.0 - 2.0 * later) < visible < unoccluded


def test_unplaceable_layout():
    with pytest.raises(LayoutError):
        gen_scene(0, domain_spec("domainA"), LayoutConfig(min_size=1.0, max_size=1.0, max_attempts=3))


def test_unknown_domain():
    with pytest.raises(DatasetError):
        domain_spec("domainZ")


def test_custom_classes_get_colors():
    sample = gen_scene(0, domain_spec("domainB"), class_names=["sky", "road", "zebra", "kite"], height=32, width=32)
    assert np.unique(sample.labels).tolist() == [0, 1, 2, 3]


def test_overlapping_splits_are_rejected():
    with pytest.raises(ValidationError, match="overlap"):
        DatasetSpec(splits={"train": SplitRange(start=0, stop=10), "test": SplitRange(start=5, stop=15)})


def test_dataset_on_disk(tiny_spec, tmp_path):
    manifest = gen_dataset(tiny_spec, tmp_path / "data")
    records = read_jsonl(manifest)
    assert len(records) == (6 + 2 + 3) * 2
    assert set(records[0]) == {"id", "split", "domain", "seed", "image_path", "label_path"}
    assert (tmp_path / "data" / records[0]["image_path"]).is_file()
    stored = json.loads((tmp_path / "data" / "dataset.json").read_text(encoding="utf-8"))
    assert DatasetSpec(**stored) == tiny_spec

    data = SceneDataset.from_manifest(tmp_path / "data", "train")
    assert len(data) == 12
    assert [r["domain"] for r in data.records] == ["domainA"] * 6 + ["domainC"] * 6
    assert [r["seed"] for r in data.records[:6]] == list(range(6))
    image, labels, domain = data[7]
    sample = gen_scene(1, domain_spec("domainC"), tiny_spec.layout, tiny_spec.class_names, 16, 16)
    assert np.allclose(image.numpy(), sample.image, atol=1e-7)
    assert np.array_equal(labels.numpy(), sample.labels)
    assert int(domain) == 1

    limited = SceneDataset.from_manifest(tmp_path / "data", "test", domains=["domainC"], limit=2)
    assert [r["seed"] for r in limited.records] == [200, 201]
    with pytest.raises(DatasetError):
        SceneDataset.from_manifest(tmp_path / "data", "test", domains=["domainB"])


def test_dataset_generation_is_byte_identical(tiny_spec, tmp_path):
    roots = [tmp_path / "a", tmp_path / "b"]
    for root in roots:
        gen_dataset(tiny_spec, root)
    files = sorted(p.relative_to(roots[0]) for p in roots[0].rglob("*") if p.is_file())
    assert files
    for relative in files:
        assert (roots[0] / relative).read_bytes() == (roots[1] / relative).read_bytes()


def test_dataset_refuses_a_non_empty_directory(tiny_spec, tmp_path):
    root = tmp_path / "data"
    root.mkdir()
    (root / "notes.txt").write_text("keep", encoding="utf-8")
    with pytest.raises(DatasetError):
        gen_dataset(tiny_spec, root)
    gen_dataset(tiny_spec, root, force=True)
    assert (root / "notes.txt").is_file()
    assert (root / "manifest.jsonl").is_file()


def test_missing_dataset(tmp_path):
    with pytest.raises(DatasetError):
        SceneDataset.from_manifest(tmp_path, "train")
