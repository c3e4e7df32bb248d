import pytest
import torch

from exceptions import ShapeError, VocabularyError
from models import ScenePrompt
from prompts import (
    LEARNED_INIT_SCALE,
    TextEncoder,
    build_category_prompt,
    build_vocabulary,
    bundle,
    encode_image_prompt,
    encode_text_prompt,
    make_scene_prompt,
)

from conftest import CLASS_NAMES


def test_text_encoding_is_deterministic_and_injective(backbone):
    encoder = backbone.text_encoder
    a = encode_text_prompt(encoder, "a photo of a car")
    assert torch.equal(a.vector, encode_text_prompt(encoder, "a photo of a car").vector)
    assert not torch.equal(a.vector, encode_text_prompt(encoder, "a photo of a road").vector)
    assert a.source == "text"
    assert a.dim == backbone.token_dim


def test_single_word_is_its_table_row(backbone):
    encoder = backbone.text_encoder
    row = encoder.table.weight[encoder.vocabulary.index("sand")]
    assert torch.equal(encode_text_prompt(encoder, "sand").vector, row)


def test_out_of_vocabulary_words_are_listed(backbone):
    with pytest.raises(VocabularyError) as info:
        backbone.text_encoder("a zebra photo of a unicorn")
    assert info.value.words == ["unicorn", "zebra"]
    assert "zebra" in str(info.value)
    assert isinstance(info.value, KeyError)


def test_empty_template(backbone):
    with pytest.raises(ValueError):
        backbone.text_encoder("   ")


def test_vocabulary_covers_templates_and_names():
    vocabulary = build_vocabulary(["traffic light"], ["domainA"])
    assert {"a", "photo", "of", "traffic", "light", "domainA", "sand"} <= set(vocabulary)
    assert vocabulary == sorted(vocabulary)
    with pytest.raises(ValueError):
        TextEncoder(["a", "a"], 4)


def test_category_tokens_follow_class_order(backbone, category):
    assert category.C == 3
    assert category.class_names == tuple(CLASS_NAMES)
    for j, name in enumerate(CLASS_NAMES):
        expected = encode_text_prompt(backbone.text_encoder, f"a photo of a {name}").vector
        assert torch.equal(category.tokens[j], expected)


def test_single_class_prompt(backbone):
    prompt = build_category_prompt(backbone.text_encoder, ["road"])
    assert prompt.C == 1
    assert bundle(prompt, make_scene_prompt("source_text", "a domainA photo", backbone)).M == 2


@pytest.mark.parametrize("count", [19, 150])
def test_many_classes(count):
    names = [f"class{i}" for i in range(count)]
    encoder = TextEncoder(build_vocabulary(names), 6)
    prompt = build_category_prompt(encoder, names)
    assert prompt.C == count
    scene = ScenePrompt(token=torch.zeros(6), kind="learned")
    assert bundle(prompt, scene).M == count + 1


def test_duplicate_and_empty_class_names(backbone):
    with pytest.raises(ValueError, match="duplicate"):
        build_category_prompt(backbone.text_encoder, ["sky", "road", "sky"])
    with pytest.raises(ValueError):
        build_category_prompt(backbone.text_encoder, [])
    with pytest.raises(ValueError, match="duplicate"):
        build_category_prompt(backbone.text_encoder, ["sky", "road"], ["road"])


def test_auxiliary_classes_follow_segmentation_classes(backbone):
    prompt = build_category_prompt(backbone.text_encoder, CLASS_NAMES, ["sand", "water"])
    assert prompt.C == 5
    assert prompt.num_segmentation_classes == 3
    assert prompt.class_names[3:] == ("sand", "water")


def test_bundle_layout(category, source_scene):
    prompt = bundle(category, source_scene)
    assert prompt.M == category.C + 1
    assert torch.equal(prompt.category_tokens, category.tokens)
    assert torch.equal(prompt.scene_token, source_scene.token)
    assert torch.equal(bundle(category, source_scene).tokens, prompt.tokens)


def test_swapping_the_scene_only_changes_the_last_token(backbone, category, source_scene):
    other = make_scene_prompt("target_text", "a domainC photo", backbone)
    a, b = bundle(category, source_scene), bundle(category, other)
    assert torch.equal(a.tokens[: category.C], b.tokens[: category.C])
    assert not torch.equal(a.tokens[-1], b.tokens[-1])


def test_bundle_without_scene(category):
    prompt = bundle(category, None)
    assert prompt.M == category.C
    assert prompt.scene_token is None


def test_bundle_dimension_mismatch(category):
    with pytest.raises(ShapeError):
        bundle(category, ScenePrompt(token=torch.zeros(5, dtype=torch.float64), kind="learned"))


def test_text_scene_prompt_delegates_to_the_encoder(backbone):
    scene = make_scene_prompt("source_text", "a domainA photo", backbone)
    assert torch.equal(scene.token, encode_text_prompt(backbone.text_encoder, "a domainA photo").vector)
    assert scene.descriptor == "a domainA photo"
    assert scene.source == "text"
    assert not scene.trainable


def test_learned_scene_prompt_is_seeded(backbone):
    a = make_scene_prompt("learned", 3, backbone)
    b = make_scene_prompt("learned", 3, backbone)
    c = make_scene_prompt("learned", 4, backbone)
    assert torch.equal(a.token, b.token)
    assert not torch.equal(a.token, c.token)
    assert a.trainable
    assert a.token.shape == (backbone.token_dim,)
    assert a.token.abs().max().item() < 10 * LEARNED_INIT_SCALE


@pytest.mark.parametrize(
    "kind, payload", [("source_text", 3), ("irrelevant_text", None), ("image", "a photo"), ("learned", "3"), ("learned", True)]
)
def test_scene_payload_must_match_kind(backbone, kind, payload):
    with pytest.raises(TypeError):
        make_scene_prompt(kind, payload, backbone)


def test_unknown_scene_kind(backbone):
    with pytest.raises(ValueError):
        make_scene_prompt("night", "a night photo", backbone)


def test_image_prompt(backbone, images):
    a = encode_image_prompt(backbone, images[0])
    assert a.source == "image"
    assert a.vector.shape == (backbone.token_dim,)
    assert torch.equal(a.vector, encode_image_prompt(backbone, images[0]).vector)
    assert not torch.equal(a.vector, encode_image_prompt(backbone, images[1]).vector)
    scene = make_scene_prompt("image", images[0], backbone)
    assert torch.equal(scene.token, a.vector)
    with pytest.raises(ShapeError):
        encode_image_prompt(backbone, images)


def test_image_projection_ignores_its_null_space(backbone):
    projection = backbone.image_projection
    assert projection.shape[1] > projection.shape[0]
    _, _, vh = torch.linalg.svd(projection, full_matrices=True)
    pooled = torch.randn(projection.shape[1], dtype=torch.float64)
    for kernel in vh[projection.shape[0]:]:
        assert torch.allclose(backbone.project_pooled(pooled + 3.0 * kernel), backbone.project_pooled(pooled), atol=1e-12)
