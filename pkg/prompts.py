"""Category and scene prompts and their bundling into the conditioning tokens."""
from typing import TYPE_CHECKING, Iterable, List, Optional, Sequence, Union

import torch
from torch import nn

from config import IRRELEVANT_SCENE_WORDS
from exceptions import ShapeError, VocabularyError
from models import CategoryPrompt, PromptBundle, ScenePrompt, TokenEmbedding

if TYPE_CHECKING:
    from backbone import DiffusionBackbone

CATEGORY_TEMPLATE = "a photo of a {}"
SCENE_TEMPLATE = "a {} photo"
TEMPLATE_WORDS = ("a", "photo", "of")
LEARNED_INIT_SCALE = 0.02

SCENE_KINDS = ("source_text", "target_text", "irrelevant_text", "learned", "image")


def category_template(class_name: str) -> str:
    return CATEGORY_TEMPLATE.format(class_name)


def scene_template(scene: str) -> str:
    return SCENE_TEMPLATE.format(scene)


def build_vocabulary(*groups: Iterable[str]) -> List[str]:
    """Sorted union of the template words and every whitespace token of the given names."""
    words = set(TEMPLATE_WORDS) | set(IRRELEVANT_SCENE_WORDS)
    for group in groups:
        for name in group:
            words.update(name.split())
    return sorted(words)


class TextEncoder(nn.Module):
    """Frozen text prompt encoder: one N-dim row per vocabulary word, averaged over the words of a template."""

    def __init__(self, vocabulary: Sequence[str], dim: int):
        super().__init__()
        if len(set(vocabulary)) != len(vocabulary):
            raise ValueError("vocabulary entries must be unique")
        self.vocabulary = tuple(vocabulary)
        self._index = {word: i for i, word in enumerate(self.vocabulary)}
        self.table = nn.Embedding(len(self.vocabulary), dim)
        nn.init.normal_(self.table.weight, std=1.0)

    @property
    def dim(self) -> int:
        return self.table.embedding_dim

    def token_ids(self, template: str) -> torch.Tensor:
        words = template.split()
        if not words:
            raise ValueError("prompt template is empty")
        missing = [w for w in words if w not in self._index]
        if missing:
            raise VocabularyError(missing)
        return torch.tensor([self._index[w] for w in words], dtype=torch.long, device=self.table.weight.device)

    def forward(self, template: str) -> torch.Tensor:
        return self.table(self.token_ids(template)).mean(dim=0)

    def encode_many(self, templates: Sequence[str]) -> torch.Tensor:
        return torch.stack([self(t) for t in templates])


def encode_text_prompt(encoder: TextEncoder, template: str) -> TokenEmbedding:
    with torch.no_grad():
        vector = encoder(template)
    return TokenEmbedding(vector=vector, source="text")


def encode_image_prompt(backbone: "DiffusionBackbone", image: torch.Tensor) -> TokenEmbedding:
    return TokenEmbedding(vector=backbone.encode_image(image), source="image")


def build_category_prompt(
    encoder: TextEncoder, class_names: Sequence[str], auxiliary_classes: Sequence[str] = ()
) -> CategoryPrompt:
    """Token j encodes "a photo of a <class j>"; auxiliary classes follow the segmentation classes."""
    names = list(class_names) + list(auxiliary_classes)
    if not class_names:
        raise ValueError("at least one class name is required")
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ValueError(f"duplicate class names: {', '.join(duplicates)}")
    with torch.no_grad():
        tokens = encoder.encode_many([category_template(n) for n in names])
    return CategoryPrompt(class_names=tuple(names), tokens=tokens, num_segmentation_classes=len(class_names))


def make_scene_prompt(
    kind: str, payload: Union[str, int, torch.Tensor], backbone: "DiffusionBackbone"
) -> ScenePrompt:
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene prompt kind '{kind}'")
    if kind.endswith("_text"):
        if not isinstance(payload, str):
            raise TypeError(f"scene prompt kind '{kind}' needs a text template")
        return ScenePrompt(token=encode_text_prompt(backbone.text_encoder, payload).vector, kind=kind, descriptor=payload)
    if kind == "image":
        if not isinstance(payload, torch.Tensor):
            raise TypeError("scene prompt kind 'image' needs an image tensor")
        return ScenePrompt(token=encode_image_prompt(backbone, payload).vector, kind=kind, descriptor="image")
    if isinstance(payload, bool) or not isinstance(payload, int):
        raise TypeError("scene prompt kind 'learned' needs an integer seed")
    generator = torch.Generator().manual_seed(payload)
    init = torch.randn(backbone.token_dim, generator=generator, dtype=torch.float64) * LEARNED_INIT_SCALE
    token = nn.Parameter(init.to(dtype=backbone.dtype, device=backbone.device))
    return ScenePrompt(token=token, kind=kind, descriptor=f"learned:seed={payload}")


def bundle(cat: CategoryPrompt, scene: Optional[ScenePrompt]) -> PromptBundle:
    """C = [C_c; C_s]: category tokens in class order, scene token last."""
    if scene is None:
        return PromptBundle(tokens=cat.tokens, num_category_tokens=cat.C, has_scene=False)
    token = scene.token
    if token.ndim != 1 or token.shape[0] != cat.tokens.shape[1]:
        raise ShapeError(f"scene token of shape {tuple(token.shape)} does not match {cat.tokens.shape[1]}-dim category tokens")
    tokens = torch.cat([cat.tokens, token.to(cat.tokens.dtype)[None]], dim=0)
    return PromptBundle(tokens=tokens, num_category_tokens=cat.C, has_scene=True, scene_kind=scene.kind)


def with_scene_token(cat: CategoryPrompt, token: torch.Tensor) -> PromptBundle:
    """Bundle with a raw scene-token tensor (test-time tuning)."""
    return bundle(cat, ScenePrompt(token=token, kind="learned"))
