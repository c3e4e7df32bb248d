from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import torch

from exceptions import ShapeError

IGNORE_INDEX = 255

TokenSource = Literal["text", "image", "learned"]


@dataclass(frozen=True)
class NoiseSchedule:
    alphas: torch.Tensor  # float64, shape [P]
    alpha_bars: torch.Tensor  # float64, running products of alphas

    def __post_init__(self):
        if self.alphas.ndim != 1 or self.alphas.shape != self.alpha_bars.shape:
            raise ShapeError("alphas and alpha_bars must be 1-D and of equal length")
        if not bool(((self.alphas > 0) & (self.alphas < 1)).all()):
            raise ValueError("every alpha must lie in (0, 1)")
        if self.P > 1 and not bool((self.alpha_bars[1:] < self.alpha_bars[:-1]).all()):
            raise ValueError("alpha_bars must be strictly decreasing")

    @property
    def P(self) -> int:
        return int(self.alphas.shape[0])


@dataclass(frozen=True)
class LatentImage:
    """Latent z_p together with its timestep p, a scalar or one index per batch row."""

    data: torch.Tensor
    timestep: torch.Tensor


@dataclass
class BackboneOutput:
    """Per-scale features f_i [B, c_i, H/2^i, W/2^i] and cross-attention maps a_i [B, M, H/2^i, W/2^i]."""

    features: List[torch.Tensor]
    attentions: List[torch.Tensor]

    def __post_init__(self):
        if len(self.features) != len(self.attentions):
            raise ShapeError("features and attentions must cover the same scales")
        for f, a in zip(self.features, self.attentions):
            if f.shape[0] != a.shape[0] or f.shape[-2:] != a.shape[-2:]:
                raise ShapeError(f"feature {tuple(f.shape)} and attention {tuple(a.shape)} disagree")

    @property
    def num_scales(self) -> int:
        return len(self.features)

    @property
    def num_tokens(self) -> int:
        return int(self.attentions[0].shape[1])


@dataclass
class TokenEmbedding:
    vector: torch.Tensor  # [N]
    source: TokenSource

    @property
    def dim(self) -> int:
        return int(self.vector.shape[-1])


@dataclass
class CategoryPrompt:
    class_names: Tuple[str, ...]
    tokens: torch.Tensor  # [C, N], row j conditions class j
    num_segmentation_classes: int = 0

    def __post_init__(self):
        if len(self.class_names) < 1:
            raise ValueError("a category prompt needs at least one class")
        if self.tokens.shape[0] != len(self.class_names):
            raise ShapeError("one token per class name is required")
        if not self.num_segmentation_classes:
            self.num_segmentation_classes = len(self.class_names)

    @property
    def C(self) -> int:
        return len(self.class_names)


@dataclass
class ScenePrompt:
    token: torch.Tensor  # [N]; an nn.Parameter for learned prompts
    kind: str
    descriptor: str = ""

    @property
    def source(self) -> TokenSource:
        if self.kind == "learned":
            return "learned"
        return "image" if self.kind == "image" else "text"

    @property
    def trainable(self) -> bool:
        return self.token.requires_grad


@dataclass
class PromptBundle:
    """M conditioning tokens: the C category tokens followed by the scene token (if any)."""

    tokens: torch.Tensor  # [M, N]
    num_category_tokens: int
    has_scene: bool = True
    scene_kind: Optional[str] = field(default=None)

    def __post_init__(self):
        expected = self.num_category_tokens + (1 if self.has_scene else 0)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != expected:
            raise ShapeError(f"bundle must hold {expected} tokens, got {tuple(self.tokens.shape)}")

    @property
    def M(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def category_tokens(self) -> torch.Tensor:
        return self.tokens[: self.num_category_tokens]

    @property
    def scene_token(self) -> Optional[torch.Tensor]:
        return self.tokens[-1] if self.has_scene else None
