"""The semantic projection head D and its per-pixel losses."""
import math
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from checkpoint import prefixed
from exceptions import ShapeError
from models import IGNORE_INDEX, BackboneOutput


def _stream(seed: int, scale: int, column: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, scale, column + 1]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


class SegmentationHead(nn.Module):
    """FPN-style fusion of [f_i ; a_i] over all scales.

    Each scale is projected by a 1x1 lateral conv to a common width, resized to
    the finest scale and summed; two 3x3 conv blocks and a 1x1 classifier follow.
    """

    def __init__(
        self,
        feature_channels: Sequence[int],
        num_tokens: int,
        num_classes: int,
        width: int = 128,
        seed: int = 0,
    ):
        super().__init__()
        self.feature_channels = list(feature_channels)
        self.num_tokens = num_tokens
        self.num_classes = num_classes
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.fuse = nn.Sequential(
                nn.Conv2d(width, width, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(width, width, 3, padding=1),
                nn.ReLU(),
            )
            self.classifier = nn.Conv2d(width, num_classes, 1)
            self.laterals = nn.ModuleList(nn.Conv2d(c + num_tokens, width, 1) for c in self.feature_channels)
        self._init_laterals(seed)

    def _init_laterals(self, seed: int) -> None:
        """Every input channel draws from its own stream, scaled by the feature width alone.

        Two heads that differ only in trailing attention channels (with and
        without a scene token) therefore start identical on the channels they share.
        """
        with torch.no_grad():
            for i, (lateral, c) in enumerate(zip(self.laterals, self.feature_channels)):
                bound = 1.0 / math.sqrt(c)
                weight = torch.empty(lateral.weight.shape[:2], dtype=torch.float64)
                for j in range(lateral.in_channels):
                    weight[:, j].uniform_(-bound, bound, generator=_stream(seed, i, j))
                bias = torch.empty(lateral.out_channels, dtype=torch.float64).uniform_(-bound, bound, generator=_stream(seed, i, -1))
                lateral.weight.copy_(weight.view_as(lateral.weight))
                lateral.bias.copy_(bias)

    def _check(self, out: BackboneOutput) -> None:
        if out.num_scales != len(self.feature_channels):
            raise ShapeError(f"head expects {len(self.feature_channels)} scales, got {out.num_scales}")
        for i, (f, a) in enumerate(zip(out.features, out.attentions)):
            if f.shape[1] != self.feature_channels[i] or a.shape[1] != self.num_tokens:
                raise ShapeError(
                    f"scale {i}: expected {self.feature_channels[i]} feature and {self.num_tokens} attention channels, "
                    f"got {f.shape[1]} and {a.shape[1]}"
                )

    def forward(self, out: BackboneOutput, output_size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
        self._check(out)
        dtype = self.classifier.weight.dtype
        target = tuple(out.features[0].shape[-2:])
        fused = None
        for lateral, f, a in zip(self.laterals, out.features, out.attentions):
            x = lateral(torch.cat([f, a], dim=1).to(dtype))
            if tuple(x.shape[-2:]) != target:
                x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
            fused = x if fused is None else fused + x
        logits = self.classifier(self.fuse(fused))
        if output_size is not None and tuple(output_size) != target:
            logits = F.interpolate(logits, size=tuple(output_size), mode="bilinear", align_corners=False)
        return logits

    def checkpoint_arrays(self):
        return prefixed("head", self.state_dict())


def predict(head: SegmentationHead, out: BackboneOutput, output_size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    return head(out, output_size)


def softmax_probs(logits: torch.Tensor) -> torch.Tensor:
    if not bool(torch.isfinite(logits).all()):
        raise ValueError("logits contain non-finite values")
    return torch.softmax(logits, dim=1)


def check_labels(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    valid = labels != IGNORE_INDEX
    if bool((labels[valid] < 0).any()) or bool((labels[valid] >= num_classes).any()):
        raise ValueError(f"label values must lie in [0, {num_classes}) or equal {IGNORE_INDEX}")
    return valid


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over the non-ignored pixels."""
    if logits.ndim != 4 or labels.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    valid = check_labels(labels, logits.shape[1])
    if not bool(valid.any()):
        raise ValueError("every pixel is ignored; cross entropy is undefined")
    return F.cross_entropy(logits, labels.long(), ignore_index=IGNORE_INDEX, reduction="mean")
