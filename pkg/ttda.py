"""Test-time adaptation by tuning the scene token against the model's own pseudo-labels."""
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Tuple, Union

import torch

from backbone import DiffusionBackbone
from config import TTDAConfig
from exceptions import DatasetError, FrozenParameterError
from head import SegmentationHead, ce_loss, softmax_probs
from integrity import FreezeGuard
from log import NullWriter, logger, progress
from metrics import ConfusionMatrix
from models import IGNORE_INDEX, CategoryPrompt, ScenePrompt
from prompts import with_scene_token
from training import forward_logits


def pseudo_label(logits: torch.Tensor, threshold: Optional[float] = None) -> torch.Tensor:
    """argmax over classes (ties go to the smaller index); low-confidence pixels become IGNORE_INDEX."""
    if threshold is not None and not 0.0 <= threshold < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    confidence = softmax_probs(logits).amax(dim=1)
    # argmax returns the first maximal index, i.e. the smaller class on ties
    labels = logits.argmax(dim=1)
    if threshold is not None:
        labels = labels.masked_fill(confidence < threshold, IGNORE_INDEX)
    return labels


@dataclass
class AdaptState:
    scene_token: torch.Tensor  # [N], the only array that changes
    guard: FreezeGuard = field(default_factory=FreezeGuard, repr=False)
    log: List[Dict] = field(default_factory=list)

    @property
    def digests(self) -> Dict[str, str]:
        return self.guard.digests

    @property
    def trainable_count(self) -> int:
        return self.scene_token.numel()


@dataclass
class StepInfo:
    loss: float
    grad_norm: float
    noop: bool = False


def _frozen_groups(backbone: DiffusionBackbone, head: SegmentationHead, category: CategoryPrompt):
    return {
        "backbone": backbone.state_dict().items(),
        "head": head.state_dict().items(),
        "category": [("category", category.tokens)],
    }


def trainable_parameter_count(backbone: DiffusionBackbone, head: SegmentationHead, token: torch.Tensor) -> int:
    frozen = sum(p.numel() for p in backbone.parameters() if p.requires_grad)
    frozen += sum(p.numel() for p in head.parameters() if p.requires_grad)
    if frozen:
        raise FrozenParameterError(f"{frozen} backbone/head parameters are still trainable during adaptation")
    return token.numel()


def init_adapt_state(
    backbone: DiffusionBackbone, head: SegmentationHead, category: CategoryPrompt, scene: ScenePrompt
) -> AdaptState:
    head.requires_grad_(False)
    head.eval()
    backbone.verify_frozen()
    guard = FreezeGuard()
    for name, named in _frozen_groups(backbone, head, category).items():
        guard.record(name, named)
    return AdaptState(scene_token=scene.token.detach().clone(), guard=guard)


def _verify(state: AdaptState, backbone: DiffusionBackbone, head: SegmentationHead, category: CategoryPrompt) -> None:
    state.guard.verify_all(_frozen_groups(backbone, head, category))


def adapt_step(
    backbone: DiffusionBackbone,
    head: SegmentationHead,
    category: CategoryPrompt,
    state: AdaptState,
    images: torch.Tensor,
    lr: float,
    threshold: Optional[float] = None,
) -> Tuple[AdaptState, StepInfo]:
    """C_s <- C_s - lr * dL_t/dC_s with pseudo-labels taken from the current prediction and held fixed."""
    token = state.scene_token.detach().clone().requires_grad_(True)
    if trainable_parameter_count(backbone, head, token) != backbone.token_dim:
        raise FrozenParameterError("the scene token must be the only trainable array")
    logits = forward_logits(backbone, head, images, with_scene_token(category, token))
    labels = pseudo_label(logits.detach(), threshold)
    if bool((labels == IGNORE_INDEX).all()):
        logger.info("every pseudo-label is below the confidence threshold; skipping update")
        return replace(state, scene_token=state.scene_token.clone()), StepInfo(loss=float("nan"), grad_norm=0.0, noop=True)
    loss = ce_loss(logits, labels)
    (grad,) = torch.autograd.grad(loss, token)
    updated = token.detach() - lr * grad
    _verify(state, backbone, head, category)
    return replace(state, scene_token=updated), StepInfo(loss=loss.item(), grad_norm=grad.norm().item())


def self_training_loss(
    backbone: DiffusionBackbone, head: SegmentationHead, category: CategoryPrompt, token: torch.Tensor, images: torch.Tensor
) -> Tuple[float, torch.Tensor]:
    with torch.no_grad():
        logits = forward_logits(backbone, head, images, with_scene_token(category, token))
        labels = pseudo_label(logits)
        return ce_loss(logits, labels).item(), labels


@dataclass
class AdaptResult:
    state: AdaptState
    predictions: List[Tuple[torch.Tensor, torch.Tensor]]  # (before, after) per image
    before: Optional[ConfusionMatrix] = None
    after: Optional[ConfusionMatrix] = None
    source: Optional[ConfusionMatrix] = None  # the unadapted token on the same stream


StreamItem = Union[torch.Tensor, Tuple[torch.Tensor, Optional[torch.Tensor]]]


def adapt(
    backbone: DiffusionBackbone,
    head: SegmentationHead,
    category: CategoryPrompt,
    scene: ScenePrompt,
    target_stream: Iterable[StreamItem],
    cfg: TTDAConfig,
    writer=None,
) -> AdaptResult:
    """Single online pass over unlabeled target images; the state carries over unless ``cfg.episodic``.

    Stream items are images ``[3, H, W]`` or ``(image, labels)`` pairs; labels
    are only used for offline scoring and never reach the update.
    """
    writer = writer or NullWriter()
    state = init_adapt_state(backbone, head, category, scene)
    initial = state.scene_token.clone()
    num_classes = category.num_segmentation_classes
    before, after, source = ConfusionMatrix(num_classes), ConfusionMatrix(num_classes), ConfusionMatrix(num_classes)
    scored = False
    predictions = []
    for index, item in enumerate(progress(target_stream, desc="adapt")):
        image, labels = item if isinstance(item, (tuple, list)) else (item, None)
        images = image.unsqueeze(0) if image.ndim == 3 else image
        if cfg.episodic:
            state = replace(state, scene_token=initial.clone())
        start = state.scene_token.clone()
        pre_loss, pre_pred = self_training_loss(backbone, head, category, start, images)
        info = StepInfo(loss=pre_loss, grad_norm=0.0)
        for _ in range(cfg.steps):
            state, info = adapt_step(backbone, head, category, state, images, cfg.lr, cfg.threshold)
        post_loss, post_pred = self_training_loss(backbone, head, category, state.scene_token, images)
        predictions.append((pre_pred.cpu(), post_pred.cpu()))
        record = {
            "image": index,
            "pre_loss": pre_loss,
            "post_loss": post_loss,
            "grad_norm": info.grad_norm,
            "displacement": (state.scene_token - start).norm().item(),
        }
        if labels is not None:
            gt = labels if labels.ndim == 3 else labels.unsqueeze(0)
            if cfg.episodic:
                source_pred = pre_pred
            else:
                _, source_pred = self_training_loss(backbone, head, category, initial, images)
            source.update(source_pred, gt)
            before.update(pre_pred, gt)
            after.update(post_pred, gt)
            if before.total:
                scored = True
                record["running_miou_source"] = source.iou()[1]
                record["running_miou_before"] = before.iou()[1]
                record["running_miou_after"] = after.iou()[1]
        state.log.append(record)
        writer.write(record)
    if not predictions:
        raise DatasetError("the target stream is empty")
    _verify(state, backbone, head, category)
    logger.info(
        "adapted over %d images; scene token moved %.5f", len(predictions), (state.scene_token - initial).norm().item()
    )
    return AdaptResult(
        state=state,
        predictions=predictions,
        before=before if scored else None,
        after=after if scored else None,
        source=source if scored else None,
    )
