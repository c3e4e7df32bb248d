"""Source-domain head training: single-prompt baselines and prompt randomization."""
import functools
import math
import operator
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import torch
from torch.utils.data import DataLoader, Dataset

from backbone import DiffusionBackbone
from config import DGConfig
from exceptions import FrozenParameterError, ShapeError, TrainingDivergedError
from head import SegmentationHead, ce_loss, softmax_probs
from integrity import tensors_digest
from log import NullWriter, logger, progress
from models import CategoryPrompt, PromptBundle, ScenePrompt
from prompts import bundle


def forward_logits(
    backbone: DiffusionBackbone, head: SegmentationHead, images: torch.Tensor, prompt: PromptBundle
) -> torch.Tensor:
    images = images.to(dtype=backbone.dtype, device=backbone.device)
    out = backbone.extract_features(images, prompt)
    return head(out, output_size=tuple(images.shape[-2:]))


def _pairwise_kl(
    probs: Sequence[torch.Tensor], log_probs: Optional[Sequence[torch.Tensor]], detach_target: bool
) -> torch.Tensor:
    """Sum over ordered pairs p != q of KL(probs_p || probs_q), each averaged over pixels."""
    terms = []
    for p in range(len(probs)):
        for q in range(len(probs)):
            if p == q:
                continue
            if log_probs is None:
                target = probs[q].detach() if detach_target else probs[q]
                pointwise = torch.xlogy(probs[p], probs[p]) - torch.xlogy(probs[p], target)
            else:
                target = log_probs[q].detach() if detach_target else log_probs[q]
                pointwise = probs[p] * (log_probs[p] - target)
            terms.append(pointwise.sum(dim=1).mean())
    return functools.reduce(operator.add, terms)


def _check_maps(maps: Sequence[torch.Tensor]) -> None:
    shapes = {tuple(m.shape) for m in maps}
    if len(shapes) != 1:
        raise ShapeError(f"prediction maps have different shapes: {sorted(shapes)}")


def consistency_loss(prob_maps: Sequence[torch.Tensor], detach_target: bool = False) -> torch.Tensor:
    """L_c over K per-pixel probability maps [B, C, H, W] (non-negative KL, natural log)."""
    if len(prob_maps) < 2:
        raise ValueError("the consistency loss needs at least two prediction maps")
    _check_maps(prob_maps)
    return _pairwise_kl(prob_maps, None, detach_target)


@dataclass
class LossTerms:
    ce: List[torch.Tensor]
    consistency: Optional[torch.Tensor]
    total: torch.Tensor

    def record(self) -> Dict:
        return {
            "ce": [t.item() for t in self.ce],
            "consistency": 0.0 if self.consistency is None else self.consistency.item(),
            "total": self.total.item(),
        }


def loss_terms(
    logit_maps: Sequence[torch.Tensor], labels: torch.Tensor, consistency_weight: float, detach_target: bool = False
) -> LossTerms:
    if not logit_maps:
        raise ValueError("at least one prediction map is required")
    _check_maps(logit_maps)
    ce = [ce_loss(logits, labels) for logits in logit_maps]
    ce_sum = functools.reduce(operator.add, ce)
    if len(logit_maps) == 1:
        return LossTerms(ce=ce, consistency=None, total=ce[0])
    probs = [softmax_probs(m) for m in logit_maps]
    log_probs = [torch.log_softmax(m, dim=1) for m in logit_maps]
    if consistency_weight == 0:
        with torch.no_grad():
            lc = _pairwise_kl(probs, log_probs, detach_target)
        return LossTerms(ce=ce, consistency=lc, total=ce_sum)
    lc = _pairwise_kl(probs, log_probs, detach_target)
    return LossTerms(ce=ce, consistency=lc, total=ce_sum + consistency_weight * lc)


def total_loss(
    logit_maps: Sequence[torch.Tensor], labels: torch.Tensor, consistency_weight: float, detach_target: bool = False
) -> torch.Tensor:
    """L_total = sum_k CE(y_k, y) + lambda * L_c."""
    return loss_terms(logit_maps, labels, consistency_weight, detach_target).total


@dataclass
class TrainState:
    head: SegmentationHead
    category: CategoryPrompt
    scenes: List[ScenePrompt]
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    step: int = 0
    history: List[Dict] = field(default_factory=list)
    backbone_digest: str = ""

    @property
    def K(self) -> int:
        return len(self.scenes)

    def bundles(self) -> List[PromptBundle]:
        if not self.scenes:
            return [bundle(self.category, None)]
        return [bundle(self.category, s) for s in self.scenes]

    def trainable_parameters(self) -> List[torch.Tensor]:
        return list(self.head.parameters()) + [s.token for s in self.scenes if s.trainable]


def init_train_state(
    backbone: DiffusionBackbone,
    head: SegmentationHead,
    category: CategoryPrompt,
    scenes: Sequence[ScenePrompt],
    cfg: DGConfig,
) -> TrainState:
    scenes = list(scenes)
    head.requires_grad_(True)
    params = list(head.parameters()) + [s.token for s in scenes if s.trainable]
    optimizer = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(cfg.steps, 1))
    return TrainState(
        head=head,
        category=category,
        scenes=scenes,
        optimizer=optimizer,
        scheduler=scheduler,
        backbone_digest=backbone.digest,
    )


def _batches(loader: DataLoader, skip: int) -> Iterator:
    seen = 0
    while True:
        for batch in loader:
            if seen < skip:
                seen += 1
                continue
            yield batch


def _run(
    backbone: DiffusionBackbone,
    dataset: Dataset,
    state: TrainState,
    cfg: DGConfig,
    seed: int,
    writer=None,
    on_checkpoint: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    writer = writer or NullWriter()
    backbone.verify_frozen()
    if backbone.digest != state.backbone_digest:
        raise FrozenParameterError("train state belongs to a different backbone")
    category_digest = tensors_digest([("category", state.category.tokens)])
    generator = torch.Generator().manual_seed(seed)
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, generator=generator)
    batches = _batches(loader, skip=state.step)
    state.head.train()
    remaining = range(state.step, cfg.steps)
    for step in progress(remaining, total=len(remaining), desc=f"train K={max(state.K, 1)}"):
        images, labels, _ = next(batches)
        labels = labels.to(backbone.device)
        logit_maps = [forward_logits(backbone, state.head, images, b) for b in state.bundles()]
        terms = loss_terms(logit_maps, labels, cfg.consistency_weight, cfg.detach_target)
        record = {"step": step, "lr": state.optimizer.param_groups[0]["lr"], **terms.record()}
        if not math.isfinite(record["total"]):
            raise TrainingDivergedError(step, {"total": record["total"], "consistency": record["consistency"]})
        state.optimizer.zero_grad()
        terms.total.backward()
        state.optimizer.step()
        state.scheduler.step()
        state.step = step + 1
        state.history.append(record)
        writer.write(record)
        if step % cfg.log_interval == 0:
            logger.debug("step %d total %.5f consistency %.5f", step, record["total"], record["consistency"])
        if on_checkpoint and cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
            on_checkpoint(state)
    state.head.eval()
    backbone.verify_frozen()
    if tensors_digest([("category", state.category.tokens)]) != category_digest:
        raise FrozenParameterError("category tokens changed during training")
    return state


def train_baseline(
    backbone: DiffusionBackbone,
    source: Dataset,
    head: SegmentationHead,
    category: CategoryPrompt,
    scene: Optional[ScenePrompt],
    cfg: DGConfig,
    seed: int = 0,
    writer=None,
    state: Optional[TrainState] = None,
    on_checkpoint: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """min_D L_s with a single bundle; without a scene prompt the bundle carries only the C category tokens."""
    if state is None:
        state = init_train_state(backbone, head, category, [scene] if scene is not None else [], cfg)
    return _run(backbone, source, state, cfg, seed, writer, on_checkpoint)


def train_prompt_randomization(
    backbone: DiffusionBackbone,
    source: Dataset,
    head: SegmentationHead,
    category: CategoryPrompt,
    scenes: Sequence[ScenePrompt],
    cfg: DGConfig,
    seed: int = 0,
    writer=None,
    state: Optional[TrainState] = None,
    on_checkpoint: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """One prediction per scene prompt each step, trained with sum_k CE + lambda * L_c."""
    if len(scenes) < 2:
        raise ValueError("prompt randomization requires K >= 2")
    if state is None:
        state = init_train_state(backbone, head, category, scenes, cfg)
    return _run(backbone, source, state, cfg, seed, writer, on_checkpoint)


def optimizer_arrays(state: TrainState) -> Dict[str, torch.Tensor]:
    arrays = {}
    for i, param in enumerate(state.trainable_parameters()):
        buffer = state.optimizer.state.get(param, {}).get("momentum_buffer")
        if buffer is not None:
            arrays[f"optim/{i}/momentum_buffer"] = buffer
    return arrays


def restore_optimizer(state: TrainState, arrays: Dict[str, torch.Tensor]) -> None:
    for i, param in enumerate(state.trainable_parameters()):
        buffer = arrays.get(f"optim/{i}/momentum_buffer")
        if buffer is not None:
            state.optimizer.state[param]["momentum_buffer"] = buffer.to(dtype=param.dtype, device=param.device).clone()
    for _ in range(state.step):
        state.scheduler.step()
