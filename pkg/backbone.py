"""Forward diffusion, the conditional toy denoiser and feature/attention extraction."""
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, Dataset

from checkpoint import Checkpoint, prefixed
from config import BackboneConfig
from exceptions import CheckpointError, DatasetError, FrozenParameterError, ShapeError, TrainingDivergedError
from integrity import FreezeGuard
from log import NullWriter, logger, progress
from models import BackboneOutput, LatentImage, NoiseSchedule, PromptBundle
from prompts import TextEncoder, category_template, scene_template

Timestep = Union[int, torch.Tensor]


def build_schedule(P: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule; alpha_p = 1 - beta_p and alpha_bar_p = prod_{q<=p} alpha_q."""
    if not isinstance(P, int) or P < 1:
        raise ValueError(f"timestep horizon must be a positive integer, got {P!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = torch.linspace(beta_start, beta_end, P, dtype=torch.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0))


def _alpha_bar(schedule: NoiseSchedule, p: Timestep, like: torch.Tensor) -> torch.Tensor:
    index = torch.as_tensor(p, dtype=torch.long, device=schedule.alpha_bars.device)
    if bool((index < 0).any()) or bool((index >= schedule.P).any()):
        raise ValueError(f"timestep out of range [0, {schedule.P})")
    ab = schedule.alpha_bars[index].to(dtype=like.dtype, device=like.device)
    if ab.ndim == 1:
        ab = ab.view(-1, *([1] * (like.ndim - 1)))
    return ab


def forward_noise(z0: torch.Tensor, p: Timestep, eps: torch.Tensor, schedule: NoiseSchedule) -> LatentImage:
    """z_p = sqrt(alpha_bar_p) z_0 + sqrt(1 - alpha_bar_p) eps, tagged with ``p``; ``p`` may be one index per batch row."""
    if z0.shape != eps.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} differs from latent shape {tuple(z0.shape)}")
    ab = _alpha_bar(schedule, p, z0)
    return LatentImage(ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps, torch.as_tensor(p, dtype=torch.long))


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"noise shapes differ: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return F.mse_loss(eps_hat, eps, reduction="mean")


def timestep_embedding(p: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=p.device) / max(half, 1))
    angles = p.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([angles.sin(), angles.cos()], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(dtype=dtype, device=p.device)


class ChannelNorm(nn.Module):
    """LayerNorm over channels at each pixel; keeps the network spatially local."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm1 = ChannelNorm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = ChannelNorm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head attention from spatial queries to prompt tokens; returns the attention probabilities."""

    def __init__(self, channels: int, token_dim: int, attention_dim: int):
        super().__init__()
        self.norm = ChannelNorm(channels)
        self.to_q = nn.Linear(channels, attention_dim, bias=False)
        self.to_k = nn.Linear(token_dim, attention_dim, bias=False)
        self.to_v = nn.Linear(token_dim, attention_dim, bias=False)
        self.to_out = nn.Linear(attention_dim, channels)
        self.scale = attention_dim ** -0.5

    def forward(
        self, x: torch.Tensor, tokens: torch.Tensor, token_mask: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))  # [B, HW, d]
        k = self.to_k(tokens)  # [B, M, d]
        v = self.to_v(tokens)
        scores = torch.bmm(q, k.transpose(1, 2)) * self.scale  # [B, HW, M]
        if token_mask is not None:
            scores = scores.masked_fill(~token_mask[:, None, :], float("-inf"))
        probs = scores.softmax(dim=-1)
        out = self.to_out(torch.bmm(probs, v)).transpose(1, 2).reshape(b, c, h, w)
        return x + out, probs.transpose(1, 2).reshape(b, -1, h, w)


class Denoiser(nn.Module):
    """epsilon_theta: a small encoder-decoder with cross-attention to the prompt tokens at every scale."""

    def __init__(self, widths: Sequence[int], token_dim: int, attention_dim: int):
        super().__init__()
        self.widths = list(widths)
        self.token_dim = token_dim
        w0 = self.widths[0]
        self.time_dim = 4 * w0
        self.time_mlp = nn.Sequential(nn.Linear(w0, self.time_dim), nn.SiLU(), nn.Linear(self.time_dim, self.time_dim))
        self.conv_in = nn.Conv2d(3, w0, 3, padding=1)
        self.enc_blocks = nn.ModuleList(ResBlock(w, w, self.time_dim) for w in self.widths)
        self.downs = nn.ModuleList(
            nn.Conv2d(self.widths[i], self.widths[i + 1], 3, stride=2, padding=1) for i in range(len(self.widths) - 1)
        )
        self.ups = nn.ModuleList(
            nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(self.widths[i + 1], self.widths[i], 3, padding=1))
            for i in range(len(self.widths) - 1)
        )
        self.dec_blocks = nn.ModuleList(
            ResBlock(w if i == len(self.widths) - 1 else 2 * w, w, self.time_dim) for i, w in enumerate(self.widths)
        )
        self.attentions = nn.ModuleList(CrossAttention(w, token_dim, attention_dim) for w in self.widths)
        self.conv_out = nn.Sequential(ChannelNorm(w0), nn.SiLU(), nn.Conv2d(w0, 3, 3, padding=1))

    @property
    def num_scales(self) -> int:
        return len(self.widths)

    @property
    def downsampling(self) -> int:
        return 2 ** (self.num_scales - 1)

    def _time(self, p: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(p, self.widths[0], like.dtype))

    def encode(self, z: torch.Tensor, p: torch.Tensor) -> Tuple[List[torch.Tensor], torch.Tensor]:
        temb = self._time(p, z)
        h = self.conv_in(z)
        skips = []
        for i, block in enumerate(self.enc_blocks):
            h = block(h, temb)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return skips, temb

    def forward(
        self, z: torch.Tensor, p: torch.Tensor, tokens: torch.Tensor, token_mask: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, BackboneOutput]:
        skips, temb = self.encode(z, p)
        features: List[Optional[torch.Tensor]] = [None] * self.num_scales
        attentions: List[Optional[torch.Tensor]] = [None] * self.num_scales
        h = skips[-1]
        for i in reversed(range(self.num_scales)):
            if i < self.num_scales - 1:
                h = torch.cat([self.ups[i](h), skips[i]], dim=1)
            h = self.dec_blocks[i](h, temb)
            h, attn = self.attentions[i](h, tokens, token_mask)
            features[i], attentions[i] = h, attn
        return self.conv_out(h), BackboneOutput(features=features, attentions=attentions)


class DiffusionBackbone(nn.Module):
    """The frozen diffusion backbone: denoiser, text encoder and the fixed image-prompt projection."""

    def __init__(self, config: BackboneConfig, vocabulary: Sequence[str], seed: int = 0):
        super().__init__()
        self.config = config
        self.schedule = build_schedule(config.timesteps, config.beta_start, config.beta_end)
        self.feature_timestep = config.feature_timestep
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.denoiser = Denoiser(config.widths, config.token_dim, config.attention_dim)
            self.text_encoder = TextEncoder(vocabulary, config.token_dim)
        generator = torch.Generator().manual_seed(config.image_projection_seed)
        deepest = config.widths[-1]
        projection = torch.randn(config.token_dim, deepest, generator=generator, dtype=torch.float64) / math.sqrt(deepest)
        self.register_buffer("image_projection", projection.to(torch.float32))
        self._guard = FreezeGuard()
        self.frozen = False

    @property
    def token_dim(self) -> int:
        return self.config.token_dim

    @property
    def dtype(self) -> torch.dtype:
        return self.image_projection.dtype

    @property
    def device(self) -> torch.device:
        return self.image_projection.device

    @property
    def vocabulary(self) -> Tuple[str, ...]:
        return self.text_encoder.vocabulary

    def _check_latent(self, z: torch.Tensor) -> None:
        if z.ndim != 4 or z.shape[1] != 3:
            raise ShapeError(f"expected images of shape [B, 3, H, W], got {tuple(z.shape)}")
        factor = self.denoiser.downsampling
        if z.shape[-2] % factor or z.shape[-1] % factor:
            raise ShapeError(f"spatial size {tuple(z.shape[-2:])} is not divisible by {factor}")
        if not bool(torch.isfinite(z).all()):
            raise ValueError("input contains non-finite values")

    def _tokens(self, tokens: Union[PromptBundle, torch.Tensor], batch: int) -> torch.Tensor:
        if isinstance(tokens, PromptBundle):
            tokens = tokens.tokens
        if tokens.shape[-1] != self.token_dim:
            raise ShapeError(f"token dimension {tokens.shape[-1]} does not match backbone dimension {self.token_dim}")
        if not bool(torch.isfinite(tokens).all()):
            raise ValueError("prompt tokens contain non-finite values")
        if tokens.ndim == 2:
            tokens = tokens.unsqueeze(0).expand(batch, -1, -1)
        return tokens.to(self.dtype)

    def denoise_predict(
        self,
        z_p: Union[LatentImage, torch.Tensor],
        p: Optional[Timestep],
        tokens: Union[PromptBundle, torch.Tensor],
        token_mask: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, BackboneOutput]:
        """``p`` may be None when ``z_p`` carries its timestep; a tag and an explicit ``p`` must agree."""
        if isinstance(z_p, LatentImage):
            if p is None:
                p = z_p.timestep
            elif not torch.equal(*torch.broadcast_tensors(torch.as_tensor(p).cpu(), z_p.timestep.cpu())):
                raise ValueError("timestep differs from the latent's tag")
            z_p = z_p.data
        elif p is None:
            raise ValueError("an untagged latent needs an explicit timestep")
        self._check_latent(z_p)
        batch = z_p.shape[0]
        steps = torch.as_tensor(p, dtype=torch.long, device=z_p.device)
        if steps.ndim == 0:
            steps = steps.expand(batch)
        if bool((steps < 0).any()) or bool((steps >= self.schedule.P).any()):
            raise ValueError(f"timestep out of range [0, {self.schedule.P})")
        return self.denoiser(z_p, steps, self._tokens(tokens, batch), token_mask)

    def extract_features(
        self, images: torch.Tensor, tokens: Union[PromptBundle, torch.Tensor], p_feat: Optional[int] = None
    ) -> BackboneOutput:
        """Deterministic extraction: the noise-free forward process at ``p_feat`` followed by one denoiser pass."""
        if not self.frozen:
            raise FrozenParameterError("feature extraction requires a frozen backbone")
        p = self.feature_timestep if p_feat is None else p_feat
        z_p = forward_noise(images, p, torch.zeros_like(images), self.schedule)
        _, out = self.denoise_predict(z_p, p, tokens)
        return out

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled deepest encoder feature, projected to N dims."""
        batched = image if image.ndim == 4 else image.unsqueeze(0)
        if batched.shape[0] != 1:
            raise ShapeError("an image prompt is built from exactly one image")
        self._check_latent(batched)
        p = self.feature_timestep
        z_p = forward_noise(batched, p, torch.zeros_like(batched), self.schedule)
        with torch.no_grad():
            skips, _ = self.denoiser.encode(z_p.data, torch.full((1,), p, dtype=torch.long, device=batched.device))
            pooled = skips[-1].mean(dim=(2, 3))[0]
            return self.project_pooled(pooled)

    def project_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.image_projection.to(pooled.dtype) @ pooled

    def freeze(self) -> str:
        self.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self._guard.record("backbone", self.state_dict().items())

    def verify_frozen(self) -> None:
        if not self.frozen:
            raise FrozenParameterError("backbone has not been frozen")
        self._guard.verify("backbone", self.state_dict().items())

    @property
    def digest(self) -> str:
        if not self.frozen:
            raise FrozenParameterError("backbone has not been frozen")
        return self._guard.digests["backbone"]

    def checkpoint_arrays(self) -> Dict[str, torch.Tensor]:
        return prefixed("backbone", self.state_dict())

    def checkpoint_metadata(self, seed: int) -> Dict:
        return {
            "kind": "backbone",
            "config": self.config.model_dump(mode="json"),
            "vocabulary": list(self.vocabulary),
            "seed": seed,
        }

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "DiffusionBackbone":
        meta = ckpt.metadata
        if meta.get("kind") != "backbone":
            raise CheckpointError("checkpoint does not hold a backbone")
        backbone = cls(BackboneConfig(**meta["config"]), meta["vocabulary"], seed=meta.get("seed", 0))
        backbone.load_state_dict(ckpt.namespace("backbone"))
        backbone.freeze()
        return backbone


@dataclass
class PretrainResult:
    losses: List[float] = field(default_factory=list)
    digest: str = ""

    @property
    def reduction_factor(self) -> float:
        if len(self.losses) < 2:
            return 1.0
        window = max(1, len(self.losses) // 20)
        first = sum(self.losses[:window]) / window
        last = sum(self.losses[-window:]) / window
        return first / last if last > 0 else float("inf")


def _endless(loader: DataLoader) -> Iterator:
    while True:
        yield from loader


def caption_tokens(
    backbone: DiffusionBackbone,
    labels: torch.Tensor,
    domain_index: torch.Tensor,
    class_names: Sequence[str],
    domain_names: Sequence[str],
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Caption of each image: all category tokens (absent classes masked) plus its domain's scene token."""
    encoder = backbone.text_encoder
    class_tokens = encoder.encode_many([category_template(c) for c in class_names])
    scene_tokens = encoder.encode_many([scene_template(d) for d in domain_names])
    batch = labels.shape[0]
    tokens = torch.cat(
        [class_tokens.unsqueeze(0).expand(batch, -1, -1), scene_tokens[domain_index].unsqueeze(1)], dim=1
    )
    present = torch.stack([(labels == c).flatten(1).any(dim=1) for c in range(len(class_names))], dim=1)
    mask = torch.cat([present, torch.ones(batch, 1, dtype=torch.bool, device=labels.device)], dim=1)
    return tokens, mask


def pretrain_backbone(
    backbone: DiffusionBackbone,
    dataset: Dataset,
    class_names: Sequence[str],
    domain_names: Sequence[str],
    seed: int = 0,
    writer=None,
) -> PretrainResult:
    """Trains epsilon_theta and the text encoder with the denoising objective, then freezes both.

    ``dataset`` yields ``(image, labels, domain_index)``; the caption of every
    image is derived from the classes present and its domain.
    """
    cfg = backbone.config
    if len(dataset) == 0:
        raise DatasetError("pretraining dataset is empty")
    writer = writer or NullWriter()
    generator = torch.Generator().manual_seed(seed)
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, generator=generator)
    params = list(backbone.denoiser.parameters()) + list(backbone.text_encoder.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    backbone.train()
    result = PretrainResult()
    batches = _endless(loader)
    for step in progress(range(cfg.pretrain_steps), total=cfg.pretrain_steps, desc="pretrain"):
        images, labels, domain_index = next(batches)
        images = images.to(dtype=backbone.dtype, device=backbone.device)
        labels, domain_index = labels.to(backbone.device), domain_index.to(backbone.device)
        tokens, mask = caption_tokens(backbone, labels, domain_index, class_names, domain_names)
        p = torch.randint(0, backbone.schedule.P, (images.shape[0],), generator=generator).to(backbone.device)
        eps = torch.randn(images.shape, generator=generator, dtype=torch.float64).to(dtype=images.dtype, device=backbone.device)
        z_p = forward_noise(images, p, eps, backbone.schedule)
        eps_hat, _ = backbone.denoise_predict(z_p, p, tokens, token_mask=mask)
        loss = diffusion_loss(eps, eps_hat)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(step, {"diffusion": value})
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        result.losses.append(value)
        writer.write({"step": step, "diffusion_loss": value})
        if step % cfg.log_interval == 0:
            logger.debug("pretrain step %d diffusion loss %.5f", step, value)
    result.digest = backbone.freeze()
    if result.losses:
        logger.info(
            "pretraining finished after %d steps: loss %.4f -> %.4f (x%.2f)",
            len(result.losses), result.losses[0], result.losses[-1], result.reduction_factor,
        )
    return result
