"""Procedural multi-domain segmentation benchmark.

Every sample is a horizon-split background (classes 0 and 1) with one object
per remaining class drawn on top in class order. The layout and the object
colors depend only on the seed; the domain transform touches the image only,
so the same seed gives bit-identical label maps in every domain.

On disk::

    <root>/dataset.json                               resolved DatasetSpec
    <root>/manifest.jsonl                             one record per sample
    <root>/<split>/<domain>/images/<seed>.png         RGB, 8 bit
    <root>/<split>/<domain>/labels/<seed>.png         class indices, 8 bit
"""
import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw
from torch.utils.data import Dataset

from config import DatasetSpec, LayoutConfig
from exceptions import DatasetError, LayoutError
from integrity import sha256_hex
from log import JsonlWriter, iter_jsonl, logger, progress
from models import IGNORE_INDEX

RGB = Tuple[float, float, float]

DEFAULT_PALETTE: Dict[str, RGB] = {
    "sky": (0.55, 0.72, 0.92),
    "road": (0.38, 0.36, 0.36),
    "car": (0.78, 0.16, 0.14),
    "person": (0.93, 0.74, 0.55),
    "sign": (0.96, 0.85, 0.10),
    "tree": (0.16, 0.52, 0.20),
}
OBJECT_SHAPES = ("rectangle", "ellipse", "triangle")
COLOR_JITTER = 0.05


def palette_for(class_names: Sequence[str]) -> List[RGB]:
    """Default palette colors, with seeded colors for classes it does not know."""
    colors = []
    for i, name in enumerate(class_names):
        if name in DEFAULT_PALETTE:
            colors.append(DEFAULT_PALETTE[name])
        else:
            rng = np.random.default_rng([i, int(sha256_hex(name.encode("utf-8"))[:8], 16)])
            colors.append(tuple(float(c) for c in rng.uniform(0.1, 0.9, size=3)))
    return colors


def object_shape(class_index: int) -> str:
    return OBJECT_SHAPES[(class_index - 2) % len(OBJECT_SHAPES)]


@dataclass(frozen=True)
class DomainSpec:
    name: str
    brightness: float = 1.0
    contrast: float = 1.0
    hue_shift: float = 0.0  # degrees around the gray axis
    noise_std: float = 0.0
    fog: float = 0.0  # blend weight towards fog_color
    fog_color: RGB = (0.78, 0.78, 0.80)
    palette: Optional[Tuple[RGB, ...]] = None

    @property
    def is_identity(self) -> bool:
        return (
            self.brightness == 1.0
            and self.contrast == 1.0
            and self.hue_shift == 0.0
            and self.noise_std == 0.0
            and self.fog == 0.0
        )


DEFAULT_DOMAIN_SPECS: Dict[str, DomainSpec] = {
    "domainA": DomainSpec(name="domainA"),
    "domainB": DomainSpec(name="domainB", brightness=1.15, hue_shift=40.0),
    "domainC": DomainSpec(name="domainC", brightness=0.9, contrast=0.45, noise_std=0.08, fog=0.35),
}


def domain_spec(name: str) -> DomainSpec:
    try:
        return DEFAULT_DOMAIN_SPECS[name]
    except KeyError:
        raise DatasetError(f"unknown domain '{name}'; known: {', '.join(sorted(DEFAULT_DOMAIN_SPECS))}") from None


@dataclass
class SceneSample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    labels: np.ndarray  # uint8 [H, W]
    domain: str
    seed: int
    meta: Dict = field(default_factory=dict)


@dataclass(frozen=True)
class _Object:
    class_index: int
    shape: str
    box: Tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive
    color: RGB


def _jittered(rng: np.random.Generator, color: RGB) -> RGB:
    return tuple(float(c) for c in np.clip(np.asarray(color) + rng.normal(0.0, COLOR_JITTER, size=3), 0.0, 1.0))


def _layout(
    rng: np.random.Generator, num_classes: int, height: int, width: int, layout: LayoutConfig, palette: Sequence[RGB]
) -> Tuple[int, List[_Object]]:
    horizon = int(round(rng.uniform(layout.horizon_low, layout.horizon_high) * height))
    objects = []
    for c in range(2, num_classes):
        w = max(1, int(round(rng.uniform(layout.min_size, layout.max_size) * width)))
        h = max(1, int(round(rng.uniform(layout.min_size, layout.max_size) * height)))
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        objects.append(_Object(c, object_shape(c), (x0, y0, x0 + w - 1, y0 + h - 1), _jittered(rng, palette[c])))
    return horizon, objects


def _to_bytes(color: RGB) -> Tuple[int, int, int]:
    return tuple(int(round(255 * c)) for c in color)


def _draw(draw: ImageDraw.ImageDraw, obj: _Object, fill) -> None:
    x0, y0, x1, y1 = obj.box
    if obj.shape == "rectangle":
        draw.rectangle((x0, y0, x1, y1), fill=fill)
    elif obj.shape == "ellipse":
        draw.ellipse((x0, y0, x1, y1), fill=fill)
    else:
        draw.polygon([(x0, y1), (x1, y1), ((x0 + x1) / 2.0, y0)], fill=fill)


def _render(
    horizon: int, objects: Sequence[_Object], height: int, width: int, palette: Sequence[RGB], rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    top, bottom = np.asarray(_jittered(rng, palette[0])), np.asarray(_jittered(rng, palette[1]))
    rows = np.arange(height)[:, None, None]
    # the top region brightens towards the horizon
    ramp = np.clip(rows / max(horizon, 1), 0.0, 1.0) * 0.15
    background = np.where(rows < horizon, np.clip(top + ramp, 0, 1), bottom)
    background = np.broadcast_to(background, (height, width, 3))
    image = Image.fromarray(np.round(background * 255).astype(np.uint8))
    labels = Image.new("L", (width, height), 1)
    if horizon > 0:
        ImageDraw.Draw(labels).rectangle((0, 0, width - 1, horizon - 1), fill=0)
    draw_image, draw_labels = ImageDraw.Draw(image), ImageDraw.Draw(labels)
    for obj in objects:
        _draw(draw_image, obj, _to_bytes(obj.color))
        _draw(draw_labels, obj, obj.class_index)
    return np.asarray(image, dtype=np.uint8), np.asarray(labels, dtype=np.uint8)


def _hue_matrix(degrees: float) -> np.ndarray:
    angle = math.radians(degrees)
    cos, sin = math.cos(angle), math.sin(angle)
    cross = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]]) / math.sqrt(3.0)
    return cos * np.eye(3) + (1.0 - cos) / 3.0 * np.ones((3, 3)) + sin * cross


def apply_domain(image: np.ndarray, domain: DomainSpec, seed: int) -> np.ndarray:
    """Global style transform on an [H, W, 3] uint8 render; returns float32 [H, W, 3] on the 8-bit grid."""
    x = image.astype(np.float64) / 255.0
    if domain.is_identity:
        return x.astype(np.float32)
    if domain.hue_shift:
        x = np.clip(x @ _hue_matrix(domain.hue_shift).T, 0.0, 1.0)
    x = x * domain.brightness
    if domain.contrast != 1.0:
        mean = x.mean()
        x = mean + (x - mean) * domain.contrast
    if domain.fog:
        x = (1.0 - domain.fog) * x + domain.fog * np.asarray(domain.fog_color)
    if domain.noise_std:
        rng = np.random.default_rng([seed, int(sha256_hex(domain.name.encode("utf-8"))[:8], 16)])
        x = x + rng.normal(0.0, domain.noise_std, size=x.shape)
    x = np.clip(x, 0.0, 1.0)
    return (np.round(x * 255.0) / 255.0).astype(np.float32)


def gen_scene(
    seed: int,
    domain: DomainSpec,
    layout_config: Optional[LayoutConfig] = None,
    class_names: Sequence[str] = tuple(DEFAULT_PALETTE),
    height: int = 64,
    width: int = 64,
) -> SceneSample:
    layout_config = layout_config or LayoutConfig()
    num_classes = len(class_names)
    if num_classes < 3:
        raise ValueError("the scene layout needs at least 3 classes")
    if num_classes > IGNORE_INDEX:
        raise ValueError(f"at most {IGNORE_INDEX} classes fit an 8-bit label map")
    palette = list(domain.palette) if domain.palette else palette_for(class_names)
    for attempt in range(layout_config.max_attempts):
        rng = np.random.default_rng([seed, attempt])
        horizon, objects = _layout(rng, num_classes, height, width, layout_config, palette)
        render, labels = _render(horizon, objects, height, width, palette, rng)
        if np.unique(labels).size == num_classes:
            break
    else:
        raise LayoutError(f"seed {seed}: could not place all {num_classes} classes in {layout_config.max_attempts} attempts")
    image = apply_domain(render, domain, seed)
    if image.min() < 0.0 or image.max() > 1.0:
        raise AssertionError("domain transform left the [0, 1] range")
    return SceneSample(
        image=np.ascontiguousarray(image.transpose(2, 0, 1)),
        labels=labels,
        domain=domain.name,
        seed=seed,
        meta={"attempt": attempt, "horizon": horizon},
    )


def expected_object_fraction(shape: str, layout: LayoutConfig) -> float:
    """Expected share of the image covered by one unoccluded object of ``shape``."""
    side = (layout.min_size + layout.max_size) / 2.0
    return side * side * {"rectangle": 1.0, "ellipse": math.pi / 4.0, "triangle": 0.5}[shape]


def _sample_paths(split: str, domain: str, seed: int) -> Tuple[str, str]:
    base = f"{split}/{domain}"
    return f"{base}/images/{seed:06d}.png", f"{base}/labels/{seed:06d}.png"


def gen_dataset(spec: DatasetSpec, out_dir: Path, force: bool = False) -> Path:
    """Writes every (split, domain, seed) sample plus the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise DatasetError(f"{out_dir} is not empty; pass force to regenerate")
        for name in list(spec.splits) + ["manifest.jsonl", "dataset.json"]:
            target = out_dir / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    out_dir.mkdir(parents=True, exist_ok=True)
    domains = [domain_spec(name) for name in spec.domains]
    jobs = [(split, domain, seed) for split, rng in sorted(spec.splits.items()) for domain in domains for seed in rng.seeds()]
    manifest = out_dir / "manifest.jsonl"
    with JsonlWriter(manifest) as writer:
        for split, domain, seed in progress(jobs, total=len(jobs), desc="gen-data"):
            sample = gen_scene(seed, domain, spec.layout, spec.class_names, spec.height, spec.width)
            image_path, label_path = _sample_paths(split, domain.name, seed)
            (out_dir / image_path).parent.mkdir(parents=True, exist_ok=True)
            (out_dir / label_path).parent.mkdir(parents=True, exist_ok=True)
            pixels = np.round(sample.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
            Image.fromarray(pixels).save(out_dir / image_path, format="PNG")
            Image.fromarray(sample.labels).save(out_dir / label_path, format="PNG")
            writer.write(
                {
                    "id": f"{split}/{domain.name}/{seed:06d}",
                    "split": split,
                    "domain": domain.name,
                    "seed": seed,
                    "image_path": image_path,
                    "label_path": label_path,
                }
            )
    (out_dir / "dataset.json").write_text(json.dumps(spec.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8")
    logger.info("wrote %d samples to %s", len(jobs), out_dir)
    return manifest


def load_dataset_spec(root: Path) -> DatasetSpec:
    path = Path(root) / "dataset.json"
    if not path.is_file():
        raise DatasetError(f"no generated dataset at {root}; run gen-data first")
    return DatasetSpec(**json.loads(path.read_text(encoding="utf-8")))


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return (np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0).transpose(2, 0, 1)


def read_labels(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.uint8)


class SceneDataset(Dataset):
    """In-memory samples yielding ``(image [3, H, W] float32, labels [H, W] long, domain_index)``."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, domain_index: torch.Tensor, domain_names: Sequence[str], records: Optional[List[Dict]] = None):
        if not (images.shape[0] == labels.shape[0] == domain_index.shape[0]):
            raise DatasetError("images, labels and domain indices differ in length")
        self.images = images
        self.labels = labels
        self.domain_index = domain_index
        self.domain_names = list(domain_names)
        self.records = records or []

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def __getitem__(self, index: int):
        return self.images[index], self.labels[index], self.domain_index[index]

    @classmethod
    def from_samples(cls, samples: Sequence[SceneSample], domain_names: Sequence[str]) -> "SceneDataset":
        if not samples:
            raise DatasetError("no samples given")
        index = {name: i for i, name in enumerate(domain_names)}
        missing = sorted({s.domain for s in samples} - set(index))
        if missing:
            raise DatasetError(f"samples from unlisted domain(s): {', '.join(missing)}")
        return cls(
            images=torch.from_numpy(np.stack([s.image for s in samples])),
            labels=torch.from_numpy(np.stack([s.labels for s in samples]).astype(np.int64)),
            domain_index=torch.tensor([index[s.domain] for s in samples], dtype=torch.long),
            domain_names=domain_names,
            records=[{"domain": s.domain, "seed": s.seed} for s in samples],
        )

    @classmethod
    def from_manifest(
        cls, root: Path, split: str, domains: Optional[Sequence[str]] = None, limit: Optional[int] = None
    ) -> "SceneDataset":
        """Loads one split (optionally restricted to some domains), ordered by domain then seed."""
        root = Path(root)
        spec = load_dataset_spec(root)
        manifest = root / "manifest.jsonl"
        if not manifest.is_file():
            raise DatasetError(f"manifest missing under {root}")
        if split not in spec.splits:
            raise DatasetError(f"unknown split '{split}'")
        wanted = list(domains) if domains is not None else list(spec.domains)
        unknown = sorted(set(wanted) - set(spec.domains))
        if unknown:
            raise DatasetError(f"dataset at {root} has no domain(s): {', '.join(unknown)}")
        order = {name: i for i, name in enumerate(spec.domains)}
        records = [r for r in iter_jsonl(manifest) if r["split"] == split and r["domain"] in wanted]
        records.sort(key=lambda r: (order[r["domain"]], r["seed"]))
        if limit is not None:
            per_domain: Dict[str, int] = {}
            kept = []
            for r in records:
                if per_domain.get(r["domain"], 0) < limit:
                    per_domain[r["domain"]] = per_domain.get(r["domain"], 0) + 1
                    kept.append(r)
            records = kept
        if not records:
            raise DatasetError(f"no samples for split '{split}' and domain(s) {wanted}")
        images = np.stack([read_image(root / r["image_path"]) for r in records])
        labels = np.stack([read_labels(root / r["label_path"]) for r in records]).astype(np.int64)
        return cls(
            images=torch.from_numpy(images),
            labels=torch.from_numpy(labels),
            domain_index=torch.tensor([order[r["domain"]] for r in records], dtype=torch.long),
            domain_names=spec.domains,
            records=records,
        )
