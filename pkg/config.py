import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from integrity import sha256_hex

VERSION = "0.3.0"
SCHEMA_VERSION = 1

DEFAULT_CLASS_NAMES = ["sky", "road", "car", "person", "sign", "tree"]
DEFAULT_DOMAINS = ["domainA", "domainB", "domainC"]
IRRELEVANT_SCENE_WORDS = ["sand", "grass", "water", "painting"]


class Settings(BaseSettings):
    DEVICE: str = "cpu"
    NUM_THREADS: int = 0
    LOG_LEVEL: str = "INFO"
    DATA_ROOT: Path = Path("data/toy")
    RUNS_ROOT: Path = Path("runs")

    model_config = SettingsConfigDict(env_file=".env", env_prefix="PTSEG_", extra="ignore")


settings = Settings()


Mode = Literal["pretrain", "train_baseline", "train_dg", "adapt_ttda", "eval", "oracle_train"]
SceneKind = Literal["source_text", "target_text", "irrelevant_text", "learned", "image"]
TEXT_KINDS = ("source_text", "target_text", "irrelevant_text")


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SplitRange(_Block):
    """Half-open seed range [start, stop) of one dataset split."""

    start: int = Field(ge=0)
    stop: int

    @model_validator(mode="after")
    def _ordered(self):
        if self.stop <= self.start:
            raise ValueError(f"empty seed range [{self.start}, {self.stop})")
        return self

    def overlaps(self, other: "SplitRange") -> bool:
        return self.start < other.stop and other.start < self.stop

    def seeds(self) -> range:
        return range(self.start, self.stop)


class LayoutConfig(_Block):
    min_size: float = Field(0.12, gt=0, le=1)
    max_size: float = Field(0.30, gt=0, le=1)
    horizon_low: float = Field(0.35, gt=0, lt=1)
    horizon_high: float = Field(0.65, gt=0, lt=1)
    max_attempts: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _ranges(self):
        if self.min_size > self.max_size:
            raise ValueError("min_size must not exceed max_size")
        if self.horizon_low > self.horizon_high:
            raise ValueError("horizon_low must not exceed horizon_high")
        return self


class DatasetSpec(_Block):
    domains: List[str] = Field(default_factory=lambda: list(DEFAULT_DOMAINS))
    splits: Dict[str, SplitRange] = Field(
        default_factory=lambda: {
            "train": SplitRange(start=0, stop=400),
            "val": SplitRange(start=100_000, stop=100_050),
            "test": SplitRange(start=200_000, stop=200_100),
        }
    )
    class_names: List[str] = Field(default_factory=lambda: list(DEFAULT_CLASS_NAMES))
    height: int = Field(64, gt=0)
    width: int = Field(64, gt=0)
    layout: LayoutConfig = Field(default_factory=LayoutConfig)

    @field_validator("class_names")
    @classmethod
    def _classes(cls, names: List[str]) -> List[str]:
        if len(names) < 3:
            raise ValueError("the scene layout needs at least 3 classes")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        return names

    @model_validator(mode="after")
    def _disjoint(self):
        items = sorted(self.splits.items())
        for i, (name_a, a) in enumerate(items):
            for name_b, b in items[i + 1:]:
                if a.overlaps(b):
                    raise ValueError(f"seed ranges of splits '{name_a}' and '{name_b}' overlap")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


class DatasetConfig(_Block):
    root: Path = Path("data/toy")
    spec: DatasetSpec = Field(default_factory=DatasetSpec)


class BackboneConfig(_Block):
    widths: List[int] = Field(default_factory=lambda: [32, 64, 128])
    token_dim: int = Field(64, gt=0)
    attention_dim: int = Field(64, gt=0)
    timesteps: int = Field(100, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    feature_timestep: int = Field(1, ge=0)
    pretrain_steps: int = Field(2000, ge=0)
    pretrain_split: str = "train"
    pretrain_domains: Optional[List[str]] = None  # None: every dataset domain
    extra_vocabulary: List[str] = Field(default_factory=list)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(2e-4, gt=0)
    image_projection_seed: int = 1234
    log_interval: int = Field(10, ge=1)
    checkpoint: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        if not self.widths:
            raise ValueError("at least one scale is required")
        if self.feature_timestep >= self.timesteps:
            raise ValueError("feature_timestep must be smaller than timesteps")
        return self

    @property
    def num_scales(self) -> int:
        return len(self.widths)


class HeadConfig(_Block):
    width: int = Field(128, gt=0)


class ImageRef(_Block):
    split: str = "val"
    domain: str = "domainC"
    index: int = Field(0, ge=0)


class ScenePromptSpec(_Block):
    kind: SceneKind
    text: Optional[str] = None
    image: Optional[ImageRef] = None
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _payload(self):
        if self.kind in TEXT_KINDS:
            if not self.text or self.image is not None or self.seed is not None:
                raise ValueError(f"scene prompt kind '{self.kind}' takes exactly a text payload")
        elif self.kind == "image":
            if self.image is None or self.text is not None or self.seed is not None:
                raise ValueError("scene prompt kind 'image' takes exactly an image payload")
        elif self.text is not None or self.image is not None:
            raise ValueError("scene prompt kind 'learned' takes only an optional seed")
        return self


class PromptConfig(_Block):
    class_names: Optional[List[str]] = None
    auxiliary_classes: List[str] = Field(default_factory=list)
    scene: Optional[ScenePromptSpec] = None
    randomization: List[ScenePromptSpec] = Field(default_factory=list)
    inference_index: int = Field(0, ge=0)


class DGConfig(_Block):
    steps: int = Field(1500, ge=0)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(1e-3, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    consistency_weight: float = Field(0.1, ge=0)
    detach_target: bool = False
    source_domain: str = "domainA"
    split: str = "train"
    checkpoint_interval: int = Field(0, ge=0)
    log_interval: int = Field(10, ge=1)


class TTDAConfig(_Block):
    lr: float = Field(1e-2, ge=0)
    steps: int = Field(5, ge=1)
    threshold: Optional[float] = None
    episodic: bool = False
    target_domain: str = "domainC"
    split: str = "test"
    max_images: Optional[int] = Field(None, ge=1)

    @field_validator("threshold")
    @classmethod
    def _threshold(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not 0.0 <= value < 1.0:
            raise ValueError("threshold must lie in [0, 1)")
        return value


class EvaluationConfig(_Block):
    domains: List[str] = Field(default_factory=lambda: ["domainC"])
    split: str = "test"
    batch_size: int = Field(16, ge=1)
    model_checkpoint: Optional[str] = None
    ttda_checkpoint: Optional[str] = None


class ExperimentConfig(BaseSettings):
    schema_version: Literal[1] = SCHEMA_VERSION
    name: str
    mode: Mode
    label: Optional[str] = None  # report column; derived from mode and prompts when unset
    output_dir: Path = Path("runs")
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    prompts: PromptConfig = Field(default_factory=PromptConfig)
    train: DGConfig = Field(default_factory=DGConfig)
    ttda: TTDAConfig = Field(default_factory=TTDAConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    model_config = SettingsConfigDict(env_prefix="PTSEG_", env_nested_delimiter="__", extra="forbid")

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        # environment wins over the config file
        return env_settings, init_settings

    @model_validator(mode="after")
    def _mode_requirements(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        names = self.class_names
        if len(set(names + self.prompts.auxiliary_classes)) != len(names) + len(self.prompts.auxiliary_classes):
            raise ValueError("class names and auxiliary classes must be unique")
        needs_backbone = self.mode != "pretrain"
        if needs_backbone and not self.backbone.checkpoint:
            raise ValueError(f"mode '{self.mode}' requires backbone.checkpoint")
        if self.mode == "train_dg":
            k = len(self.prompts.randomization)
            if k < 2:
                raise ValueError("prompt randomization requires K >= 2")
            if self.prompts.scene is not None:
                raise ValueError("train_dg takes its scene prompts from prompts.randomization")
            if self.prompts.inference_index >= k:
                raise ValueError("prompts.inference_index must index prompts.randomization")
        if self.mode in ("train_baseline", "oracle_train") and self.prompts.randomization:
            raise ValueError(f"mode '{self.mode}' uses prompts.scene; prompts.randomization must be empty")
        if self.mode in ("adapt_ttda", "eval") and not self.evaluation.model_checkpoint:
            raise ValueError(f"mode '{self.mode}' requires evaluation.model_checkpoint")
        known = set(self.dataset.spec.domains)
        used = set(self.evaluation.domains) | {self.train.source_domain, self.ttda.target_domain}
        used |= set(self.backbone.pretrain_domains or [])
        used |= {s.image.domain for s in self.scene_specs if s.image is not None}
        unknown = sorted(used - known)
        if unknown:
            raise ValueError(f"unknown domain(s): {', '.join(unknown)}")
        return self

    @classmethod
    def from_file(cls, path: Path, **overrides) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        data.update(overrides)
        return cls(**data)

    @property
    def class_names(self) -> List[str]:
        return list(self.prompts.class_names or self.dataset.spec.class_names)

    @property
    def scene_specs(self) -> List[ScenePromptSpec]:
        if self.prompts.randomization:
            return list(self.prompts.randomization)
        return [self.prompts.scene] if self.prompts.scene is not None else []

    def canonical_json(self) -> str:
        payload = self.model_dump(mode="json", exclude={"output_dir", "seeds"})
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return sha256_hex(self.canonical_json().encode("utf-8"))

    @staticmethod
    def resolve(template: str, seed: int) -> Path:
        return Path(template.format(seed=seed))
