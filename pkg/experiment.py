"""Runs one experiment configuration over its seeds.

Each seed gets a self-describing directory ``<output_dir>/<name>/seed_<s>/``
holding the resolved config, its digest, version and checkpoint digests, the
JSONL log, checkpoints, ``metrics.csv``, a loss curve and a ``COMPLETE``
marker once every artifact has been written.
"""
import json
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader

from backbone import DiffusionBackbone, pretrain_backbone
from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from config import SCHEMA_VERSION, TEXT_KINDS, VERSION, ExperimentConfig, ScenePromptSpec, settings
from exceptions import CheckpointError, ConfigError, DatasetError, RunDirectoryError
from head import SegmentationHead
from log import JsonlWriter, logger, plot_curves
from metrics import ConfusionMatrix
from models import CategoryPrompt, PromptBundle, ScenePrompt
from prompts import build_category_prompt, build_vocabulary, bundle, make_scene_prompt
from synthetic import SceneDataset, load_dataset_spec
from training import (
    TrainState,
    forward_logits,
    init_train_state,
    optimizer_arrays,
    restore_optimizer,
    train_baseline,
    train_prompt_randomization,
)
from ttda import adapt

COMPLETE = "COMPLETE"
BASE_COLUMNS = ["setting", "benchmark", "source", "target", "seed", "split", "mIoU", "pixel_acc"]

_BASELINE_LABELS = {
    None: "w/o C_s",
    "source_text": "Source (C_s)",
    "target_text": "Target (C_s)",
    "learned": "Learned (C_s)",
    "image": "Image (C_s)",
    "irrelevant_text": "Irrelevant (C_s)",
}


def benchmark_name(source: str, target: str) -> str:
    return f"{source}->{target}"


def write_json(path: Path, payload: Dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def setting_label(config: ExperimentConfig) -> str:
    """Ablation column of a run: explicit ``label`` or one derived from the mode and prompts."""
    if config.label:
        return config.label
    if config.mode == "oracle_train":
        return "Oracle"
    if config.mode == "adapt_ttda":
        return "TTDA"
    if config.mode == "train_dg":
        kinds = {s.kind for s in config.prompts.randomization}
        if "image" in kinds:
            label = "DG-I"
        elif "irrelevant_text" in kinds:
            label = "DG-T (irrelevant)"
        elif "learned" in kinds:
            label = "DG-L"
        else:
            label = "DG-T"
    else:
        scene = config.prompts.scene
        label = _BASELINE_LABELS[scene.kind if scene is not None else None]
    if config.prompts.auxiliary_classes:
        label += " +aux"
    return label


@dataclass
class LoadedModel:
    head: SegmentationHead
    category: CategoryPrompt
    scene: Optional[ScenePrompt]
    metadata: Dict
    digest: str

    @property
    def prompt(self) -> PromptBundle:
        return bundle(self.category, self.scene)


def load_model(path: Path, backbone: DiffusionBackbone) -> LoadedModel:
    ckpt = load_checkpoint(path)
    meta = ckpt.metadata
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path} does not hold a trained model")
    if meta.get("backbone_digest") != backbone.digest:
        raise CheckpointError(f"{path} was trained on a different backbone")
    spec = meta["head"]
    head = SegmentationHead(spec["feature_channels"], spec["num_tokens"], spec["num_classes"], spec["width"])
    head.load_state_dict(ckpt.namespace("head"))
    head.to(device=backbone.device, dtype=backbone.dtype).requires_grad_(False).eval()
    category = CategoryPrompt(
        class_names=tuple(meta["class_names"]),
        tokens=ckpt.arrays["prompt/category"].to(device=backbone.device, dtype=backbone.dtype),
        num_segmentation_classes=meta["num_segmentation_classes"],
    )
    scene = None
    if "scene/token" in ckpt:
        token = ckpt.arrays["scene/token"].to(device=backbone.device, dtype=backbone.dtype)
        scene = ScenePrompt(token=token, kind=meta["scene_kind"], descriptor=meta.get("scene_descriptor", ""))
    return LoadedModel(head=head, category=category, scene=scene, metadata=meta, digest=ckpt.freeze_digest)


def evaluate(
    backbone: DiffusionBackbone,
    head: SegmentationHead,
    prompt: PromptBundle,
    dataset: SceneDataset,
    num_classes: int,
    batch_size: int = 16,
) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    head.eval()
    with torch.no_grad():
        for images, labels, _ in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            logits = forward_logits(backbone, head, images, prompt)
            cm.update(logits.argmax(dim=1), labels)
    return cm


def metric_row(
    cm: ConfusionMatrix, class_names: Sequence[str], setting: str, source: str, target: str, seed: int, split: str
) -> Dict:
    per_class, miou = cm.iou()
    row = {
        "setting": setting,
        "benchmark": benchmark_name(source, target),
        "source": source,
        "target": target,
        "seed": seed,
        "split": split,
        "mIoU": 100.0 * miou,
        "pixel_acc": 100.0 * cm.pixel_accuracy(),
    }
    for name, value in zip(class_names, per_class):
        row[f"iou_{name}"] = 100.0 * value
    return row


def write_metrics(path: Path, rows: List[Dict], class_names: Sequence[str]) -> None:
    columns = BASE_COLUMNS + [f"iou_{c}" for c in class_names]
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format="%.6f")


class ExperimentRunner:
    def __init__(
        self,
        config: ExperimentConfig,
        out: Optional[Path] = None,
        seeds: Optional[Sequence[int]] = None,
        resume: bool = False,
        force: bool = False,
    ):
        if resume and force:
            raise ConfigError("--resume and --force are mutually exclusive")
        self.config = config if out is None else config.model_copy(update={"output_dir": Path(out)})
        self.seeds = list(seeds) if seeds is not None else list(config.seeds)
        self.resume = resume
        self.force = force
        self.label = setting_label(self.config)
        self.device = torch.device(settings.DEVICE)
        self._modes = {
            "pretrain": self._pretrain,
            "train_baseline": self._train,
            "train_dg": self._train,
            "oracle_train": self._train,
            "adapt_ttda": self._adapt,
            "eval": self._eval,
        }

    def run_dir(self, seed: int) -> Path:
        return Path(self.config.output_dir) / self.config.name / f"seed_{seed}"

    def run(self) -> List[Path]:
        if settings.NUM_THREADS:
            torch.set_num_threads(settings.NUM_THREADS)
        torch.use_deterministic_algorithms(True, warn_only=True)
        return [self.run_seed(seed) for seed in self.seeds]

    def run_seed(self, seed: int) -> Path:
        run_dir = self.run_dir(seed)
        if not self._open(run_dir):
            logger.info("%s is already complete; skipping", run_dir)
            return run_dir
        logger.info("[%s] mode=%s seed=%d -> %s", self.config.name, self.config.mode, seed, run_dir)
        torch.manual_seed(seed)
        digests = self._modes[self.config.mode](seed, run_dir)
        digests["config"] = self.config.digest()
        (run_dir / "digests.json").write_text(json.dumps(digests, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (run_dir / COMPLETE).write_text("ok\n", encoding="utf-8")
        return run_dir

    def _open(self, run_dir: Path) -> bool:
        """Prepares the run directory; False when a resumed run is already complete."""
        digest = self.config.digest()
        if run_dir.exists() and any(run_dir.iterdir()):
            if self.force:
                shutil.rmtree(run_dir)
            elif self.resume:
                recorded_path = run_dir / "config.digest"
                recorded = recorded_path.read_text(encoding="utf-8").strip() if recorded_path.is_file() else None
                if recorded != digest:
                    raise ConfigError(
                        f"{run_dir} was produced by config digest {recorded}; refusing to resume with {digest}"
                    )
                if (run_dir / COMPLETE).is_file():
                    return False
            else:
                raise RunDirectoryError(f"{run_dir} already exists; pass --resume to continue or --force to overwrite")
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / COMPLETE).unlink(missing_ok=True)
        resolved = self.config.model_dump(mode="json")
        resolved["seed"] = int(run_dir.name.split("_", 1)[1])
        (run_dir / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (run_dir / "config.digest").write_text(digest + "\n", encoding="utf-8")
        version = {
            "version": VERSION,
            "schema_version": SCHEMA_VERSION,
            "torch": torch.__version__,
            "numpy": np.__version__,
        }
        (run_dir / "version.json").write_text(json.dumps(version, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return True

    # data and models

    def _dataset(self, split: str, domains: Optional[Sequence[str]] = None, limit: Optional[int] = None) -> SceneDataset:
        root = Path(self.config.dataset.root)
        on_disk = load_dataset_spec(root)
        if on_disk.class_names != self.config.dataset.spec.class_names:
            raise DatasetError(f"dataset at {root} has classes {on_disk.class_names}, config expects {self.config.dataset.spec.class_names}")
        if on_disk.class_names != self.config.class_names:
            raise DatasetError("prompts.class_names must match the dataset classes and their order")
        return SceneDataset.from_manifest(root, split, domains, limit)

    def _backbone(self, seed: int) -> DiffusionBackbone:
        path = self.config.resolve(self.config.backbone.checkpoint, seed)
        backbone = DiffusionBackbone.from_checkpoint(load_checkpoint(path))
        return backbone.to(self.device)

    def _scene(self, spec: ScenePromptSpec, backbone: DiffusionBackbone, seed: int) -> ScenePrompt:
        if spec.kind in TEXT_KINDS:
            return make_scene_prompt(spec.kind, spec.text, backbone)
        if spec.kind == "image":
            ref = spec.image
            pool = self._dataset(ref.split, [ref.domain])
            if ref.index >= len(pool):
                raise DatasetError(f"image prompt index {ref.index} outside {ref.split}/{ref.domain} ({len(pool)} samples)")
            image = pool.images[ref.index].to(dtype=backbone.dtype, device=backbone.device)
            scene = make_scene_prompt("image", image, backbone)
            scene.descriptor = f"image:{ref.split}/{ref.domain}/{ref.index}"
            return scene
        return make_scene_prompt("learned", spec.seed if spec.seed is not None else seed, backbone)

    def _evaluate_rows(
        self, backbone: DiffusionBackbone, model: LoadedModel, source: str, seed: int, setting: str
    ) -> List[Dict]:
        cfg = self.config.evaluation
        names = list(model.category.class_names[: model.category.num_segmentation_classes])
        rows = []
        for domain in cfg.domains:
            data = self._dataset(cfg.split, [domain])
            cm = evaluate(backbone, model.head, model.prompt, data, len(names), cfg.batch_size)
            rows.append(metric_row(cm, names, setting, source, domain, seed, cfg.split))
            logger.info("%s %s seed %d: mIoU %.2f", setting, benchmark_name(source, domain), seed, rows[-1]["mIoU"])
        return rows

    def _source_miou(
        self, backbone: DiffusionBackbone, head: SegmentationHead, prompt: PromptBundle, num_classes: int, source: str
    ) -> float:
        """mIoU on the source domain's evaluation split, the held-in sanity check of a training run."""
        cfg = self.config.evaluation
        data = self._dataset(cfg.split, [source])
        return 100.0 * evaluate(backbone, head, prompt, data, num_classes, cfg.batch_size).iou()[1]

    # modes

    def _pretrain(self, seed: int, run_dir: Path) -> Dict[str, str]:
        cfg = self.config
        domains = cfg.backbone.pretrain_domains or cfg.dataset.spec.domains
        data = self._dataset(cfg.backbone.pretrain_split, domains)
        vocabulary = build_vocabulary(
            cfg.class_names, cfg.prompts.auxiliary_classes, cfg.dataset.spec.domains, cfg.backbone.extra_vocabulary
        )
        backbone = DiffusionBackbone(cfg.backbone, vocabulary, seed=seed).to(self.device)
        with JsonlWriter(run_dir / "log.jsonl") as writer:
            result = pretrain_backbone(backbone, data, cfg.class_names, data.domain_names, seed, writer)
        ckpt_digest = save_checkpoint(run_dir / "backbone.ckpt", backbone.checkpoint_arrays(), backbone.checkpoint_metadata(seed))
        records = [{"step": i, "diffusion_loss": v} for i, v in enumerate(result.losses)]
        plot_curves(records, ["diffusion_loss"], run_dir / "loss_curve.png", title=f"{cfg.name} seed {seed}")
        logger.info("diffusion loss reduced by a factor of %.2f", result.reduction_factor)
        summary = {
            "steps": len(result.losses),
            "initial_loss": result.losses[0] if result.losses else None,
            "final_loss": result.losses[-1] if result.losses else None,
            "reduction_factor": result.reduction_factor,
        }
        write_json(run_dir / "pretrain_summary.json", summary)
        return {"backbone": result.digest, "backbone.ckpt": ckpt_digest}

    def _save_train_state(self, run_dir: Path, state: TrainState) -> None:
        arrays = dict(state.head.checkpoint_arrays())
        for k, scene in enumerate(state.scenes):
            if scene.trainable:
                arrays[f"scene/{k}"] = scene.token
        arrays.update(optimizer_arrays(state))
        metadata = {"kind": "train_state", "step": state.step, "config_digest": self.config.digest(), "history": state.history}
        save_checkpoint(run_dir / "train_state.ckpt", arrays, metadata, precision="float64")
        logger.debug("saved train state at step %d", state.step)

    def _restore_train_state(self, state: TrainState, ckpt: Checkpoint) -> None:
        if ckpt.metadata.get("kind") != "train_state":
            raise CheckpointError("not a train-state checkpoint")
        if ckpt.metadata.get("config_digest") != self.config.digest():
            raise ConfigError("train-state checkpoint belongs to a different config")
        dtype = next(state.head.parameters()).dtype
        state.head.load_state_dict({k: v.to(dtype) for k, v in ckpt.namespace("head").items()})
        with torch.no_grad():
            for k, scene in enumerate(state.scenes):
                if scene.trainable:
                    scene.token.copy_(ckpt.arrays[f"scene/{k}"].to(scene.token.dtype))
        state.step = ckpt.metadata["step"]
        state.history = list(ckpt.metadata["history"])
        restore_optimizer(state, ckpt.arrays)
        logger.info("resuming training at step %d", state.step)

    def _train(self, seed: int, run_dir: Path) -> Dict[str, str]:
        cfg = self.config
        backbone = self._backbone(seed)
        source = cfg.train.source_domain
        data = self._dataset(cfg.train.split, [source])
        category = build_category_prompt(backbone.text_encoder, cfg.class_names, cfg.prompts.auxiliary_classes)
        scenes = [self._scene(spec, backbone, seed) for spec in cfg.scene_specs]
        head = SegmentationHead(
            backbone.config.widths,
            category.C + (1 if scenes else 0),
            category.num_segmentation_classes,
            cfg.head.width,
            seed=seed,
        ).to(device=backbone.device, dtype=backbone.dtype)
        index = cfg.prompts.inference_index if cfg.mode == "train_dg" else 0
        scene = scenes[index] if scenes else None
        untrained = self._source_miou(backbone, head, bundle(category, scene), category.num_segmentation_classes, source)
        state = init_train_state(backbone, head, category, scenes, cfg.train)
        state_path = run_dir / "train_state.ckpt"
        if self.resume and state_path.is_file():
            self._restore_train_state(state, load_checkpoint(state_path))

        with JsonlWriter(run_dir / "log.jsonl") as writer:
            for record in state.history:
                writer.write(record)
            save = lambda s: self._save_train_state(run_dir, s)  # noqa: E731
            if cfg.mode == "train_dg":
                train_prompt_randomization(backbone, data, head, category, scenes, cfg.train, seed, writer, state, save)
            else:
                train_baseline(backbone, data, head, category, scene, cfg.train, seed, writer, state, save)

        arrays = dict(head.checkpoint_arrays())
        arrays["prompt/category"] = category.tokens
        if scene is not None:
            arrays["scene/token"] = scene.token
        metadata = {
            "kind": "model",
            "setting": self.label,
            "class_names": list(category.class_names),
            "num_segmentation_classes": category.num_segmentation_classes,
            "head": {
                "feature_channels": list(head.feature_channels),
                "num_tokens": head.num_tokens,
                "num_classes": head.num_classes,
                "width": cfg.head.width,
            },
            "scene_kind": scene.kind if scene is not None else None,
            "scene_descriptor": scene.descriptor if scene is not None else None,
            "source_domain": source,
            "backbone_digest": backbone.digest,
            "seed": seed,
        }
        model_digest = save_checkpoint(run_dir / "model.ckpt", arrays, metadata)
        state_path.unlink(missing_ok=True)
        plot_curves(state.history, ["total", "consistency"], run_dir / "loss_curve.png", title=f"{self.label} seed {seed}")

        model = load_model(run_dir / "model.ckpt", backbone)
        trained = self._source_miou(backbone, model.head, model.prompt, category.num_segmentation_classes, source)
        logger.info("%s seed %d on %s: mIoU %.2f untrained, %.2f trained", self.label, seed, source, untrained, trained)
        if trained <= untrained:
            logger.warning("training did not improve the source mIoU of %s seed %d", self.label, seed)
        summary = {
            "source_domain": source,
            "split": cfg.evaluation.split,
            "mIoU_untrained_source": untrained,
            "mIoU_trained_source": trained,
        }
        write_json(run_dir / "train_summary.json", summary)
        write_metrics(run_dir / "metrics.csv", self._evaluate_rows(backbone, model, source, seed, self.label), cfg.class_names)
        return {"backbone": backbone.digest, "model.ckpt": model_digest}

    def _adapt(self, seed: int, run_dir: Path) -> Dict[str, str]:
        cfg = self.config
        backbone = self._backbone(seed)
        model = load_model(cfg.resolve(cfg.evaluation.model_checkpoint, seed), backbone)
        if model.scene is None:
            raise ConfigError("test-time adaptation needs a model trained with a scene prompt")
        target = cfg.ttda.target_domain
        stream = self._dataset(cfg.ttda.split, [target], limit=cfg.ttda.max_images)
        pairs = [(stream.images[i], stream.labels[i]) for i in range(len(stream))]
        with JsonlWriter(run_dir / "log.jsonl") as writer:
            result = adapt(backbone, model.head, model.category, model.scene, pairs, cfg.ttda, writer)
        metadata = {"kind": "ttda", "model_digest": model.digest, "images": len(pairs), "seed": seed}
        ttda_digest = save_checkpoint(run_dir / "ttda.ckpt", {"ttda/scene_token": result.state.scene_token}, metadata)
        plot_curves(result.state.log, ["pre_loss", "post_loss"], run_dir / "loss_curve.png", title=f"TTDA seed {seed}", x="image")

        names = list(model.category.class_names[: model.category.num_segmentation_classes])
        source = model.metadata["source_domain"]
        row = metric_row(result.after, names, self.label, source, target, seed, cfg.ttda.split)
        before = 100.0 * result.before.iou()[1]
        frozen = 100.0 * result.source.iou()[1]
        logger.info(
            "TTDA %s seed %d: mIoU %.2f with the source token, %.2f online (%+.2f)",
            benchmark_name(source, target), seed, frozen, row["mIoU"], row["mIoU"] - frozen,
        )
        write_metrics(run_dir / "metrics.csv", [row], names)
        summary = {"mIoU_source": frozen, "mIoU_before": before, "mIoU_after": row["mIoU"], "images": len(pairs)}
        write_json(run_dir / "ttda_summary.json", summary)
        return {
            "backbone": backbone.digest,
            "model.ckpt": model.digest,
            "ttda.ckpt": ttda_digest,
            **{f"frozen/{k}": v for k, v in result.state.digests.items()},
        }

    def _eval(self, seed: int, run_dir: Path) -> Dict[str, str]:
        cfg = self.config
        backbone = self._backbone(seed)
        model = load_model(cfg.resolve(cfg.evaluation.model_checkpoint, seed), backbone)
        setting = cfg.label or model.metadata["setting"]
        digests = {"backbone": backbone.digest, "model.ckpt": model.digest}
        if cfg.evaluation.ttda_checkpoint:
            ckpt = load_checkpoint(cfg.resolve(cfg.evaluation.ttda_checkpoint, seed))
            if ckpt.metadata.get("kind") != "ttda" or ckpt.metadata.get("model_digest") != model.digest:
                raise CheckpointError("TTDA checkpoint does not belong to this model")
            token = ckpt.arrays["ttda/scene_token"].to(device=backbone.device, dtype=backbone.dtype)
            model.scene = ScenePrompt(token=token, kind="learned", descriptor="ttda")
            setting = cfg.label or "TTDA (final token)"
            digests["ttda.ckpt"] = ckpt.freeze_digest
        rows = self._evaluate_rows(backbone, model, model.metadata["source_domain"], seed, setting)
        write_metrics(run_dir / "metrics.csv", rows, list(model.category.class_names[: model.category.num_segmentation_classes]))
        with JsonlWriter(run_dir / "log.jsonl") as writer:
            for row in rows:
                writer.write({"benchmark": row["benchmark"], "mIoU": row["mIoU"], "seed": seed})
        return digests
