"""Merges per-run metric CSVs into the ablation summary (CSV + markdown)."""
import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import pandas as pd
from jinja2 import Environment, FileSystemLoader, StrictUndefined

from exceptions import MissingArtifactsError
from experiment import COMPLETE
from metrics import relative_generalization

TEMPLATES = Path(__file__).resolve().parent / "templates"

# ablation-table columns first, then the analysis settings; the oracle always comes last
SETTING_ORDER = [
    "w/o C_s",
    "Target (C_s)",
    "Learned (C_s)",
    "Source (C_s)",
    "TTDA",
    "DG-T",
    "DG-I",
    "Image (C_s)",
    "Irrelevant (C_s)",
    "DG-T (irrelevant)",
    "DG-L",
    "TTDA (final token)",
]
ORACLE = "Oracle"


def setting_key(setting: str) -> Tuple[int, int, str]:
    if setting == ORACLE:
        return (2, 0, setting)
    if setting in SETTING_ORDER:
        return (0, SETTING_ORDER.index(setting), setting)
    return (1, 0, setting)


def _is_run_dir(path: Path) -> bool:
    return (path / "config.digest").is_file()


def _mode(path: Path) -> Optional[str]:
    resolved = path / "config.resolved.json"
    if not resolved.is_file():
        return None
    return json.loads(resolved.read_text(encoding="utf-8")).get("mode")


def expand_run_dirs(paths: Iterable[Path]) -> List[Path]:
    """Run directories given directly, or found below the given roots (pretraining runs skipped)."""
    found: List[Path] = []
    for path in map(Path, paths):
        if _is_run_dir(path) or not path.is_dir():
            found.append(path)
            continue
        nested = sorted(p.parent for p in path.rglob("config.digest"))
        nested = [p for p in nested if _mode(p) != "pretrain"]
        found.extend(nested or [path])
    return sorted(dict.fromkeys(found))


def collect(run_dirs: Iterable[Path]) -> pd.DataFrame:
    frames, missing = [], []
    for run_dir in run_dirs:
        metrics = run_dir / "metrics.csv"
        if not (run_dir / COMPLETE).is_file():
            missing.append(str(run_dir / COMPLETE))
        if not metrics.is_file():
            missing.append(str(metrics))
        else:
            frames.append(pd.read_csv(metrics))
    if missing:
        raise MissingArtifactsError(missing)
    if not frames:
        raise MissingArtifactsError(["<no run directories given>"])
    return pd.concat(frames, ignore_index=True)


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and population std over seeds per (setting, benchmark), plus relative-to-oracle values."""
    iou_columns = sorted(c for c in frame.columns if c.startswith("iou_"))
    rows = []
    for (setting, benchmark), group in frame.groupby(["setting", "benchmark"], sort=False):
        row = {
            "setting": setting,
            "benchmark": benchmark,
            "source": group["source"].iloc[0],
            "target": group["target"].iloc[0],
            "n_seeds": int(group["seed"].nunique()),
            "seeds": ";".join(str(s) for s in sorted(group["seed"].unique())),
            "mIoU_mean": float(group["mIoU"].mean()),
            "mIoU_std": float(group["mIoU"].std(ddof=0)),
        }
        for column in iou_columns:
            row[f"{column}_mean"] = float(group[column].mean())
        rows.append(row)
    rows.sort(key=lambda r: (setting_key(r["setting"]), r["benchmark"]))
    summary = pd.DataFrame(rows)
    oracles = {r["target"]: r["mIoU_mean"] for r in rows if r["setting"] == ORACLE}
    summary["relative"] = [
        relative_generalization(r["mIoU_mean"], oracles[r["target"]])
        if r["setting"] != ORACLE and oracles.get(r["target"], 0) > 0
        else math.nan
        for r in rows
    ]
    return summary


def _cell(mean: float, std: float) -> str:
    return f"{mean:.1f} ± {std:.1f}"


def table_context(summary: pd.DataFrame) -> Dict:
    settings = sorted(summary["setting"].unique(), key=setting_key)
    plain = summary[summary["setting"] != ORACLE]
    benchmarks = sorted((plain if len(plain) else summary)["benchmark"].unique())
    oracle = {r.target: r for r in summary[summary["setting"] == ORACLE].itertuples()}
    lookup = {(r.setting, r.benchmark): r for r in summary.itertuples()}
    rows, relative_rows = [], []
    for benchmark in benchmarks:
        target = benchmark.split("->", 1)[-1]
        cells, relative = [], []
        for setting in settings:
            entry = oracle.get(target) if setting == ORACLE else lookup.get((setting, benchmark))
            cells.append("-" if entry is None else _cell(entry.mIoU_mean, entry.mIoU_std))
            if setting != ORACLE:
                relative.append("-" if entry is None or math.isnan(entry.relative) else f"{entry.relative:.1f}%")
        rows.append({"benchmark": benchmark, "cells": cells})
        relative_rows.append({"benchmark": benchmark, "cells": relative})
    return {
        "settings": settings,
        "rows": rows,
        "relative_settings": [s for s in settings if s != ORACLE],
        "relative_rows": relative_rows if oracle else [],
        "n_runs": int(summary["n_seeds"].sum()),
    }


def render_markdown(summary: pd.DataFrame) -> str:
    env = Environment(
        loader=FileSystemLoader(str(TEMPLATES)),
        undefined=StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
    )
    return env.get_template("report.md.j2").render(**table_context(summary))


def report(run_dirs: Iterable[Path], out_dir: Path) -> Tuple[Path, Path]:
    runs = expand_run_dirs(run_dirs)
    summary = summarize(collect(runs))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, md_path = out_dir / "summary.csv", out_dir / "summary.md"
    summary.to_csv(csv_path, index=False, float_format="%.4f")
    md_path.write_text(render_markdown(summary), encoding="utf-8")
    return csv_path, md_path
