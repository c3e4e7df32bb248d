"""
Runs the shipped experiment matrix: dataset, pretraining, every ablation
setting, test-time adaptation, evaluation and the final report.

Completed runs are skipped, interrupted ones are resumed.
"""
import io
import sys
from pathlib import Path

from config import settings
from main import EXIT_OK, main

# Configure UTF-8 output for Windows
if sys.platform == 'win32':
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')

CONFIG_DIR = Path(__file__).resolve().parent / "configs"

MATRIX = [
    "pretrain.json",
    "wo_scene.json",
    "target_scene.json",
    "learned_scene.json",
    "source_scene.json",
    "image_scene.json",
    "dg_text.json",
    "dg_image.json",
    "dg_irrelevant.json",
    "aux_classes.json",
    "oracle.json",
    "ttda.json",
    "eval.json",
]


def run_matrix() -> int:
    if not (Path(settings.DATA_ROOT) / "manifest.jsonl").is_file():
        print(f"[*] Generating dataset in {settings.DATA_ROOT}...")
        status = main(["gen-data", "--out", str(settings.DATA_ROOT)])
        if status != EXIT_OK:
            return status

    for name in MATRIX:
        print(f"\n{'='*60}")
        print(f"[*] {name}")
        print(f"{'='*60}\n")
        status = main(["run", "--config", str(CONFIG_DIR / name), "--resume"])
        if status != EXIT_OK:
            print(f"[X] {name} failed with exit code {status}")
            return status

    print("\n[*] Building report...")
    return main(["report", str(settings.RUNS_ROOT), "--out", str(Path(settings.RUNS_ROOT) / "report")])


if __name__ == "__main__":
    try:
        sys.exit(run_matrix())
    except KeyboardInterrupt:
        print("\n\n[X] Interrupted; rerun to resume")
        sys.exit(2)
