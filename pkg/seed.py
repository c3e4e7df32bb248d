"""
Script to generate the default three-domain synthetic benchmark
"""
import io
import sys
from pathlib import Path

from config import DatasetSpec, settings
from synthetic import gen_dataset

# Configure UTF-8 output for Windows
if sys.platform == 'win32':
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')


def seed_dataset(root: Path = settings.DATA_ROOT) -> bool:
    """Generates the default dataset under ``root``"""
    root = Path(root)
    spec = DatasetSpec()
    force = False

    if root.exists() and any(root.iterdir()):
        print(f"[!] {root} already contains data")
        response = input("Do you want to regenerate it? (y/n): ")
        if response.lower() != 'y':
            print("[X] Operation cancelled")
            return False
        force = True

    total = sum(len(r.seeds()) for r in spec.splits.values()) * len(spec.domains)
    print(f"\n[*] Generating {total} samples ({len(spec.class_names)} classes, {spec.height}x{spec.width})...\n")
    for split, seeds in sorted(spec.splits.items()):
        print(f"    {split:<6} seeds [{seeds.start}, {seeds.stop})  domains: {', '.join(spec.domains)}")

    manifest = gen_dataset(spec, root, force=force)

    print(f"\n[OK] Manifest: {manifest}")
    print(f"[OK] Classes:  {', '.join(spec.class_names)}")
    print("\n[INFO] Next step:")
    print("    python run.py")
    return True


if __name__ == "__main__":
    try:
        sys.exit(0 if seed_dataset() else 1)
    except Exception as e:
        print(f"\n[ERROR] Unexpected error: {e}")
        sys.exit(1)
