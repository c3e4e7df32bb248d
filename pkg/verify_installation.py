"""
Script to verify that installation is complete and working
"""
import io
import os
import sys

# Configure UTF-8 output for Windows
if sys.platform == 'win32':
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')

REQUIRED_MODULES = [
    'torch',
    'numpy',
    'PIL',
    'pandas',
    'matplotlib',
    'tqdm',
    'jinja2',
    'pydantic',
    'pydantic_settings',
    'dotenv',
    'cryptography',
]

REQUIRED_FILES = [
    'main.py',
    'config.py',
    'models.py',
    'exceptions.py',
    'integrity.py',
    'checkpoint.py',
    'log.py',
    'prompts.py',
    'backbone.py',
    'head.py',
    'training.py',
    'ttda.py',
    'metrics.py',
    'synthetic.py',
    'experiment.py',
    'report.py',
    'seed.py',
    'run.py',
    'requirements.txt',
    'templates/report.md.j2',
    'configs/pretrain.json',
    'configs/source_scene.json',
    'configs/dg_text.json',
    'configs/ttda.json',
]


def verify_modules():
    """Verifies that all required modules are installed"""
    print("\n" + "="*60)
    print("[*] Verifying installed modules...")
    print("="*60 + "\n")

    missing_modules = []

    for module in REQUIRED_MODULES:
        try:
            __import__(module)
            print(f"[OK] {module}")
        except ImportError:
            print(f"[X] {module} - NOT FOUND")
            missing_modules.append(module)

    return missing_modules


def verify_files():
    """Verifies that all required files exist"""
    print("\n" + "="*60)
    print("[*] Verifying project files...")
    print("="*60 + "\n")

    missing_files = []

    for file in REQUIRED_FILES:
        if os.path.exists(file):
            print(f"[OK] {file}")
        else:
            print(f"[X] {file} - NOT FOUND")
            missing_files.append(file)

    return missing_files


def verify_configs():
    """Validates every shipped experiment config"""
    print("\n" + "="*60)
    print("[*] Validating experiment configs...")
    print("="*60 + "\n")

    try:
        from pydantic import ValidationError

        from config import ExperimentConfig
    except ImportError as e:
        print(f"[X] Cannot import the config layer: {e}")
        return False

    ok = True
    for name in sorted(os.listdir('configs')) if os.path.isdir('configs') else []:
        if not name.endswith('.json'):
            continue
        try:
            config = ExperimentConfig.from_file(os.path.join('configs', name))
            print(f"[OK] {name} ({config.mode})")
        except (ValidationError, ValueError) as e:
            print(f"[X] {name}: {e}")
            ok = False
    return ok


def verify_dataset():
    """Verifies that the synthetic dataset has been generated"""
    print("\n" + "="*60)
    print("[*] Verifying dataset...")
    print("="*60 + "\n")

    try:
        from config import settings
        from log import read_jsonl
    except ImportError as e:
        print(f"[X] Cannot import the project: {e}")
        return False

    manifest = os.path.join(str(settings.DATA_ROOT), 'manifest.jsonl')
    if not os.path.exists(manifest):
        print(f"[!] Dataset not found in {settings.DATA_ROOT}")
        print("[INFO] Run 'python seed.py' to create it")
        return False

    records = read_jsonl(manifest)
    print(f"[OK] Dataset found: {settings.DATA_ROOT}")
    print(f"[OK] Samples in manifest: {len(records)}")
    if not records:
        print("[!] The manifest is empty. Run: python seed.py")
        return False
    return True


def main():
    print("""
    ========================================================
            PTSEG INSTALLATION VERIFICATION
    ========================================================
    """)

    missing_modules = verify_modules()
    missing_files = verify_files()
    configs_ok = verify_configs() if not missing_modules else False
    dataset_ok = verify_dataset() if not missing_modules else False

    # Summary
    print("\n" + "="*60)
    print("[*] SUMMARY")
    print("="*60 + "\n")

    errors = []

    if missing_modules:
        print(f"[X] {len(missing_modules)} missing modules")
        print("    Run: pip install -r requirements.txt")
        errors.append("modules")
    else:
        print("[OK] All modules are installed")

    if missing_files:
        print(f"[X] {len(missing_files)} missing files")
        errors.append("files")
    else:
        print("[OK] All project files exist")

    if not configs_ok:
        print("[X] Some experiment configs are invalid")
        errors.append("configs")
    else:
        print("[OK] Experiment configs are valid")

    if not dataset_ok:
        print("[!] Dataset needs to be generated")
        print("    Run: python seed.py")
        errors.append("dataset")
    else:
        print("[OK] Dataset generated")

    print("\n" + "="*60)

    if not errors:
        print("[OK] INSTALLATION COMPLETE AND READY!")
        print("="*60)
        print("\n[INFO] To run the full experiment matrix:")
        print("    python run.py")
        print()
        return True
    else:
        print("[!] INSTALLATION INCOMPLETE")
        print("="*60)
        print(f"\n[!] Problems found: {', '.join(errors)}")
        print("[INFO] Check previous messages for more details\n")
        return False


if __name__ == "__main__":
    try:
        success = main()
        sys.exit(0 if success else 1)
    except Exception as e:
        print(f"\n[ERROR] Unexpected error: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(1)
