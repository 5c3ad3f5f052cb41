#!/usr/bin/env python3
"""
End-to-End Integration Test

Runs the complete workflow on a tiny configuration through the command
line entry point: synth -> train -> eval -> embed.
"""

import json
import sys
from datetime import datetime
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))
sys.path.insert(0, str(Path(__file__).parent.parent))

from cli import main as cli_main

TINY_CONFIG = {
    "n_scenes": 5,
    "ratios": [0.6, 0.2, 0.2],
    "tooth_count": 8,
    "points_per_tooth": 200,
    "gingiva_points": 600,
    "n_gingiva": 64,
    "num_points": 128,
    "encoder_widths": [3, 32, 64],
    "feature_dim": 64,
    "grid_side": 12,
    "decoder_widths": [64, 32],
    "K": 8,
    "epochs": 3,
    "batch_size": 8,
}


def step(*argv) -> None:
    code = cli_main([str(a) for a in argv] + ["--quiet"])
    assert code == 0, f"{argv[0]} exited with {code}"


def main():
    """Run end-to-end test"""

    # Create output directory
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    run_dir = Path(__file__).parent.parent / "output" / f"e2e_test_{timestamp}"
    run_dir.mkdir(parents=True, exist_ok=True)
    config_path = run_dir / "tiny.json"
    config_path.write_text(json.dumps(TINY_CONFIG, indent=2))

    print(f"Starting end-to-end test: {run_dir.name}")
    print("=" * 60)

    print("\n1. Synthesizing arches...")
    step("synth", "--config", config_path, "--out", run_dir / "data")
    counts = json.loads((run_dir / "data" / "manifest.json").read_text())['extra']['pair_counts']
    print(f"   ✓ Pairs: {counts}")

    print("\n2. Training...")
    step("train", "--config", config_path, "--data", run_dir / "data", "--out", run_dir / "train")
    train_manifest = json.loads((run_dir / "train" / "manifest.json").read_text())
    print(f"   ✓ Steps: {train_manifest['extra']['steps']}, "
          f"best val CD x1e-4: {train_manifest['extra']['best_val_cd_e4']}")

    print("\n3. Evaluating (memory on and off)...")
    checkpoint = run_dir / "train" / "best.ckpt"
    step("eval", "--checkpoint", checkpoint, "--data", run_dir / "data", "--out", run_dir / "eval_pm",
         "--dump-predictions")
    step("eval", "--checkpoint", checkpoint, "--data", run_dir / "data", "--out", run_dir / "eval_plain",
         "--no-use-pm")
    for name in ("eval_pm", "eval_plain"):
        report = json.loads((run_dir / name / "eval_report.json").read_text())
        assert report['sample_count'] == counts['test']
        print(f"   ✓ {name}: CD x1e-4 {report['cd_mean_e4']:.4f}, F-score {report['fscore_mean']:.4f}")
    dumped = list((run_dir / "eval_pm" / "predictions").glob("*_prediction.xyz"))
    assert len(dumped) == counts['test']

    print("\n4. Embedding...")
    step("embed", "--checkpoint", checkpoint, "--data", run_dir / "data", "--out", run_dir / "embed")
    embed = json.loads((run_dir / "embed" / "embed_report.json").read_text())
    print(f"   ✓ rho = {embed['rho']:.4f}, rows used {embed['usage']['used_rows']}/{TINY_CONFIG['K']}")

    # Show file sizes
    print("\n5. Output files:")
    for file in sorted(run_dir.rglob("*.json")):
        print(f"   {file.relative_to(run_dir)}: {file.stat().st_size:,} bytes")

    print(f"\n{'=' * 60}")
    print("✅ End-to-end test complete!")
    print(f"\nOutput directory: {run_dir}")
    print(f"View training log: cat {run_dir / 'train' / 'run_log.md'}")

    return run_dir


if __name__ == "__main__":
    main()
