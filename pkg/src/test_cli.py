#!/usr/bin/env python3
"""
Command Line Tests

Exit codes, reproducible synthesis, train/eval/embed/ablate outputs and
byte-identical reruns, all through cli.main on a tiny configuration.
"""

import contextlib
import io
import json
import sys
import tempfile
from pathlib import Path
from typing import Tuple

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))
sys.path.insert(0, str(Path(__file__).parent.parent))

from cli import main
from dataset import load_split
from manifest import RunManifest

TINY = {
    "n_scenes": 3,
    "ratios": [0.34, 0.33, 0.33],
    "tooth_count": 6,
    "points_per_tooth": 150,
    "gingiva_points": 400,
    "n_gingiva": 32,
    "num_points": 64,
    "encoder_widths": [3, 16, 32],
    "feature_dim": 32,
    "grid_side": 8,
    "decoder_widths": [32, 16],
    "K": 4,
    "epochs": 2,
    "batch_size": 4,
    "ablation_seeds": [0, 1],
}

_WORKSPACE = {}


def write_config(path: Path, **overrides) -> Path:
    path.write_text(json.dumps({**TINY, **overrides}, indent=2))
    return path


def run_cli(*argv) -> Tuple[int, str]:
    """Exit code and captured stderr"""
    err = io.StringIO()
    with contextlib.redirect_stderr(err), contextlib.redirect_stdout(io.StringIO()):
        code = main([str(a) for a in argv] + ["--quiet"])
    return code, err.getvalue()


def workspace() -> Path:
    """One synthesized data directory and trained run shared by the tests"""
    if not _WORKSPACE:
        tmp = tempfile.TemporaryDirectory()
        root = Path(tmp.name)
        config = write_config(root / "tiny.json")
        assert run_cli("synth", "--config", config, "--out", root / "data")[0] == 0
        assert run_cli("train", "--config", config, "--data", root / "data", "--out", root / "run")[0] == 0
        _WORKSPACE.update(tmp=tmp, root=root)
    return _WORKSPACE['root']


def read_records(path: Path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_bad_ratios_exit_2():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp) / "bad.json", ratios=[0.8, 0.1, 0.2])
        code, err = run_cli("synth", "--config", config, "--out", Path(tmp) / "out")
        assert code == 2
        assert "ratios" in err


def test_unknown_config_key_exit_2():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp) / "bad.json", learning_rat=0.1)
        code, err = run_cli("synth", "--config", config, "--out", Path(tmp) / "out")
        assert code == 2
        assert "learning_rat" in err


def test_wrong_typed_values_exit_2():
    with tempfile.TemporaryDirectory() as tmp:
        for key, value in (("epochs", "5"), ("K", "64"), ("ratios", 0.5)):
            config = write_config(Path(tmp) / f"bad_{key}.json", **{key: value})
            code, err = run_cli("synth", "--config", config, "--out", Path(tmp) / "out")
            assert code == 2, (key, code, err)
            assert err.startswith(f"error: {key}: expected"), err


def test_missing_splits_exit_3():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp) / "tiny.json")
        (Path(tmp) / "empty").mkdir()
        code, err = run_cli("train", "--config", config, "--data", Path(tmp) / "empty",
                            "--out", Path(tmp) / "out")
        assert code == 3
        assert "train" in err


def test_locked_output_exit_3():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp) / "tiny.json")
        out = Path(tmp) / "out"
        out.mkdir()
        (out / ".lock").write_text("12345")
        code, err = run_cli("synth", "--config", config, "--out", out)
        assert code == 3
        assert "in use" in err


def test_synth_rerun_is_byte_identical():
    root = workspace()
    with tempfile.TemporaryDirectory() as tmp:
        assert run_cli("synth", "--config", root / "tiny.json", "--out", Path(tmp) / "again")[0] == 0
        ours = sorted(p.relative_to(root / "data") for p in (root / "data").rglob("*.xyz"))
        theirs = sorted(p.relative_to(Path(tmp) / "again") for p in (Path(tmp) / "again").rglob("*.xyz"))
        assert ours and ours == theirs
        for rel in ours:
            assert (root / "data" / rel).read_bytes() == (Path(tmp) / "again" / rel).read_bytes()

    manifest = RunManifest.load(root / "data")
    assert manifest.command == "synth"
    assert manifest.config['n_scenes'] == 3
    assert "config.json" in manifest.outputs
    assert not (root / "data" / ".lock").exists()


def test_train_outputs():
    root = workspace()
    run = root / "run"
    for name in ("best.ckpt", "final.ckpt", "run_log.md", "train_log.jsonl", "manifest.json"):
        assert (run / name).exists(), name
    steps = [r for r in read_records(run / "train_log.jsonl") if r['kind'] == 'step']
    assert steps and all(set(r) >= {'l_cd', 'l_align', 'l_mem', 'total', 'grad_norms'} for r in steps)
    assert RunManifest.load(run).extra['steps'] == len(steps)


def test_train_without_memory_logs_zero_commitment():
    root = workspace()
    with tempfile.TemporaryDirectory() as tmp:
        code, _ = run_cli("train", "--config", root / "tiny.json", "--data", root / "data",
                          "--ablate", "no-pm", "--out", tmp)
        assert code == 0
        steps = [r for r in read_records(Path(tmp) / "train_log.jsonl") if r['kind'] == 'step']
        assert steps and all(r['l_mem'] == 0.0 for r in steps)
        assert RunManifest.load(tmp).config['use_pm'] is False


def test_eval_oracle():
    root = workspace()
    with tempfile.TemporaryDirectory() as tmp:
        code, _ = run_cli("eval", "--config", root / "tiny.json", "--data", root / "data",
                          "--oracle", "--out", tmp)
        assert code == 0
        report = json.loads((Path(tmp) / "eval_report.json").read_text())
        assert report['cd_mean_e4'] == 0.0
        assert report['fscore_mean'] == 1.0


def test_eval_dumps_predictions():
    root = workspace()
    test_pairs = load_split(root / "data", "test")
    with tempfile.TemporaryDirectory() as tmp:
        code, _ = run_cli("eval", "--checkpoint", root / "run" / "final.ckpt", "--data", root / "data",
                          "--dump-predictions", "--out", tmp)
        assert code == 0
        report = json.loads((Path(tmp) / "eval_report.json").read_text())
        assert report['sample_count'] == len(test_pairs)
        assert report['use_pm'] is True

        files = sorted((Path(tmp) / "predictions").glob("*_prediction.xyz"))
        assert len(files) == len(test_pairs)
        for pair in test_pairs:
            lines = (Path(tmp) / "predictions" / f"{pair.pair_id}_prediction.xyz").read_text().splitlines()
            data = [line for line in lines if line and not line.startswith("#")]
            assert len(data) == TINY['num_points'] + pair.context.count


def test_eval_without_memory_differs():
    root = workspace()
    with tempfile.TemporaryDirectory() as tmp:
        assert run_cli("eval", "--checkpoint", root / "run" / "final.ckpt", "--data", root / "data",
                       "--no-use-pm", "--out", Path(tmp) / "off")[0] == 0
        assert run_cli("eval", "--checkpoint", root / "run" / "final.ckpt", "--data", root / "data",
                       "--out", Path(tmp) / "on")[0] == 0
        off = json.loads((Path(tmp) / "off" / "eval_report.json").read_text())
        on = json.loads((Path(tmp) / "on" / "eval_report.json").read_text())
        assert off['use_pm'] is False and on['use_pm'] is True


def test_checkpoint_mismatch_exit_2():
    root = workspace()
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp) / "k5.json", K=5)
        code, err = run_cli("eval", "--config", config, "--checkpoint", root / "run" / "final.ckpt",
                            "--data", root / "data", "--out", Path(tmp) / "out")
        assert code == 2
        assert "K" in err


def test_resume_continues_steps():
    root = workspace()
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp) / "three.json", epochs=3)
        code, _ = run_cli("train", "--config", config, "--data", root / "data",
                          "--resume", root / "run" / "final.ckpt", "--out", Path(tmp) / "more")
        assert code == 0
        first = [r['step'] for r in read_records(root / "run" / "train_log.jsonl") if r['kind'] == 'step']
        more = [r['step'] for r in read_records(Path(tmp) / "more" / "train_log.jsonl") if r['kind'] == 'step']
        assert more[0] == first[-1] + 1
        assert more == sorted(more)


def test_strict_deterministic_reruns_are_byte_identical():
    root = workspace()
    with tempfile.TemporaryDirectory() as tmp:
        for run in ("a", "b"):
            assert run_cli("train", "--config", root / "tiny.json", "--data", root / "data",
                           "--strict-deterministic", "--out", Path(tmp) / run)[0] == 0
            assert run_cli("eval", "--checkpoint", Path(tmp) / run / "final.ckpt", "--data", root / "data",
                           "--strict-deterministic", "--out", Path(tmp) / f"eval_{run}")[0] == 0
        for name in ("final.ckpt", "best.ckpt"):
            assert (Path(tmp) / "a" / name).read_bytes() == (Path(tmp) / "b" / name).read_bytes()
        assert ((Path(tmp) / "eval_a" / "eval_report.json").read_bytes()
                == (Path(tmp) / "eval_b" / "eval_report.json").read_bytes())


def test_embed_outputs():
    root = workspace()
    test_pairs = load_split(root / "data", "test")
    with tempfile.TemporaryDirectory() as tmp:
        code, _ = run_cli("embed", "--checkpoint", root / "run" / "final.ckpt", "--data", root / "data",
                          "--out", tmp)
        assert code == 0
        lines = (Path(tmp) / "embedding.csv").read_text().splitlines()
        assert lines[0] == "kind,position_label,pc1,pc2"
        kinds = [line.split(",")[0] for line in lines[1:]]
        assert kinds.count("partial") == len(test_pairs)
        assert kinds.count("prototype") == TINY['K']

        report = json.loads((Path(tmp) / "embed_report.json").read_text())
        assert report['rho'] > 0
        assert report['prototype_count'] == TINY['K']
        assert 0 <= report['usage']['used_rows'] <= TINY['K']


def test_embed_single_prototype():
    root = workspace()
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(Path(tmp) / "k1.json", K=1, epochs=1)
        assert run_cli("train", "--config", config, "--data", root / "data", "--out", Path(tmp) / "run")[0] == 0
        code, err = run_cli("embed", "--checkpoint", Path(tmp) / "run" / "final.ckpt", "--data", root / "data",
                            "--out", Path(tmp) / "embed")
        assert code == 0, err
        report = json.loads((Path(tmp) / "embed" / "embed_report.json").read_text())
        assert report["rho"] == 0.0
        assert report["prototype_count"] == 1


def test_ablate_outputs():
    root = workspace()
    with tempfile.TemporaryDirectory() as tmp:
        code, _ = run_cli("ablate", "--config", root / "tiny.json", "--data", root / "data", "--out", tmp)
        assert code == 0
        table = json.loads((Path(tmp) / "ablation.json").read_text())
        assert [r['name'] for r in table['rows']] == ["pm=off_de=off", "pm=on_de=off", "pm=on_de=on"]
        assert all(r['seeds'] == TINY['ablation_seeds'] for r in table['rows'])
        assert set(table['ordering']) == {'memory_helps', 'dual_encoders_help'}
        for row in table['rows']:
            assert RunManifest.load(Path(tmp) / row['name']).extra['seeds'] == TINY['ablation_seeds']
            for seed in TINY['ablation_seeds']:
                assert (Path(tmp) / row['name'] / f"seed_{seed}" / "manifest.json").exists()


def main_tests():
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    print(f"Running {len(tests)} command line tests")
    print("=" * 60)
    for name, fn in tests:
        fn()
        print(f"   ✓ {name}")
    print("\n✅ All command line tests passed")


if __name__ == "__main__":
    main_tests()
