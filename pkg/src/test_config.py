#!/usr/bin/env python3
"""
Config and Manifest Tests

Defaults, field-naming validation, JSON persistence and fingerprints,
the run manifest and the output-directory lock.
"""

import sys
import tempfile
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from config import PipelineConfig, __version__
from errors import ConfigError, OutputLockedError
from manifest import OutputLock, RunManifest, describe_version


def expect_config_error(field: str, **overrides) -> None:
    try:
        PipelineConfig(**overrides).validate()
        assert False, f"expected ConfigError for {overrides}"
    except ConfigError as e:
        assert e.field == field, (e.field, field)


def test_defaults_validate():
    config = PipelineConfig().validate()
    assert config.model_config().feature_dim == 256
    assert config.model_config().grid_side ** 2 >= config.num_points
    assert config.train_config().weights.lambda_mem == 0.25
    assert config.train_config().tau is None
    assert config.scene_spec().cusp_count_range == (1, 5)


def test_invalid_fields_are_named():
    expect_config_error("K", K=128)
    expect_config_error("K", K=0)
    expect_config_error("ratios", ratios=[0.8, 0.1, 0.2])
    expect_config_error("grid_side", grid_side=45)
    expect_config_error("encoder_widths", encoder_widths=[3, 64, 128])
    expect_config_error("encoder_widths", encoder_widths=[4, 64, 256])
    expect_config_error("n_gingiva", n_gingiva=5000)
    expect_config_error("tooth_count", tooth_count=5)
    expect_config_error("lambda_mem", lambda_mem=-1.0)
    expect_config_error("batch_size", batch_size=0)
    expect_config_error("dtype", dtype="float16")
    expect_config_error("confidence", confidence="cosine")


def test_unknown_key_is_rejected():
    try:
        PipelineConfig.from_dict({'seed': 1, 'lerning_rate': 0.1})
        assert False, "expected ConfigError"
    except ConfigError as e:
        assert e.field == "lerning_rate"


def test_wrong_types_are_named():
    for key, value, expected in (("epochs", "5", "expected int, got str"),
                                 ("K", "64", "expected int, got str"),
                                 ("ratios", 0.5, "expected list, got float"),
                                 ("ratios", [0.8, "0.1", 0.1], "item 1: expected float, got str"),
                                 ("use_pm", 1, "expected bool, got int"),
                                 ("batch_size", True, "expected int, got bool"),
                                 ("tau", "auto", "expected float, got str")):
        try:
            PipelineConfig.from_dict({key: value})
            assert False, f"expected ConfigError for {key}={value!r}"
        except ConfigError as e:
            assert e.field == key, (e.field, key)
            assert expected in str(e), str(e)


def test_ints_widen_to_float():
    config = PipelineConfig.from_dict({"learning_rate": 1, "tau": None, "ratios": [1, 0, 0], "arch_width": 50})
    assert isinstance(config.learning_rate, float) and config.learning_rate == 1.0
    assert config.tau is None
    assert all(isinstance(r, float) for r in config.ratios)
    assert config.fingerprint() == PipelineConfig(learning_rate=1.0, ratios=[1.0, 0.0, 0.0]).fingerprint()
    assert PipelineConfig.from_dict({"tau": 2}).tau == 2.0


def test_save_load_and_fingerprint():
    config = PipelineConfig(seed=4, K=16, use_pm=False)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "config.json"
        config.save(path)
        loaded = PipelineConfig.load(path)
    assert loaded == config
    assert loaded.fingerprint() == config.fingerprint()
    assert len(config.fingerprint()) == 64
    assert config.with_overrides(seed=5).fingerprint() != config.fingerprint()


def test_partial_file_takes_defaults():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "config.json"
        path.write_text('{"epochs": 3}')
        config = PipelineConfig.load(path)
        assert config.epochs == 3 and config.K == PipelineConfig().K

        path.write_text('{"epochs": ')
        try:
            PipelineConfig.load(path)
            assert False, "expected ConfigError"
        except ConfigError as e:
            assert e.field == "config"


def test_overrides_skip_none():
    config = PipelineConfig(seed=2)
    assert config.with_overrides(seed=None, threads=None) == config
    assert config.with_overrides(threads=4).threads == 4


def test_manifest_round_trip():
    manifest = RunManifest(command="train", config=PipelineConfig().to_dict(), seed=0,
                           version=describe_version(__version__), outputs=["final.ckpt"],
                           duration_seconds=1.5, extra={'steps': 10})
    with tempfile.TemporaryDirectory() as tmp:
        path = manifest.save(Path(tmp))
        assert path.name == "manifest.json"
        assert RunManifest.load(Path(tmp)) == manifest
    assert manifest.version


def test_output_lock():
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "run"
        with OutputLock(out):
            assert (out / ".lock").exists()
            try:
                with OutputLock(out):
                    pass
                assert False, "expected OutputLockedError"
            except OutputLockedError:
                pass
        assert not (out / ".lock").exists()


def main():
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    print(f"Running {len(tests)} config tests")
    print("=" * 60)
    for name, fn in tests:
        fn()
        print(f"   ✓ {name}")
    print("\n✅ All config tests passed")


if __name__ == "__main__":
    main()
