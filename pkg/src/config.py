#!/usr/bin/env python3
"""
Pipeline Configuration

One flat JSON document drives every command. Every field has a default;
unknown keys are rejected so typos fail loudly.
"""

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union, get_args, get_origin

sys.path.insert(0, str(Path(__file__).parent))

from dataset import ArchSceneSpec, split_counts
from errors import ConfigError
from memory import CONFIDENCE_MODES, MAX_PROTOTYPES
from model import EncoderConfig, ModelConfig
from training import DTYPES, LossWeights, TrainConfig

__version__ = "0.3.0"


def _type_name(value: Any) -> str:
    return "null" if value is None else type(value).__name__


def _check_type(name: str, value: Any, expected: Any) -> Any:
    """
    Check one JSON value against a field annotation.

    Ints are accepted (and converted) where a float is expected; bools are
    never accepted as numbers.

    Returns:
        The value, with ints widened to float where needed

    Raises:
        ConfigError: naming the field and both types
    """
    origin = get_origin(expected)
    if origin is Union:
        options = [t for t in get_args(expected) if t is not type(None)]
        if value is None:
            return None
        return _check_type(name, value, options[0])
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(name, f"expected list, got {_type_name(value)}")
        (item_type,) = get_args(expected)
        items = []
        for i, item in enumerate(value):
            try:
                items.append(_check_type(name, item, item_type))
            except ConfigError as e:
                raise ConfigError(name, f"item {i}: {str(e).split(': ', 1)[1]}")
        return items

    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok:
            value = float(value)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(name, f"expected {expected.__name__}, got {_type_name(value)}")
    return value


@dataclass
class PipelineConfig:
    """Every tunable of synthesis, model, memory, training and evaluation"""

    seed: int = 0

    # Data
    n_scenes: int = 100
    ratios: List[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    tooth_count: int = 10
    points_per_tooth: int = 1200
    gingiva_points: int = 4000
    arch_width: float = 50.0
    arch_depth: float = 40.0
    cusp_count_range: List[int] = field(default_factory=lambda: [1, 5])
    noise_sigma: float = 0.02
    n_gingiva: int = 512
    num_points: int = 2048

    # Model
    encoder_widths: List[int] = field(default_factory=lambda: [3, 64, 128, 256])
    feature_dim: int = 256
    grid_side: int = 46
    decoder_widths: List[int] = field(default_factory=lambda: [256, 128])

    # Memory
    K: int = 64
    tau: Optional[float] = None
    confidence: str = "similarity"
    min_hits: int = 1

    # Optimisation
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_f: float = 0.0
    lambda_align: float = 0.1
    lambda_mem: float = 0.25
    max_rejections: int = 10

    # Ablation
    use_pm: bool = True
    use_de: bool = True
    ablation_seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    # Evaluation / runtime
    fscore_tau: float = 0.01
    dtype: str = "float32"
    threads: int = 1
    strict_deterministic: bool = False
    workers: int = 1

    def validate(self) -> 'PipelineConfig':
        """Raise ConfigError naming the first invalid field"""
        if not 1 <= self.K < MAX_PROTOTYPES:
            raise ConfigError("K", f"must be in [1, {MAX_PROTOTYPES}), got {self.K}")
        split_counts(self.n_scenes, self.ratios)
        if self.grid_side ** 2 < self.num_points:
            raise ConfigError("grid_side", f"{self.grid_side}^2 < num_points {self.num_points}")
        if not self.encoder_widths or self.encoder_widths[0] != 3:
            raise ConfigError("encoder_widths", f"must start with 3, got {self.encoder_widths}")
        if self.encoder_widths[-1] != self.feature_dim:
            raise ConfigError("encoder_widths", f"must end with feature_dim {self.feature_dim}")
        if self.num_points < 1:
            raise ConfigError("num_points", f"must be >= 1, got {self.num_points}")
        if not 1 <= self.n_gingiva <= self.gingiva_points:
            raise ConfigError("n_gingiva", f"must be in [1, gingiva_points={self.gingiva_points}], got {self.n_gingiva}")
        if self.min_hits < 0:
            raise ConfigError("min_hits", f"must be >= 0, got {self.min_hits}")
        if self.max_rejections < 1:
            raise ConfigError("max_rejections", f"must be >= 1, got {self.max_rejections}")
        if not self.ablation_seeds:
            raise ConfigError("ablation_seeds", "need at least one seed")
        if self.workers < 1:
            raise ConfigError("workers", f"must be >= 1, got {self.workers}")
        if self.threads < 1:
            raise ConfigError("threads", f"must be >= 1, got {self.threads}")
        if not self.fscore_tau > 0:
            raise ConfigError("fscore_tau", f"must be > 0, got {self.fscore_tau}")
        if self.confidence not in CONFIDENCE_MODES:
            raise ConfigError("confidence", f"must be one of {CONFIDENCE_MODES}, got {self.confidence!r}")
        if self.dtype not in DTYPES:
            raise ConfigError("dtype", f"must be one of {sorted(DTYPES)}, got {self.dtype!r}")

        # The views run the remaining per-module checks
        self.scene_spec().validate()
        self.model_config().validate()
        self.train_config()
        return self

    def scene_spec(self) -> ArchSceneSpec:
        return ArchSceneSpec(
            tooth_count=self.tooth_count,
            points_per_tooth=self.points_per_tooth,
            gingiva_points=self.gingiva_points,
            arch_width=self.arch_width,
            arch_depth=self.arch_depth,
            cusp_count_range=tuple(self.cusp_count_range),
            noise_sigma=self.noise_sigma,
            seed=self.seed,
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(layer_widths=list(self.encoder_widths), feature_dim=self.feature_dim)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            encoder=self.encoder_config(),
            decoder_widths=list(self.decoder_widths),
            grid_side=self.grid_side,
            num_points=self.num_points,
            K=self.K,
            use_de=self.use_de,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_f, self.lambda_align, self.lambda_mem)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            seed=self.seed,
            use_pm=self.use_pm,
            use_de=self.use_de,
            weights=self.loss_weights(),
            tau=self.tau,
            confidence=self.confidence,
            min_hits=self.min_hits,
            max_rejections=self.max_rejections,
            fscore_tau=self.fscore_tau,
            dtype=self.dtype,
        )

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'PipelineConfig':
        types = {f.name: f.type for f in fields(cls)}
        checked = {}
        for key, value in data.items():
            if key not in types:
                raise ConfigError(key, "unknown configuration key")
            checked[key] = _check_type(key, value, types[key])
        return cls(**checked)

    @classmethod
    def load(cls, path: Path) -> 'PipelineConfig':
        """Read a JSON config file (missing keys take defaults)"""
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"{path}: invalid JSON ({e})")
        except OSError as e:
            raise ConfigError("config", f"{path}: {e.strerror}")
        if not isinstance(data, dict):
            raise ConfigError("config", f"{path}: top level must be an object")
        return cls.from_dict(data)

    def save(self, path: Path) -> None:
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def fingerprint(self) -> str:
        """sha256 of the canonical JSON form"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def with_overrides(self, **overrides) -> 'PipelineConfig':
        """Copy with the non-None overrides applied"""
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return PipelineConfig.from_dict(data)


if __name__ == "__main__":
    config = PipelineConfig().validate()
    print(f"Default config fingerprint: {config.fingerprint()[:16]}")
    print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    print("\n✅ Done")
