#!/usr/bin/env python3
"""
Completion Network

Dual PointNet-style encoders (same architecture, separate weights), the
prototype bank, and a two-stage folding decoder, held in one nn.Module
that serves as the parameter store.

Parameter names:
- encoder_partial.*  (theta, partial inputs)
- encoder_gt.*       (phi, complete shapes; absent when use_de is False,
                      the gt branch then reuses encoder_partial)
- decoder.*
- memory.vectors

Checkpoint format: one JSON header line (config, seed, step, tensor table
of name/shape/offset/length in bytes) followed by little-endian float32
payloads in header order.
"""

import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

sys.path.insert(0, str(Path(__file__).parent))

from errors import CheckpointMismatchError, ConfigError, DataError
from geometry import PointCloud
from memory import PrototypeBank, check_bank_size

CHECKPOINT_FORMAT = "completion-checkpoint/1"


@dataclass
class EncoderConfig:
    """Shared-MLP widths; first must be 3, last is the descriptor size d"""

    layer_widths: List[int] = field(default_factory=lambda: [3, 64, 128, 256])
    feature_dim: int = 256

    def validate(self) -> None:
        widths = list(self.layer_widths)
        if len(widths) < 2 or widths[0] != 3:
            raise ConfigError("encoder_widths", f"must start with 3 and have >= 2 entries, got {widths}")
        if widths[-1] != self.feature_dim:
            raise ConfigError("encoder_widths", f"last width {widths[-1]} must equal feature_dim {self.feature_dim}")
        if any(w < 1 for w in widths):
            raise ConfigError("encoder_widths", "all widths must be >= 1")


@dataclass
class FoldingGrid:
    """g x g lattice spanning [-1, 1]^2, row-major (u varies fastest)"""

    side: int = 46

    def uv(self, count: Optional[int] = None, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """First count lattice points (all g^2 when count is None), shape (count, 2)"""
        if count is not None and count > self.side ** 2:
            raise ValueError(f"grid too small: {self.side}^2 = {self.side ** 2} < {count}")
        axis = torch.linspace(-1.0, 1.0, self.side, dtype=torch.float64)
        v, u = torch.meshgrid(axis, axis, indexing='ij')
        lattice = torch.stack([u.reshape(-1), v.reshape(-1)], dim=1)
        return lattice[:count].to(dtype)


@dataclass
class ModelConfig:
    """Everything needed to rebuild a CompletionNetwork"""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_widths: List[int] = field(default_factory=lambda: [256, 128])
    grid_side: int = 46
    num_points: int = 2048
    K: int = 64
    use_de: bool = True

    def validate(self) -> None:
        self.encoder.validate()
        if self.grid_side ** 2 < self.num_points:
            raise ConfigError("grid_side", f"{self.grid_side}^2 < num_points {self.num_points}")
        if not self.decoder_widths or any(w < 1 for w in self.decoder_widths):
            raise ConfigError("decoder_widths", "need at least one positive width")
        try:
            check_bank_size(self.K)
        except ValueError as e:
            raise ConfigError("K", str(e))

    @property
    def feature_dim(self) -> int:
        return self.encoder.feature_dim

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelConfig':
        data = dict(data)
        data['encoder'] = EncoderConfig(**data['encoder'])
        return cls(**data)


def first_max_pool(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Max over dim; the gradient goes only to the first (lowest-index) maximiser"""
    with torch.no_grad():
        hit = x == x.max(dim=dim, keepdim=True).values
        first = hit & (hit.cumsum(dim=dim) == 1)
    return (x * first).sum(dim=dim)


def _mlp(widths: List[int], final_activation: bool) -> nn.Sequential:
    layers: List[nn.Module] = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(a, b))
        if final_activation or i < len(widths) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class PointNetEncoder(nn.Module):
    """Per-point shared MLP (affine + ReLU per layer) then max over points"""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.in_dim = config.layer_widths[0]
        self.mlp = _mlp(list(config.layer_widths), final_activation=True)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        """(B, N, 3) -> (B, d), or (N, 3) -> (d,)"""
        if points.shape[-1] != self.in_dim:
            raise ValueError(f"encoder expects {self.in_dim}-d points, got shape {tuple(points.shape)}")
        return first_max_pool(self.mlp(points), dim=-2)


class FoldingDecoder(nn.Module):
    """Two folding stages: concat(uv, f) -> 3D, then concat(xyz, f) -> 3D"""

    def __init__(self, feature_dim: int, widths: List[int]):
        super().__init__()
        self.feature_dim = feature_dim
        self.fold1 = _mlp([feature_dim + 2] + list(widths) + [3], final_activation=False)
        self.fold2 = _mlp([feature_dim + 3] + list(widths) + [3], final_activation=False)

    def forward(self, features: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
        """features (B, d), uv (P, 2) -> (B, P, 3)"""
        B, P = features.shape[0], uv.shape[0]
        tiled = features.unsqueeze(1).expand(B, P, self.feature_dim)
        seed = uv.unsqueeze(0).expand(B, P, 2)
        intermediate = self.fold1(torch.cat([seed, tiled], dim=-1))
        return self.fold2(torch.cat([intermediate, tiled], dim=-1))


class CompletionNetwork(nn.Module):
    """The parameter store: encoders, decoder, and prototype bank"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.grid = FoldingGrid(config.grid_side)

        self.encoder_partial = PointNetEncoder(config.encoder)
        # Without dual encoders both branches share one weight set
        self.encoder_gt = PointNetEncoder(config.encoder) if config.use_de else self.encoder_partial
        self.decoder = FoldingDecoder(config.feature_dim, config.decoder_widths)
        self.memory = PrototypeBank(config.K, config.feature_dim)

        self.register_buffer('uv', self.grid.uv(config.num_points), persistent=False)

    @property
    def dtype(self) -> torch.dtype:
        return self.memory.vectors.dtype

    def encoder(self, which: str) -> PointNetEncoder:
        if which == "partial":
            return self.encoder_partial
        if which == "gt":
            return self.encoder_gt
        raise ValueError(f"Unknown encoder '{which}' (expected 'partial' or 'gt')")

    def decode(self, features: torch.Tensor) -> torch.Tensor:
        return self.decoder(features, self.uv.to(features.dtype))

    def parameter_groups(self) -> Dict[str, List[Tuple[str, nn.Parameter]]]:
        """Named parameters keyed by top-level group"""
        groups: Dict[str, List[Tuple[str, nn.Parameter]]] = {}
        for name, param in self.named_parameters():
            groups.setdefault(name.split('.')[0], []).append((name, param))
        return groups

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(p).all()) for p in self.parameters())


def _as_points(pc: Union[PointCloud, np.ndarray, torch.Tensor], dtype: torch.dtype) -> torch.Tensor:
    if isinstance(pc, PointCloud):
        pc = pc.points
    return torch.as_tensor(pc, dtype=dtype)


def encode(params: CompletionNetwork, which: str, pc: Union[PointCloud, torch.Tensor]) -> torch.Tensor:
    """Global descriptor of one cloud ((d,)) or a batch ((B, d)) with the theta or phi encoder"""
    return params.encoder(which)(_as_points(pc, params.dtype))


def fold_decode(params: CompletionNetwork, f: torch.Tensor, grid: Optional[FoldingGrid] = None) -> torch.Tensor:
    """
    Fold the lattice into a cloud conditioned on f

    Args:
        f: (d,) or (B, d) descriptor
        grid: Lattice to fold (defaults to the model's); must cover num_points

    Returns:
        (num_points, 3) or (B, num_points, 3)
    """
    d = params.config.feature_dim
    if f.shape[-1] != d:
        raise ValueError(f"feature dimension mismatch: expected {d}, got {f.shape[-1]}")
    if not bool(torch.isfinite(f).all()):
        raise ValueError("feature contains non-finite values")

    grid = grid or params.grid
    uv = grid.uv(params.config.num_points, dtype=params.dtype)

    single = f.dim() == 1
    out = params.decoder(f.unsqueeze(0) if single else f, uv)
    return out[0] if single else out


def _substream_generators(seed: int, count: int) -> List[torch.Generator]:
    """Independent torch generators derived from one seed"""
    gens = []
    for child in np.random.SeedSequence(seed).spawn(count):
        gen = torch.Generator()
        gen.manual_seed(int(child.generate_state(1, dtype=np.uint64)[0] >> 1))
        gens.append(gen)
    return gens


def _init_linear_layers(module: nn.Module, gen: torch.Generator) -> None:
    """Fan-in scaled uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases"""
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            bound = 1.0 / np.sqrt(layer.in_features)
            layer.weight.uniform_(-bound, bound, generator=gen)
            layer.bias.uniform_(-bound, bound, generator=gen)


def init_params(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> CompletionNetwork:
    """
    Seeded parameter store

    theta, phi, decoder, and bank draw from independent substreams, so the
    two encoders never start equal. Gradient slots are allocated as zeros.
    """
    model = CompletionNetwork(config).to(dtype)
    gen_partial, gen_gt, gen_decoder, gen_memory = _substream_generators(seed, 4)

    with torch.no_grad():
        _init_linear_layers(model.encoder_partial, gen_partial)
        if config.use_de:
            _init_linear_layers(model.encoder_gt, gen_gt)
        _init_linear_layers(model.decoder, gen_decoder)
        model.memory.vectors.normal_(0.0, 1.0, generator=gen_memory)

    for param in model.parameters():
        param.grad = torch.zeros_like(param)
    return model


def check_compatible(config: ModelConfig, expected: ModelConfig) -> None:
    """Raise CheckpointMismatchError naming the first differing field"""
    pairs = [
        ("feature_dim", config.feature_dim, expected.feature_dim),
        ("K", config.K, expected.K),
        ("encoder_widths", list(config.encoder.layer_widths), list(expected.encoder.layer_widths)),
        ("decoder_widths", list(config.decoder_widths), list(expected.decoder_widths)),
        ("grid_side", config.grid_side, expected.grid_side),
        ("num_points", config.num_points, expected.num_points),
        ("use_de", config.use_de, expected.use_de),
    ]
    for name, found, wanted in pairs:
        if found != wanted:
            raise CheckpointMismatchError(name, wanted, found)


def save_checkpoint(path: Path, model: CompletionNetwork, seed: int, step: int = 0,
                    epoch: int = 0, tau: Optional[float] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    run_config: Optional[Dict] = None) -> None:
    """Write header + float32 payloads; byte-identical for identical inputs"""
    tensors: List[Tuple[str, torch.Tensor]] = list(model.named_parameters())
    optimizer_step = 0
    if optimizer is not None:
        names = {id(p): name for name, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group['params']:
                state = optimizer.state.get(p)
                if not state:
                    continue
                optimizer_step = int(state['step'])
                tensors.append((f"optimizer.exp_avg.{names[id(p)]}", state['exp_avg']))
                tensors.append((f"optimizer.exp_avg_sq.{names[id(p)]}", state['exp_avg_sq']))

    table, payloads, offset = [], [], 0
    for name, tensor in tensors:
        data = tensor.detach().cpu().numpy().astype('<f4').tobytes()
        table.append({'name': name, 'shape': list(tensor.shape), 'offset': offset, 'length': len(data)})
        payloads.append(data)
        offset += len(data)

    header = {
        'format': CHECKPOINT_FORMAT,
        'model': model.config.to_dict(),
        'config': run_config or {},
        'seed': seed,
        'step': step,
        'epoch': epoch,
        'tau': tau,
        'optimizer_step': optimizer_step,
        'tensors': table,
    }
    with open(path, 'wb') as f:
        f.write(json.dumps(header, sort_keys=True).encode('utf-8') + b"\n")
        for data in payloads:
            f.write(data)


def read_checkpoint(path: Path) -> Tuple[Dict, Dict[str, np.ndarray]]:
    """Parse a checkpoint into (header, name -> float32 array)"""
    with open(path, 'rb') as f:
        raw = f.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise DataError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:newline].decode('utf-8'))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: bad checkpoint header ({e})")
    if header.get('format') != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unknown checkpoint format {header.get('format')!r}")

    payload = raw[newline + 1:]
    arrays = {}
    for entry in header['tensors']:
        start, length = entry['offset'], entry['length']
        if start + length > len(payload) or length != 4 * int(np.prod(entry['shape'], dtype=np.int64)):
            raise DataError(f"{path}: tensor {entry['name']} does not match its shape table entry")
        arrays[entry['name']] = np.frombuffer(payload[start:start + length], dtype='<f4').reshape(entry['shape'])
    return header, arrays


def load_checkpoint(path: Path, dtype: torch.dtype = torch.float32,
                    expected: Optional[ModelConfig] = None) -> Tuple[CompletionNetwork, Dict, Dict[str, np.ndarray]]:
    """
    Rebuild a model from a checkpoint

    Returns:
        (model, header, optimizer arrays keyed by tensor name)

    Raises:
        CheckpointMismatchError: expected config differs (names the field)
        DataError: shape table does not match the model
    """
    header, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(header['model'])
    if expected is not None:
        check_compatible(config, expected)

    model = CompletionNetwork(config).to(dtype)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name not in arrays:
                raise DataError(f"{path}: missing tensor {name}")
            if tuple(arrays[name].shape) != tuple(param.shape):
                raise DataError(f"{path}: tensor {name} has shape {arrays[name].shape}, model needs {tuple(param.shape)}")
            param.copy_(torch.from_numpy(arrays[name].astype(np.float64)).to(dtype))
    for param in model.parameters():
        param.grad = torch.zeros_like(param)

    optimizer_arrays = {k: v for k, v in arrays.items() if k.startswith("optimizer.")}
    return model, header, optimizer_arrays


def restore_optimizer(optimizer: torch.optim.Optimizer, model: CompletionNetwork,
                      arrays: Dict[str, np.ndarray], step: int) -> None:
    """Put saved Adam moments back into optimizer.state"""
    if step <= 0:
        return
    for name, param in model.named_parameters():
        key_avg, key_sq = f"optimizer.exp_avg.{name}", f"optimizer.exp_avg_sq.{name}"
        if key_avg not in arrays or key_sq not in arrays:
            continue
        optimizer.state[param] = {
            'step': torch.tensor(float(step)),
            'exp_avg': torch.from_numpy(arrays[key_avg].astype(np.float64)).to(param.dtype),
            'exp_avg_sq': torch.from_numpy(arrays[key_sq].astype(np.float64)).to(param.dtype),
        }


if __name__ == "__main__":
    # Quick test
    config = ModelConfig(encoder=EncoderConfig([3, 8, 8], 8), decoder_widths=[16, 8],
                         grid_side=6, num_points=16, K=4)
    model = init_params(config, seed=0)
    cloud = torch.randn(16, 3)
    f = encode(model, "partial", cloud)
    print(f"Feature: {tuple(f.shape)}, decoded: {tuple(fold_decode(model, f).shape)}")
    for name, p in model.named_parameters():
        print(f"  {name}: {tuple(p.shape)}")
    print("\n✅ Done")
