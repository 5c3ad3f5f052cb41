#!/usr/bin/env python3
"""
Training and Evaluation

Loss suite, optimizer, train loop, inference and evaluation for the
prototype-memory completion network.

Training path (per batch):
    F_pi = encode(theta, partial), F_gt = encode(phi, gt)
    retrieve with F_gt -> index j, alpha
    F' = fuse(F_gt, sg(M_j), alpha)
    L = L_cd(decode(F'), gt) + l_f L_f + l_align |F_pi - F_gt|^2 + l_mem L_mem

The decoder sees sg(M_j), so the bank learns only through the commitment
term. Inference uses F_pi as the query and never runs the phi encoder.
"""

import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dataset import CompletionPair, morphology_class
from errors import ConfigError, NumericalError, TrainingAborted
from geometry import PointCloud, chamfer_l2, chamfer_l2_torch, chamfer_matches, fscore
from memory import (CONFIDENCE_MODES, commitment_loss, fuse, initial_rows, reseed_dead,
                    retrieve, retrieve_batch, squared_distances)
from model import (CompletionNetwork, ModelConfig, encode, fold_decode, init_params,
                   load_checkpoint, restore_optimizer, save_checkpoint)
from run_logger import RunLogger

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class LossWeights:
    """Weights of the auxiliary terms (the Chamfer term has weight 1)"""

    lambda_f: float = 0.0
    lambda_align: float = 0.1
    lambda_mem: float = 0.25

    def __post_init__(self):
        for name in ("lambda_f", "lambda_align", "lambda_mem"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)}")

    def scaled(self, c: float) -> 'LossWeights':
        return LossWeights(self.lambda_f * c, self.lambda_align * c, self.lambda_mem * c)


@dataclass
class TrainConfig:
    """Optimisation, ablation and memory settings for one training run"""

    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    use_pm: bool = True
    use_de: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    tau: Optional[float] = None           # None = auto
    confidence: str = "similarity"
    min_hits: int = 1
    max_rejections: int = 10
    fscore_tau: float = 0.01
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", f"must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError("epochs", f"must be >= 0, got {self.epochs}")
        if self.tau is not None and not self.tau > 0:
            raise ConfigError("tau", f"must be > 0 or null, got {self.tau}")
        if self.confidence not in CONFIDENCE_MODES:
            raise ConfigError("confidence", f"must be one of {CONFIDENCE_MODES}, got {self.confidence!r}")
        if self.dtype not in DTYPES:
            raise ConfigError("dtype", f"must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


@dataclass
class FrozenTerms:
    """
    Base-point values held fixed while probing the objective

    Retrieval index, alpha, the stop-gradient operands and the Chamfer
    matches are piecewise constant or detached; fixing them turns the
    objective into the smooth surrogate whose gradient training uses.
    """

    indices: Optional[torch.Tensor] = None
    alpha: Optional[torch.Tensor] = None
    f_gt: Optional[torch.Tensor] = None
    proto: Optional[torch.Tensor] = None
    matches: Optional[Tuple[torch.Tensor, torch.Tensor]] = None


@dataclass
class LossBreakdown:
    """Loss tensors of one forward pass plus the retrieval that produced them"""

    cd: torch.Tensor
    f: torch.Tensor
    align: torch.Tensor
    mem: torch.Tensor
    total: torch.Tensor
    f_pi: torch.Tensor
    f_gt: torch.Tensor
    indices: Optional[torch.Tensor] = None
    alpha: Optional[torch.Tensor] = None
    sq_distances: Optional[torch.Tensor] = None

    def values(self) -> Dict[str, float]:
        return {
            'l_cd': float(self.cd),
            'l_f': float(self.f),
            'l_align': float(self.align),
            'l_mem': float(self.mem),
            'total': float(self.total),
        }


@dataclass
class StepReport:
    """What training_step hands back to the loop"""

    losses: Dict[str, float]
    grad_norms: Dict[str, float]
    alpha_stats: Optional[Dict[str, float]]
    retrieval_histogram: Optional[List[int]]
    f_gt: torch.Tensor                    # detached, for reseeding
    sq_distances: Optional[torch.Tensor]  # detached, for the tau update

    def record(self, epoch: int, step: int) -> Dict:
        return {
            'kind': 'step',
            'epoch': epoch,
            'step': step,
            **self.losses,
            'grad_norms': self.grad_norms,
            'alpha': self.alpha_stats,
            'retrieval_histogram': self.retrieval_histogram,
        }


def stack_clouds(pairs: List[CompletionPair], attr: str, dtype: torch.dtype) -> torch.Tensor:
    """(B, N, 3) tensor from the partial or gt clouds of a batch"""
    return torch.as_tensor(np.stack([getattr(p, attr).points for p in pairs]), dtype=dtype)


def alignment_loss(f_pi: torch.Tensor, f_gt: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    |f_pi - f_gt|^2 (batch mean for (B, d) inputs)

    Returns:
        (loss, grad_pi, grad_gt); the loss carries autograd to both encoders,
        the two gradients are its analytic values and are detached.
    """
    if f_pi.shape != f_gt.shape:
        raise ValueError(f"alignment dimension mismatch: {tuple(f_pi.shape)} vs {tuple(f_gt.shape)}")

    diff = f_pi - f_gt
    per_sample = (diff * diff).sum(dim=-1)
    if per_sample.dim() == 0:
        loss, scale = per_sample, 2.0
    else:
        loss, scale = per_sample.mean(), 2.0 / per_sample.shape[0]
    grad_pi = scale * diff.detach()
    return loss, grad_pi, -grad_pi


def total_loss(cd, f, align, mem, w: LossWeights):
    """L = cd + lambda_f f + lambda_align align + lambda_mem mem"""
    return cd + w.lambda_f * f + w.lambda_align * align + w.lambda_mem * mem


def _fscore_loss(pred: torch.Tensor, gt: torch.Tensor, tau: float) -> torch.Tensor:
    """Batch mean of 1 - F-score; a constant with respect to every parameter"""
    values = [1.0 - fscore(PointCloud(p.detach().double().numpy()), PointCloud(g.detach().double().numpy()), tau)
              for p, g in zip(pred, gt)]
    return torch.tensor(float(np.mean(values)), dtype=pred.dtype)


def compute_losses(model: CompletionNetwork, partial: torch.Tensor, gt: torch.Tensor,
                   cfg: TrainConfig, tau: float, frozen: Optional[FrozenTerms] = None,
                   record: bool = True) -> LossBreakdown:
    """
    Training-path forward pass for a (B, N, 3) batch

    Args:
        frozen: Fixed retrieval / stop-gradient / match values (gradient checks)
        record: Count retrieval hits toward the bank usage
    """
    frozen = frozen or FrozenTerms()
    zero = torch.zeros((), dtype=partial.dtype)

    f_pi = model.encoder_partial(partial)
    f_gt = model.encoder_gt(gt)

    indices = alpha = sq = None
    if cfg.use_pm:
        bank = model.memory
        if frozen.indices is not None:
            indices, alpha = frozen.indices, frozen.alpha
            with torch.no_grad():
                sq = squared_distances(bank.vectors, f_gt.detach()).gather(1, indices.unsqueeze(1)).squeeze(1)
        else:
            indices, sq, alpha = retrieve_batch(bank, f_gt, tau, branch="gt",
                                                confidence=cfg.confidence, record=record)
        proto = bank.vectors[indices]
        sg_proto = frozen.proto if frozen.proto is not None else proto.detach()
        fused = fuse(f_gt, sg_proto, alpha)
        mem = commitment_loss(f_gt, proto, frozen_f=frozen.f_gt, frozen_proto=frozen.proto)
    else:
        fused = f_gt
        mem = zero

    pred = model.decode(fused)
    cd = chamfer_l2_torch(pred, gt, matches=frozen.matches).mean()

    if cfg.use_de:
        align, _, _ = alignment_loss(f_pi, f_gt)
    else:
        # Shared weights: the term is disabled
        align = zero

    f = _fscore_loss(pred, gt, cfg.fscore_tau) if cfg.weights.lambda_f > 0 else zero

    return LossBreakdown(
        cd=cd, f=f, align=align, mem=mem,
        total=total_loss(cd, f, align, mem, cfg.weights),
        f_pi=f_pi, f_gt=f_gt, indices=indices, alpha=alpha, sq_distances=sq,
    )


def freeze_terms(model: CompletionNetwork, partial: torch.Tensor, gt: torch.Tensor,
                 cfg: TrainConfig, tau: float) -> FrozenTerms:
    """Capture the piecewise-constant parts of the objective at the current parameters"""
    with torch.no_grad():
        f_gt = model.encoder_gt(gt)
        frozen = FrozenTerms()
        fused = f_gt
        if cfg.use_pm:
            indices, _, alpha = retrieve_batch(model.memory, f_gt, tau, branch="gt",
                                               confidence=cfg.confidence, record=False)
            proto = model.memory.vectors[indices].clone()
            frozen = FrozenTerms(indices=indices, alpha=alpha, f_gt=f_gt.clone(), proto=proto)
            fused = fuse(f_gt, proto, alpha)
        frozen.matches = chamfer_matches(model.decode(fused), gt)
    return frozen


def make_optimizer(model: CompletionNetwork, cfg: TrainConfig) -> torch.optim.Adam:
    """Adaptive-moment optimizer with per-tensor state"""
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                            betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, foreach=False)


def gradient_norms(model: CompletionNetwork) -> Dict[str, float]:
    """L2 norm of the gradient per parameter group"""
    norms = {}
    for group, params in model.parameter_groups().items():
        total = sum(float((p.grad.double() ** 2).sum()) for _, p in params if p.grad is not None)
        norms[group] = float(np.sqrt(total))
    return norms


def zero_gradients(model: CompletionNetwork) -> None:
    for param in model.parameters():
        if param.grad is None:
            param.grad = torch.zeros_like(param)
        else:
            param.grad.zero_()


def optimizer_step(model: CompletionNetwork, optimizer: torch.optim.Optimizer) -> None:
    """
    Apply one Adam update, then zero the gradients

    Raises:
        NumericalError: A gradient is non-finite (parameters left unchanged)
    """
    for name, param in model.named_parameters():
        if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
            zero_gradients(model)
            raise NumericalError(f"grad:{name}")
    optimizer.step()
    zero_gradients(model)


def training_step(model: CompletionNetwork, optimizer: torch.optim.Optimizer,
                  pairs: List[CompletionPair], cfg: TrainConfig, tau: float) -> StepReport:
    """
    Forward, backward and one optimizer step on a batch of pairs

    Raises:
        NumericalError: Non-finite loss or gradient; the step is rejected
    """
    partial = stack_clouds(pairs, "partial", model.dtype)
    gt = stack_clouds(pairs, "gt", model.dtype)

    zero_gradients(model)
    losses = compute_losses(model, partial, gt, cfg, tau)
    for name, value in losses.values().items():
        if not np.isfinite(value):
            raise NumericalError(name)

    losses.total.backward()
    norms = gradient_norms(model)
    optimizer_step(model, optimizer)

    alpha_stats = histogram = None
    if losses.indices is not None:
        alpha = losses.alpha.double()
        alpha_stats = {'mean': float(alpha.mean()), 'min': float(alpha.min()), 'max': float(alpha.max())}
        histogram = np.bincount(losses.indices.numpy(), minlength=model.config.K).tolist()

    return StepReport(
        losses=losses.values(),
        grad_norms=norms,
        alpha_stats=alpha_stats,
        retrieval_histogram=histogram,
        f_gt=losses.f_gt.detach().clone(),
        sq_distances=None if losses.sq_distances is None else losses.sq_distances.detach().clone(),
    )


class TauTracker:
    """
    Temperature of the confidence estimate

    Fixed when configured. Otherwise it starts at the mean squared distance
    from the warmup features to their nearest bank row and then follows the
    previous epoch's mean retrieval distance.
    """

    def __init__(self, fixed: Optional[float] = None):
        self.fixed = fixed
        self.value = fixed if fixed is not None else 1.0

    @property
    def auto(self) -> bool:
        return self.fixed is None

    def start(self, warmup_features: torch.Tensor, bank_rows: torch.Tensor) -> float:
        if self.auto and warmup_features.shape[0] > 0:
            feats = warmup_features.detach().double()
            sq = squared_distances(bank_rows.detach().double(), feats).min(dim=-1).values
            candidate = float(sq.mean())
            if not candidate > 0:
                candidate = float(feats.var(dim=0, unbiased=False).sum()) if feats.shape[0] > 1 else 0.0
            self.value = candidate if candidate > 0 and np.isfinite(candidate) else 1.0
        return self.value

    def update(self, epoch_sq_distances: List[torch.Tensor]) -> float:
        if self.auto and epoch_sq_distances:
            mean = float(torch.cat([s.double() for s in epoch_sq_distances]).mean())
            if mean > 0 and np.isfinite(mean):
                self.value = mean
        return self.value


def configure_runtime(threads: int = 1, strict_deterministic: bool = False) -> None:
    """Thread count and deterministic-kernel mode for torch"""
    if threads < 1:
        raise ConfigError("threads", f"must be >= 1, got {threads}")
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(strict_deterministic)


def inference(model: CompletionNetwork, partial: PointCloud, use_pm: bool, tau: float,
              confidence: str = "similarity", record_usage: bool = False) -> PointCloud:
    """
    Complete one partial cloud (normalized frame in, normalized frame out)

    Only the partial encoder, retrieval and the decoder run.

    Raises:
        NumericalError: Parameters contain NaN/inf
    """
    if not model.all_finite():
        raise NumericalError("params", "model parameters are not finite")

    with torch.no_grad():
        f = encode(model, "partial", partial)
        if use_pm:
            hit = retrieve(model.memory, f, tau, branch="partial", confidence=confidence,
                           record=record_usage)
            f = fuse(f, hit.prototype, hit.alpha)
        pred = fold_decode(model, f)
    return PointCloud(pred.double().numpy())


@dataclass
class EvalReport:
    """Aggregated completion metrics over one split"""

    cd_mean_e4: float
    cd_median_e4: float
    fscore_mean: float
    sample_count: int
    use_pm: bool
    config_fingerprint: str
    per_position: Dict[str, Dict[str, float]]
    per_class: Dict[str, Dict[str, float]]
    per_pair: List[Dict]

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'EvalReport':
        return cls(**data)

    def save(self, path: Path) -> None:
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: Path) -> 'EvalReport':
        with open(path, 'r') as f:
            return cls.from_dict(json.load(f))

    def summary_lines(self) -> List[str]:
        lines = [
            f"Samples: {self.sample_count}  (PM {'on' if self.use_pm else 'off'})",
            f"CD-L2 (x1e-4): mean {self.cd_mean_e4:.4f}  median {self.cd_median_e4:.4f}",
            f"F-score@1%: {self.fscore_mean:.4f}",
            "",
            f"{'group':<12}{'count':>8}{'CD x1e-4':>12}{'F-score':>10}",
        ]
        for name, row in list(self.per_class.items()) + sorted(self.per_position.items(), key=lambda kv: int(kv[0])):
            lines.append(f"{name:<12}{row['count']:>8}{row['cd_mean_e4']:>12.4f}{row['fscore_mean']:>10.4f}")
        return lines


def _group_rows(per_pair: List[Dict], key: str) -> Dict[str, Dict[str, float]]:
    groups: Dict[str, List[Dict]] = {}
    for row in per_pair:
        groups.setdefault(str(row[key]), []).append(row)
    return {
        name: {
            'count': len(rows),
            'cd_mean_e4': float(np.mean([r['cd_e4'] for r in rows])),
            'fscore_mean': float(np.mean([r['fscore'] for r in rows])),
        }
        for name, rows in sorted(groups.items())
    }


def evaluate(model: Optional[CompletionNetwork], pairs: List[CompletionPair], use_pm: bool,
             tau: float = 1.0, confidence: str = "similarity", tooth_count: int = 10,
             fscore_tau: float = 0.01, fingerprint: str = "",
             predictor: Optional[Callable[[CompletionPair], PointCloud]] = None,
             on_prediction: Optional[Callable[[CompletionPair, PointCloud], None]] = None,
             workers: int = 1) -> EvalReport:
    """
    Run inference per pair and aggregate CD-L2 / F-score

    Args:
        predictor: Replaces model inference (e.g. the gt oracle)
        on_prediction: Called with every (pair, normalized prediction)
        workers: Parallel pairs; results do not depend on it

    Raises:
        ValueError: Empty pair list
    """
    if not pairs:
        raise ValueError("evaluate needs a nonempty pair list")
    if predictor is None:
        if model is None:
            raise ValueError("evaluate needs a model or a predictor")
        predictor = lambda pair: inference(model, pair.partial, use_pm, tau, confidence)

    def score(pair: CompletionPair) -> Tuple[Dict, PointCloud]:
        pred = predictor(pair)
        cd = chamfer_l2(pred, pair.gt)
        return {
            'pair_id': pair.pair_id,
            'target_position': pair.target_position,
            'class': morphology_class(pair.target_position, tooth_count),
            'cd_e4': cd * 1e4,
            'fscore': fscore(pred, pair.gt, fscore_tau),
        }, pred

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score, pairs))
    else:
        results = [score(p) for p in pairs]

    per_pair = []
    for pair, (row, pred) in zip(pairs, results):
        per_pair.append(row)
        if on_prediction is not None:
            on_prediction(pair, pred)

    cds = np.array([r['cd_e4'] for r in per_pair])
    return EvalReport(
        cd_mean_e4=float(np.mean(cds)),
        cd_median_e4=float(np.median(cds)),
        fscore_mean=float(np.mean([r['fscore'] for r in per_pair])),
        sample_count=len(per_pair),
        use_pm=use_pm,
        config_fingerprint=fingerprint,
        per_position=_group_rows(per_pair, 'target_position'),
        per_class=_group_rows(per_pair, 'class'),
        per_pair=per_pair,
    )


@dataclass
class TrainResult:
    """Where a run ended up"""

    model: CompletionNetwork
    tau: float
    step: int
    epoch: int
    best_val_cd_e4: Optional[float]
    best_checkpoint: Optional[Path]
    final_checkpoint: Optional[Path]


def _encode_all(model: CompletionNetwork, pairs: List[CompletionPair], batch_size: int) -> torch.Tensor:
    feats = []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            feats.append(model.encoder_gt(stack_clouds(pairs[start:start + batch_size], "gt", model.dtype)))
    return torch.cat(feats)


def _zero_moments(optimizer: torch.optim.Optimizer, param: torch.nn.Parameter, rows: List[int]) -> None:
    state = optimizer.state.get(param)
    if state and rows:
        index = torch.as_tensor(rows)
        state['exp_avg'][index] = 0
        state['exp_avg_sq'][index] = 0


def train(cfg: TrainConfig, model_config: ModelConfig, train_pairs: List[CompletionPair],
          val_pairs: List[CompletionPair], out_dir: Optional[Path] = None,
          logger: Optional[RunLogger] = None, resume: Optional[Path] = None,
          run_config: Optional[Dict] = None, tooth_count: int = 10) -> TrainResult:
    """
    Full training run

    Writes best.ckpt (lowest validation CD) and final.ckpt into out_dir when
    given. With resume, parameters, Adam moments, tau and the step counter
    continue from the checkpoint.

    Raises:
        TrainingAborted: max_rejections consecutive non-finite steps
    """
    if not train_pairs:
        raise ValueError("training needs at least one pair")
    logger = logger or RunLogger(quiet=True)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    dtype = cfg.torch_dtype

    if resume is not None:
        model, header, moments = load_checkpoint(resume, dtype=dtype, expected=model_config)
        optimizer = make_optimizer(model, cfg)
        restore_optimizer(optimizer, model, moments, header['optimizer_step'])
        step, start_epoch = int(header['step']), int(header['epoch'])
        tau = TauTracker(cfg.tau)
        if tau.auto and header.get('tau'):
            tau.value = float(header['tau'])
        logger.log(f"Resumed from {resume} at epoch {start_epoch}, step {step}")
    else:
        model = init_params(model_config, cfg.seed, dtype)
        optimizer = make_optimizer(model, cfg)
        step, start_epoch = 0, 0
        tau = TauTracker(cfg.tau)
        if cfg.use_pm:
            warmup = _encode_all(model, train_pairs, cfg.batch_size)
            model.memory.assign(initial_rows(model_config.K, model_config.feature_dim,
                                             warmup, cfg.seed))
            tau.start(warmup, model.memory.vectors)
            logger.log(f"Bank initialised from {warmup.shape[0]} warmup features, tau={tau.value:.6g}")

    best_cd: Optional[float] = None
    best_path = out_dir / "best.ckpt" if out_dir is not None else None
    rejections = 0
    first_ratio_logged = False

    for epoch in range(start_epoch, cfg.epochs):
        logger.log_subsection(f"Epoch {epoch + 1}/{cfg.epochs}")
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_pairs))
        recent, epoch_sq, epoch_losses = [], [], []

        for start in range(0, len(order), cfg.batch_size):
            batch = [train_pairs[i] for i in order[start:start + cfg.batch_size]]
            try:
                report = training_step(model, optimizer, batch, cfg, tau.value)
            except NumericalError as e:
                rejections += 1
                logger.log(f"  rejected step ({e.loss_name}), {rejections} in a row")
                logger.log_record({'kind': 'rejected', 'epoch': epoch, 'step': step, 'loss': e.loss_name})
                if rejections >= cfg.max_rejections:
                    raise TrainingAborted(rejections, e.loss_name)
                continue

            rejections = 0
            step += 1
            logger.log_record(report.record(epoch, step))
            recent.append(report.f_gt)
            epoch_losses.append(report.losses['total'])
            if report.sq_distances is not None:
                epoch_sq.append(report.sq_distances)

            if not first_ratio_logged:
                cd = report.losses['l_cd']
                aux = report.losses['total'] - cd
                logger.log(f"  auxiliary/chamfer ratio at first step: {aux / cd if cd > 0 else float('inf'):.4f}")
                first_ratio_logged = True

        reseeded = 0
        if cfg.use_pm and recent:
            reseeded = reseed_dead(model.memory, torch.cat(recent), cfg.min_hits,
                                   seed=int(np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0]))
            _zero_moments(optimizer, model.memory.vectors, model.memory.last_reseeded)
            tau.update(epoch_sq)

        val_cd = None
        if val_pairs:
            val_cd = evaluate(model, val_pairs, cfg.use_pm, tau.value, cfg.confidence,
                              tooth_count, cfg.fscore_tau).cd_mean_e4
            if best_cd is None or val_cd < best_cd:
                best_cd = val_cd
                if best_path is not None:
                    save_checkpoint(best_path, model, cfg.seed, step, epoch + 1, tau.value,
                                    optimizer, run_config)

        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float('nan')
        logger.log(f"  loss {mean_loss:.6f}  val CD x1e-4 {val_cd if val_cd is None else round(val_cd, 4)}"
                   f"  reseeded {reseeded}  tau {tau.value:.6g}")
        logger.log_record({'kind': 'epoch', 'epoch': epoch, 'step': step, 'mean_total': mean_loss,
                           'val_cd_e4': val_cd, 'reseeded': reseeded, 'tau': tau.value})

    final_path = None
    if out_dir is not None:
        final_path = out_dir / "final.ckpt"
        save_checkpoint(final_path, model, cfg.seed, step, max(cfg.epochs, start_epoch),
                        tau.value, optimizer, run_config)
        if best_path is not None and not best_path.exists():
            save_checkpoint(best_path, model, cfg.seed, step, max(cfg.epochs, start_epoch),
                            tau.value, optimizer, run_config)

    return TrainResult(
        model=model,
        tau=tau.value,
        step=step,
        epoch=max(cfg.epochs, start_epoch),
        best_val_cd_e4=best_cd,
        best_checkpoint=best_path,
        final_checkpoint=final_path,
    )


if __name__ == "__main__":
    # Quick test
    from dataset import ArchSceneSpec, build_split
    from model import EncoderConfig

    print("Training a tiny model for two epochs...")
    spec = ArchSceneSpec(points_per_tooth=200, gingiva_points=600)
    train_pairs, val_pairs, _ = build_split(spec, n_scenes=5, ratios=[0.6, 0.2, 0.2], seed=0,
                                            n_gingiva=64, num_points=64)
    model_config = ModelConfig(encoder=EncoderConfig([3, 16, 32], 32), decoder_widths=[32, 16],
                               grid_side=8, num_points=64, K=8)
    result = train(TrainConfig(epochs=2, batch_size=8), model_config, train_pairs, val_pairs,
                   logger=RunLogger())
    print(f"\nSteps: {result.step}, best val CD x1e-4: {result.best_val_cd_e4:.4f}, tau: {result.tau:.4g}")
    print("\n✅ Done")
