#!/usr/bin/env python3
"""
Dental Completion Command Line

Subcommands:
    synth   Build synthetic arches and write train/val/test pair directories
    train   Train the completion network on a synthesized data directory
    eval    Score a checkpoint (or the gt oracle) on a split
    ablate  Train the three memory/dual-encoder configurations over several seeds
    embed   Project partial features and prototypes with PCA, report compactness

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / "src"))

from analysis import (ABLATION_GRID, AblationRow, ablation_ordering, ablation_table,
                      compactness_ratio, embedding_rows, partial_features, plot_embedding,
                      project_pca, prototype_usage_report, write_embedding_csv)
from config import PipelineConfig, __version__
from dataset import build_split, load_split, save_split
from errors import CompletionError, ConfigError, DataError
from geometry import PointCloud, write_xyz
from manifest import OutputLock, RunManifest, describe_version
from model import load_checkpoint
from run_logger import RunLogger
from training import DTYPES, configure_runtime, evaluate, train

SPLITS = ("train", "val", "test")


def load_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file (or defaults) with the command-line overrides applied"""
    config = PipelineConfig.load(Path(args.config)) if args.config else PipelineConfig()
    config = config.with_overrides(
        seed=args.seed,
        threads=args.threads,
        strict_deterministic=True if args.strict_deterministic else None,
    )
    return config.validate()


def finish(command: str, config: PipelineConfig, out_dir: Path, logger: RunLogger,
           outputs: List[Path], extra: Optional[Dict] = None) -> RunManifest:
    """Close the log and write the manifest"""
    duration = logger.finalize()
    manifest = RunManifest(
        command=command,
        config=config.to_dict(),
        seed=config.seed,
        version=describe_version(__version__),
        outputs=sorted(str(Path(p).relative_to(out_dir)) for p in outputs),
        duration_seconds=round(duration, 3),
        extra=extra or {},
    )
    manifest.save(out_dir)
    return manifest


def cmd_synth(config: PipelineConfig, out_dir: Path, logger: RunLogger) -> RunManifest:
    """Generate scenes, cut pairs, split by scene and write them out"""
    logger.log_section("SYNTH")
    logger.log(f"Scenes: {config.n_scenes}, teeth per scene: {config.tooth_count}, seed: {config.seed}")

    splits = build_split(config.scene_spec(), config.n_scenes, config.ratios, config.seed,
                         n_gingiva=config.n_gingiva, num_points=config.num_points,
                         workers=config.workers)

    outputs: List[Path] = []
    counts = {}
    for name, pairs in zip(SPLITS, splits):
        outputs += save_split(pairs, out_dir, name)
        counts[name] = len(pairs)
        logger.log(f"  {name}: {len(pairs)} pairs from {len({p.scene_id for p in pairs})} scenes")

    config.save(out_dir / "config.json")
    outputs.append(out_dir / "config.json")
    return finish("synth", config, out_dir, logger, outputs, {'pair_counts': counts})


def _train_run(config: PipelineConfig, data_dir: Path, out_dir: Path, logger: RunLogger,
               resume: Optional[Path] = None):
    train_pairs = load_split(data_dir, "train")
    val_pairs = load_split(data_dir, "val")
    logger.log(f"Train pairs: {len(train_pairs)}, val pairs: {len(val_pairs)}")
    logger.log(f"PM {'on' if config.use_pm else 'off'}, DE {'on' if config.use_de else 'off'}, "
               f"K={config.K}, d={config.feature_dim}, epochs={config.epochs}")
    return train(config.train_config(), config.model_config(), train_pairs, val_pairs,
                 out_dir=out_dir, logger=logger, resume=resume, run_config=config.to_dict(),
                 tooth_count=config.tooth_count)


def cmd_train(config: PipelineConfig, data_dir: Path, out_dir: Path, logger: RunLogger,
              resume: Optional[Path] = None) -> RunManifest:
    logger.log_section("TRAIN")
    result = _train_run(config, data_dir, out_dir, logger, resume)
    logger.log(f"\nSteps: {result.step}, tau: {result.tau:.6g}, best val CD x1e-4: {result.best_val_cd_e4}")

    outputs = [out_dir / "run_log.md", out_dir / "train_log.jsonl", result.final_checkpoint]
    if result.best_checkpoint is not None and result.best_checkpoint.exists():
        outputs.append(result.best_checkpoint)
    return finish("train", config, out_dir, logger, outputs,
                  {'data_dir': str(data_dir), 'resume': str(resume) if resume else None,
                   'steps': result.step, 'best_val_cd_e4': result.best_val_cd_e4})


def _load_model(checkpoint: Path, config: PipelineConfig, config_given: bool):
    """Model, tau and effective config of a checkpoint"""
    expected = config.model_config() if config_given else None
    model, header, _ = load_checkpoint(checkpoint, dtype=DTYPES[config.dtype], expected=expected)
    if not config_given and header.get('config'):
        config = PipelineConfig.from_dict(header['config'])
    tau = header.get('tau') or config.tau or 1.0
    return model, float(tau), config


def cmd_eval(config: PipelineConfig, checkpoint: Optional[Path], data_dir: Path, out_dir: Path,
             logger: RunLogger, use_pm: Optional[bool] = None, oracle: bool = False,
             dump_predictions: bool = False, split: str = "test", config_given: bool = False) -> RunManifest:
    logger.log_section("EVAL")
    pairs = load_split(data_dir, split)

    model, tau, predictor = None, 1.0, None
    if oracle:
        predictor = lambda pair: pair.gt
        logger.log("Oracle mode: predictions are the ground truth")
    else:
        if checkpoint is None:
            raise ConfigError("checkpoint", "eval needs --checkpoint unless --oracle is given")
        model, tau, config = _load_model(checkpoint, config, config_given)
    use_pm = config.use_pm if use_pm is None else use_pm
    if model is not None and use_pm and not config.use_pm:
        logger.log("Warning: checkpoint was trained without prototype memory")

    outputs: List[Path] = []
    on_prediction = None
    if dump_predictions:
        pred_dir = out_dir / "predictions"
        pred_dir.mkdir(parents=True, exist_ok=True)

        def on_prediction(pair, pred: PointCloud):
            path = pred_dir / f"{pair.pair_id}_prediction.xyz"
            write_xyz(path, pair.stats.invert(pred).concat(pair.context),
                      comments=[f"{pair.pair_id}: {pred.count} predicted points, then {pair.context.count} context points"])
            outputs.append(path)

    report = evaluate(model, pairs, use_pm, tau, config.confidence, config.tooth_count,
                      config.fscore_tau, fingerprint=config.fingerprint(), predictor=predictor,
                      on_prediction=on_prediction)
    report_path = out_dir / "eval_report.json"
    report.save(report_path)
    outputs.append(report_path)

    logger.log("\n".join(report.summary_lines()))
    return finish("eval", config, out_dir, logger, outputs,
                  {'checkpoint': str(checkpoint) if checkpoint else None, 'split': split,
                   'use_pm': use_pm, 'oracle': oracle})


def cmd_ablate(config: PipelineConfig, data_dir: Path, out_dir: Path, logger: RunLogger) -> RunManifest:
    """Three configurations x ablation_seeds, median test CD per configuration"""
    logger.log_section("ABLATE")
    test_pairs = load_split(data_dir, "test")
    rows: List[AblationRow] = []
    outputs: List[Path] = []

    for use_pm, use_de in ABLATION_GRID:
        row = AblationRow(use_pm, use_de)
        row_dir = out_dir / row.name
        row_logger = RunLogger(row_dir, quiet=True, title=f"Ablation {row.name}")
        logger.log_subsection(f"PM {'on' if use_pm else 'off'}, DE {'on' if use_de else 'off'}")

        for seed in config.ablation_seeds:
            run_config = config.with_overrides(use_pm=use_pm, use_de=use_de, seed=seed).validate()
            run_dir = row_dir / f"seed_{seed}"
            run_logger = RunLogger(run_dir, quiet=True, title=f"Ablation {row.name} seed {seed}")
            result = _train_run(run_config, data_dir, run_dir, run_logger)
            report = evaluate(result.model, test_pairs, use_pm, result.tau, run_config.confidence,
                              run_config.tooth_count, run_config.fscore_tau,
                              fingerprint=run_config.fingerprint())
            report.save(run_dir / "eval_report.json")
            finish("ablate/train", run_config, run_dir, run_logger,
                   [run_dir / "eval_report.json", result.final_checkpoint])

            row.seeds.append(seed)
            row.cd_e4.append(report.cd_mean_e4)
            logger.log(f"  seed {seed}: test CD x1e-4 {report.cd_mean_e4:.4f}")
            row_logger.log(f"seed {seed}: test CD x1e-4 {report.cd_mean_e4:.4f}")

        finish("ablate/row", config.with_overrides(use_pm=use_pm, use_de=use_de), row_dir, row_logger,
               [row_dir / "run_log.md"], {'seeds': row.seeds, 'cd_e4': row.cd_e4})
        outputs.append(row_dir / "manifest.json")
        rows.append(row)

    ordering = ablation_ordering(rows)
    table_path = out_dir / "ablation.json"
    with open(table_path, 'w') as f:
        json.dump({'rows': [r.to_dict() for r in rows], 'ordering': ordering}, f, indent=2, sort_keys=True)
        f.write("\n")
    outputs.append(table_path)

    logger.log_section("ABLATION TABLE")
    logger.log("\n".join(ablation_table(rows)))
    logger.log(f"\nMemory helps: {ordering['memory_helps']}, dual encoders help: {ordering['dual_encoders_help']}")
    return finish("ablate", config, out_dir, logger, outputs, {'ordering': ordering})


def cmd_embed(config: PipelineConfig, checkpoint: Path, data_dir: Path, out_dir: Path,
              logger: RunLogger, plot: bool = False, split: str = "test",
              config_given: bool = False) -> RunManifest:
    logger.log_section("EMBED")
    model, tau, config = _load_model(checkpoint, config, config_given)
    pairs = load_split(data_dir, split)

    partials = partial_features(model, pairs, config.batch_size)
    prototypes = model.memory.vectors.detach().double().numpy()
    labels = [p.target_position for p in pairs]

    coords, pca = project_pca(partials, prototypes)
    csv_path = out_dir / "embedding.csv"
    write_embedding_csv(csv_path, embedding_rows(coords, labels, model.config.K))
    outputs = [csv_path]

    rho = compactness_ratio(prototypes, partials)
    usage = prototype_usage_report(model, partials, labels, tau, config.confidence)
    report = {
        'rho': rho,
        'explained_variance_ratio': [float(v) for v in pca.explained_variance_ratio_],
        'partial_count': len(pairs),
        'prototype_count': int(prototypes.shape[0]),
        'usage': usage,
    }
    report_path = out_dir / "embed_report.json"
    with open(report_path, 'w') as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    outputs.append(report_path)

    logger.log(f"Partials: {len(pairs)}, prototypes: {prototypes.shape[0]}")
    logger.log(f"Compactness rho = {rho:.4f} ({'more' if rho < 1 else 'less'} compact than partial features)")
    logger.log(f"Rows used: {usage['used_rows']}/{prototypes.shape[0]}, "
               f"weighted purity {usage['weighted_purity']:.3f}, usage entropy {usage['usage_entropy']:.3f}")

    if plot:
        png = plot_embedding(out_dir / "embedding.png", coords, labels, model.config.K)
        if png is None:
            logger.log("Plot skipped: matplotlib is not installed (pip install matplotlib)")
        else:
            outputs.append(png)

    return finish("embed", config, out_dir, logger, outputs, {'checkpoint': str(checkpoint), 'rho': rho})


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="Override the config seed")
    common.add_argument("--out", type=str, required=True, help="Output directory")
    common.add_argument("--threads", type=int, default=None, help="torch thread count")
    common.add_argument("--strict-deterministic", action="store_true",
                        help="Deterministic kernels only (byte-identical reruns)")
    common.add_argument("--quiet", action="store_true", help="No console echo")

    parser = argparse.ArgumentParser(description="Prototype-memory dental completion pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="Synthesize arches and completion pairs")

    p = sub.add_parser("train", parents=[common], help="Train on a data directory")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--ablate", action="append", choices=["no-pm", "no-de"], default=[],
                   help="Disable prototype memory and/or dual encoders (repeatable)")
    p.add_argument("--resume", type=str, default=None, help="Checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--use-pm", dest="use_pm", action=argparse.BooleanOptionalAction, default=None,
                   help="Use prototype memory at inference (default: as trained)")
    p.add_argument("--oracle", action="store_true", help="Score the ground truth against itself")
    p.add_argument("--dump-predictions", action="store_true",
                   help="Write de-normalized prediction + context per pair")

    p = sub.add_parser("ablate", parents=[common], help="Run the memory/dual-encoder ablation grid")
    p.add_argument("--data", type=str, required=True)

    p = sub.add_parser("embed", parents=[common], help="PCA embedding and compactness of the bank")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--plot", action="store_true", help="Also write embedding.png")

    return parser


def run(args: argparse.Namespace) -> RunManifest:
    config = load_config(args)
    if args.command == "train":
        overrides = {}
        if "no-pm" in args.ablate:
            overrides['use_pm'] = False
        if "no-de" in args.ablate:
            overrides['use_de'] = False
        config = config.with_overrides(**overrides).validate()

    configure_runtime(config.threads, config.strict_deterministic)
    out_dir = Path(args.out)
    data_dir = Path(args.data) if getattr(args, 'data', None) else None

    with OutputLock(out_dir):
        logger = RunLogger(out_dir, quiet=args.quiet, title=f"{args.command} run log")
        if args.command == "synth":
            return cmd_synth(config, out_dir, logger)
        if args.command == "train":
            resume = Path(args.resume) if args.resume else None
            return cmd_train(config, data_dir, out_dir, logger, resume)
        if args.command == "eval":
            checkpoint = Path(args.checkpoint) if args.checkpoint else None
            return cmd_eval(config, checkpoint, data_dir, out_dir, logger, use_pm=args.use_pm,
                            oracle=args.oracle, dump_predictions=args.dump_predictions,
                            split=args.split, config_given=args.config is not None)
        if args.command == "ablate":
            return cmd_ablate(config, data_dir, out_dir, logger)
        if args.command == "embed":
            return cmd_embed(config, Path(args.checkpoint), data_dir, out_dir, logger,
                             plot=args.plot, split=args.split, config_given=args.config is not None)
    raise ConfigError("command", f"unknown command {args.command!r}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except CompletionError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {DataError(str(e))}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
