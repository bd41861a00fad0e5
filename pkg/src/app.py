"""
mvad - multi-view anomaly detection with view-aligned latent diffusion
Main Application Entry Point: gen-data, train, build-bank, detect, eval, sweep.
"""

import argparse
import os
import sys
import traceback
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import yaml
from dotenv import load_dotenv

# Add src to path
sys.path.append(str(Path(__file__).parent))

from core.checkpoint import LoadedCheckpoint, load_checkpoint
from core.evaluation import EvalReport, evaluate
from core.memory_bank import load_bank, save_bank
from core.pipeline import FeatureExtractor, VsadDetector, bank_from_features, build_memory_bank
from data.dataset import CALIBRATION_NAME, DatasetHandle, load_dataset, load_sample_dir
from data.synthetic import generate_dataset
from diffusion.trainer import train
from geometry.calibration import load_calibration
from geometry.view_graph import build_view_graph
from utils.async_processor import configure_runtime
from utils.cache import FeatureCache
from utils.config import RunConfig, load_run_config
from utils.errors import ConfigParseError, MissingCalibration, MissingInput, MvadError
from utils.export import (comparison_table, export_anomaly_map, export_features_csv,
                          write_comparison, write_report)
from utils.logger import RunLogger

load_dotenv(dotenv_path=Path(__file__).parent.parent / ".env")
DEBUG = os.getenv("MVAD_DEBUG", "").lower() in ("1", "true", "yes")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

SWEEP_AXES = ("radius", "layers", "lambda", "ablation")
ABLATIONS = {
    "full": {"model.use_mvam": True, "model.use_frm": True},
    "no_mvam": {"model.use_mvam": False, "model.use_frm": True},
    "no_frm": {"model.use_mvam": True, "model.use_frm": False},
}


class UsageError(MvadError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage problems are exit code 1 here."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"❌ {self.prog}: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ─────────────────────────────────────────────────────────────────────────────
# Shared plumbing
# ─────────────────────────────────────────────────────────────────────────────

def _resolve(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config, args.set or [], args.seed)
    runtime = {}
    if args.workers is not None:
        runtime["runtime.workers"] = args.workers
    if args.deterministic:
        runtime["runtime.deterministic"] = True
    cfg = cfg.with_updates(runtime) if runtime else cfg
    cfg.runtime.workers = configure_runtime(cfg.runtime.workers, cfg.runtime.deterministic)
    return cfg


def _prepare_out(cfg: RunConfig, out: Path) -> RunLogger:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out)
    return RunLogger(out / "logs")


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{what} not found: {p}")
    return p


def _open_dataset(cfg: RunConfig, path: Path) -> DatasetHandle:
    return load_dataset(path, topology=cfg.model.topology, neighbors=cfg.model.neighbors)


def _cache(cfg: RunConfig) -> Optional[FeatureCache]:
    if cfg.runtime.cache_dir is None:
        return None
    return FeatureCache(cfg.runtime.cache_dir)


def _config_echo(cfg: RunConfig, checkpoint: LoadedCheckpoint, bank_meta: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "levels": list(cfg.score.levels),
        "level_weights": {str(k): v for k, v in cfg.score.weights().items()},
        "radius": cfg.align.radius,
        "lambda": checkpoint.manifest.get("lambda", cfg.train.lambda_),
        "use_mvam": checkpoint.model_config.use_mvam,
        "use_frm": checkpoint.model_config.use_frm,
        "seeds": {"run": cfg.runtime.seed, "scene": cfg.scene.rng_seed, "train": cfg.train.rng_seed,
                  "coreset": cfg.score.coreset_seed},
        "checkpoint_hash": checkpoint.content_hash,
        "bank": bank_meta,
        "version": cfg.provenance.version,
    }


def _evaluate_with(cfg: RunConfig, dataset: DatasetHandle, extractor: FeatureExtractor,
                   bank, out: Path, logger: RunLogger,
                   test_features: Optional[List[Dict[int, Any]]] = None) -> EvalReport:
    """Score the test split, export maps/features when asked, and write the report."""
    detector = VsadDetector(extractor, bank, cfg)
    features = test_features if test_features is not None else \
        extractor.extract_split(dataset, "test", cfg.runtime.workers)
    samples = list(dataset.iter_split("test"))
    scores = [detector.score_features(f, s.image_size) for f, s in zip(features, samples)]

    on_sample: Optional[Callable] = None
    if cfg.eval.export_maps:
        def on_sample(sample, result):
            for view in range(sample.num_views):
                export_anomaly_map(result.pixel_maps[view], sample.views[view],
                                   out / "maps" / sample.sample_id / f"view_{view}")
    if cfg.eval.export_features:
        export_features_csv({s.sample_id: f for s, f in zip(samples, features)}, out / "features.csv")

    logger.start_stage("evaluate", {"samples": len(samples), "levels": cfg.score.levels})
    report = evaluate(dataset, detector, _config_echo(cfg, extractor.checkpoint, bank.metadata),
                      logger, scores=scores, on_sample=on_sample)
    logger.end_stage(report.to_dict()["metrics"])
    write_report(report, out)
    return report


# ─────────────────────────────────────────────────────────────────────────────
# Commands
# ─────────────────────────────────────────────────────────────────────────────

def cmd_gen_data(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = Path(args.out)
    logger = _prepare_out(cfg, out)
    graph = build_view_graph(cfg.scene.num_views, cfg.model.topology, cfg.model.neighbors)
    logger.start_stage("gen_data", {"views": cfg.scene.num_views, "size": cfg.scene.image_size})
    generate_dataset(cfg.scene, cfg.data, out, graph, cfg.runtime.workers, config_echo=cfg.to_dict())
    logger.end_stage({"train": cfg.data.train_normal,
                      "test": cfg.data.test_normal + cfg.data.test_defective})
    print(f"✅ dataset written to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = _open_dataset(cfg, _require(args.data, "data"))
    out = Path(args.out)
    logger = _prepare_out(cfg, out)
    result = train(dataset, cfg, out, logger=logger)
    print(f"✅ checkpoint {result.checkpoint_path} ({result.content_hash[:12]})")
    return EXIT_OK


def cmd_build_bank(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = _open_dataset(cfg, _require(args.data, "data"))
    checkpoint = load_checkpoint(_require(args.checkpoint, "checkpoint"), cfg.model)
    out = Path(args.out)
    logger = _prepare_out(cfg, out)
    extractor = FeatureExtractor(checkpoint, cfg, dataset.homographies, _cache(cfg))
    bank = build_memory_bank(dataset, extractor, cfg, logger)
    save_bank(bank, out / "bank.bin")
    sizes = ", ".join(f"L{lvl}: {bank.size(lvl)}x{bank.dim(lvl)}" for lvl in bank.level_ids)
    print(f"✅ bank written to {out / 'bank.bin'} ({sizes})")
    return EXIT_OK


def _find_calibration(sample_dir: Path, explicit: Optional[str]) -> Path:
    if explicit:
        return _require(explicit, "calibration")
    for folder in (sample_dir, *list(sample_dir.parents)[:2]):
        if (folder / CALIBRATION_NAME).exists():
            return folder / CALIBRATION_NAME
    raise MissingCalibration(f"no {CALIBRATION_NAME} next to {sample_dir}; pass --calibration")


def cmd_detect(cfg: RunConfig, args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(_require(args.checkpoint, "checkpoint"), cfg.model)
    sample_dir = _require(args.sample, "sample")
    out = Path(args.out)
    logger = _prepare_out(cfg, out)
    bank = load_bank(_require(args.bank, "bank"), checkpoint.content_hash, logger)

    homographies = load_calibration(_find_calibration(sample_dir, args.calibration), checkpoint.model.graph)
    sample = load_sample_dir(sample_dir, checkpoint.num_views)
    detector = VsadDetector(FeatureExtractor(checkpoint, cfg, homographies, _cache(cfg)), bank, cfg)

    logger.start_stage("detect", {"sample": sample.sample_id})
    result = detector(sample)
    for view in range(sample.num_views):
        export_anomaly_map(result.pixel_maps[view], sample.views[view], out / f"view_{view}")
    summary = {"sample": sample.sample_id, **result.to_dict(),
               "config": _config_echo(cfg, checkpoint, bank.metadata)}
    (out / "scores.yaml").write_text(yaml.safe_dump(summary, sort_keys=False), encoding="utf-8")
    logger.end_stage(result.to_dict())
    print(f"✅ {sample.sample_id}: sample score {result.sample_score:.5f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = _open_dataset(cfg, _require(args.data, "data"))
    checkpoint = load_checkpoint(_require(args.checkpoint, "checkpoint"), cfg.model)
    out = Path(args.out)
    logger = _prepare_out(cfg, out)
    bank = load_bank(_require(args.bank, "bank"), checkpoint.content_hash, logger)
    extractor = FeatureExtractor(checkpoint, cfg, dataset.homographies, _cache(cfg))
    report = _evaluate_with(cfg, dataset, extractor, bank, out, logger)
    _print_metrics(report)
    return EXIT_OK


def _print_metrics(report: EvalReport, label: str = ""):
    metrics = report.to_dict()["metrics"]
    prefix = f"{label}  " if label else ""
    print(f"📊 {prefix}P-AUROC {metrics['p_auroc']}  V-AUROC {metrics['v_auroc']}  "
          f"S-AUROC {metrics['s_auroc']}")


# ─────────────────────────────────────────────────────────────────────────────
# Sweep
# ─────────────────────────────────────────────────────────────────────────────

def parse_sweep_values(axis: str, raw: Sequence[str]) -> List[Any]:
    """radius: ints; layers: comma-separated level lists; lambda: floats; ablation: variant names."""
    try:
        if axis == "radius":
            return [int(v) for v in raw]
        if axis == "layers":
            return [[int(x) for x in v.split(",") if x] for v in raw]
        if axis == "lambda":
            return [float(v) for v in raw]
    except ValueError as e:
        raise UsageError(f"bad value for sweep axis {axis}: {e}") from None
    unknown = [v for v in raw if v not in ABLATIONS]
    if unknown:
        raise UsageError(f"unknown ablation variant(s) {unknown}; choose from {sorted(ABLATIONS)}")
    return list(raw)


def _value_dir(axis: str, value: Any) -> str:
    text = "_".join(map(str, value)) if isinstance(value, list) else str(value)
    return f"{axis}_{text}"


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    axis = args.axis
    values = parse_sweep_values(axis, args.values)
    if not values:
        raise UsageError("--values needs at least one value")
    dataset = _open_dataset(cfg, _require(args.data, "data"))
    out = Path(args.out)
    logger = _prepare_out(cfg, out)
    cache = FeatureCache(cfg.runtime.cache_dir or str(out / "cache"))

    reports: List[EvalReport] = []
    if axis in ("radius", "layers"):
        checkpoint = load_checkpoint(_require(args.checkpoint, "checkpoint"), cfg.model)
        train_features = test_features = None
        for value in values:
            key = "align.radius" if axis == "radius" else "score.levels"
            run_cfg = cfg.with_updates({key: value} if axis == "radius"
                                       else {key: value, "score.level_weights": None})
            run_out = out / _value_dir(axis, value)
            run_logger = _prepare_out(run_cfg, run_out)
            extractor = FeatureExtractor(checkpoint, run_cfg, dataset.homographies, cache)
            if axis == "radius" or train_features is None:
                # level sets share one extraction; radius changes the features
                train_features = extractor.extract_split(dataset, "train", run_cfg.runtime.workers)
                test_features = extractor.extract_split(dataset, "test", run_cfg.runtime.workers)
            bank = bank_from_features(train_features, checkpoint, run_cfg)
            save_bank(bank, run_out / "bank.bin")
            report = _evaluate_with(run_cfg, dataset, extractor, bank, run_out, run_logger, test_features)
            _print_metrics(report, f"{axis}={value}")
            reports.append(report)
    else:
        for value in values:
            updates = {"train.lambda": value} if axis == "lambda" else ABLATIONS[value]
            run_cfg = cfg.with_updates(updates)
            run_out = out / _value_dir(axis, value)
            run_logger = _prepare_out(run_cfg, run_out)
            result = train(dataset, run_cfg, run_out, logger=run_logger)
            checkpoint = load_checkpoint(result.checkpoint_path, run_cfg.model)
            extractor = FeatureExtractor(checkpoint, run_cfg, dataset.homographies, cache)
            bank = build_memory_bank(dataset, extractor, run_cfg, run_logger)
            save_bank(bank, run_out / "bank.bin")
            report = _evaluate_with(run_cfg, dataset, extractor, bank, run_out, run_logger)
            _print_metrics(report, f"{axis}={value}")
            reports.append(report)

    table = comparison_table(axis, values, reports)
    csv_path, text_path = write_comparison(table, out, f"sweep_{axis}")
    logger.log_step("sweep", {"axis": axis, "table": str(csv_path), "cache": cache.stats()})
    print(text_path.read_text(encoding="utf-8"))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "build-bank": cmd_build_bank,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


# ─────────────────────────────────────────────────────────────────────────────
# Argument parsing
# ─────────────────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
    common.add_argument("--seed", type=int, help="master seed for scene, training and runtime")
    common.add_argument("--workers", type=int, help="worker threads")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, deterministic kernels")
    common.add_argument("--out", required=True, help="output directory")

    parser = _Parser(prog="mvad", description="Multi-view anomaly detection with view-aligned diffusion")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="generate a synthetic multi-view dataset")

    p = sub.add_parser("train", parents=[common], help="train the denoiser")
    p.add_argument("--data", required=True)

    p = sub.add_parser("build-bank", parents=[common], help="build the normal-feature memory bank")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("detect", parents=[common], help="score one sample directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--sample", required=True, help="sample directory with view_<m>.png")
    p.add_argument("--calibration", help="calibration file; found next to the sample when omitted")

    p = sub.add_parser("eval", parents=[common], help="evaluate P/V/S-AUROC on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank", required=True)

    p = sub.add_parser("sweep", parents=[common], help="repeat build-bank + eval over one axis")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, nargs="+",
                   help="radius: 1 2 3; layers: 4 4,3; lambda: 0 0.1; ablation: full no_mvam no_frm")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="trained checkpoint (radius and layers axes)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigParseError, UsageError) as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        if DEBUG:
            traceback.print_exc()
        return EXIT_USAGE
    except (MvadError, OSError) as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        if DEBUG:
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
