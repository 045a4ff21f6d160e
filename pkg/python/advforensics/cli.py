"""Command-line entry point.

Usage:
    advforensics prepare-synthetic --out-dir data/factor --seed 7
    advforensics calibrate-tau --manifest data/factor/manifest.jsonl --out tau.json
    advforensics train --manifest data/factor/manifest.jsonl --run-dir runs/adv-both
    advforensics train --manifest ... --run-dir runs/baseline --adv-forgery off --adv-identity off
    advforensics evaluate --run-dir runs/adv-both --manifest data/factor/manifest.jsonl
    advforensics probe-clustering --run-dir runs/adv-both --manifest ... --target method

Exit codes: 0 success, 1 usage/config, 2 data error, 3 runtime/numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .core import AdversarialConfig, ForgeryMode, IdentityMode, Split
from .data import (
    EMBEDDINGS_FILE,
    FactorDatasetSpec,
    FrameStore,
    Manifest,
    PreprocessSpec,
    generate_factor_dataset,
    holdout_method_split,
    load_manifest,
)
from .errors import AdvForensicsError, ConfigError, DataError, UsageError
from .evaluation import (
    ProbeAlgorithm,
    ProbeTarget,
    build_eval_report,
    clustering_accuracy_probe,
    export_features,
    probe_subset,
    run_inference,
    write_roc_curve,
)
from .identity import (
    ArcFaceOnnxOracle,
    CachedOracle,
    CacheOnlyOracle,
    EmbeddingCache,
    ProviderId,
    SyntheticFactorOracle,
    calibrate_tau,
)
from .runs import RunDirectory
from .training import Trainer, load_trained_model, sweep_tau

logger = logging.getLogger("advforensics")

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"

IDENTITY_FLAGS = {
    "hard": IdentityMode.HARD_LABEL,
    "sim": IdentityMode.SIMILARITY,
    "pseudo": IdentityMode.PSEUDO_LABEL,
    "off": IdentityMode.OFF,
}


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so usage errors map onto exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def setup_logging(level: str = "INFO", log_file: Optional[Path] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT,
                        handlers=handlers, force=True)


def _float_pair(text: str):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from None
    return lo, hi


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# Shared resolution helpers
# ---------------------------------------------------------------------------

def resolve_oracle(args, manifest: Manifest):
    """Build the embedding provider named by the oracle flags."""
    kind = args.oracle
    embeddings = Path(args.embeddings) if args.embeddings else manifest.root / EMBEDDINGS_FILE
    if kind == "synthetic":
        return SyntheticFactorOracle(args.oracle_seed, args.oracle_noise)
    if kind == "cache":
        if not embeddings.exists():
            raise ConfigError(f"embedding cache not found: {embeddings} (pass --embeddings or --oracle)")
        return CacheOnlyOracle(EmbeddingCache(embeddings), args.cache_provider)
    if kind == "arcface":
        if not args.arcface_model:
            raise UsageError("--oracle arcface needs --arcface-model PATH")
        model = ArcFaceOnnxOracle(args.arcface_model, manifest.resolve)
        return CachedOracle(model, EmbeddingCache(embeddings), workers=args.oracle_workers)
    raise UsageError(f"unknown oracle {kind!r}")


def resolve_config(args, manifest: Optional[Manifest] = None) -> AdversarialConfig:
    """Defaults, then the config file, then explicit flags; label counts inferred from the manifest."""
    data: Dict = {}
    explicit: set = set()
    if getattr(args, "config", None):
        data = AdversarialConfig.load(args.config).to_dict()
        # only keys the file spells out block inference
        explicit = set(json.loads(Path(args.config).read_text(encoding="utf-8")))
    if manifest is not None:
        if "n_methods" not in explicit and manifest.summary.by_method:
            data["n_methods"] = max(manifest.summary.by_method) + 1
        if "n_identities" not in explicit and manifest.summary.by_identity:
            data["n_identities"] = max(manifest.summary.by_identity) + 1
    overrides = {
        "seed": getattr(args, "seed", None),
        "tau": getattr(args, "tau", None),
        "total_iters": getattr(args, "total_iters", None),
        "batch_size": getattr(args, "batch_size", None),
        "generator": getattr(args, "generator", None),
        "device": getattr(args, "device", None),
    }
    if getattr(args, "adv_forgery", None) is not None:
        overrides["forgery_mode"] = ForgeryMode(args.adv_forgery)
    if getattr(args, "adv_identity", None) is not None:
        overrides["identity_mode"] = IDENTITY_FLAGS[args.adv_identity]
    data.update({k: v for k, v in overrides.items() if v is not None})
    cfg = AdversarialConfig.from_dict(data)
    return cfg.require_valid()


def _records_for(manifest: Manifest, split: str, holdout_method: Optional[int]):
    if holdout_method is not None:
        _, test_view = holdout_method_split(manifest.records, holdout_method)
        records = [r for r in test_view if r.split is Split(split)]
    else:
        records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    return records


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_prepare_synthetic(args) -> int:
    spec = FactorDatasetSpec(
        n_identities=args.n_identities,
        n_methods=args.n_methods,
        images_per_combo=args.images_per_combo,
        image_size=args.image_size,
        frames_per_video=args.frames_per_video,
        seed=args.seed if args.seed is not None else 0,
    )
    path = generate_factor_dataset(spec, args.out_dir)
    manifest = load_manifest(path)
    print(f"Wrote {path}")
    print(manifest.summary.format())
    print(f"sha256 {manifest.digest()}")
    return 0


def cmd_calibrate_tau(args) -> int:
    manifest = load_manifest(args.manifest)
    oracle = resolve_oracle(args, manifest)
    report = calibrate_tau(manifest.records, oracle, n_batches=args.n_batches, batch_size=args.batch_size,
                           quantile_band=args.quantile_band, grid_step=args.grid_step,
                           seed=args.seed if args.seed is not None else 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    curve = out.with_suffix(".csv")
    with open(curve, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["similarity", "cumulative_probability"])
        writer.writerows(report.cumulative_curve)
    lo, hi = report.candidate_range
    print(f"candidate tau range [{lo:.4f}, {hi:.4f}] over {report.n_pairs} pairs")
    print("grid: " + ", ".join(f"{t:g}" for t in report.grid))
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = resolve_config(args, manifest)
    run_dir = RunDirectory(args.run_dir)
    setup_logging(args.log_level, run_dir.log_path)

    train_records = val_records = None
    if args.holdout_method is not None:
        train_view, _ = holdout_method_split(manifest.records, args.holdout_method)
        train_records = [r for r in train_view if r.split is Split.TRAIN]
        val_records = [r for r in train_view if r.split is Split.VAL]

    oracle = None
    if cfg.identity_mode in (IdentityMode.SIMILARITY, IdentityMode.PSEUDO_LABEL):
        oracle = resolve_oracle(args, manifest)

    resuming = run_dir.exists() and run_dir.latest_checkpoint.exists()
    if run_dir.exists():
        run_dir.verify(cfg)
    else:
        run_dir.create(cfg, {
            "manifest": str(Path(args.manifest).resolve()),
            "manifest_sha256": manifest.digest(),
            "holdout_method": args.holdout_method,
            "version": __version__,
        })
    if not resuming:
        run_dir.reset_logs()
    trainer = Trainer(cfg, manifest, run_dir, oracle=oracle, train_records=train_records,
                      val_records=val_records, quiet=args.quiet)
    if resuming:
        trainer.restore(run_dir.latest_checkpoint)
    state = trainer.fit()
    print(f"finished at iteration {state.iteration}; best val acc {state.best_val_metric:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    run_dir = RunDirectory(args.run_dir)
    model, cfg, ckpt = load_trained_model(run_dir, args.checkpoint)
    manifest = load_manifest(args.manifest)
    holdout = args.holdout_method if args.holdout_method is not None else run_dir.read_info().get("holdout_method")
    records = _records_for(manifest, args.split, holdout)
    store = FrameStore(manifest, PreprocessSpec(output_size=cfg.image_size))
    scores = run_inference(model, store, records)
    report = build_eval_report(records, scores, cfg.max_frames_per_video, split=args.split,
                               manifest=str(Path(args.manifest).resolve()),
                               manifest_sha256=manifest.digest(), checkpoint=ckpt.name)
    out = run_dir.report_path(f"eval_{args.split}.json")
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    if args.roc_out:
        write_roc_curve(scores, [r.binary_label.as_int for r in records], args.roc_out)
    print(f"frame AUC {report.frame_auc:.4f} ACC {report.frame_acc:.4f} | "
          f"video AUC {report.video_auc:.4f} ACC {report.video_acc:.4f} "
          f"({report.n_frames} frames, {report.n_videos} videos)")
    return 0


def cmd_probe_clustering(args) -> int:
    run_dir = RunDirectory(args.run_dir)
    model, cfg, _ = load_trained_model(run_dir, args.checkpoint)
    manifest = load_manifest(args.manifest)
    records = _records_for(manifest, args.split, None)
    idx, labels = probe_subset(records, args.target)
    subset = [records[i] for i in idx]
    store = FrameStore(manifest, PreprocessSpec(output_size=cfg.image_size))
    features = run_inference(model, store, subset, features=True)
    seed = args.seed if args.seed is not None else cfg.seed
    report = clustering_accuracy_probe(features, labels, args.algorithm, seed=seed, target=args.target)
    out = run_dir.report_path(f"probe_{report.probe_target.value}_{report.algorithm.value}.json")
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"{report.probe_target.value} probe ({report.algorithm.value}, k={report.k}): "
          f"accuracy {report.accuracy:.4f}")
    return 0


def cmd_export_features(args) -> int:
    run_dir = RunDirectory(args.run_dir)
    model, cfg, _ = load_trained_model(run_dir, args.checkpoint)
    manifest = load_manifest(args.manifest)
    records = _records_for(manifest, args.split, None)
    store = FrameStore(manifest, PreprocessSpec(output_size=cfg.image_size))
    out = Path(args.out) if args.out else run_dir.report_path(f"features_{args.split}.csv")
    export_features(model, store, records, out)
    print(f"Wrote {len(records)} rows to {out}")
    return 0


def cmd_sweep_tau(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = resolve_config(args, manifest)
    grid = args.grid
    if grid is None and args.calibration:
        grid = json.loads(Path(args.calibration).read_text(encoding="utf-8"))["grid"]
    if not grid:
        raise UsageError("sweep-tau needs --grid or --calibration")
    root = Path(args.run_dir)
    root.mkdir(parents=True, exist_ok=True)
    setup_logging(args.log_level, root / "sweep.log")
    best, results = sweep_tau(cfg, manifest, grid, root, resolve_oracle(args, manifest), quiet=args.quiet)
    (root / "sweep.json").write_text(json.dumps({
        "best_tau": best,
        "results": [r.__dict__ for r in results],
    }, indent=2) + "\n", encoding="utf-8")
    print(f"best tau {best:g}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, run_dir_required: bool = False) -> None:
    p.add_argument("--config", metavar="PATH", help="AdversarialConfig JSON file")
    p.add_argument("--seed", type=int, default=None, help="Seed for every stochastic component")
    p.add_argument("--run-dir", metavar="PATH", required=run_dir_required, help="Run directory")
    p.add_argument("--log-level", default="INFO", help="Logging level (default: INFO)")
    p.add_argument("--quiet", action="store_true", help="Hide progress bars")


def _add_oracle(p: argparse.ArgumentParser) -> None:
    p.add_argument("--oracle", choices=["cache", "synthetic", "arcface"], default="cache",
                   help="Embedding provider (default: cache next to the manifest)")
    p.add_argument("--embeddings", metavar="PATH", help="Embedding cache file")
    p.add_argument("--cache-provider", default=ProviderId.SYNTHETIC_FACTOR.value,
                   choices=[ProviderId.SYNTHETIC_FACTOR.value, ProviderId.ARCFACE_ONNX_FILE.value],
                   help="Provider whose cached vectors --oracle cache serves")
    p.add_argument("--arcface-model", metavar="PATH", help="ONNX recognition model (112x112 in, 512-d out)")
    p.add_argument("--oracle-workers", type=int, default=1, help="Parallel embedding workers")
    p.add_argument("--oracle-seed", type=int, default=0, help="Seed of the synthetic oracle")
    p.add_argument("--oracle-noise", type=float, default=0.05, help="Per-image noise norm of the synthetic oracle")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--adv-forgery", choices=["on", "off"], default=None)
    p.add_argument("--adv-identity", choices=sorted(IDENTITY_FLAGS), default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--total-iters", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--generator", choices=["toy_cnn", "xception_2048"], default=None)
    p.add_argument("--device", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advforensics", description=__doc__.split("\n\n")[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare-synthetic", help="Render the synthetic factor dataset")
    _add_common(p)
    p.add_argument("--out-dir", required=True, metavar="PATH")
    p.add_argument("--n-identities", type=int, default=8)
    p.add_argument("--n-methods", type=int, default=4)
    p.add_argument("--images-per-combo", type=int, default=5)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--frames-per-video", type=int, default=8)
    p.set_defaults(func=cmd_prepare_synthetic)

    p = sub.add_parser("calibrate-tau", help="Similarity distribution and candidate tau grid")
    _add_common(p)
    _add_oracle(p)
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH", help="Report JSON (curve CSV written alongside)")
    p.add_argument("--n-batches", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--quantile-band", type=_float_pair, default=(0.60, 0.85))
    p.add_argument("--grid-step", type=float, default=0.01)
    p.set_defaults(func=cmd_calibrate_tau)

    p = sub.add_parser("train", help="Train one run (resumes from latest checkpoint)")
    _add_common(p, run_dir_required=True)
    _add_oracle(p)
    _add_train_flags(p)
    p.add_argument("--holdout-method", type=int, default=None,
                   help="Leave this forgery method out of training (unseen-method setting)")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("evaluate", cmd_evaluate, "Frame- and video-level AUC/ACC"),
        ("probe-clustering", cmd_probe_clustering, "Clustering-accuracy probe of generator features"),
        ("export-features", cmd_export_features, "Write generator features as CSV"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_common(p, run_dir_required=True)
        p.add_argument("--manifest", required=True, metavar="PATH")
        p.add_argument("--split", choices=[s.value for s in Split], default="test")
        # clustering reads the finished run, after the reversal ramp
        p.add_argument("--checkpoint", choices=["best", "latest"],
                       default="latest" if name == "probe-clustering" else "best")
        p.set_defaults(func=func)
        if name == "evaluate":
            p.add_argument("--holdout-method", type=int, default=None)
            p.add_argument("--roc-out", metavar="PATH", help="Write the frame-level ROC curve CSV")
        elif name == "probe-clustering":
            p.add_argument("--target", choices=[t.value for t in ProbeTarget], required=True)
            p.add_argument("--algorithm", choices=[a.value for a in ProbeAlgorithm], default="kmeans")
        else:
            p.add_argument("--out", metavar="PATH")

    p = sub.add_parser("sweep-tau", help="Train one similarity run per tau and pick the best")
    _add_common(p, run_dir_required=True)
    _add_oracle(p)
    _add_train_flags(p)
    p.add_argument("--grid", type=_float_list, default=None)
    p.add_argument("--calibration", metavar="PATH", help="calibrate-tau report supplying the grid")
    p.set_defaults(func=cmd_sweep_tau)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except AdvForensicsError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
