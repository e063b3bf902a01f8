"""
Batch pipeline driver.

    gen-data   synthetic dataset -> data_dir
    extract    images -> output_dir/features/{train,test}/*.ufv
    train      train features -> model checkpoint, output_dir/loss.csv
    score      checkpoint + features -> output_dir/maps/{split}/*.pfm, embedding_stats.csv
               (per-image log-likelihood and latent z² statistics)
    segment    log-NFA maps -> output_dir/masks/*.png
    eval       maps + ground truth -> metrics.csv, metrics.json, score_histogram.csv
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from uflow import settings
from uflow.config import EFFECTIVE_CONFIG_NAME, PipelineConfig, dump_config, load_config, validate_config
from uflow.evaluation import ImageMaps, embedding_stats, evaluate, write_report
from uflow.features import extract_multiscale, read_ufv, write_ufv
from uflow.flow import build_graph, load_checkpoint, save_checkpoint, uflow_forward
from uflow.nfa import auto_segment, log_nfa_map
from uflow.scoring import likelihood_score_map, upsample_bilinear
from uflow.shared import rasters
from uflow.shared.errors import ArtifactError, UFlowError
from uflow.synthetic import ManifestEntry, gen_dataset, read_manifest, write_dataset
from uflow.training import log_likelihood, train, write_loss_history

SPLITS = ("train", "test")

logger = logging.getLogger("uflow.cli")


@dataclass
class Run:
    config: PipelineConfig
    force: bool

    @property
    def output_dir(self) -> Path:
        return self.config.paths.output_dir

    def guard(self, paths: Iterable[Path]) -> None:
        """Refuse to overwrite existing artifacts unless forced."""
        if self.force:
            return
        for path in paths:
            if path.exists():
                raise ArtifactError(f"{path} already exists; pass --force to overwrite")

    def map_images(self, func: Callable, items: Sequence) -> list:
        with ThreadPoolExecutor(max_workers=self.config.run.jobs) as pool:
            return list(pool.map(func, items))


def _features_dir(run: Run, split: str) -> Path:
    return run.output_dir / "features" / split


def _maps_dir(run: Run, split: str) -> Path:
    return run.output_dir / "maps" / split


def _entries(run: Run, split: str) -> list[ManifestEntry]:
    return [entry for entry in read_manifest(run.config.paths.data_dir) if entry.split == split]


def _feature_files(run: Run, split: str) -> list[Path]:
    files = sorted(_features_dir(run, split).glob("*.ufv"))
    if not files:
        raise ArtifactError(f"no feature files in {_features_dir(run, split)}; run extract first")
    return files


# --- subcommands ---
def gen_data_command(run: Run) -> None:
    """Generate the synthetic dataset."""
    data_dir = run.config.paths.data_dir
    run.guard([data_dir / "manifest.csv"])
    entries = write_dataset(gen_dataset(run.config.synthetic), data_dir)
    logger.info("Wrote %d images to %s", len(entries), data_dir)


def extract_command(run: Run) -> None:
    """Extract feature pyramids for every manifest image."""
    extractor = run.config.extractor
    data_dir = run.config.paths.data_dir
    for split in SPLITS:
        entries = _entries(run, split)
        target = _features_dir(run, split)
        run.guard(target / f"{entry.name}.ufv" for entry in entries)
        target.mkdir(parents=True, exist_ok=True)

        def extract_one(entry: ManifestEntry) -> None:
            pyramid = extract_multiscale(
                rasters.read_image(data_dir / entry.path),
                extractor.levels,
                extractor.patch,
                extractor.channels,
                seed=extractor.seed,
            )
            write_ufv(pyramid, target / f"{entry.name}.ufv")

        run.map_images(extract_one, entries)
        logger.info("Extracted %d %s feature pyramids", len(entries), split)


def train_command(run: Run) -> None:
    """Fit the flow on the train pyramids."""
    model_path = run.config.paths.model_path
    loss_path = run.output_dir / "loss.csv"
    run.guard([model_path, loss_path])
    dataset = [read_ufv(path) for path in _feature_files(run, "train")]
    flow = run.config.flow
    graph = build_graph(dataset[0].channels, flow.steps_per_stage, flow.clamp, flow.seed)
    result = train(graph, dataset, run.config.train)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.graph, model_path)
    write_loss_history(result.history, loss_path)
    logger.info("Saved checkpoint %s after %d epochs", model_path, len(result.history))


def score_command(run: Run) -> None:
    """Write AS and log-NFA maps for both splits."""
    model_path = run.config.paths.model_path
    if not model_path.exists():
        raise ArtifactError(f"missing checkpoint {model_path}; run train first")
    graph = load_checkpoint(model_path)
    stats_path = run.output_dir / "embedding_stats.csv"
    run.guard([stats_path])

    stats_rows = []
    for split in SPLITS:
        files = _feature_files(run, split)
        target = _maps_dir(run, split)
        run.guard(target / f"{path.stem}.as.pfm" for path in files)
        target.mkdir(parents=True, exist_ok=True)

        def score_one(path: Path) -> tuple[float, np.ndarray]:
            pyramid = read_ufv(path)
            latents = uflow_forward(graph, pyramid)
            as_map = likelihood_score_map(latents, run.config.score.double_half).values
            log_nfa = log_nfa_map(latents, run.config.nfa).values
            rasters.write_pfm(target / f"{path.stem}.as.pfm", as_map)
            rasters.write_pfm(target / f"{path.stem}.lognfa.pfm", log_nfa)
            rasters.write_preview(target / f"{path.stem}.as.pgm", as_map)
            rasters.write_preview(target / f"{path.stem}.nfa.pgm", -log_nfa)
            return log_likelihood(graph, pyramid), embedding_stats(latents)

        for path, (density, stats) in zip(files, run.map_images(score_one, files)):
            stats_rows.append([split, path.stem, repr(density), *(repr(float(value)) for value in stats)])
        logger.info("Scored %d %s images", len(files), split)

    with stats_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        columns = [
            f"{stat}_s{level + 1}_c{channel}"
            for level, channels in enumerate(graph.latent_channels)
            for channel in range(channels)
            for stat in ("mean", "std")
        ]
        writer.writerow(["split", "image", "log_likelihood", *columns])
        writer.writerows(stats_rows)


def _read_map(run: Run, name: str, suffix: str, split: str = "test") -> np.ndarray:
    path = _maps_dir(run, split) / f"{name}.{suffix}.pfm"
    if not path.exists():
        raise ArtifactError(f"missing score map {path}; run score first")
    return rasters.read_pfm(path).astype(np.float64)


def segment_command(run: Run) -> None:
    """Threshold log-NFA maps into masks at image resolution."""
    data_dir = run.config.paths.data_dir
    entries = _entries(run, "test")
    target = run.output_dir / "masks"
    run.guard(target / f"{entry.name}.png" for entry in entries)
    target.mkdir(parents=True, exist_ok=True)

    def segment_one(entry: ManifestEntry) -> int:
        log_nfa = _read_map(run, entry.name, "lognfa")
        log_nfa = upsample_bilinear(log_nfa, rasters.image_size(data_dir / entry.path))
        mask = auto_segment(log_nfa, run.config.nfa.threshold)
        rasters.write_mask(target / f"{entry.name}.png", mask)
        return int(mask.sum())

    detected = run.map_images(segment_one, entries)
    logger.info("Segmented %d images, %d anomalous pixels", len(entries), sum(detected))


def eval_command(run: Run) -> None:
    """Compute AUROC and IoU metrics on the test split."""
    data_dir = run.config.paths.data_dir
    run.guard(run.output_dir / name for name in ("metrics.csv", "metrics.json", "score_histogram.csv"))

    test = []
    for entry in _entries(run, "test"):
        if entry.mask:
            gt = rasters.read_mask(data_dir / entry.mask)
        else:
            gt = np.zeros(rasters.image_size(data_dir / entry.path), dtype=bool)
        test.append(
            ImageMaps(
                name=entry.name,
                as_map=_read_map(run, entry.name, "as"),
                log_nfa=_read_map(run, entry.name, "lognfa"),
                gt=gt,
                label=entry.label,
            )
        )

    train_as, train_log_nfa = [], []
    for entry in _entries(run, "train"):
        size = rasters.image_size(data_dir / entry.path)
        train_as.append(upsample_bilinear(_read_map(run, entry.name, "as", "train"), size))
        train_log_nfa.append(upsample_bilinear(_read_map(run, entry.name, "lognfa", "train"), size))
    report = evaluate(
        test,
        train_as=train_as,
        train_log_nfa=train_log_nfa,
        kind=run.config.score.kind,
        nfa_threshold=run.config.nfa.threshold,
        exhaustive=run.config.run.exhaustive_oracle,
    )
    write_report(report, run.output_dir)


COMMANDS: dict[str, Callable[[Run], None]] = {
    "gen-data": gen_data_command,
    "extract": extract_command,
    "train": train_command,
    "score": score_command,
    "segment": segment_command,
    "eval": eval_command,
}


# --- entry point ---
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file")
    common.add_argument("--seed", type=int, help="reseed extractor, flow, training and data generation")
    common.add_argument("--jobs", type=int, help="images processed concurrently")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    common.add_argument("--score", choices=("as", "nfa"), help="score kind for oracle and fair thresholds")
    common.add_argument("--high-precision", action="store_true", help="extended precision binomial tails")
    common.add_argument("--log-nfa-threshold", type=float, help="segmentation threshold on log NFA")

    parser = argparse.ArgumentParser(prog="uflow", description="U-shaped flow anomaly detection pipeline")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, handler in COMMANDS.items():
        subparsers.add_parser(name, parents=[common], help=handler.__doc__)
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    data = config.model_dump()
    if args.jobs is not None:
        data["run"]["jobs"] = args.jobs
    if args.score is not None:
        data["score"]["kind"] = args.score
    if args.high_precision:
        data["nfa"]["high_precision"] = True
    if args.log_nfa_threshold is not None:
        data["nfa"]["threshold"] = args.log_nfa_threshold
    for key, value in data["paths"].items():
        data["paths"][key] = Path(value).resolve()
    return validate_config(data)


def configure_runtime() -> None:
    logging.basicConfig(level=settings.LOG_LEVEL, format=settings.LOG_FORMAT)
    torch.set_num_threads(settings.TORCH_THREADS)
    torch.use_deterministic_algorithms(True)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_runtime()
    try:
        config = resolve_config(args)
        run = Run(config=config, force=args.force)
        run.output_dir.mkdir(parents=True, exist_ok=True)
        dump_config(config, run.output_dir / EFFECTIVE_CONFIG_NAME)
        COMMANDS[args.command](run)
    except UFlowError as exc:
        logger.debug("%s failed", args.command, exc_info=True)
        print(f"uflow: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception:
        logger.exception("Unexpected failure in %s", args.command)
        return 1
    return 0
