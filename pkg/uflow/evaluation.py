"""
Metrics and threshold protocols for anomaly maps.

Scores are "higher is more anomalous" everywhere in this module: the AS map
as is, and the negated log-NFA map. A pixel is detected at threshold t when
its score is strictly greater than t.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from uflow.flow.graph import LatentPyramid
from uflow.nfa import nfa_image_score
from uflow.scoring import ScoreMap, image_score, upsample_bilinear
from uflow.shared.errors import ParameterError, ShapeError, UndefinedMetricError

ORACLE_CANDIDATES = 256
HISTOGRAM_BINS = 64

logger = logging.getLogger("uflow.evaluation")


# --- basic metrics ---
def roc_auc(scores, labels) -> float:
    """Mann–Whitney AUROC; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores for {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative samples")
    ranks = rankdata(scores)
    concordant = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(concordant / (n_pos * n_neg))


def iou(mask, gt) -> float:
    mask = np.asarray(mask, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if mask.shape != gt.shape:
        raise ShapeError(f"mask shape {mask.shape} differs from ground truth {gt.shape}")
    union = np.count_nonzero(mask | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(mask & gt) / union


@dataclass
class LabeledMaps:
    """Per-image score rasters at image resolution with their ground truth."""

    scores: list[np.ndarray]
    masks: list[np.ndarray]
    labels: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.scores = [np.asarray(s, dtype=np.float64) for s in self.scores]
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
        if len(self.scores) != len(self.masks):
            raise ShapeError(f"{len(self.scores)} score maps for {len(self.masks)} masks")
        for index, (score, mask) in enumerate(zip(self.scores, self.masks)):
            if score.shape != mask.shape:
                raise ShapeError(f"image {index}: score shape {score.shape} differs from mask {mask.shape}")
        if not self.labels:
            self.labels = [int(m.any()) for m in self.masks]

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.concatenate([s.ravel() for s in self.scores]),
            np.concatenate([m.ravel() for m in self.masks]),
        )


def pooled_iou(maps: LabeledMaps, threshold: float) -> float:
    scores, gt = maps.pooled()
    return iou(scores > threshold, gt)


# --- thresholds ---
def _iou_curve(scores: np.ndarray, gt: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    ordered_all = np.sort(scores)
    ordered_pos = np.sort(scores[gt])
    detected = scores.size - np.searchsorted(ordered_all, thresholds, side="right")
    hits = ordered_pos.size - np.searchsorted(ordered_pos, thresholds, side="right")
    return hits / (ordered_pos.size + detected - hits)


def oracle_threshold(
    maps: LabeledMaps,
    n_candidates: int = ORACLE_CANDIDATES,
    exhaustive: bool = False,
) -> tuple[float, float]:
    """
    Threshold maximizing the IoU over all pooled test pixels.

    Candidates are quantiles of the pooled scores plus every per-image
    maximum (every unique score when ``exhaustive``) and one value just
    below the minimum, which detects everything. Ties go to the higher
    threshold.
    """
    scores, gt = maps.pooled()
    if not gt.any():
        raise UndefinedMetricError("oracle threshold needs at least one anomalous pixel")
    if exhaustive:
        candidates = np.unique(scores)
    else:
        quantiles = np.quantile(scores, np.linspace(0.0, 1.0, n_candidates))
        maxima = [s.max() for s in maps.scores]
        candidates = np.unique(np.concatenate([quantiles, maxima]))
    candidates = np.concatenate([[np.nextafter(scores.min(), -np.inf)], candidates])

    curve = _iou_curve(scores, gt, candidates)
    best = len(curve) - 1 - int(np.argmax(curve[::-1]))
    assert np.all(curve <= curve[best])
    return float(candidates[best]), float(curve[best])


def fair_threshold(train_maps: Sequence[np.ndarray]) -> float:
    """Largest second-highest pixel over anomaly-free maps: at most one pixel per map exceeds it."""
    if not train_maps:
        raise ParameterError("fair threshold needs at least one training map")
    seconds = []
    for values in train_maps:
        flat = np.asarray(values, dtype=np.float64).ravel()
        if flat.size == 0:
            raise ShapeError("empty training map")
        seconds.append(flat[0] if flat.size == 1 else np.partition(flat, -2)[-2])
    threshold = float(max(seconds))
    assert all(np.count_nonzero(np.asarray(v) > threshold) <= 1 for v in train_maps)
    return threshold


def embedding_stats(latents: LatentPyramid) -> np.ndarray:
    """Mean and population std of z² per channel, interleaved, scales finest first."""
    stats = []
    for z in latents.z:
        squared = np.square(np.asarray(z, dtype=np.float64)).reshape(z.shape[0], -1)
        stats.append(np.stack([squared.mean(axis=1), squared.std(axis=1)], axis=1).ravel())
    return np.concatenate(stats) if stats else np.zeros(0)


# --- pipeline evaluation ---
@dataclass
class ImageMaps:
    """One test image: finest-grid AS and log-NFA maps, ground truth at image size."""

    name: str
    as_map: np.ndarray
    log_nfa: np.ndarray
    gt: np.ndarray
    label: int


@dataclass
class EvalReport:
    metrics: dict
    rows: list[dict]
    histogram: list[tuple[str, float, float | None]]


def _score_raster(item: ImageMaps, kind: str) -> np.ndarray:
    raster = item.as_map if kind == "as" else -np.asarray(item.log_nfa, dtype=np.float64)
    return upsample_bilinear(raster, item.gt.shape)


def _safe(metric, *args):
    try:
        return metric(*args)
    except UndefinedMetricError as exc:
        logger.warning("%s", exc)
        return None


def _histogram(normal: np.ndarray, anomalous: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pooled = np.concatenate([normal, anomalous])
    edges = np.histogram_bin_edges(pooled, bins=HISTOGRAM_BINS)
    centers = 0.5 * (edges[:-1] + edges[1:])
    normal_density = np.histogram(normal, bins=edges, density=normal.size > 0)[0]
    anomalous_density = np.histogram(anomalous, bins=edges, density=anomalous.size > 0)[0]
    return centers, normal_density, anomalous_density


def evaluate(
    test: Sequence[ImageMaps],
    train_as: Sequence[np.ndarray],
    train_log_nfa: Sequence[np.ndarray],
    kind: str = "nfa",
    nfa_threshold: float = 0.0,
    exhaustive: bool = False,
) -> EvalReport:
    """
    AUROC for both score kinds, IoU at the automatic, oracle and fair
    operating points. Test maps are upsampled to their ground truth;
    train maps are expected at image resolution already.
    """
    if not test:
        raise ParameterError("evaluation needs at least one test image")
    labeled = {
        score_kind: LabeledMaps(
            scores=[_score_raster(item, score_kind) for item in test],
            masks=[item.gt for item in test],
            labels=[item.label for item in test],
        )
        for score_kind in ("as", "nfa")
    }
    labels = [item.label for item in test]
    image_scores = {
        "as": [image_score(ScoreMap(raster)) for raster in labeled["as"].scores],
        "nfa": [nfa_image_score(-raster) for raster in labeled["nfa"].scores],
    }

    metrics: dict = {"score_kind": kind}
    for score_kind, suffix in (("as", ""), ("nfa", "_nfa")):
        scores, gt = labeled[score_kind].pooled()
        metrics[f"pixel_auroc{suffix}"] = _safe(roc_auc, scores, gt)
        metrics[f"image_auroc{suffix}"] = _safe(roc_auc, image_scores[score_kind], labels)

    auto_cut = -nfa_threshold
    metrics["iou_auto"] = pooled_iou(labeled["nfa"], auto_cut)
    oracle = _safe(oracle_threshold, labeled[kind], ORACLE_CANDIDATES, exhaustive)
    metrics["iou_oracle"] = oracle[1] if oracle else None

    fair_as = fair_threshold(list(train_as)) if train_as else None
    fair_nfa = fair_threshold([-np.asarray(m) for m in train_log_nfa]) if train_log_nfa else None
    fair = fair_as if kind == "as" else fair_nfa
    metrics["iou_fair"] = pooled_iou(labeled[kind], fair) if fair is not None else None
    metrics["iou_fair_as"] = pooled_iou(labeled["as"], fair_as) if fair_as is not None else None
    metrics["thresholds"] = {
        "auto_log_nfa": nfa_threshold,
        "oracle": oracle[0] if oracle else None,
        "fair": fair,
        "fair_as": fair_as,
    }

    rows = []
    for index, item in enumerate(test):
        detected = labeled["nfa"].scores[index] > auto_cut
        rows.append(
            {
                "image": item.name,
                "label": item.label,
                "image_score_as": image_scores["as"][index],
                "image_score_nfa": image_scores["nfa"][index],
                "detected_pixels": int(np.count_nonzero(detected)),
                "gt_pixels": int(np.count_nonzero(item.gt)),
                "iou_auto": iou(detected, item.gt),
            }
        )

    scores, gt = labeled["nfa"].pooled()
    centers, normal, anomalous = _histogram(scores[~gt], scores[gt])
    histogram = [("normal", float(c), float(v)) for c, v in zip(centers, normal)]
    histogram += [("anomalous", float(c), float(v)) for c, v in zip(centers, anomalous)]
    histogram.append(("auto_threshold", auto_cut, None))
    if kind == "nfa" and oracle:
        histogram.append(("oracle_threshold", oracle[0], None))

    logger.info(
        "Evaluated %d test images: pixel AUROC %s, IoU auto %.4f",
        len(test),
        metrics["pixel_auroc"],
        metrics["iou_auto"],
    )
    return EvalReport(metrics=metrics, rows=rows, histogram=histogram)


def _clean(value):
    if isinstance(value, dict):
        return {key: _clean(item) for key, item in value.items()}
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_report(report: EvalReport, output_dir) -> None:
    """
    metrics.json, metrics.csv and score_histogram.csv. The ALL row of the CSV
    carries image-level AUROCs in the score columns and totals elsewhere.
    """
    output_dir = Path(output_dir)
    (output_dir / "metrics.json").write_text(json.dumps(_clean(report.metrics), indent=2, sort_keys=True) + "\n")

    columns = ["image", "label", "image_score_as", "image_score_nfa", "detected_pixels", "gt_pixels", "iou_auto"]
    with (output_dir / "metrics.csv").open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        writer.writeheader()
        writer.writerows(report.rows)
        writer.writerow(
            {
                "image": "ALL",
                "label": sum(row["label"] for row in report.rows),
                "image_score_as": report.metrics["image_auroc"],
                "image_score_nfa": report.metrics["image_auroc_nfa"],
                "detected_pixels": sum(row["detected_pixels"] for row in report.rows),
                "gt_pixels": sum(row["gt_pixels"] for row in report.rows),
                "iou_auto": report.metrics["iou_auto"],
            }
        )

    with (output_dir / "score_histogram.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["series", "position", "value"])
        for series, position, value in report.histogram:
            writer.writerow([series, repr(position), "" if value is None else repr(value)])
