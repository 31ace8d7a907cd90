"""AUROC metrics, per-class evaluation reports and heatmap overlays."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import distance_transform_edt
from scipy.stats import rankdata

from pedenet.dataset import ClassDataset, to_uint8
from pedenet.errors import InvalidArgumentError, UndefinedMetricError
from pedenet.scoring import AnomalyMap, EmbeddingGallery, anomaly_map

HEATMAP_ALPHA = 0.6
RED = np.array([1.0, 0.0, 0.0])


def auroc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(score+ == score-), from midranks (Mann-Whitney U)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise InvalidArgumentError("scores and labels differ in length")
    if np.isnan(scores).any():
        raise InvalidArgumentError("scores contain NaN")
    pos = labels.astype(bool)
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (float(n_pos) * float(n_neg)))


@dataclass
class EvalReport:
    class_name: str
    pixel_auroc: float
    image_auroc: float
    n_test_images: int
    n_anomalous: int
    runtime_seconds: float
    stride: int = 16
    gallery_rows: int = 0

    def records(self) -> str:
        return " ".join(f"{f.name}={_fmt(getattr(self, f.name))}" for f in fields(self))

    @classmethod
    def parse(cls, line: str) -> "EvalReport":
        kv = dict(tok.split("=", 1) for tok in line.split())
        typed = {}
        for f in fields(cls):
            if f.name in kv:
                typed[f.name] = {"str": str, "int": int, "float": float}[f.type](kv[f.name])
        return cls(**typed)


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class ClassEvaluation:
    report: EvalReport
    maps: list[AnomalyMap] = field(default_factory=list)


def evaluate_class(
    model,
    gallery: EmbeddingGallery,
    dataset: ClassDataset,
    stride: int | None = None,
    backend: str = "exact",
    aggregation: str = "mean",
) -> ClassEvaluation:
    """Pixel AUROC over all pooled test pixels and image AUROC over per-image max scores."""
    stride = gallery.stride if stride is None else stride
    start = time.perf_counter()
    labels = dataset.test_labels
    if len(set(labels)) < 2:
        raise UndefinedMetricError(f"{dataset.class_name}: test split needs both normal and defective images")
    maps = [anomaly_map(model, gallery, s.image, stride, backend, aggregation) for s in dataset.test_images]
    pixel_scores = np.concatenate([m.scores.ravel() for m in maps])
    pixel_labels = np.concatenate([s.mask.ravel() for s in dataset.test_images])
    pixel = auroc(pixel_scores, pixel_labels)
    image = auroc([m.image_score for m in maps], labels)
    report = EvalReport(
        dataset.class_name, pixel, image, len(labels), int(sum(labels)),
        time.perf_counter() - start, stride, len(gallery),
    )
    return ClassEvaluation(report, maps)


def peak_within_mask(scores: np.ndarray, mask: np.ndarray, radius: float = 8.0) -> bool:
    """Whether the highest-scoring pixel is within ``radius`` px of the mask."""
    if not mask.any():
        return False
    y, x = np.unravel_index(int(np.argmax(scores)), scores.shape)
    distance = distance_transform_edt(mask == 0)
    return bool(distance[y, x] <= radius)


def normalize_map(scores: np.ndarray) -> np.ndarray:
    """Per-image min-max to [0, 1]. A constant map becomes all 1 if positive, all 0 otherwise."""
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    if hi > lo:
        return (scores - lo) / (hi - lo)
    return np.full_like(scores, 1.0 if hi > 0 else 0.0)


def overlay(image: np.ndarray, scores: np.ndarray, alpha: float = HEATMAP_ALPHA) -> np.ndarray:
    """(3, H, W) image in [0, 1] blended towards red by normalized score; returns (H, W, 3) uint8."""
    rgb = np.transpose(np.asarray(image, dtype=np.float64), (1, 2, 0))
    if rgb.shape[:2] != np.shape(scores):
        raise InvalidArgumentError(f"image {rgb.shape[:2]} and map {np.shape(scores)} differ in extent")
    a = (normalize_map(scores) * alpha)[..., None]
    blended = rgb * (1.0 - a) + RED * a
    return to_uint8(np.transpose(blended, (2, 0, 1)))


def render_heatmap(image: np.ndarray, scores, out_path, alpha: float = HEATMAP_ALPHA) -> None:
    if isinstance(scores, AnomalyMap):
        scores = scores.scores
    Image.fromarray(overlay(image, scores, alpha), mode="RGB").save(out_path, format="PNG")


# -- report files -------------------------------------------------------------

TABLE_HEADER = f"{'class':<16} {'pixel_auroc':>11} {'image_auroc':>11} {'n_test':>6} {'n_anom':>6} {'seconds':>8}"


def format_table(reports: list[EvalReport]) -> str:
    lines = [TABLE_HEADER, "-" * len(TABLE_HEADER)]
    for r in reports:
        lines.append(f"{r.class_name:<16} {r.pixel_auroc:>11.4f} {r.image_auroc:>11.4f} "
                     f"{r.n_test_images:>6d} {r.n_anomalous:>6d} {r.runtime_seconds:>8.1f}")
    if len(reports) > 1:
        lines.append("-" * len(TABLE_HEADER))
        lines.append(f"{'mean':<16} {np.mean([r.pixel_auroc for r in reports]):>11.4f} "
                     f"{np.mean([r.image_auroc for r in reports]):>11.4f}")
    return "\n".join(lines) + "\n"


def write_reports(reports: list[EvalReport], out_dir) -> tuple[Path, Path]:
    """Write ``report.txt`` (table) and ``report.kv`` (one key=value record per line)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table, kv = out / "report.txt", out / "report.kv"
    table.write_text(format_table(reports))
    kv.write_text("".join(r.records() + "\n" for r in reports))
    return table, kv


def read_reports(path) -> list[EvalReport]:
    return [EvalReport.parse(line) for line in Path(path).read_text().splitlines() if line.strip()]
