"""Feature-consistency and disparity-error metrics, plus report writers.

Invalid ground truth is anything non-finite or outside ``valid_mask``; every
metric ignores those pixels and raises :class:`MetricError` when none remain.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .geometry import PositivePairSet
from .scf import FeatureMap

D1_HEADER = "d1_all: KITTI convention, error > 3 px and > 5% of ground truth"


class MetricError(ValueError):
    """The metric is undefined for the given input (no pairs or no valid pixels)."""


def _paired_vectors(left: FeatureMap, right: FeatureMap, pairs: PositivePairSet) -> tuple[np.ndarray, np.ndarray]:
    if len(pairs) == 0:
        raise MetricError("empty pair set")
    lv = left.values.detach() if isinstance(left.values, torch.Tensor) else torch.as_tensor(left.values)
    rv = right.values.detach() if isinstance(right.values, torch.Tensor) else torch.as_tensor(right.values)
    q = lv[:, pairs.query[:, 1], pairs.query[:, 0]].T.double().numpy()
    k = rv[:, pairs.key[:, 1], pairs.key[:, 0]].T.double().numpy()
    return q, k


def cosine_consistency(left: FeatureMap, right: FeatureMap, pairs: PositivePairSet) -> float:
    """Mean cosine similarity between paired left and right feature vectors."""
    q, k = _paired_vectors(left, right, pairs)
    nq = np.linalg.norm(q, axis=1)
    nk = np.linalg.norm(k, axis=1)
    if np.any(nq == 0) or np.any(nk == 0):
        raise MetricError("zero feature vector at a paired location")
    return float(np.mean(np.sum(q * k, axis=1) / (nq * nk)))


def per_channel_inconsistency(
    left: FeatureMap, right: FeatureMap, pairs: PositivePairSet, normalize: bool = False
) -> np.ndarray:
    """Per-channel mean absolute difference over pairs; ``normalize`` unit-scales vectors first."""
    q, k = _paired_vectors(left, right, pairs)
    if normalize:
        q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        k = k / np.maximum(np.linalg.norm(k, axis=1, keepdims=True), 1e-12)
    return np.abs(q - k).mean(axis=0)


def _valid_errors(pred, gt, valid_mask) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    valid = np.isfinite(gt)
    if valid_mask is not None:
        valid &= np.asarray(valid_mask, dtype=bool)
    if not valid.any():
        raise MetricError("no valid ground-truth pixels")
    return np.abs(pred[valid] - gt[valid]), gt[valid]


def threshold_error_rate(pred, gt, valid_mask=None, t: float = 3.0) -> float:
    if not t > 0:
        raise ValueError("threshold must be positive")
    err, _ = _valid_errors(pred, gt, valid_mask)
    return 100.0 * np.count_nonzero(err > t) / err.size


def d1(pred, gt, valid_mask=None) -> float:
    err, g = _valid_errors(pred, gt, valid_mask)
    return 100.0 * np.count_nonzero((err > 3.0) & (err > 0.05 * np.abs(g))) / err.size


def valid_pixel_count(gt, valid_mask=None) -> int:
    valid = np.isfinite(np.asarray(gt, dtype=np.float64))
    if valid_mask is not None:
        valid &= np.asarray(valid_mask, dtype=bool)
    return int(valid.sum())


@dataclass
class MetricsReport:
    mean_cosine: float
    per_channel_abs_diff: list[float]
    err_gt_1px: float
    err_gt_2px: float
    err_gt_3px: float
    d1_all: float
    pixel_count: int
    style_tag: str
    sample_id: str = ""
    mean_cosine_unmasked: float = float("nan")
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        d["per_channel_abs_diff"] = " ".join(f"{v:.6g}" for v in self.per_channel_abs_diff)
        extra = d.pop("extra")
        d.update(extra)
        return d


def disparity_report(pred, gt, valid_mask=None) -> dict:
    """The error columns of a report for one disparity map."""
    return dict(
        err_gt_1px=threshold_error_rate(pred, gt, valid_mask, 1.0),
        err_gt_2px=threshold_error_rate(pred, gt, valid_mask, 2.0),
        err_gt_3px=threshold_error_rate(pred, gt, valid_mask, 3.0),
        d1_all=d1(pred, gt, valid_mask),
        pixel_count=valid_pixel_count(gt, valid_mask),
    )


def aggregate_reports(reports: list[MetricsReport], style_tag: str | None = None) -> MetricsReport:
    """Pixel-count-weighted corpus aggregate (pair-count weighting is not tracked; cosine is averaged)."""
    if not reports:
        raise MetricError("no reports to aggregate")
    w = np.array([r.pixel_count for r in reports], dtype=np.float64)
    if w.sum() == 0:
        raise MetricError("no valid pixels in any report")

    def wmean(name):
        return float(np.sum(w * np.array([getattr(r, name) for r in reports])) / w.sum())

    return MetricsReport(
        mean_cosine=float(np.mean([r.mean_cosine for r in reports])),
        per_channel_abs_diff=list(np.mean([r.per_channel_abs_diff for r in reports], axis=0)),
        err_gt_1px=wmean("err_gt_1px"),
        err_gt_2px=wmean("err_gt_2px"),
        err_gt_3px=wmean("err_gt_3px"),
        d1_all=wmean("d1_all"),
        pixel_count=int(w.sum()),
        style_tag=style_tag if style_tag is not None else reports[0].style_tag,
        sample_id="ALL",
        mean_cosine_unmasked=float(np.mean([r.mean_cosine_unmasked for r in reports])),
    )


def write_reports_csv(reports: Iterable[MetricsReport], path, header_comment: str | None = None) -> Path:
    """Flat CSV, one row per report. An optional first line ``# comment`` documents conventions."""
    rows = [r.row() for r in reports]
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return path


def read_reports_csv(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def append_jsonl(records: Iterable[dict], path) -> None:
    with Path(path).open("a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
