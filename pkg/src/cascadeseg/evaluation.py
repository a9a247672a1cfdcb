"""Pixel-level and object-level scoring of binary label maps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

REFERENCE_DIAMETER = 300.0
MIN_AREA = 20_000
MAX_AREA = 200_000
EIGHT = np.ones((3, 3), dtype=bool)


def _check(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")


def confusion(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    p, g = pred > 0, gt > 0
    tp = int(np.count_nonzero(p & g))
    return tp, int(np.count_nonzero(p)) - tp, int(np.count_nonzero(g)) - tp


def rates(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """(dsc, precision, recall); 1 for all three when both masks are empty, 0 for other empty denominators."""
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    dsc = 2 * tp / (2 * tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return dsc, precision, recall


def pixel_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    _check(pred, gt)
    return rates(*confusion(pred, gt))


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected component labelling."""
    return ndi.label(mask > 0, structure=EIGHT)


def scaled_area_bounds(diameter: float, min_area=MIN_AREA, max_area=MAX_AREA) -> tuple[int, int]:
    """Area filter bounds rescaled quadratically from the 300 px reference object diameter."""
    s = (diameter / REFERENCE_DIAMETER) ** 2
    return int(round(min_area * s)), int(round(max_area * s))


def filter_objects(mask: np.ndarray, min_area: int = MIN_AREA, max_area: int = MAX_AREA) -> np.ndarray:
    """Drop components smaller than ``min_area`` or larger than ``max_area``; bounds are kept."""
    labels, n = label_components(mask)
    if n == 0:
        return np.zeros(mask.shape, np.uint8)
    areas = np.bincount(labels.ravel())
    keep = (areas >= min_area) & (areas <= max_area)
    keep[0] = False
    return keep[labels].astype(np.uint8)


def object_dsc(pred: np.ndarray, gt: np.ndarray, per: str = "ground_truth") -> list[tuple[int, float]]:
    """Dice of every reference component against the union of opposite components touching it.

    ``per="ground_truth"`` scores ground-truth objects (spurious predictions
    elsewhere are ignored); ``per="predicted"`` scores predicted objects.
    """
    _check(pred, gt)
    if per == "ground_truth":
        ref, other = gt, pred
    elif per == "predicted":
        ref, other = pred, gt
    else:
        raise ValueError(f"per must be 'ground_truth' or 'predicted', got {per!r}")
    ref_lab, n_ref = label_components(ref)
    if n_ref == 0:
        return []
    oth_lab, n_oth = label_components(other)
    ref_area = np.bincount(ref_lab.ravel(), minlength=n_ref + 1)
    oth_area = np.bincount(oth_lab.ravel(), minlength=n_oth + 1)
    both = (ref_lab > 0) & (oth_lab > 0)
    pairs = ref_lab[both].astype(np.int64) * (n_oth + 1) + oth_lab[both]
    keys, counts = np.unique(pairs, return_counts=True)
    inter = np.zeros(n_ref + 1, np.int64)
    touched: dict[int, list[int]] = {}
    for key, c in zip(keys, counts):
        r, o = divmod(int(key), n_oth + 1)
        inter[r] += c
        touched.setdefault(r, []).append(o)
    out = []
    for r in range(1, n_ref + 1):
        union_area = sum(int(oth_area[o]) for o in touched.get(r, ()))
        out.append((r, 2 * int(inter[r]) / (int(ref_area[r]) + union_area)))
    return out


def cumulative_curve(dscs, thresholds=None) -> list[tuple[float, float]]:
    """Fraction of objects that are detected (DSC > 0) and reach DSC >= t, for each t.

    At ``t = 0`` this is the object-level detection rate; for ``t > 0`` it is
    the plain fraction with DSC >= t.
    """
    d = np.asarray(list(dscs), float)
    if d.size == 0:
        raise ValueError("cumulative curve of an empty DSC list is undefined")
    if thresholds is None:
        thresholds = np.round(np.linspace(0, 1, 21), 10)
    detected = d > 0
    return [(float(t), float(np.count_nonzero(detected & (d >= t)) / d.size)) for t in thresholds]


@dataclass
class DetectionScores:
    precision: float | None
    recall: float | None
    f1: float | None
    n_gt: int
    n_pred: int
    undefined: list[str] = field(default_factory=list)


def detection_scores(pred: np.ndarray, gt: np.ndarray) -> DetectionScores:
    """Object-level detection: a ground-truth object counts as found when any prediction overlaps it."""
    _check(pred, gt)
    gt_lab, n_gt = label_components(gt)
    pr_lab, n_pred = label_components(pred)
    both = (gt_lab > 0) & (pr_lab > 0)
    found = np.unique(gt_lab[both]).size
    true_pred = np.unique(pr_lab[both]).size
    undefined = []
    recall = found / n_gt if n_gt else None
    precision = true_pred / n_pred if n_pred else None
    if recall is None:
        undefined.append("recall")
    if precision is None:
        undefined.append("precision")
    if recall is None or precision is None:
        f1 = None
        undefined.append("f1")
    else:
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return DetectionScores(precision, recall, f1, n_gt, n_pred, undefined)


def overlay(pred: np.ndarray, gt: np.ndarray, image: np.ndarray | None = None, alpha: float = 0.6) -> np.ndarray:
    """RGB rendering: true positives green, false positives red, false negatives blue."""
    _check(pred, gt)
    p, g = pred > 0, gt > 0
    base = np.full(pred.shape + (3,), 255, np.float32) if image is None else image.astype(np.float32)
    out = base.copy()
    for sel, color in ((p & g, (0, 200, 0)), (p & ~g, (220, 0, 0)), (~p & g, (0, 0, 230))):
        out[sel] = (1 - alpha) * base[sel] + alpha * np.asarray(color, np.float32)
    return np.clip(out, 0, 255).astype(np.uint8)


# -- reports ----------------------------------------------------------------------


def evaluate_slide(pred: np.ndarray, gt: np.ndarray, min_area: int, max_area: int) -> dict:
    """Raw and postprocessed scores for one slide."""
    raw = pixel_metrics(pred, gt)
    fp, fg = filter_objects(pred, min_area, max_area), filter_objects(gt, min_area, max_area)
    post = pixel_metrics(fp, fg)
    return {
        "raw": dict(zip(("dsc", "precision", "recall"), raw)),
        "post": dict(zip(("dsc", "precision", "recall"), post)),
        "object_dsc_gt": [d for _, d in object_dsc(fp, fg, "ground_truth")],
        "object_dsc_pred": [d for _, d in object_dsc(fp, fg, "predicted")],
        "detection": asdict(detection_scores(fp, fg)),
    }


def _mean_std(values):
    v = [x for x in values if x is not None and not (isinstance(x, float) and math.isnan(x))]
    if not v:
        return None, None
    return float(np.mean(v)), float(np.std(v))


@dataclass
class EvalReport:
    pipeline: str
    per_wsi: dict = field(default_factory=dict)  # wsi_id -> evaluate_slide() output
    area_bounds: tuple[int, int] = (MIN_AREA, MAX_AREA)
    runtimes: dict = field(default_factory=dict)  # wsi_id -> {stage: seconds}
    provenance: dict = field(default_factory=dict)  # wsi_id -> {fold, test_split}
    missing: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {}
        for stage in ("raw", "post"):
            for k in ("dsc", "precision", "recall"):
                m, s = _mean_std([r[stage][k] for r in self.per_wsi.values()])
                out[f"{stage}_{k}_mean"], out[f"{stage}_{k}_std"] = m, s
        gt = [d for r in self.per_wsi.values() for d in r["object_dsc_gt"]]
        pr = [d for r in self.per_wsi.values() for d in r["object_dsc_pred"]]
        out["curve_gt"] = cumulative_curve(gt) if gt else None
        out["curve_pred"] = cumulative_curve(pr) if pr else None
        found = sum(1 for d in gt if d > 0)
        true_pred = sum(1 for d in pr if d > 0)
        out["detection_recall"] = found / len(gt) if gt else None
        out["detection_precision"] = true_pred / len(pr) if pr else None
        p, r = out["detection_precision"], out["detection_recall"]
        out["detection_f1"] = (2 * p * r / (p + r) if p + r else 0.0) if p is not None and r is not None else None
        out["undefined"] = [k for k in ("detection_recall", "detection_precision", "detection_f1") if out[k] is None]
        totals = [sum(t.values()) for t in self.runtimes.values()]
        out["runtime_mean_s"] = float(np.mean(totals)) if totals else None
        return out

    def to_dict(self) -> dict:
        return {
            "pipeline": self.pipeline,
            "area_bounds": list(self.area_bounds),
            "summary": self.summary(),
            "per_wsi": self.per_wsi,
            "runtimes": self.runtimes,
            "provenance": self.provenance,
            "missing": self.missing,
        }

    def deterministic_dict(self) -> dict:
        """Report content without wall-clock measurements (for rerun comparisons)."""
        d = self.to_dict()
        d.pop("runtimes")
        d["summary"].pop("runtime_mean_s")
        return d

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with open(directory / "per_wsi.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["wsi_id"] + [f"{s}_{k}" for s in ("raw", "post") for k in ("dsc", "precision", "recall")])
            for wsi, r in sorted(self.per_wsi.items()):
                w.writerow([wsi] + [r[s][k] for s in ("raw", "post") for k in ("dsc", "precision", "recall")])
        with open(directory / "objects.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["wsi_id", "aggregation", "object", "dsc"])
            for wsi, r in sorted(self.per_wsi.items()):
                for agg, key in (("ground_truth", "object_dsc_gt"), ("predicted", "object_dsc_pred")):
                    for i, d in enumerate(r[key], 1):
                        w.writerow([wsi, agg, i, d])
        summary = self.summary()
        for name in ("curve_gt", "curve_pred"):
            with open(directory / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["threshold", "fraction"])
                w.writerows(summary[name] or [])
        return directory
