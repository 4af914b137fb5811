"""Localization metrics: IoU, AUC, class-aware IoU (CIoU) and no-sounding-area (NSA).

Maps are bilinearly upsampled to the annotation's frame size before being
binarized for IoU. The binarization threshold is a fraction of a map
maximum: of the whole scene's class maps by default (``tau_scope="scene"``),
or of each map separately (``tau_scope="map"``). NSA is counted on the
native map grid.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.integrate import trapezoid

from .data import DatasetManifest, SceneAnnotation
from .errors import DomainError

logger = logging.getLogger(__name__)

REPORT_VERSION = 1


def default_sweep() -> list[float]:
    return [round(0.05 * i, 2) for i in range(1, 20)]


@dataclass
class MetricConfig:
    tau_fraction: float = 0.10
    iou_thresholds: Sequence[float] = (0.3, 0.5)
    auc_sweep: Sequence[float] = field(default_factory=default_sweep)
    tau_scope: str = "scene"

    def __post_init__(self):
        if not 0.0 < self.tau_fraction < 1.0:
            raise DomainError("tau_fraction must be in (0, 1)")
        if list(self.iou_thresholds) != sorted(self.iou_thresholds):
            raise DomainError("iou_thresholds must be sorted")
        if list(self.auc_sweep) != sorted(self.auc_sweep) or not self.auc_sweep:
            raise DomainError("auc_sweep must be sorted and nonempty")
        if self.tau_scope not in ("scene", "map"):
            raise DomainError(f"tau_scope must be 'scene' or 'map', got {self.tau_scope!r}")


def upsample_map(m: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape == tuple(size):
        return m
    t = torch.from_numpy(m)[None, None]
    return F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0, 0].numpy()


def box_mask(boxes, frame_size: tuple[int, int]) -> np.ndarray:
    """Union of ``boxes`` (``Box`` objects or x,y,w,h tuples) as a boolean mask."""
    mask = np.zeros(frame_size, dtype=bool)
    for b in boxes:
        x, y, w, h = b.bbox if hasattr(b, "bbox") else b
        mask[y : y + h, x : x + w] = True
    return mask


def binarize(m: np.ndarray, tau: float) -> np.ndarray:
    # A map with no positive activation predicts nothing.
    if tau <= 0:
        return np.zeros(m.shape, dtype=bool)
    return m >= tau


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def iou(m: np.ndarray, boxes, frame_size: tuple[int, int], cfg: MetricConfig | None = None,
        tau: float | None = None) -> float:
    """IoU between a thresholded map and the union of ``boxes``."""
    cfg = cfg or MetricConfig()
    if len(boxes) == 0:
        raise DomainError("IoU needs at least one box")
    m = np.asarray(m, dtype=np.float64)
    if tau is None:
        tau = cfg.tau_fraction * float(m.max())
    pred = binarize(upsample_map(m, frame_size), tau)
    return mask_iou(pred, box_mask(boxes, frame_size))


def auc(values: Sequence[float], sweep: Sequence[float] | None = None) -> float:
    """Area under the (threshold -> fraction of values >= threshold) curve.

    Trapezoidal rule over ``sweep``, divided by its span so the result is in
    [0, 1]. A one-point sweep degenerates to the fraction at that point.
    """
    sweep = np.asarray(default_sweep() if sweep is None else sweep, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0
    curve = np.array([(values >= t).mean() for t in sweep])
    if sweep.size == 1:
        return float(curve[0])
    return float(trapezoid(curve, sweep) / (sweep[-1] - sweep[0]))


def success_rate(values: Sequence[float], threshold: float) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float((values >= threshold).mean()) if values.size else 0.0


def _as_class_maps(s) -> Mapping[int, np.ndarray]:
    if isinstance(s, Mapping):
        return {int(k): np.asarray(v, dtype=np.float64) for k, v in s.items()}
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim != 3:
        raise DomainError(f"class maps must be KxHxW, got {arr.shape}")
    return {k: arr[k] for k in range(arr.shape[0])}


def class_thresholds(s, ann: SceneAnnotation, cfg: MetricConfig, tau: float | None = None) -> dict[int, float]:
    maps = _as_class_maps(s)
    classes = sorted({b.class_id for b in ann.boxes})
    missing = [c for c in classes if c not in maps]
    if missing:
        raise DomainError(f"no map for annotated classes {missing}")
    if tau is not None:
        return {c: float(tau) for c in classes}
    if cfg.tau_scope == "scene":
        t = cfg.tau_fraction * max(float(m.max()) for m in maps.values())
        return {c: t for c in classes}
    return {c: cfg.tau_fraction * float(maps[c].max()) for c in classes}


def per_class_iou(s, ann: SceneAnnotation, cfg: MetricConfig | None = None, tau: float | None = None) -> dict[int, float]:
    cfg = cfg or MetricConfig()
    maps = _as_class_maps(s)
    taus = class_thresholds(maps, ann, cfg, tau)
    return {c: iou(maps[c], ann.boxes_for(c), ann.frame_size, cfg, taus[c]) for c in ann.sounding_classes}


def ciou(s, ann: SceneAnnotation, cfg: MetricConfig | None = None, tau: float | None = None) -> float:
    """Mean IoU over the sounding classes of a scene."""
    if not ann.sounding_classes:
        raise DomainError("CIoU is undefined for a scene without sounding objects")
    ious = per_class_iou(s, ann, cfg, tau)
    return float(sum(ious.values()) / len(ious))


def nsa(s, ann: SceneAnnotation, cfg: MetricConfig | None = None, tau: float | None = None) -> float:
    """Fraction of silent-class map cells below the threshold, averaged over silent classes."""
    cfg = cfg or MetricConfig()
    silent = ann.silent_classes
    if not silent:
        raise DomainError("NSA is undefined for a scene without silent objects")
    maps = _as_class_maps(s)
    taus = class_thresholds(maps, ann, cfg, tau)
    below = sum(int((maps[c] < taus[c]).sum()) for c in silent)
    area = sum(maps[c].size for c in silent)
    return float(below / area)


# --------------------------------------------------------------------------
# Report over a prediction directory
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    per_scene: list[dict]
    aggregate: dict
    missing: list[str]
    skipped: list[str]
    config: dict
    version: int = REPORT_VERSION

    @property
    def complete(self) -> bool:
        return not self.missing

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "aggregate": self.aggregate,
            "per_scene": self.per_scene,
            "counts": {"evaluated": len(self.per_scene), "missing": len(self.missing), "skipped": len(self.skipped)},
            "missing": self.missing,
            "skipped": self.skipped,
            "config": self.config,
        }


def score_scene(class_maps, agnostic: np.ndarray | None, ann: SceneAnnotation, cfg: MetricConfig) -> dict:
    rec: dict = {}
    if ann.sounding_classes:
        ious = per_class_iou(class_maps, ann, cfg)
        rec["class_iou"] = {str(k): v for k, v in ious.items()}
        rec["ciou"] = float(sum(ious.values()) / len(ious))
        if agnostic is not None:
            sounding = [b for b in ann.boxes if b.sounding]
            rec["iou"] = iou(agnostic, sounding, ann.frame_size, cfg)
    if ann.silent_classes:
        rec["nsa"] = nsa(class_maps, ann, cfg)
    return rec


def aggregate_scenes(per_scene: Sequence[dict], cfg: MetricConfig) -> dict:
    if not per_scene:
        return {}
    agg: dict = {"num_scenes": len(per_scene)}
    for key in ("ciou", "iou"):
        vals = [r[key] for r in per_scene if key in r]
        if not vals:
            continue
        agg[f"{key}_mean"] = float(np.mean(vals))
        for t in cfg.iou_thresholds:
            agg[f"{key}@{t:g}"] = success_rate(vals, t)
        agg[f"auc_{key}"] = auc(vals, cfg.auc_sweep)
    nsas = [r["nsa"] for r in per_scene if "nsa" in r]
    if nsas:
        agg["nsa"] = float(np.mean(nsas))
    return agg


def evaluate(pred_dir, manifest: DatasetManifest, cfg: MetricConfig | None = None,
             out_path=None) -> EvalReport:
    """Score every annotated manifest scene against ``pred_dir/<id>.npz``.

    Scenes without a prediction file are listed in ``missing`` and excluded
    from the aggregate.
    """
    cfg = cfg or MetricConfig()
    pred_dir = Path(pred_dir)
    per_scene, missing, skipped = [], [], []
    for sample in manifest.samples:
        if sample.annotation is None:
            skipped.append(sample.id)
            continue
        path = pred_dir / f"{sample.id}.npz"
        if not path.exists():
            missing.append(sample.id)
            continue
        with np.load(path) as z:
            maps = z["class_maps"]
            agnostic = z["agnostic"] if "agnostic" in z else None
        rec = {"id": sample.id, **score_scene(maps, agnostic, sample.annotation, cfg)}
        per_scene.append(rec)
    report = EvalReport(per_scene, aggregate_scenes(per_scene, cfg), missing, skipped,
                        {"tau_fraction": cfg.tau_fraction, "iou_thresholds": list(cfg.iou_thresholds),
                         "auc_sweep": list(cfg.auc_sweep), "tau_scope": cfg.tau_scope})
    if missing:
        logger.warning("%d scenes have no prediction", len(missing))
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    return report
