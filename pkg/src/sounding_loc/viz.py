"""Static heatmap overlays of class-aware sounding maps.

Each class map is bilinearly upsampled to the frame, scaled by the maximum
over all class maps of the scene, colour-mapped and alpha-blended:

    out = (1 - alpha) * frame + alpha * colormap(s_hat)

with ``alpha = 0.5`` wherever the upsampled map is positive and ``alpha = 0``
elsewhere, so an all-zero map leaves the frame untouched. Boxes of the
class are outlined green when it sounds and red when it is silent.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps

from .data import SceneAnnotation, write_png
from .metrics import upsample_map

ALPHA = 0.5
GREEN = (0.0, 1.0, 0.0)
RED = (1.0, 0.0, 0.0)


def colorize(values: np.ndarray, cmap: str = "jet") -> np.ndarray:
    """RGB in [0, 1] for values in [0, 1]."""
    return colormaps[cmap](np.clip(values, 0.0, 1.0))[..., :3]


def overlay(frame: np.ndarray, class_map: np.ndarray, scale: float, alpha: float = ALPHA,
            cmap: str = "jet") -> np.ndarray:
    """Blend one map onto an HxWx3 frame in [0, 1]; ``scale`` is the scene maximum."""
    h, w = frame.shape[:2]
    up = upsample_map(class_map, (h, w))
    s_hat = up / scale if scale > 0 else np.zeros_like(up)
    a = np.where(up > 0, alpha, 0.0)[..., None]
    return (1.0 - a) * frame + a * colorize(s_hat, cmap)


def draw_box(img: np.ndarray, bbox, color, width: int = 2) -> np.ndarray:
    x, y, w, h = bbox
    H, W = img.shape[:2]
    x0, y0, x1, y1 = max(x, 0), max(y, 0), min(x + w, W), min(y + h, H)
    c = np.asarray(color, dtype=img.dtype)
    img[y0 : min(y0 + width, y1), x0:x1] = c
    img[max(y1 - width, y0) : y1, x0:x1] = c
    img[y0:y1, x0 : min(x0 + width, x1)] = c
    img[y0:y1, max(x1 - width, x0) : x1] = c
    return img


def draw_boxes(img: np.ndarray, ann: SceneAnnotation | None, class_id: int | None = None) -> np.ndarray:
    if ann is None:
        return img
    img = img.copy()
    for b in ann.boxes:
        if class_id is None or b.class_id == class_id:
            draw_box(img, b.bbox, GREEN if b.sounding else RED)
    return img


def scene_overlays(frame: np.ndarray, class_maps: np.ndarray, ann: SceneAnnotation | None = None,
                   cmap: str = "jet") -> list[np.ndarray]:
    """One annotated overlay per class, all on the same colour scale."""
    scale = float(np.max(class_maps)) if class_maps.size else 0.0
    return [draw_boxes(overlay(frame, m, scale, cmap=cmap), ann, k) for k, m in enumerate(class_maps)]


def composite(frame: np.ndarray, overlays: list[np.ndarray], ann: SceneAnnotation | None = None,
              gap: int = 4) -> np.ndarray:
    """Frame with every box, followed by the per-class overlays, side by side."""
    panels = [draw_boxes(frame, ann)] + overlays
    h = frame.shape[0]
    sep = np.ones((h, gap, 3))
    row = []
    for i, p in enumerate(panels):
        if i:
            row.append(sep)
        row.append(p)
    return np.concatenate(row, axis=1)


def write_scene(out_dir, scene_id: str, frame: np.ndarray, class_maps: np.ndarray,
                ann: SceneAnnotation | None = None, cmap: str = "jet") -> list[Path]:
    """Write ``<id>_class<k>.png`` for each class and ``<id>_composite.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    panels = scene_overlays(frame, class_maps, ann, cmap)
    paths = []
    for k, img in enumerate(panels):
        p = out_dir / f"{scene_id}_class{k}.png"
        write_png(p, img)
        paths.append(p)
    p = out_dir / f"{scene_id}_composite.png"
    write_png(p, composite(frame, panels, ann))
    paths.append(p)
    return paths
