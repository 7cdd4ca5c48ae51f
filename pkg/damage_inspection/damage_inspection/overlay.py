#!/usr/bin/env python3
"""
Overlay rendering for structure reports: semi-transparent component colors,
a damage-state badge in the corner of every instance and outlined defect
pixels. The palette is fixed so overlays are byte-reproducible.
"""

from typing import TYPE_CHECKING

import numpy as np

from .core_model import ComponentClass, DamageState, DefectClass
from .geometry import boundary

if TYPE_CHECKING:
    from .pipeline import StructureReport

COMPONENT_PALETTE = {
    ComponentClass.BACKGROUND: (0, 0, 0),
    ComponentClass.WALL: (230, 159, 0),
    ComponentClass.BEAM: (86, 180, 233),
    ComponentClass.COLUMN: (0, 158, 115),
    ComponentClass.WINDOW_FRAME: (240, 228, 66),
    ComponentClass.WINDOW_PANE: (0, 114, 178),
    ComponentClass.BALCONY: (213, 94, 0),
    ComponentClass.SLAB: (204, 121, 167),
}
STATE_PALETTE = {
    DamageState.NO_DAMAGE: (0, 200, 0),
    DamageState.LIGHT: (255, 255, 0),
    DamageState.MODERATE: (255, 128, 0),
    DamageState.SEVERE: (255, 0, 0),
}
DEFECT_PALETTE = {
    DefectClass.CRACKING: (255, 0, 255),
    DefectClass.SPALLING: (0, 255, 255),
    DefectClass.EXPOSED_REBAR: (255, 255, 255),
}
BADGE_SIDE = 5


def _blend(canvas: np.ndarray, ys: np.ndarray, xs: np.ndarray, color, alpha: float) -> None:
    canvas[ys, xs] = (1.0 - alpha) * canvas[ys, xs] + alpha * np.asarray(color, dtype=np.float64)


def render_overlay(image: np.ndarray, report: "StructureReport", alpha: float = 0.45) -> np.ndarray:
    """Overlay raster the size of `image`; alpha 0 returns an unmodified copy."""
    image = np.asarray(image, dtype=np.uint8)
    if alpha <= 0.0:
        return image.copy()
    alpha = min(alpha, 1.0)
    canvas = image.astype(np.float64)

    for item in report.instances:
        inst = item.instance
        _blend(canvas, inst.ys, inst.xs, COMPONENT_PALETTE[inst.component], alpha)
        if item.state is None:
            continue
        # badge: top-left corner of the bbox, restricted to the instance's own pixels
        box = inst.bbox
        in_badge = (inst.xs < box.x + BADGE_SIDE) & (inst.ys < box.y + BADGE_SIDE)
        _blend(canvas, inst.ys[in_badge], inst.xs[in_badge], STATE_PALETTE[item.state], alpha)

    for defect, layer in sorted(report.defects.items()):
        ys, xs = np.nonzero(boundary(layer.codes != 0))
        _blend(canvas, ys, xs, DEFECT_PALETTE[defect], alpha)

    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
