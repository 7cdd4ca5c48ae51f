#!/usr/bin/env python3
"""
Pixel Geometry
Connected components, minimum-area rotated rectangles, quad warping and
background masking.

Coordinate convention: pixel (x, y) has its centre at the continuous point
(x, y); x grows to the right and y grows downwards. Angles are measured in
degrees in that frame, so a positive angle turns clockwise on screen.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

try:
    from scipy.spatial import QhullError
except ImportError:  # scipy < 1.8
    from scipy.spatial.qhull import QhullError

from .core_model import STRUCTURAL_CLASSES, ComponentClass, MaskLayer
from .errors import DimensionMismatchError, EmptyInputError

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel rectangle; x1/y1 are exclusive."""
    x: int
    y: int
    width: int
    height: int

    @property
    def x1(self) -> int:
        return self.x + self.width

    @property
    def y1(self) -> int:
        return self.y + self.height

    @property
    def area(self) -> int:
        return self.width * self.height

    def slices(self) -> Tuple[slice, slice]:
        return slice(self.y, self.y1), slice(self.x, self.x1)

    def expand(self, fraction: float, bounds: Tuple[int, int]) -> "BBox":
        """Grow by `fraction` of the box size on every side, clamped to (width, height) bounds."""
        pad_x = int(math.floor(self.width * fraction + 0.5))
        pad_y = int(math.floor(self.height * fraction + 0.5))
        x0 = max(0, self.x - pad_x)
        y0 = max(0, self.y - pad_y)
        x1 = min(bounds[0], self.x1 + pad_x)
        y1 = min(bounds[1], self.y1 + pad_y)
        return BBox(x0, y0, x1 - x0, y1 - y0)

    def contains(self, other: "BBox") -> bool:
        return (self.x <= other.x and self.y <= other.y
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def to_list(self) -> List[int]:
        return [self.x, self.y, self.width, self.height]


@dataclass(frozen=True, eq=False)
class ComponentInstance:
    """One 8-connected region of a single class."""
    class_code: int
    id: int
    pixels: np.ndarray      # (N, 2) int (x, y), raster order
    bbox: BBox

    @property
    def component(self) -> ComponentClass:
        return ComponentClass(self.class_code)

    @property
    def pixel_count(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def xs(self) -> np.ndarray:
        return self.pixels[:, 0]

    @property
    def ys(self) -> np.ndarray:
        return self.pixels[:, 1]

    def mask(self, width: int, height: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=bool)
        out[self.ys, self.xs] = True
        return out

    def values(self, raster: np.ndarray) -> np.ndarray:
        """Raster values at the instance pixels."""
        return np.asarray(raster)[self.ys, self.xs]


@dataclass(frozen=True)
class RotatedRect:
    center: Tuple[float, float]
    size: Tuple[float, float]   # (w, h), w >= h
    angle: float                # long-side direction, degrees in [-90, 90)

    @property
    def area(self) -> float:
        return self.size[0] * self.size[1]

    def to_list(self) -> List[float]:
        return [self.center[0], self.center[1], self.size[0], self.size[1], self.angle]


def _codes(mask: Union[MaskLayer, np.ndarray]) -> np.ndarray:
    return mask.codes if isinstance(mask, MaskLayer) else np.asarray(mask)


# ---------------------------------------------------------------------------
# Connected components
# ---------------------------------------------------------------------------

def connected_components(mask: Union[MaskLayer, np.ndarray], class_code: int) -> List[ComponentInstance]:
    """8-connected instances of one class, numbered by raster order of their first pixel."""
    codes = _codes(mask)
    labels, count = ndimage.label(codes == class_code, structure=EIGHT_CONNECTED)
    if count == 0:
        return []
    flat = labels.ravel()
    positive = flat[flat > 0]
    label_ids, first_seen = np.unique(positive, return_index=True)
    ordered = label_ids[np.argsort(first_seen, kind="stable")]
    boxes = ndimage.find_objects(labels)

    instances = []
    for new_id, label in enumerate(ordered):
        rows, cols = boxes[label - 1]
        ys, xs = np.nonzero(labels[rows, cols] == label)
        pixels = np.stack([xs + cols.start, ys + rows.start], axis=1).astype(np.int32)
        pixels.setflags(write=False)
        bbox = BBox(int(cols.start), int(rows.start), int(cols.stop - cols.start), int(rows.stop - rows.start))
        instances.append(ComponentInstance(int(class_code), new_id, pixels, bbox))
    return instances


def all_instances(mask: Union[MaskLayer, np.ndarray],
                  classes: Iterable[int] = STRUCTURAL_CLASSES) -> List[ComponentInstance]:
    """Instances of every listed class, grouped by class code then raster order."""
    out = []
    for class_code in classes:
        out.extend(connected_components(mask, int(class_code)))
    return out


# ---------------------------------------------------------------------------
# Minimum-area rectangle
# ---------------------------------------------------------------------------

def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull vertices of a non-degenerate 2-D point set."""
    pts = np.asarray(points, dtype=float)
    hull = ConvexHull(pts)
    return pts[hull.vertices]


def _is_degenerate(pts: np.ndarray) -> bool:
    if len(pts) < 3:
        return True
    centered = pts - pts.mean(axis=0)
    return np.linalg.matrix_rank(centered, tol=1e-9) < 2


def _canonical(center: Tuple[float, float], w: float, h: float, angle: float) -> RotatedRect:
    if h > w:
        w, h = h, w
        angle += 90.0
    period = 90.0 if math.isclose(w, h, rel_tol=0.0, abs_tol=1e-9) else 180.0
    half = period / 2.0
    angle = (angle + half) % period - half
    if abs(angle) < 1e-9:
        angle = 0.0
    return RotatedRect((float(center[0]), float(center[1])), (float(w), float(h)), float(angle))


def _collinear_rect(pts: np.ndarray) -> RotatedRect:
    """(extent + 1, 1) rectangle along the principal direction."""
    centered = pts - pts.mean(axis=0)
    if np.allclose(centered, 0.0):
        direction = np.array([1.0, 0.0])
    else:
        direction = np.linalg.svd(centered, full_matrices=False)[2][0]
    normal = np.array([-direction[1], direction[0]])
    proj = pts @ direction
    mid = (proj.min() + proj.max()) / 2.0
    center = mid * direction + float((pts @ normal).mean()) * normal
    angle = math.degrees(math.atan2(direction[1], direction[0]))
    return _canonical((center[0], center[1]), proj.max() - proj.min() + 1.0, 1.0, angle)


def min_area_rect(points: Sequence) -> RotatedRect:
    """
    Smallest-area enclosing rectangle of pixel centres (rotating calipers
    over the convex hull: the optimum has one side on a hull edge).

    The returned size includes the half-pixel border around the outermost
    centres, so a 10x4 block of pixels yields (10, 4), a single pixel
    (1, 1) and a collinear run (extent + 1, 1).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptyInputError("min_area_rect needs at least one point")
    if _is_degenerate(pts):
        return _collinear_rect(pts)
    try:
        hull = convex_hull(pts)
    except QhullError:
        return _collinear_rect(pts)

    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.arctan2(edges[:, 1], edges[:, 0])
    u = np.stack([np.cos(angles), np.sin(angles)], axis=1)      # (E, 2)
    v = np.stack([-np.sin(angles), np.cos(angles)], axis=1)
    pu = hull @ u.T                                              # (H, E)
    pv = hull @ v.T
    widths = pu.max(axis=0) - pu.min(axis=0)
    heights = pv.max(axis=0) - pv.min(axis=0)
    areas = widths * heights
    best = int(np.argmin(areas))

    mid_u = (pu[:, best].max() + pu[:, best].min()) / 2.0
    mid_v = (pv[:, best].max() + pv[:, best].min()) / 2.0
    center = mid_u * u[best] + mid_v * v[best]
    return _canonical((center[0], center[1]), widths[best] + 1.0, heights[best] + 1.0,
                      math.degrees(angles[best]))


def rect_corners(rect: RotatedRect) -> np.ndarray:
    """Corners in canonical order: top-left, top-right, bottom-right, bottom-left of the rect frame."""
    theta = math.radians(rect.angle)
    u = np.array([math.cos(theta), math.sin(theta)])
    v = np.array([-math.sin(theta), math.cos(theta)])
    c = np.array(rect.center, dtype=float)
    hw, hh = rect.size[0] / 2.0, rect.size[1] / 2.0
    return np.array([c - hw * u - hh * v,
                     c + hw * u - hh * v,
                     c + hw * u + hh * v,
                     c - hw * u + hh * v])


def rect_contains(rect: RotatedRect, points: np.ndarray, tolerance: float = 0.5) -> bool:
    theta = math.radians(rect.angle)
    rel = np.asarray(points, dtype=float).reshape(-1, 2) - np.array(rect.center)
    pu = rel @ np.array([math.cos(theta), math.sin(theta)])
    pv = rel @ np.array([-math.sin(theta), math.cos(theta)])
    return bool(np.all(np.abs(pu) <= rect.size[0] / 2.0 + tolerance)
                and np.all(np.abs(pv) <= rect.size[1] / 2.0 + tolerance))


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------

def perspective_transform(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography H with H @ [src, 1] ~ [dst, 1] for four point pairs."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (X, Y)) in enumerate(zip(src, dst)):
        a[2 * k] = [x, y, 1, 0, 0, 0, -X * x, -X * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -Y * x, -Y * y]
        b[2 * k] = X
        b[2 * k + 1] = Y
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def _fetch(raster: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    height, width = raster.shape[:2]
    valid = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    out = np.zeros(xs.shape + raster.shape[2:], dtype=float)
    out[valid] = raster[ys[valid], xs[valid]]
    return out


def sample_bilinear(raster: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear samples at continuous (x, y); samples outside the raster read as 0."""
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    if raster.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    out = ((1 - fx) * (1 - fy) * _fetch(raster, y0, x0)
           + fx * (1 - fy) * _fetch(raster, y0, x0 + 1)
           + (1 - fx) * fy * _fetch(raster, y0 + 1, x0)
           + fx * fy * _fetch(raster, y0 + 1, x0 + 1))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def sample_nearest(raster: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    out = _fetch(raster, np.floor(ys + 0.5).astype(int), np.floor(xs + 0.5).astype(int))
    return out.astype(raster.dtype)


def warp_quad(raster: np.ndarray, quad: np.ndarray, width: int, height: int, order: int = 1) -> np.ndarray:
    """
    Inverse-mapped warp of a source quadrilateral (TL, TR, BR, BL) onto a
    width x height raster. order=1 samples bilinearly, order=0 takes the
    nearest pixel (for label masks).
    """
    raster = np.asarray(raster)
    out_corners = np.array([[-0.5, -0.5], [width - 0.5, -0.5],
                            [width - 0.5, height - 0.5], [-0.5, height - 0.5]])
    h = perspective_transform(out_corners, quad)
    jj, ii = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    mapped = h @ np.stack([jj.ravel(), ii.ravel(), np.ones(jj.size)])
    xs = (mapped[0] / mapped[2]).reshape(height, width)
    ys = (mapped[1] / mapped[2]).reshape(height, width)
    if order == 0:
        return sample_nearest(raster, xs, ys)
    return sample_bilinear(raster, xs, ys)


def warp_to_square(raster: np.ndarray, rect: RotatedRect, side: int = 224, order: int = 1) -> np.ndarray:
    """Warp the rotated rectangle onto a side x side raster, corners to corners."""
    if rect.size[0] <= 0 or rect.size[1] <= 0:
        raise EmptyInputError(f"degenerate rectangle {rect}")
    return warp_quad(raster, rect_corners(rect), side, side, order=order)


# ---------------------------------------------------------------------------
# Background masking
# ---------------------------------------------------------------------------

def apply_foreground_mask(rgb: np.ndarray, foreground: Union[MaskLayer, np.ndarray],
                          fill: Tuple[int, int, int] = (0, 0, 0)) -> np.ndarray:
    """Replace every pixel outside the foreground with `fill`."""
    rgb = np.asarray(rgb)
    keep = _codes(foreground) != 0
    if keep.shape != rgb.shape[:2]:
        raise DimensionMismatchError("foreground mask", rgb.shape[:2], keep.shape)
    out = rgb.copy()
    out[~keep] = np.asarray(fill, dtype=rgb.dtype)
    return out


def pixel_majority(values: np.ndarray, n_codes: int) -> int:
    """Most frequent code; ties go to the highest code."""
    counts = np.bincount(np.asarray(values, dtype=np.int64).ravel(), minlength=n_codes)
    return int(np.flatnonzero(counts == counts.max())[-1])


def boundary(mask: np.ndarray) -> np.ndarray:
    """Positive pixels with at least one non-positive 4-neighbour."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1),
                                    border_value=0)
    return mask & ~eroded
