#!/usr/bin/env python3
"""
Dataset Preparation
Seeded splitting, label audits, foreground masks, defect crops, warped
surface patches, class balancing and the feature table for the shallow
classifiers. Per-image work runs through workers.parallel_map; results are
always reduced in manifest order.
"""

import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd

from .config import (DEFAULT_FILL, DEFAULT_MIN_INSTANCE_PIXELS, DEFAULT_PADDING_FRACTION, DEFAULT_PATCH_SIDE,
                     DEFAULT_TEST_FRACTION)
from .core_model import (BINARY_TABLE, COMPONENT_TABLE, DAMAGE_TABLE, LAYER_COMPONENTS, LAYER_DAMAGE,
                         LAYER_FOREGROUND, ComponentClass, DamageState, DefectClass, ImageRecord, Manifest,
                         MaskLayer, load_record, output_path, read_mask, read_rgb, write_mask, write_rgb)
from .errors import DataError, EmptyInputError, MissingLayerError, UsageError
from .geometry import (BBox, RotatedRect, all_instances, apply_foreground_mask, min_area_rect, pixel_majority,
                       warp_to_square)
from .models import FEATURE_NAMES, FeatureVector, build_feature_vector
from .scene_generator import FixtureGenerator, SceneParameters
from .seeding import SplitMix64, derive_seed
from .workers import parallel_map

logger = logging.getLogger(__name__)

T = TypeVar("T")

CROP_INDEX_COLUMNS = ["crop_id", "source_id", "defect", "component", "instance_id",
                      "x", "y", "width", "height", "positive_pixels", "rgb_path", "label_path"]
PATCH_INDEX_COLUMNS = ["patch_id", "source_id", "component", "instance_id", "state",
                       "cx", "cy", "w", "h", "angle", "path"]
FEATURE_COLUMNS = ["source_id", "component", "instance_id", *FEATURE_NAMES, "E_s"]


# ---------------------------------------------------------------------------
# Split
# ---------------------------------------------------------------------------

def held_out_count(n: int, test_fraction: float) -> int:
    """round-half-up of n * test_fraction."""
    return int(np.floor(n * test_fraction + 0.5))


def split_dataset(manifest: Manifest, test_fraction: float = DEFAULT_TEST_FRACTION,
                  seed: int = 0) -> Tuple[Manifest, Manifest]:
    """Seeded train/test partition; both halves keep the input entry order."""
    if not 0.0 < test_fraction < 1.0:
        raise UsageError(f"test fraction must be in (0, 1), got {test_fraction}")
    if manifest.split != "unsplit":
        raise DataError(f"manifest is already a '{manifest.split}' split")
    if len(manifest) == 0:
        raise EmptyInputError("cannot split an empty manifest")
    order = list(range(len(manifest)))
    SplitMix64(derive_seed(seed, "split")).shuffle(order)
    test_rows = set(order[:held_out_count(len(manifest), test_fraction)])
    train = [e for i, e in enumerate(manifest.entries) if i not in test_rows]
    test = [e for i, e in enumerate(manifest.entries) if i in test_rows]
    logger.info("Split %d entries into %d train / %d test (seed %d)", len(manifest), len(train), len(test), seed)
    return manifest.with_entries(train, "train"), manifest.with_entries(test, "test")


# ---------------------------------------------------------------------------
# Audits
# ---------------------------------------------------------------------------

DEFECT_PAIRS = tuple(combinations(DefectClass, 2))


def _pair(a: DefectClass, b: DefectClass) -> Tuple[DefectClass, DefectClass]:
    return (a, b) if a <= b else (b, a)


@dataclass
class CollisionReport:
    """Images with at least one pixel positive in both defect layers, per unordered pair."""
    image_count: int = 0
    images: Dict[Tuple[DefectClass, DefectClass], List[str]] = field(
        default_factory=lambda: {pair: [] for pair in DEFECT_PAIRS})

    def count(self, a: DefectClass, b: DefectClass) -> int:
        return len(self.images[_pair(a, b)])

    @property
    def counts(self) -> Dict[Tuple[DefectClass, DefectClass], int]:
        return {pair: len(ids) for pair, ids in self.images.items()}

    def merge(self, other: "CollisionReport") -> "CollisionReport":
        return CollisionReport(self.image_count + other.image_count,
                               {pair: self.images[pair] + other.images[pair] for pair in DEFECT_PAIRS})

    def to_dict(self) -> dict:
        return {
            "image_count": self.image_count,
            "collisions": {f"{a.key}|{b.key}": self.count(a, b) for a, b in DEFECT_PAIRS},
            "images": {f"{a.key}|{b.key}": list(self.images[(a, b)]) for a, b in DEFECT_PAIRS},
        }


def _image_collisions(entry) -> CollisionReport:
    layers = {defect: read_mask(path, BINARY_TABLE).codes != 0 for defect, path in entry.defect_paths().items()}
    report = CollisionReport(image_count=1)
    for a, b in DEFECT_PAIRS:
        if a in layers and b in layers and np.any(layers[a] & layers[b]):
            report.images[(a, b)].append(entry.id)
    return report


def audit_collisions(manifest: Manifest, jobs: int = 1) -> CollisionReport:
    report = CollisionReport()
    for partial in parallel_map(_image_collisions, manifest.entries, jobs):
        report = report.merge(partial)
    logger.info("Collision audit over %d images: %s", report.image_count,
                {f"{a.key}|{b.key}": n for (a, b), n in report.counts.items()})
    return report


@dataclass
class ClassPixelStats:
    name: str
    fractions: List[float] = field(default_factory=list)    # one per image, manifest order

    @property
    def minimum(self) -> float:
        return min(self.fractions) if self.fractions else 0.0

    @property
    def maximum(self) -> float:
        return max(self.fractions) if self.fractions else 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.fractions)) if self.fractions else 0.0

    @property
    def zero_label_images(self) -> int:
        return sum(1 for f in self.fractions if f == 0.0)

    def to_dict(self) -> dict:
        return {"min": self.minimum, "max": self.maximum, "mean": self.mean,
                "zero_label_images": self.zero_label_images}


@dataclass
class PixelStats:
    layer: str
    image_count: int
    classes: "OrderedDict[str, ClassPixelStats]"

    def to_dict(self) -> dict:
        return {"layer": self.layer, "image_count": self.image_count,
                "classes": {name: stats.to_dict() for name, stats in self.classes.items()}}


STATS_LAYERS = (LAYER_COMPONENTS, "defects", LAYER_DAMAGE, LAYER_FOREGROUND)


def _image_pixel_counts(job) -> Tuple[int, Dict[str, int]]:
    entry, layer = job
    if layer == "defects":
        paths = entry.defect_paths()
        counts, area = {}, None
        for defect in DefectClass:
            if defect in paths:
                codes = read_mask(paths[defect], BINARY_TABLE).codes
                area = codes.size
                counts[defect.display_name] = int(np.count_nonzero(codes))
            else:
                counts[defect.display_name] = 0
        if area is None:
            rgb = read_rgb(entry.rgb)
            area = rgb.shape[0] * rgb.shape[1]
        return area, counts
    path = entry.layer_paths().get(layer)
    if path is None:
        raise MissingLayerError(layer, f"entry '{entry.id}'")
    table = {LAYER_COMPONENTS: COMPONENT_TABLE, LAYER_DAMAGE: DAMAGE_TABLE, LAYER_FOREGROUND: BINARY_TABLE}[layer]
    codes = read_mask(path, table).codes
    tally = np.bincount(codes.ravel(), minlength=256)
    return codes.size, {table.name_of(c): int(tally[c]) for c in table.codes}


def class_pixel_stats(manifest: Manifest, layer: str = LAYER_COMPONENTS, jobs: int = 1) -> PixelStats:
    """
    Per-class labeled-pixel fraction of every image. `layer` is one of
    components, damage, foreground or "defects" (the three binary defect
    layers, a missing one counting as zero labeled pixels).
    """
    if layer not in STATS_LAYERS:
        raise UsageError(f"unknown stats layer '{layer}' (expected one of {STATS_LAYERS})")
    results = parallel_map(_image_pixel_counts, [(e, layer) for e in manifest.entries], jobs)
    classes: "OrderedDict[str, ClassPixelStats]" = OrderedDict()
    for area, counts in results:
        for name, count in counts.items():
            classes.setdefault(name, ClassPixelStats(name)).fractions.append(count / area)
    return PixelStats(layer, len(results), classes)


# ---------------------------------------------------------------------------
# Foreground masks and background removal
# ---------------------------------------------------------------------------

def foreground_from_components(component_mask: MaskLayer) -> MaskLayer:
    return MaskLayer((component_mask.codes != ComponentClass.BACKGROUND).astype(np.uint8), BINARY_TABLE)


def _write_foreground(job) -> str:
    entry, out_dir = job
    if not entry.components:
        raise MissingLayerError(LAYER_COMPONENTS, f"entry '{entry.id}'")
    path = os.path.abspath(os.path.join(out_dir, "foreground", f"{entry.id}.png"))
    write_mask(path, foreground_from_components(read_mask(entry.components, COMPONENT_TABLE)))
    return path


def build_foreground_masks(manifest: Manifest, out_dir: str, jobs: int = 1) -> Manifest:
    """Binary foreground (component != Background) for every entry, added to the manifest."""
    paths = parallel_map(_write_foreground, [(e, out_dir) for e in manifest.entries], jobs)
    entries = [_replace_entry(e, foreground=p) for e, p in zip(manifest.entries, paths)]
    logger.info("Built %d foreground masks under %s", len(entries), out_dir)
    return manifest.with_entries(entries)


def _foreground_of(record: ImageRecord) -> MaskLayer:
    if record.foreground_mask is not None:
        return record.foreground_mask
    if record.component_mask is not None:
        return foreground_from_components(record.component_mask)
    raise MissingLayerError(LAYER_FOREGROUND, f"entry '{record.id}'")


def _write_masked(job) -> str:
    entry, out_dir, fill = job
    record = load_record(entry)
    path = os.path.abspath(os.path.join(out_dir, "rgb", f"{entry.id}.png"))
    write_rgb(path, apply_foreground_mask(record.rgb, _foreground_of(record), fill))
    return path


def mask_background(manifest: Manifest, out_dir: str, fill: Tuple[int, int, int] = DEFAULT_FILL,
                    jobs: int = 1) -> Manifest:
    """Background-removed RGB copies; the returned manifest points its rgb layer at them."""
    paths = parallel_map(_write_masked, [(e, out_dir, tuple(fill)) for e in manifest.entries], jobs)
    return manifest.with_entries([_replace_entry(e, rgb=p) for e, p in zip(manifest.entries, paths)])


def _replace_entry(entry, **changes):
    return replace(entry, **changes)


# ---------------------------------------------------------------------------
# Defect crops and surface patches
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DefectCrop:
    source_id: str
    defect: DefectClass
    component: ComponentClass
    instance_id: int
    rgb: np.ndarray
    label: MaskLayer
    origin: BBox

    @property
    def crop_id(self) -> str:
        return f"{self.source_id}_{self.component.name.lower()}{self.instance_id:03d}_{self.defect.key}"

    @property
    def positive_pixels(self) -> int:
        return int(np.count_nonzero(self.label.codes))


def _require(record: ImageRecord, layer: Optional[MaskLayer], name: str) -> MaskLayer:
    if layer is None:
        raise MissingLayerError(name, f"entry '{record.id}'")
    return layer


def extract_defect_crops(record: ImageRecord, padding_fraction: float = DEFAULT_PADDING_FRACTION,
                         min_instance_pixels: int = DEFAULT_MIN_INSTANCE_PIXELS) -> List[DefectCrop]:
    """
    One candidate per (component instance x defect class): the instance bbox
    padded by `padding_fraction` per side and clamped to the image. Candidates
    without a positive defect pixel are dropped.
    """
    components = _require(record, record.component_mask, LAYER_COMPONENTS)
    crops = []
    for instance in all_instances(components):
        if instance.pixel_count < min_instance_pixels:
            continue
        box = instance.bbox.expand(padding_fraction, record.size)
        for defect in DefectClass:
            layer = record.defect_masks.get(defect)
            if layer is None:
                continue
            label = layer.codes[box.slices()]
            if not label.any():
                continue
            crops.append(DefectCrop(record.id, defect, instance.component, instance.id,
                                    record.rgb[box.slices()], MaskLayer(label, BINARY_TABLE), box))
    return crops


@dataclass(frozen=True, eq=False)
class SurfacePatch:
    source_id: str
    component: ComponentClass
    instance_id: int
    rgb: np.ndarray
    state: DamageState
    rect: RotatedRect

    @property
    def patch_id(self) -> str:
        return f"{self.source_id}_{self.component.name.lower()}{self.instance_id:03d}"


def extract_surface_patches(record: ImageRecord, side: int = DEFAULT_PATCH_SIDE,
                            min_instance_pixels: int = DEFAULT_MIN_INSTANCE_PIXELS,
                            mask_background: bool = True) -> List[SurfacePatch]:
    """
    Min-area rotated rectangle of every instance warped to side x side, labeled
    with the pixel-majority damage state (ties toward the more severe state).
    Background is blacked out first when a foreground is available.
    """
    components = _require(record, record.component_mask, LAYER_COMPONENTS)
    damage = _require(record, record.damage_mask, LAYER_DAMAGE)
    source = record.rgb
    if mask_background:
        source = apply_foreground_mask(record.rgb, _foreground_of(record))
    patches = []
    for instance in all_instances(components):
        if instance.pixel_count < min_instance_pixels:
            logger.debug("%s: skipping %s instance %d (%d px)", record.id, instance.component.display_name,
                         instance.id, instance.pixel_count)
            continue
        rect = min_area_rect(instance.pixels)
        state = DamageState(pixel_majority(instance.values(damage.codes), len(DAMAGE_TABLE)))
        patches.append(SurfacePatch(record.id, instance.component, instance.id,
                                    warp_to_square(source, rect, side), state, rect))
    return patches


# ---------------------------------------------------------------------------
# Balancing
# ---------------------------------------------------------------------------

def default_label(item) -> Hashable:
    """Label of an item: its `label` or `state` attribute, else the item itself."""
    for attr in ("label", "state"):
        if hasattr(item, attr):
            return getattr(item, attr)
    return item


def _groups(items: Sequence[T], label: Callable[[T], Hashable]) -> "OrderedDict[Hashable, List[int]]":
    groups: Dict[Hashable, List[int]] = {}
    for i, item in enumerate(items):
        groups.setdefault(label(item), []).append(i)
    return OrderedDict(sorted(groups.items(), key=lambda kv: kv[0]))


def balance_by_undersampling(items: Sequence[T], seed: int,
                             label: Callable[[T], Hashable] = default_label) -> List[T]:
    """Every class cut to the minority count by seeded sampling without replacement; input order kept."""
    items = list(items)
    if not items:
        raise EmptyInputError("nothing to balance")
    groups = _groups(items, label)
    target = min(len(rows) for rows in groups.values())
    rng = SplitMix64(derive_seed(seed, "undersample"))
    keep = set()
    for rows in groups.values():
        keep.update(rows[i] for i in rng.sample_indices(len(rows), target))
    logger.info("Undersampled %d items in %d classes to %d per class", len(items), len(groups), target)
    return [item for i, item in enumerate(items) if i in keep]


def balance_by_oversampling(items: Sequence[T], seed: int,
                            label: Callable[[T], Hashable] = default_label) -> List[T]:
    """Every class raised to the majority count with seeded draws with replacement, appended after the input."""
    items = list(items)
    if not items:
        raise EmptyInputError("nothing to balance")
    groups = _groups(items, label)
    target = max(len(rows) for rows in groups.values())
    rng = SplitMix64(derive_seed(seed, "oversample"))
    extra = []
    for rows in groups.values():
        extra.extend(items[i] for i in rng.choices(rows, target - len(rows)))
    return items + extra


# ---------------------------------------------------------------------------
# Feature vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureRow:
    source_id: str
    component: ComponentClass
    instance_id: int
    features: FeatureVector


def record_feature_rows(record: ImageRecord,
                        min_instance_pixels: int = DEFAULT_MIN_INSTANCE_PIXELS) -> List[FeatureRow]:
    components = _require(record, record.component_mask, LAYER_COMPONENTS)
    damage = _require(record, record.damage_mask, LAYER_DAMAGE)
    rows = []
    for instance in all_instances(components):
        if instance.pixel_count < min_instance_pixels:
            continue
        state = DamageState(pixel_majority(instance.values(damage.codes), len(DAMAGE_TABLE)))
        fv = build_feature_vector(instance, record.area, record.defect_masks, label=state)
        rows.append(FeatureRow(record.id, instance.component, instance.id, fv))
    return rows


def _entry_feature_rows(job) -> List[FeatureRow]:
    entry, min_instance_pixels = job
    return record_feature_rows(load_record(entry), min_instance_pixels)


def feature_rows(manifest: Manifest, min_instance_pixels: int = DEFAULT_MIN_INSTANCE_PIXELS,
                 jobs: int = 1) -> List[FeatureRow]:
    chunks = parallel_map(_entry_feature_rows, [(e, min_instance_pixels) for e in manifest.entries], jobs)
    return [row for chunk in chunks for row in chunk]


def collect_feature_vectors(manifest: Manifest, min_instance_pixels: int = DEFAULT_MIN_INSTANCE_PIXELS,
                            jobs: int = 1) -> List[FeatureVector]:
    """Labeled feature vectors of every ground-truth instance, in manifest then instance order."""
    return [row.features for row in feature_rows(manifest, min_instance_pixels, jobs)]


def write_feature_table(rows: Sequence[FeatureRow], path: str) -> pd.DataFrame:
    table = pd.DataFrame([{"source_id": r.source_id, "component": r.component.display_name,
                           "instance_id": r.instance_id, **r.features.to_dict()} for r in rows],
                         columns=FEATURE_COLUMNS)
    with output_path(path):
        table.to_csv(path, index=False)
    logger.info("Wrote %d feature rows to %s", len(table), path)
    return table


def read_feature_table(path: str) -> List[FeatureVector]:
    if not os.path.isfile(path):
        raise MissingLayerError("features", path)
    try:
        table = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError, OSError) as exc:
        raise DataError(f"{path}: not a feature table ({exc})") from None
    missing = [c for c in FEATURE_NAMES if c not in table.columns]
    if missing:
        raise DataError(f"{path}: missing feature columns {missing}")
    vectors = []
    for number, row in enumerate(table.itertuples(index=False), start=2):
        values = row._asdict()
        label = values.get("E_s")
        try:
            vectors.append(FeatureVector(*(float(values[c]) for c in FEATURE_NAMES),
                                         label=None if pd.isna(label) else DamageState(int(label))))
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}:{number}: bad feature row ({exc})") from None
    return vectors


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

def _crop_rows(crops: Sequence[DefectCrop], out_dir: str) -> List[dict]:
    rows = []
    for crop in crops:
        rgb_path = os.path.join(out_dir, "rgb", crop.defect.key, f"{crop.crop_id}.png")
        label_path = os.path.join(out_dir, "labels", crop.defect.key, f"{crop.crop_id}.png")
        write_rgb(rgb_path, crop.rgb)
        write_mask(label_path, crop.label)
        rows.append({"crop_id": crop.crop_id, "source_id": crop.source_id, "defect": crop.defect.key,
                     "component": crop.component.display_name, "instance_id": crop.instance_id,
                     "x": crop.origin.x, "y": crop.origin.y, "width": crop.origin.width,
                     "height": crop.origin.height, "positive_pixels": crop.positive_pixels,
                     "rgb_path": os.path.relpath(rgb_path, out_dir).replace(os.sep, "/"),
                     "label_path": os.path.relpath(label_path, out_dir).replace(os.sep, "/")})
    return rows


def _patch_rows(patches: Sequence[SurfacePatch], out_dir: str) -> List[dict]:
    rows = []
    for patch in patches:
        path = os.path.join(out_dir, patch.state.display_name, f"{patch.patch_id}.png")
        write_rgb(path, patch.rgb)
        cx, cy, w, h, angle = patch.rect.to_list()
        rows.append({"patch_id": patch.patch_id, "source_id": patch.source_id,
                     "component": patch.component.display_name, "instance_id": patch.instance_id,
                     "state": patch.state.display_name, "cx": cx, "cy": cy, "w": w, "h": h, "angle": angle,
                     "path": os.path.relpath(path, out_dir).replace(os.sep, "/")})
    return rows


def _write_index(rows: List[dict], columns: List[str], path: str) -> pd.DataFrame:
    table = pd.DataFrame(rows, columns=columns)
    with output_path(path):
        table.to_csv(path, index=False)
    return table


def write_defect_crops(crops: Sequence[DefectCrop], out_dir: str) -> pd.DataFrame:
    return _write_index(_crop_rows(crops, out_dir), CROP_INDEX_COLUMNS, os.path.join(out_dir, "index.csv"))


def write_surface_patches(patches: Sequence[SurfacePatch], out_dir: str) -> pd.DataFrame:
    return _write_index(_patch_rows(patches, out_dir), PATCH_INDEX_COLUMNS, os.path.join(out_dir, "index.csv"))


def _prepare_crops_job(job) -> List[dict]:
    entry, out_dir, padding_fraction, min_instance_pixels = job
    return _crop_rows(extract_defect_crops(load_record(entry), padding_fraction, min_instance_pixels), out_dir)


def _prepare_patches_job(job) -> List[dict]:
    entry, out_dir, side, min_instance_pixels, masked = job
    return _patch_rows(extract_surface_patches(load_record(entry), side, min_instance_pixels, masked), out_dir)


def prepare_defect_crops(manifest: Manifest, out_dir: str, padding_fraction: float = DEFAULT_PADDING_FRACTION,
                         min_instance_pixels: int = DEFAULT_MIN_INSTANCE_PIXELS, jobs: int = 1) -> pd.DataFrame:
    """Crops of every entry written image by image, plus one index CSV."""
    chunks = parallel_map(_prepare_crops_job,
                          [(e, out_dir, padding_fraction, min_instance_pixels) for e in manifest.entries], jobs)
    table = _write_index([r for chunk in chunks for r in chunk], CROP_INDEX_COLUMNS,
                         os.path.join(out_dir, "index.csv"))
    logger.info("Defect crops per class: %s", table["defect"].value_counts().to_dict())
    return table


def prepare_surface_patches(manifest: Manifest, out_dir: str, side: int = DEFAULT_PATCH_SIDE,
                            min_instance_pixels: int = DEFAULT_MIN_INSTANCE_PIXELS, mask_background: bool = True,
                            jobs: int = 1) -> pd.DataFrame:
    chunks = parallel_map(_prepare_patches_job,
                          [(e, out_dir, side, min_instance_pixels, mask_background) for e in manifest.entries], jobs)
    table = _write_index([r for chunk in chunks for r in chunk], PATCH_INDEX_COLUMNS,
                         os.path.join(out_dir, "index.csv"))
    logger.info("Surface patches per state: %s", table["state"].value_counts().to_dict())
    return table


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

def generate_fixture_dataset(params: SceneParameters, seed: int, out_dir: str) -> Manifest:
    """Miniature dataset with every layer, a manifest and a sidecar inventory."""
    return FixtureGenerator(params, seed).generate(out_dir)
