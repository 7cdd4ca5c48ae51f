#!/usr/bin/env python3
"""
Fixture Scene Generator
Generates miniature inspection scenes (RGB plus every label layer) with a
sidecar inventory of what was planted, for oracle-driven tests and demos.

Scene layout: the image is cut into square cells; each occupied cell holds
one structural component kept at least `margin` pixels away from the cell
border, so planted components never touch and each one is exactly one
8-connected instance. Defects are drawn only inside the interior of
axis-aligned walls, beams, columns, balconies and slabs:

    crack     1 px horizontal line in the left half
    spalling  filled block in the right half
    rebar     1 px vertical line inside the spalling block

A crack planted "through" the spalling block is extended to the right so
it overlaps the spalling (and the rebar when present). Damage states
follow a fixed rule: rebar -> Severe, spalling -> Moderate, crack ->
Light, otherwise NoDamage, painted uniformly over the instance.
"""

import logging
import math
import os
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core_model import (DEFECT_KEYS, ComponentClass, DamageState, DefectClass, Manifest, ManifestEntry,
                         read_json, save_manifest, write_json, write_mask, write_rgb)
from .errors import DataError, UsageError
from .seeding import SplitMix64, derive_seed

logger = logging.getLogger(__name__)

SIDECAR_NAME = "fixture.json"
MANIFEST_NAME = "manifest.json"

DEFECT_HOSTS = (ComponentClass.WALL, ComponentClass.BEAM, ComponentClass.COLUMN,
                ComponentClass.BALCONY, ComponentClass.SLAB)

CLASS_COLORS = {
    ComponentClass.WALL: (196, 180, 150),
    ComponentClass.BEAM: (150, 150, 160),
    ComponentClass.COLUMN: (170, 165, 155),
    ComponentClass.WINDOW_FRAME: (90, 70, 50),
    ComponentClass.WINDOW_PANE: (120, 170, 210),
    ComponentClass.BALCONY: (180, 120, 100),
    ComponentClass.SLAB: (140, 135, 120),
}
DEFECT_COLORS = {
    DefectClass.CRACKING: (30, 30, 30),
    DefectClass.SPALLING: (110, 100, 95),
    DefectClass.EXPOSED_REBAR: (140, 60, 30),
}


def damage_rule(defects) -> DamageState:
    """Damage state implied by the set of defects planted on one instance."""
    if DefectClass.EXPOSED_REBAR in defects:
        return DamageState.SEVERE
    if DefectClass.SPALLING in defects:
        return DamageState.MODERATE
    if DefectClass.CRACKING in defects:
        return DamageState.LIGHT
    return DamageState.NO_DAMAGE


def pair_key(a: DefectClass, b: DefectClass) -> str:
    first, second = sorted((a, b))
    return f"{first.key}|{second.key}"


@dataclass(frozen=True)
class SceneParameters:
    images: int = 12
    width: int = 64
    height: int = 64
    cell: int = 16
    margin: int = 2
    fill_probability: float = 0.8
    defect_density: float = 0.6     # chance that a defect host instance is damaged
    collision_rate: float = 0.5     # chance that a crack is drawn through the spalling block
    rotated_fraction: float = 0.2
    clutter: int = 3                # background rectangles painted into the RGB only
    noise: int = 4                  # +/- RGB noise amplitude

    def __post_init__(self):
        if self.images < 1:
            raise UsageError("a fixture needs at least one image")
        if self.cell - 2 * self.margin < 8:
            raise UsageError("cell minus margins must leave at least 8 px for a component")
        if self.width < self.cell or self.height < self.cell:
            raise UsageError("image must hold at least one cell")
        for name in ("fill_probability", "defect_density", "collision_rate", "rotated_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise UsageError(f"{name} must be in [0, 1]")


class FixtureGenerator:
    def __init__(self, params: SceneParameters, seed: int):
        self.params = params
        self.seed = int(seed)

    # -- drawing ----------------------------------------------------------

    def _rotated_pixels(self, rng: SplitMix64, x0: int, y0: int, side: int) -> Optional[np.ndarray]:
        """Pixel-centre raster of a rotated bar centred in the cell box, or None if too small."""
        length = rng.between(side - 3, side - 1)
        thickness = rng.between(4, 6)
        angle = math.radians(rng.between(15, 75) * (1 if rng.below(2) else -1))
        cx = x0 + (side - 1) / 2.0
        cy = y0 + (side - 1) / 2.0
        ys, xs = np.mgrid[y0:y0 + side, x0:x0 + side]
        u = (xs - cx) * math.cos(angle) + (ys - cy) * math.sin(angle)
        v = -(xs - cx) * math.sin(angle) + (ys - cy) * math.cos(angle)
        inside = (np.abs(u) <= length / 2.0 - 0.5) & (np.abs(v) <= thickness / 2.0 - 0.5)
        if np.count_nonzero(inside) < 16:
            return None
        return np.stack([xs[inside], ys[inside]], axis=1)

    def _plant_defects(self, rng: SplitMix64, layers: Dict[DefectClass, np.ndarray],
                       x: int, y: int, w: int, h: int) -> Tuple[List[DefectClass], List[str]]:
        severity = rng.between(1, 3)
        through = rng.random() < self.params.collision_rate
        planted = []
        mid_x = x + w // 2
        if severity >= 2:
            layers[DefectClass.SPALLING][y + 1:y + h - 1, mid_x:x + w - 1] = 1
            planted.append(DefectClass.SPALLING)
        if severity == 3:
            layers[DefectClass.EXPOSED_REBAR][y + 2:y + h - 2, mid_x + 1] = 1
            planted.append(DefectClass.EXPOSED_REBAR)
        if severity == 1 or through:
            end = mid_x + 2 if (through and severity >= 2) else mid_x
            layers[DefectClass.CRACKING][y + h // 2, x + 1:end] = 1
            planted.append(DefectClass.CRACKING)
        planted.sort()
        collisions = []
        if severity >= 2 and through:
            collisions.append(pair_key(DefectClass.CRACKING, DefectClass.SPALLING))
            if severity == 3:
                collisions.append(pair_key(DefectClass.CRACKING, DefectClass.EXPOSED_REBAR))
        if severity == 3:
            collisions.append(pair_key(DefectClass.SPALLING, DefectClass.EXPOSED_REBAR))
        return planted, sorted(collisions)

    def generate_scene(self, index: int) -> dict:
        """Rasters and inventory of one scene."""
        p = self.params
        rng = SplitMix64(derive_seed(self.seed, "fixture", index))
        components = np.zeros((p.height, p.width), dtype=np.uint8)
        defects = {d: np.zeros((p.height, p.width), dtype=np.uint8) for d in DefectClass}
        damage = np.zeros((p.height, p.width), dtype=np.uint8)
        rgb = np.zeros((p.height, p.width, 3), dtype=np.int64)
        rgb[:] = (rng.between(60, 110), rng.between(90, 140), rng.between(60, 110))

        for _ in range(p.clutter):
            cw, ch = rng.between(4, p.width // 2), rng.between(4, p.height // 2)
            cx, cy = rng.below(p.width - cw + 1), rng.below(p.height - ch + 1)
            rgb[cy:cy + ch, cx:cx + cw] = (rng.between(40, 230), rng.between(40, 230), rng.between(40, 230))

        instances = []
        side = p.cell - 2 * p.margin
        classes = list(ComponentClass)[1:]
        for row in range(p.height // p.cell):
            for col in range(p.width // p.cell):
                if rng.random() >= p.fill_probability:
                    continue
                x0 = col * p.cell + p.margin
                y0 = row * p.cell + p.margin
                component = classes[rng.below(len(classes))]
                if component == ComponentClass.WINDOW_PANE:
                    component = ComponentClass.WINDOW_FRAME

                if component in DEFECT_HOSTS and rng.random() < p.rotated_fraction:
                    pixels = self._rotated_pixels(rng, x0, y0, side)
                    if pixels is not None:
                        components[pixels[:, 1], pixels[:, 0]] = component
                        rgb[pixels[:, 1], pixels[:, 0]] = CLASS_COLORS[component]
                        instances.append({"class": int(component), "rotated": True,
                                          "pixels": int(len(pixels)), "defects": [], "collisions": [],
                                          "state": int(DamageState.NO_DAMAGE)})
                        continue

                w, h = rng.between(8, side), rng.between(8, side)
                x, y = x0 + rng.below(side - w + 1), y0 + rng.below(side - h + 1)
                if component == ComponentClass.WINDOW_FRAME:
                    components[y:y + h, x:x + w] = ComponentClass.WINDOW_FRAME
                    components[y + 2:y + h - 2, x + 2:x + w - 2] = ComponentClass.WINDOW_PANE
                    rgb[y:y + h, x:x + w] = CLASS_COLORS[ComponentClass.WINDOW_FRAME]
                    rgb[y + 2:y + h - 2, x + 2:x + w - 2] = CLASS_COLORS[ComponentClass.WINDOW_PANE]
                    ring = w * h - (w - 4) * (h - 4)
                    for cls, count in ((ComponentClass.WINDOW_FRAME, ring),
                                       (ComponentClass.WINDOW_PANE, (w - 4) * (h - 4))):
                        instances.append({"class": int(cls), "rotated": False, "bbox": [x, y, w, h],
                                          "pixels": count, "defects": [], "collisions": [],
                                          "state": int(DamageState.NO_DAMAGE)})
                    instances[-1]["bbox"] = [x + 2, y + 2, w - 4, h - 4]
                    continue

                components[y:y + h, x:x + w] = component
                rgb[y:y + h, x:x + w] = CLASS_COLORS[component]
                planted, collisions = [], []
                if component in DEFECT_HOSTS and rng.random() < p.defect_density:
                    planted, collisions = self._plant_defects(rng, defects, x, y, w, h)
                state = damage_rule(planted)
                damage[y:y + h, x:x + w] = state
                instances.append({"class": int(component), "rotated": False, "bbox": [x, y, w, h],
                                  "pixels": w * h, "defects": [d.key for d in planted],
                                  "collisions": collisions, "state": int(state)})

        for defect in DefectClass:
            rgb[defects[defect] != 0] = DEFECT_COLORS[defect]
        noise = rng.integers(2 * p.noise + 1, rgb.size).reshape(rgb.shape) - p.noise
        rgb = np.clip(rgb + noise, 0, 255).astype(np.uint8)

        return {
            "id": f"scene_{index:03d}",
            "rgb": rgb,
            "components": components,
            "defects": defects,
            "damage": damage,
            "foreground": (components != 0).astype(np.uint8),
            "instances": instances,
        }

    # -- output -----------------------------------------------------------

    @staticmethod
    def _inventory(scene: dict) -> dict:
        pixel_counts = {
            "components": {ComponentClass(c).display_name: int(np.count_nonzero(scene["components"] == c))
                           for c in ComponentClass},
            "defects": {d.key: int(np.count_nonzero(scene["defects"][d])) for d in DefectClass},
            "damage": {DamageState(s).display_name: int(np.count_nonzero(scene["damage"] == s))
                       for s in DamageState},
            "foreground": int(np.count_nonzero(scene["foreground"])),
        }
        collisions = sorted({key for inst in scene["instances"] for key in inst["collisions"]})
        return {"id": scene["id"], "instances": scene["instances"], "pixel_counts": pixel_counts,
                "collisions": collisions}

    def save_scene(self, scene: dict, out_dir: str) -> ManifestEntry:
        image_id = scene["id"]
        paths = {"rgb": os.path.join(out_dir, "rgb", f"{image_id}.png"),
                 "components": os.path.join(out_dir, "components", f"{image_id}.png"),
                 "damage": os.path.join(out_dir, "damage", f"{image_id}.png"),
                 "foreground": os.path.join(out_dir, "foreground", f"{image_id}.png")}
        write_rgb(paths["rgb"], scene["rgb"])
        for layer in ("components", "damage", "foreground"):
            write_mask(paths[layer], scene[layer])
        defect_paths = []
        for defect in DefectClass:
            path = os.path.join(out_dir, "defects", defect.key, f"{image_id}.png")
            write_mask(path, scene["defects"][defect])
            defect_paths.append((defect.key, os.path.abspath(path)))
        return ManifestEntry(id=image_id, rgb=os.path.abspath(paths["rgb"]),
                             components=os.path.abspath(paths["components"]),
                             defects=tuple(defect_paths),
                             damage=os.path.abspath(paths["damage"]),
                             foreground=os.path.abspath(paths["foreground"]))

    def generate(self, out_dir: str) -> Manifest:
        """Write every scene, the manifest and the sidecar inventory under out_dir."""
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create fixture directory {out_dir}: {exc}") from None
        if not os.access(out_dir, os.W_OK):
            raise DataError(f"fixture directory {out_dir} is not writable")

        entries, inventories = [], []
        for index in range(self.params.images):
            scene = self.generate_scene(index)
            entries.append(self.save_scene(scene, out_dir))
            inventories.append(self._inventory(scene))
        manifest = Manifest(tuple(entries), "unsplit")
        save_manifest(manifest, os.path.join(out_dir, MANIFEST_NAME))

        sidecar = {"seed": self.seed, "parameters": asdict(self.params), "images": inventories,
                   "totals": self.totals(inventories)}
        write_json(os.path.join(out_dir, SIDECAR_NAME), sidecar)
        logger.info("Fixture of %d scenes written to %s", len(entries), out_dir)
        return manifest

    @staticmethod
    def totals(inventories: List[dict]) -> dict:
        instances = [inst for image in inventories for inst in image["instances"]]
        collision_images = {pair_key(a, b): 0 for a, b in combinations(DefectClass, 2)}
        for image in inventories:
            for key in image["collisions"]:
                collision_images[key] += 1
        return {
            "images": len(inventories),
            "instances": len(instances),
            "defect_instances": {key: sum(key in inst["defects"] for inst in instances)
                                 for key in DEFECT_KEYS.values()},
            "collision_images": collision_images,
            "states": {s.display_name: sum(inst["state"] == int(s) for inst in instances) for s in DamageState},
        }


def load_sidecar(fixture_dir: str) -> dict:
    return read_json(os.path.join(fixture_dir, SIDECAR_NAME), "fixture inventory")
