#!/usr/bin/env python3
"""
Core Model
Class code tables, mask/image records and dataset manifests shared by every
other module. Rasters are numpy arrays; everything here is read-only once
constructed so records can be handed to parallel workers freely.
"""

import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Dict, Iterable, Iterator, Mapping, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import (CodeTableError, DataError, DimensionMismatchError, DuplicateIdError, MissingLayerError,
                     OutputError, UnknownImageError, UnreadableRasterError)

logger = logging.getLogger(__name__)


class ComponentClass(IntEnum):
    BACKGROUND = 0
    WALL = 1
    BEAM = 2
    COLUMN = 3
    WINDOW_FRAME = 4
    WINDOW_PANE = 5
    BALCONY = 6
    SLAB = 7

    @property
    def display_name(self) -> str:
        return "".join(part.capitalize() for part in self.name.split("_"))


class DefectClass(IntEnum):
    CRACKING = 1
    SPALLING = 2
    EXPOSED_REBAR = 3

    @property
    def display_name(self) -> str:
        return "".join(part.capitalize() for part in self.name.split("_"))

    @property
    def key(self) -> str:
        """Short key used in manifests, adapter directories and CLI flags."""
        return DEFECT_KEYS[self]

    @classmethod
    def from_key(cls, key: str) -> "DefectClass":
        for defect, defect_key in DEFECT_KEYS.items():
            if defect_key == key:
                return defect
        raise KeyError(f"unknown defect key '{key}'")


class DamageState(IntEnum):
    """Ordered by severity; ties anywhere in the package break toward the higher value."""
    NO_DAMAGE = 0
    LIGHT = 1
    MODERATE = 2
    SEVERE = 3

    @property
    def display_name(self) -> str:
        return "".join(part.capitalize() for part in self.name.split("_"))


DEFECT_KEYS = {
    DefectClass.CRACKING: "cracking",
    DefectClass.SPALLING: "spalling",
    DefectClass.EXPOSED_REBAR: "rebar",
}

# Non-background component classes, in code order
STRUCTURAL_CLASSES = tuple(c for c in ComponentClass if c != ComponentClass.BACKGROUND)


@dataclass(frozen=True)
class CodeTable:
    """Named set of integer codes that a single-channel raster may hold."""
    name: str
    codes: Tuple[int, ...]
    names: Tuple[str, ...]

    def __post_init__(self):
        if len(self.codes) != len(self.names):
            raise ValueError("codes and names must have equal length")
        if len(set(self.codes)) != len(self.codes) or list(self.codes) != sorted(self.codes):
            raise ValueError(f"codes of table '{self.name}' must be unique and ascending")

    def __len__(self) -> int:
        return len(self.codes)

    def code_of(self, name: str) -> int:
        try:
            return self.codes[self.names.index(name)]
        except ValueError:
            raise KeyError(f"'{name}' is not a class of table '{self.name}'") from None

    def name_of(self, code: int) -> str:
        try:
            return self.names[self.codes.index(int(code))]
        except ValueError:
            raise KeyError(f"code {code} is not in table '{self.name}'") from None

    def index_of(self, code: int) -> int:
        return self.codes.index(int(code))

    def validate(self, codes: np.ndarray, what: str = "mask") -> None:
        """Exhaustive scan: raise CodeTableError if any pixel is outside the table."""
        allowed = np.zeros(256, dtype=bool)
        allowed[list(self.codes)] = True
        bad = ~allowed[codes]
        if bad.any():
            found = sorted(int(c) for c in np.unique(codes[bad]))
            raise CodeTableError(f"{what} holds codes {found} outside table '{self.name}' {list(self.codes)}")


COMPONENT_TABLE = CodeTable("components", tuple(int(c) for c in ComponentClass),
                            tuple(c.display_name for c in ComponentClass))
DEFECT_TABLE = CodeTable("defects", tuple(int(d) for d in DefectClass),
                         tuple(d.display_name for d in DefectClass))
DAMAGE_TABLE = CodeTable("damage", tuple(int(s) for s in DamageState),
                         tuple(s.display_name for s in DamageState))
BINARY_TABLE = CodeTable("binary", (0, 1), ("Background", "Foreground"))

TABLES: Dict[str, CodeTable] = {t.name: t for t in (COMPONENT_TABLE, DEFECT_TABLE, DAMAGE_TABLE, BINARY_TABLE)}

# Manifest layer name -> raster code table
LAYER_COMPONENTS = "components"
LAYER_DAMAGE = "damage"
LAYER_FOREGROUND = "foreground"
LAYER_TABLES: Dict[str, CodeTable] = {
    LAYER_COMPONENTS: COMPONENT_TABLE,
    LAYER_DAMAGE: DAMAGE_TABLE,
    LAYER_FOREGROUND: BINARY_TABLE,
    **{key: BINARY_TABLE for key in DEFECT_KEYS.values()},
}

SPLIT_TAGS = ("unsplit", "train", "test")


def _readonly(array: np.ndarray, dtype=np.uint8) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class MaskLayer:
    """Single-channel integer-coded label raster aligned to an image."""
    codes: np.ndarray
    table: CodeTable = COMPONENT_TABLE

    def __post_init__(self):
        if np.ndim(self.codes) != 2:
            raise DimensionMismatchError("mask layer", "2-D raster", np.shape(self.codes))
        raw = np.asarray(self.codes)
        if raw.dtype != np.uint8 and raw.size and (raw.min() < 0 or raw.max() > 255):
            raise CodeTableError(f"{self.table.name} layer holds values outside 0..255")
        object.__setattr__(self, "codes", _readonly(self.codes))
        self.table.validate(self.codes, f"{self.table.name} layer")

    @property
    def width(self) -> int:
        return int(self.codes.shape[1])

    @property
    def height(self) -> int:
        return int(self.codes.shape[0])

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    def positive(self) -> np.ndarray:
        """Boolean raster of non-zero codes."""
        return self.codes != 0

    def equals(self, other: "MaskLayer") -> bool:
        return self.table == other.table and np.array_equal(self.codes, other.codes)

    @classmethod
    def zeros(cls, width: int, height: int, table: CodeTable = COMPONENT_TABLE) -> "MaskLayer":
        return cls(np.zeros((height, width), dtype=np.uint8), table)


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One RGB image plus whichever label layers are available for it."""
    id: str
    rgb: np.ndarray
    component_mask: Optional[MaskLayer] = None
    defect_masks: Mapping[DefectClass, MaskLayer] = field(default_factory=dict)
    damage_mask: Optional[MaskLayer] = None
    foreground_mask: Optional[MaskLayer] = None

    def __post_init__(self):
        if np.ndim(self.rgb) != 3 or np.shape(self.rgb)[2] != 3:
            raise DimensionMismatchError(f"rgb of '{self.id}'", "H x W x 3", np.shape(self.rgb))
        object.__setattr__(self, "rgb", _readonly(self.rgb))
        object.__setattr__(self, "defect_masks", dict(self.defect_masks))
        for name, layer in self.layers():
            if layer.size != self.size:
                raise DimensionMismatchError(f"{name} layer of '{self.id}'", self.size, layer.size)

    @property
    def width(self) -> int:
        return int(self.rgb.shape[1])

    @property
    def height(self) -> int:
        return int(self.rgb.shape[0])

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    @property
    def area(self) -> int:
        return self.width * self.height

    def layers(self) -> Iterator[Tuple[str, MaskLayer]]:
        if self.component_mask is not None:
            yield LAYER_COMPONENTS, self.component_mask
        for defect, layer in sorted(self.defect_masks.items()):
            yield defect.key, layer
        if self.damage_mask is not None:
            yield LAYER_DAMAGE, self.damage_mask
        if self.foreground_mask is not None:
            yield LAYER_FOREGROUND, self.foreground_mask

    def replace(self, **changes) -> "ImageRecord":
        return replace(self, **changes)


@dataclass(frozen=True)
class ManifestEntry:
    """Layer file paths of one image (absolute once loaded)."""
    id: str
    rgb: str
    components: Optional[str] = None
    defects: Tuple[Tuple[str, str], ...] = ()
    damage: Optional[str] = None
    foreground: Optional[str] = None

    def defect_paths(self) -> Dict[DefectClass, str]:
        return {DefectClass.from_key(key): path for key, path in self.defects}

    def layer_paths(self) -> Dict[str, str]:
        paths = {}
        if self.components:
            paths[LAYER_COMPONENTS] = self.components
        paths.update(dict(self.defects))
        if self.damage:
            paths[LAYER_DAMAGE] = self.damage
        if self.foreground:
            paths[LAYER_FOREGROUND] = self.foreground
        return paths

    def has_layer(self, layer: str) -> bool:
        return layer in self.layer_paths()


@dataclass(frozen=True)
class Manifest:
    entries: Tuple[ManifestEntry, ...] = ()
    split: str = "unsplit"

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.split not in SPLIT_TAGS:
            raise DataError(f"split tag '{self.split}' not one of {SPLIT_TAGS}")
        seen = set()
        for entry in self.entries:
            if entry.id in seen:
                raise DuplicateIdError(entry.id)
            seen.add(entry.id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    @property
    def ids(self) -> Tuple[str, ...]:
        return tuple(e.id for e in self.entries)

    def entry(self, image_id: str) -> ManifestEntry:
        for entry in self.entries:
            if entry.id == image_id:
                return entry
        raise UnknownImageError(image_id, "manifest")

    def with_entries(self, entries: Iterable[ManifestEntry], split: Optional[str] = None) -> "Manifest":
        return Manifest(tuple(entries), self.split if split is None else split)


# ---------------------------------------------------------------------------
# Raster I/O
# ---------------------------------------------------------------------------

# PIL signals undecodable or truncated files with OSError (UnidentifiedImageError
# included) and, from some format plugins, SyntaxError
DECODE_ERRORS = (OSError, SyntaxError)


def _open_raster(path: str) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise MissingLayerError("raster", path) from None
    except DECODE_ERRORS as exc:
        raise UnreadableRasterError(path, str(exc) or type(exc).__name__) from None
    return img


def read_rgb(path: str) -> np.ndarray:
    with _open_raster(path) as img:
        return np.array(img.convert("RGB"), dtype=np.uint8)


def read_mask_codes(path: str) -> np.ndarray:
    with _open_raster(path) as img:
        if img.mode not in ("L", "P", "1"):
            raise CodeTableError(f"{path}: expected a single-channel 8-bit raster, got mode {img.mode}")
        return np.array(img, dtype=np.uint8)


def read_mask(path: str, table: CodeTable) -> MaskLayer:
    try:
        return MaskLayer(read_mask_codes(path), table)
    except CodeTableError as exc:
        raise CodeTableError(f"{path}: {exc}") from None


@contextmanager
def output_path(path: str) -> Iterator[str]:
    """Creates the parent directory; OSError while writing becomes OutputError."""
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        yield path
    except OSError as exc:
        raise OutputError(path, str(exc)) from None


def _save_raster(path: str, img: Image.Image) -> None:
    with output_path(path):
        img.save(path)


def write_rgb(path: str, rgb: np.ndarray) -> None:
    _save_raster(path, Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB"))


def write_mask(path: str, mask) -> None:
    codes = mask.codes if isinstance(mask, MaskLayer) else np.asarray(mask, dtype=np.uint8)
    _save_raster(path, Image.fromarray(np.ascontiguousarray(codes, dtype=np.uint8), mode="L"))


def _image_size(path: str) -> Tuple[int, int]:
    try:
        with Image.open(path) as img:
            return img.size
    except FileNotFoundError:
        raise MissingLayerError("raster", path) from None
    except DECODE_ERRORS as exc:
        raise UnreadableRasterError(path, str(exc) or type(exc).__name__) from None


def read_json(path: str, what: str):
    """A JSON document, with missing, unreadable and malformed files as DataError."""
    if not os.path.isfile(path):
        raise MissingLayerError(what, path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a JSON {what} ({exc})") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot read {what} ({exc})") from None


def write_json(path: str, document) -> None:
    with output_path(path), open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, ensure_ascii=False)
        f.write("\n")


# ---------------------------------------------------------------------------
# Manifest documents
# ---------------------------------------------------------------------------

def _resolve(base_dir: str, path: Optional[str]) -> Optional[str]:
    if not path:
        return None
    return os.path.normpath(path if os.path.isabs(path) else os.path.join(base_dir, path))


def _parse_entry(raw: dict, base_dir: str) -> ManifestEntry:
    if "id" not in raw or "rgb" not in raw:
        raise DataError(f"manifest entry without 'id'/'rgb': {raw}")
    defects = raw.get("defects") or {}
    for key in defects:
        if key not in DEFECT_KEYS.values():
            raise DataError(f"entry '{raw['id']}': unknown defect layer '{key}'")
    return ManifestEntry(
        id=str(raw["id"]),
        rgb=_resolve(base_dir, raw["rgb"]),
        components=_resolve(base_dir, raw.get("components")),
        defects=tuple((key, _resolve(base_dir, defects[key]))
                      for key in DEFECT_KEYS.values() if defects.get(key)),
        damage=_resolve(base_dir, raw.get("damage")),
        foreground=_resolve(base_dir, raw.get("foreground")),
    )


def _read_layer(entry_id: str, layer: str, path: str, reader):
    """reader(path), with raster errors tagged by layer and entry."""
    try:
        return reader(path)
    except MissingLayerError:
        raise MissingLayerError(layer, f"entry '{entry_id}' ({path})") from None
    except UnreadableRasterError as exc:
        raise UnreadableRasterError(path, exc.reason, f"{layer} layer of entry '{entry_id}'") from None


def _check_entry(entry: ManifestEntry, validate_codes: bool) -> None:
    size = _read_layer(entry.id, "rgb", entry.rgb, _image_size)
    for layer, path in entry.layer_paths().items():
        layer_size = _read_layer(entry.id, layer, path, _image_size)
        if layer_size != size:
            raise DimensionMismatchError(f"{layer} layer of '{entry.id}'", size, layer_size)
        if validate_codes:
            _read_layer(entry.id, layer, path, lambda p, t=LAYER_TABLES[layer]: read_mask(p, t))


def load_manifest(path: str, validate_codes: bool = True) -> Manifest:
    """Read, resolve and validate a manifest document."""
    document = read_json(path, "manifest")
    if not isinstance(document, dict) or not isinstance(document.get("entries", []), list):
        raise DataError(f"{path}: a manifest is an object with an 'entries' list")
    base_dir = os.path.dirname(os.path.abspath(path))
    entries = [_parse_entry(raw, base_dir) for raw in document.get("entries", [])]
    manifest = Manifest(tuple(entries), document.get("split", "unsplit"))
    for entry in manifest:
        _check_entry(entry, validate_codes)
    logger.info("Loaded manifest %s: %d entries (%s)", path, len(manifest), manifest.split)
    return manifest


def _relative(path: Optional[str], base_dir: str) -> Optional[str]:
    if path is None:
        return None
    return os.path.relpath(path, base_dir).replace(os.sep, "/")


def manifest_document(manifest: Manifest, base_dir: str) -> dict:
    entries = []
    for entry in manifest:
        raw = {"id": entry.id, "rgb": _relative(entry.rgb, base_dir)}
        if entry.components:
            raw["components"] = _relative(entry.components, base_dir)
        if entry.defects:
            raw["defects"] = {key: _relative(p, base_dir) for key, p in entry.defects}
        if entry.damage:
            raw["damage"] = _relative(entry.damage, base_dir)
        if entry.foreground:
            raw["foreground"] = _relative(entry.foreground, base_dir)
        entries.append(raw)
    return {"entries": entries, "split": manifest.split}


def save_manifest(manifest: Manifest, path: str) -> None:
    """Write a manifest with layer paths relative to its own directory."""
    write_json(path, manifest_document(manifest, os.path.dirname(os.path.abspath(path))))
    logger.info("Manifest saved to %s (%d entries)", path, len(manifest))


def load_record(entry: ManifestEntry, validate_codes: bool = True) -> ImageRecord:
    """Read every raster referenced by an entry; unreadable files raise DataError subclasses."""
    def mask(layer: str, path: Optional[str]) -> Optional[MaskLayer]:
        if path is None:
            return None
        table = LAYER_TABLES[layer]
        if validate_codes:
            return _read_layer(entry.id, layer, path, lambda p: read_mask(p, table))
        return MaskLayer(_read_layer(entry.id, layer, path, read_mask_codes), table)

    return ImageRecord(
        id=entry.id,
        rgb=_read_layer(entry.id, "rgb", entry.rgb, read_rgb),
        component_mask=mask(LAYER_COMPONENTS, entry.components),
        defect_masks={d: mask(d.key, p) for d, p in entry.defect_paths().items()},
        damage_mask=mask(LAYER_DAMAGE, entry.damage),
        foreground_mask=mask(LAYER_FOREGROUND, entry.foreground),
    )


# ---------------------------------------------------------------------------
# Third-party color-coded labels
# ---------------------------------------------------------------------------

def _parse_color(text: str) -> Tuple[int, int, int]:
    value = text.strip().lstrip("#")
    try:
        if len(value) != 6:
            raise ValueError(value)
        return int(value[0:2], 16), int(value[2:4], 16), int(value[4:6], 16)
    except ValueError:
        raise DataError(f"palette color '{text}' is not #RRGGBB") from None


def load_palette(path: str) -> Tuple[CodeTable, Dict[Tuple[int, int, int], int]]:
    """Read a `{"table": name, "colors": {"#RRGGBB": code}}` mapping file."""
    document = read_json(path, "palette")
    if not isinstance(document, dict) or not isinstance(document.get("colors"), dict):
        raise DataError(f"{path}: a palette is an object with a 'colors' mapping")
    table_name = document.get("table", LAYER_COMPONENTS)
    table = (LAYER_TABLES.get(table_name) or TABLES.get(table_name)) if isinstance(table_name, str) else None
    if table is None:
        raise DataError(f"{path}: unknown table '{table_name}'")
    palette = {}
    for color, code in document["colors"].items():
        if isinstance(code, bool) or not isinstance(code, int) or code not in table.codes:
            raise CodeTableError(f"{path}: code {code!r} for {color} is not in table '{table.name}'")
        palette[_parse_color(color)] = code
    return table, palette


def import_color_labels(label_rgb: np.ndarray, palette: Mapping[Tuple[int, int, int], int],
                        table: CodeTable) -> MaskLayer:
    """Re-code a color-coded label image into an integer MaskLayer."""
    rgb = np.asarray(label_rgb, dtype=np.uint32)
    keys = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    unique, inverse = np.unique(keys.ravel(), return_inverse=True)
    lookup = np.zeros(len(unique), dtype=np.uint8)
    for i, key in enumerate(unique):
        color = (int(key) >> 16 & 0xFF, int(key) >> 8 & 0xFF, int(key) & 0xFF)
        if color not in palette:
            raise CodeTableError("unmapped label color #%02X%02X%02X" % color)
        lookup[i] = palette[color]
    return MaskLayer(lookup[inverse].reshape(keys.shape), table)
