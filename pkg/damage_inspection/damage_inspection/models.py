#!/usr/bin/env python3
"""
Model Nodes
The contract every stage model satisfies, the shipped nodes (ground-truth
oracle, external-mask adapter, shallow classifier) and the component
feature vector the damage-state classifiers consume.
"""

import logging
import os
from abc import ABC, abstractmethod
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .core_model import (BINARY_TABLE, COMPONENT_TABLE, DAMAGE_TABLE, CodeTable, ComponentClass,
                         DamageState, DefectClass, ImageRecord, Manifest, MaskLayer, load_record, read_mask)
from .errors import DataError, DimensionMismatchError, MissingLayerError, NotFittedError, UnknownImageError
from .geometry import BBox, ComponentInstance, pixel_majority
from .shallow import ShallowModel, predict

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("E_t", "E_sr", "C_r", "R_r", "S_r")


@dataclass(frozen=True)
class FeatureVector:
    """Component type, element/image size ratio and the three defect/element ratios."""
    e_t: float
    e_sr: float
    c_r: float
    r_r: float
    s_r: float
    label: Optional[DamageState] = None

    def __post_init__(self):
        if float(self.e_t) not in [float(c) for c in ComponentClass]:
            raise DataError(f"E_t={self.e_t} is not a component class code")
        for name, value in zip(FEATURE_NAMES[1:], (self.e_sr, self.c_r, self.r_r, self.s_r)):
            if not 0.0 <= value <= 1.0:
                raise DataError(f"{name}={value} outside [0, 1]")
        if self.label is not None:
            object.__setattr__(self, "label", DamageState(int(self.label)))

    def as_array(self) -> np.ndarray:
        return np.array([self.e_t, self.e_sr, self.c_r, self.r_r, self.s_r], dtype=np.float64)

    def with_label(self, label: Optional[DamageState]) -> "FeatureVector":
        return FeatureVector(self.e_t, self.e_sr, self.c_r, self.r_r, self.s_r, label)

    def to_dict(self) -> Dict[str, object]:
        out = dict(zip(FEATURE_NAMES, self.as_array().tolist()))
        out["E_s"] = None if self.label is None else int(self.label)
        return out


def build_feature_vector(instance: ComponentInstance, image_area: int,
                         defect_masks: Mapping[DefectClass, Union[MaskLayer, np.ndarray]],
                         label: Optional[DamageState] = None) -> FeatureVector:
    """Ratios counted over the instance pixels; a missing defect layer counts as zero pixels."""
    size = instance.pixel_count
    if size == 0:
        raise DataError("feature vector of an empty instance")
    if image_area < size:
        raise DataError(f"image area {image_area} smaller than instance size {size}")

    def ratio(defect: DefectClass) -> float:
        layer = defect_masks.get(defect)
        if layer is None:
            return 0.0
        codes = layer.codes if isinstance(layer, MaskLayer) else np.asarray(layer)
        return int(np.count_nonzero(instance.values(codes))) / size

    return FeatureVector(
        e_t=float(instance.class_code),
        e_sr=size / image_area,
        c_r=ratio(DefectClass.CRACKING),
        r_r=ratio(DefectClass.EXPOSED_REBAR),
        s_r=ratio(DefectClass.SPALLING),
        label=label,
    )


# ---------------------------------------------------------------------------
# Stages and queries
# ---------------------------------------------------------------------------

class Stage(Enum):
    FOREGROUND = "foreground"
    COMPONENTS = "components"
    CRACKING = "cracking"
    SPALLING = "spalling"
    REBAR = "rebar"
    DAMAGE = "damage"

    @property
    def defect(self) -> Optional[DefectClass]:
        return _STAGE_DEFECTS.get(self)

    @property
    def is_segmentation(self) -> bool:
        return self is not Stage.DAMAGE

    @property
    def table(self) -> CodeTable:
        if self is Stage.COMPONENTS:
            return COMPONENT_TABLE
        if self is Stage.DAMAGE:
            return DAMAGE_TABLE
        return BINARY_TABLE

    @classmethod
    def for_defect(cls, defect: DefectClass) -> "Stage":
        return {d: s for s, d in _STAGE_DEFECTS.items()}[defect]


_STAGE_DEFECTS = {
    Stage.CRACKING: DefectClass.CRACKING,
    Stage.SPALLING: DefectClass.SPALLING,
    Stage.REBAR: DefectClass.EXPOSED_REBAR,
}
DEFECT_STAGES = (Stage.CRACKING, Stage.SPALLING, Stage.REBAR)


class NodeKind(Enum):
    ORACLE = "oracle"
    EXTERNAL_MASKS = "external"
    CLASSIFIER = "classifier"


@dataclass(frozen=True, eq=False)
class SegmentationQuery:
    """A raster cut from frame coordinates `origin` of image `image_id`."""
    image_id: str
    raster: np.ndarray
    origin: BBox
    frame_size: Tuple[int, int]


@dataclass(frozen=True, eq=False)
class DamageQuery:
    image_id: str
    patch: np.ndarray
    instance: ComponentInstance
    features: FeatureVector
    frame_size: Tuple[int, int]


class ModelNode(ABC):
    """
    Stage model slot. Segmentation nodes answer a MaskLayer shaped like the
    query raster in the stage's table; the damage node answers a DamageState.
    A node that is not `shareable` is called from one process at a time.
    """
    kind: NodeKind
    shareable = True

    def __init__(self, stage: Stage):
        self.stage = stage

    @abstractmethod
    def predict(self, query):
        ...

    def __call__(self, query):
        answer = self.predict(query)
        if self.stage.is_segmentation:
            expected = query.raster.shape[:2]
            if not isinstance(answer, MaskLayer):
                answer = MaskLayer(np.asarray(answer), self.stage.table)
            if answer.codes.shape != expected:
                raise DimensionMismatchError(f"{self.stage.value} answer for '{query.image_id}'",
                                             expected, answer.codes.shape)
            if answer.table != self.stage.table:
                answer = MaskLayer(answer.codes, self.stage.table)
            return answer
        return DamageState(int(answer))

    def describe(self) -> str:
        return f"{self.stage.value}={self.kind.value}"


# ---------------------------------------------------------------------------
# Ground truth access
# ---------------------------------------------------------------------------

class LabelStore:
    """Ground-truth lookup by image id, from a manifest (lazy) or in-memory records."""

    def __init__(self, manifest: Optional[Manifest] = None, records: Optional[Mapping[str, ImageRecord]] = None,
                 cache_size: int = 4):
        self.manifest = manifest
        self.records = dict(records or {})
        self.cache_size = cache_size
        self._cache: "OrderedDict[str, ImageRecord]" = OrderedDict()

    @classmethod
    def from_records(cls, records) -> "LabelStore":
        return cls(records={r.id: r for r in records})

    def __contains__(self, image_id: str) -> bool:
        if image_id in self.records:
            return True
        return self.manifest is not None and image_id in self.manifest.ids

    def record(self, image_id: str) -> ImageRecord:
        if image_id in self.records:
            return self.records[image_id]
        if image_id in self._cache:
            self._cache.move_to_end(image_id)
            return self._cache[image_id]
        if self.manifest is None or image_id not in self.manifest.ids:
            raise UnknownImageError(image_id)
        record = load_record(self.manifest.entry(image_id))
        self._cache[image_id] = record
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return record

    def layer(self, image_id: str, stage: Stage) -> MaskLayer:
        record = self.record(image_id)
        if stage is Stage.FOREGROUND:
            if record.foreground_mask is not None:
                return record.foreground_mask
            if record.component_mask is not None:
                return MaskLayer((record.component_mask.codes != 0).astype(np.uint8), BINARY_TABLE)
        elif stage is Stage.COMPONENTS and record.component_mask is not None:
            return record.component_mask
        elif stage is Stage.DAMAGE and record.damage_mask is not None:
            return record.damage_mask
        elif stage.defect is not None and stage.defect in record.defect_masks:
            return record.defect_masks[stage.defect]
        raise MissingLayerError(stage.value, f"image '{image_id}'")

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = OrderedDict()
        return state


def _majority_state(layer: MaskLayer, instance: ComponentInstance) -> DamageState:
    return DamageState(pixel_majority(instance.values(layer.codes), len(DAMAGE_TABLE)))


class OracleNode(ModelNode):
    """Answers with the stored ground truth verbatim."""
    kind = NodeKind.ORACLE

    def __init__(self, stage: Stage, store: LabelStore):
        super().__init__(stage)
        self.store = store

    def predict(self, query):
        layer = self.store.layer(query.image_id, self.stage)
        if self.stage is Stage.DAMAGE:
            return _majority_state(layer, query.instance)
        if layer.size != tuple(query.frame_size):
            raise DimensionMismatchError(f"ground truth of '{query.image_id}'", tuple(query.frame_size), layer.size)
        return MaskLayer(layer.codes[query.origin.slices()], layer.table)


class ExternalMaskNode(ModelNode):
    """
    Adapter for masks precomputed by an outside model, laid out as
    `<directory>/<stage>/<image_id>.png`. A damage-stage directory holds
    per-pixel damage masks; an instance takes their pixel majority.
    """
    kind = NodeKind.EXTERNAL_MASKS

    def __init__(self, stage: Stage, directory: str):
        super().__init__(stage)
        self.directory = directory
        self._last: Optional[Tuple[str, MaskLayer]] = None

    def mask_path(self, image_id: str) -> str:
        return os.path.join(self.directory, self.stage.value, f"{image_id}.png")

    def full_mask(self, image_id: str, frame_size: Tuple[int, int]) -> MaskLayer:
        if self._last is not None and self._last[0] == image_id:
            return self._last[1]
        path = self.mask_path(image_id)
        if not os.path.isfile(path):
            raise MissingLayerError(self.stage.value, f"image '{image_id}' ({path})")
        layer = read_mask(path, self.stage.table)
        if layer.size != tuple(frame_size):
            raise DimensionMismatchError(f"external {self.stage.value} mask of '{image_id}'",
                                         tuple(frame_size), layer.size)
        self._last = (image_id, layer)
        return layer

    def predict(self, query):
        layer = self.full_mask(query.image_id, query.frame_size)
        if self.stage is Stage.DAMAGE:
            return _majority_state(layer, query.instance)
        return MaskLayer(layer.codes[query.origin.slices()], layer.table)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_last"] = None
        return state


class ClassifierNode(ModelNode):
    """Damage state from a fitted shallow model applied to the instance feature vector."""
    kind = NodeKind.CLASSIFIER

    def __init__(self, model: ShallowModel):
        super().__init__(Stage.DAMAGE)
        self.model = model

    def predict(self, query: DamageQuery) -> DamageState:
        return predict(self.model, query.features)

    def describe(self) -> str:
        return f"{self.stage.value}={self.kind.value}:{self.model.kind}"


def oracle_node(stage: Stage, label_store: LabelStore) -> OracleNode:
    return OracleNode(stage, label_store)


def external_mask_node(stage: Stage, directory: str) -> ExternalMaskNode:
    if not os.path.isdir(directory):
        raise MissingLayerError(stage.value, f"external mask directory {directory}")
    return ExternalMaskNode(stage, directory)


def classifier_node(model: ShallowModel) -> ClassifierNode:
    if not model.fitted:
        raise NotFittedError("classifier node needs a fitted model")
    return ClassifierNode(model)
