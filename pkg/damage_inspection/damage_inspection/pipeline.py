#!/usr/bin/env python3
"""
Inspection Pipeline
Staged per-image workflow with one model node per stage:

    foreground -> background blacked out -> components (restricted to the
    foreground) -> instances -> per instance: defect nodes on the padded
    crop, pasted into full-frame defect masks -> feature vector and warped
    surface patch -> damage-state node

Plus batch execution with per-image error isolation and evaluation of
every stage against ground truth.
"""

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .config import DEFAULT_FILL, DEFAULT_MIN_INSTANCE_PIXELS, DEFAULT_PADDING_FRACTION, DEFAULT_PATCH_SIDE
from .core_model import (BINARY_TABLE, COMPONENT_TABLE, DAMAGE_TABLE, DamageState, DefectClass,
                         ImageRecord, Manifest, MaskLayer, load_record, write_json, write_mask, write_rgb)
from .errors import DataError, MissingLayerError, StageError, UsageError
from .geometry import (BBox, ComponentInstance, RotatedRect, all_instances, apply_foreground_mask, min_area_rect,
                       pixel_majority, warp_to_square)
from .metrics import (ConfusionMatrix, MetricsReport, PixelConfusion, accumulate_confusion,
                      classification_confusion, classification_report, segmentation_report)
from .models import (DEFECT_STAGES, DamageQuery, FeatureVector, LabelStore, ModelNode, SegmentationQuery, Stage,
                     build_feature_vector, oracle_node)
from .overlay import render_overlay
from .workers import parallel_map

logger = logging.getLogger(__name__)

# Evaluation keys, one per published metrics table
EVAL_KEYS = {
    Stage.FOREGROUND: "task0_foreground",
    Stage.CRACKING: "task1_cracking",
    Stage.SPALLING: "task1_spalling",
    Stage.REBAR: "task1_rebar",
    Stage.COMPONENTS: "task2_components",
    Stage.DAMAGE: "task3_damage_state",
}


@dataclass(frozen=True)
class PipelineParams:
    padding_fraction: float = DEFAULT_PADDING_FRACTION
    patch_side: int = DEFAULT_PATCH_SIDE
    min_instance_pixels: int = DEFAULT_MIN_INSTANCE_PIXELS
    fill: Tuple[int, int, int] = DEFAULT_FILL
    mask_background: bool = True

    def __post_init__(self):
        if not 0.0 <= self.padding_fraction <= 1.0:
            raise UsageError(f"padding fraction must be in [0, 1], got {self.padding_fraction}")
        if self.patch_side < 8:
            raise UsageError(f"patch side must be >= 8, got {self.patch_side}")
        if self.min_instance_pixels < 1:
            raise UsageError(f"min instance size must be >= 1, got {self.min_instance_pixels}")
        fill = tuple(self.fill)
        if len(fill) != 3 or any(not 0 <= int(c) <= 255 for c in fill):
            raise UsageError(f"fill must be three values in 0..255, got {self.fill}")
        object.__setattr__(self, "fill", tuple(int(c) for c in fill))


@dataclass(frozen=True)
class PipelineConfig:
    nodes: Dict[Stage, ModelNode]
    params: PipelineParams = field(default_factory=PipelineParams)

    def __post_init__(self):
        missing = [s.value for s in Stage if s not in self.nodes]
        if missing:
            raise UsageError(f"unbound pipeline stages: {', '.join(missing)}")
        for stage, node in self.nodes.items():
            if node.stage is not stage:
                raise UsageError(f"node for stage '{node.stage.value}' bound to slot '{stage.value}'")

    @classmethod
    def all_oracle(cls, store: LabelStore, params: Optional[PipelineParams] = None) -> "PipelineConfig":
        return cls({s: oracle_node(s, store) for s in Stage}, params or PipelineParams())

    def with_node(self, node: ModelNode) -> "PipelineConfig":
        nodes = dict(self.nodes)
        nodes[node.stage] = node
        return replace(self, nodes=nodes)

    @property
    def shareable(self) -> bool:
        return all(node.shareable for node in self.nodes.values())

    def describe(self) -> List[str]:
        return [self.nodes[s].describe() for s in Stage]


@dataclass(frozen=True, eq=False)
class InstanceReport:
    instance: ComponentInstance
    rect: RotatedRect
    features: Optional[FeatureVector] = None   # None when below the size threshold
    state: Optional[DamageState] = None

    @property
    def skipped(self) -> bool:
        return self.features is None

    def to_dict(self) -> dict:
        inst = self.instance
        out = {
            "component": inst.component.display_name,
            "instance_id": inst.id,
            "pixels": inst.pixel_count,
            "bbox": inst.bbox.to_list(),
            "rect": self.rect.to_list(),
            "state": None if self.state is None else self.state.display_name,
        }
        if self.features is not None:
            out.update(C_r=self.features.c_r, R_r=self.features.r_r, S_r=self.features.s_r,
                       E_sr=self.features.e_sr)
        return out


@dataclass(eq=False)
class StructureReport:
    image_id: str
    foreground: MaskLayer
    components: MaskLayer
    defects: Dict[DefectClass, MaskLayer]
    instances: List[InstanceReport]
    overlay: Optional[np.ndarray] = None

    def damage_mask(self) -> MaskLayer:
        """Instance states painted over their pixels (skipped instances and background stay 0)."""
        codes = np.zeros(self.components.codes.shape, dtype=np.uint8)
        for item in self.instances:
            if item.state is not None:
                codes[item.instance.ys, item.instance.xs] = int(item.state)
        return MaskLayer(codes, DAMAGE_TABLE)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "size": list(self.components.size),
            "foreground_pixels": int(np.count_nonzero(self.foreground.codes)),
            "defect_pixels": {d.key: int(np.count_nonzero(m.codes)) for d, m in sorted(self.defects.items())},
            "instances": [item.to_dict() for item in self.instances],
        }

    def save(self, out_dir: str) -> None:
        """Report JSON, overlay PNG and every predicted mask in the external-mask layout."""
        write_mask(os.path.join(out_dir, Stage.FOREGROUND.value, f"{self.image_id}.png"), self.foreground)
        write_mask(os.path.join(out_dir, Stage.COMPONENTS.value, f"{self.image_id}.png"), self.components)
        for stage in DEFECT_STAGES:
            write_mask(os.path.join(out_dir, stage.value, f"{self.image_id}.png"), self.defects[stage.defect])
        write_mask(os.path.join(out_dir, Stage.DAMAGE.value, f"{self.image_id}.png"), self.damage_mask())
        if self.overlay is not None:
            write_rgb(os.path.join(out_dir, "overlays", f"{self.image_id}.png"), self.overlay)
        write_json(os.path.join(out_dir, "reports", f"{self.image_id}.json"), self.to_dict())


def _ask(node: ModelNode, query, image_id: str):
    try:
        return node(query)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(node.stage.value, image_id, exc) from exc


def run_pipeline(cfg: PipelineConfig, image: ImageRecord, render: bool = True) -> StructureReport:
    """Run every stage on one image; a failing node raises StageError and nothing downstream runs."""
    params = cfg.params
    frame = image.size
    full = BBox(0, 0, image.width, image.height)

    foreground = _ask(cfg.nodes[Stage.FOREGROUND], SegmentationQuery(image.id, image.rgb, full, frame), image.id)
    source = image.rgb
    if params.mask_background:
        source = apply_foreground_mask(image.rgb, foreground, params.fill)

    predicted = _ask(cfg.nodes[Stage.COMPONENTS], SegmentationQuery(image.id, source, full, frame), image.id)
    components = MaskLayer(np.where(foreground.codes != 0, predicted.codes, 0).astype(np.uint8), COMPONENT_TABLE)
    instances = all_instances(components)

    pasted = {d: np.zeros(components.codes.shape, dtype=bool) for d in DefectClass}
    kept = [inst for inst in instances if inst.pixel_count >= params.min_instance_pixels]
    for inst in kept:
        box = inst.bbox.expand(params.padding_fraction, frame)
        crop = source[box.slices()]
        for stage in DEFECT_STAGES:
            answer = _ask(cfg.nodes[stage], SegmentationQuery(image.id, crop, box, frame), image.id)
            pasted[stage.defect][box.slices()] |= answer.codes != 0
    defects = {d: MaskLayer(m.astype(np.uint8), BINARY_TABLE) for d, m in pasted.items()}

    items = []
    for inst in instances:
        rect = min_area_rect(inst.pixels)
        if inst.pixel_count < params.min_instance_pixels:
            items.append(InstanceReport(inst, rect))
            continue
        features = build_feature_vector(inst, image.area, defects)
        patch = warp_to_square(source, rect, params.patch_side)
        state = _ask(cfg.nodes[Stage.DAMAGE], DamageQuery(image.id, patch, inst, features, frame), image.id)
        items.append(InstanceReport(inst, rect, features, state))

    report = StructureReport(image.id, foreground, components, defects, items)
    if render:
        report.overlay = render_overlay(image.rgb, report)
    logger.debug("%s: %d instances (%d assessed)", image.id, len(items), len(kept))
    return report


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class BatchResult:
    reports: List[dict] = field(default_factory=list)
    failures: List[dict] = field(default_factory=list)

    @property
    def succeeded(self) -> int:
        return len(self.reports)

    def summary(self, cfg: PipelineConfig) -> dict:
        return {
            "images": self.succeeded + len(self.failures),
            "succeeded": self.succeeded,
            "failures": self.failures,
            "nodes": cfg.describe(),
            "params": {"padding_fraction": cfg.params.padding_fraction, "patch_side": cfg.params.patch_side,
                       "min_instance_pixels": cfg.params.min_instance_pixels, "fill": list(cfg.params.fill),
                       "mask_background": cfg.params.mask_background},
        }


def _failure(image_id: str, exc: Exception, stage: Optional[str] = None) -> dict:
    return {"image_id": image_id, "stage": stage or getattr(exc, "stage", "load"), "error": str(exc)}


def _run_image(job) -> dict:
    cfg, entry, out_dir = job
    try:
        record = load_record(entry)
        report = run_pipeline(cfg, record, render=out_dir is not None)
    except DataError as exc:
        logger.error("%s", exc)
        return {"failure": _failure(entry.id, exc)}
    if out_dir is not None:
        try:
            report.save(out_dir)
        except DataError as exc:
            logger.error("%s", exc)
            return {"failure": _failure(entry.id, exc, stage="save")}
    return {"report": report.to_dict()}


def _effective_jobs(cfg: PipelineConfig, jobs: int) -> int:
    if jobs > 1 and not cfg.shareable:
        logger.info("A bound node is not shareable; processing images sequentially")
        return 1
    return jobs


def run_batch(cfg: PipelineConfig, manifest: Manifest, jobs: int = 1,
              out_dir: Optional[str] = None) -> BatchResult:
    """Every image independently; one failure never aborts the batch."""
    results = parallel_map(_run_image, [(cfg, e, out_dir) for e in manifest.entries], _effective_jobs(cfg, jobs))
    batch = BatchResult()
    for result in results:
        if "failure" in result:
            batch.failures.append(result["failure"])
        else:
            batch.reports.append(result["report"])
    if out_dir is not None:
        write_json(os.path.join(out_dir, "summary.json"), batch.summary(cfg))
    logger.info("Batch finished: %d ok, %d failed", batch.succeeded, len(batch.failures))
    return batch


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _ground_truth(record: ImageRecord, stage: Stage) -> MaskLayer:
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
    raise MissingLayerError(stage.value, f"ground truth of '{record.id}'")


def _evaluate_image(job) -> dict:
    cfg, entry, stages = job
    try:
        record = load_record(entry)
        truth = {stage: _ground_truth(record, stage) for stage in stages}
        report = run_pipeline(cfg, record, render=False)
    except MissingLayerError as exc:
        if exc.where.startswith("ground truth"):
            return {"missing": (exc.layer, exc.where)}
        return {"failure": _failure(entry.id, exc)}
    except DataError as exc:
        logger.error("%s", exc)
        return {"failure": _failure(entry.id, exc)}

    counts = {}
    for stage in stages:
        if stage is Stage.DAMAGE:
            continue
        if stage is Stage.FOREGROUND:
            pred = report.foreground
        elif stage is Stage.COMPONENTS:
            pred = report.components
        else:
            pred = report.defects[stage.defect]
        counts[stage] = accumulate_confusion(pred, truth[stage], stage.table).counts

    pairs = []
    if Stage.DAMAGE in stages:
        gt_damage = truth[Stage.DAMAGE]
        for item in report.instances:
            if item.state is None:
                continue
            gt_state = pixel_majority(item.instance.values(gt_damage.codes), len(DAMAGE_TABLE))
            pairs.append((int(item.state), gt_state))
    return {"counts": counts, "pairs": pairs}


@dataclass
class Evaluation:
    reports: Dict[str, MetricsReport]
    failures: List[dict]


def evaluate_batch(cfg: PipelineConfig, manifest: Manifest, stages: Optional[Iterable[Stage]] = None,
                   jobs: int = 1) -> Evaluation:
    """Stage metrics over the manifest, with the images that failed listed separately."""
    stages = tuple(Stage) if stages is None else tuple(stages)
    results = parallel_map(_evaluate_image, [(cfg, e, stages) for e in manifest.entries],
                           _effective_jobs(cfg, jobs))
    tallies = {stage: PixelConfusion(stage.table) for stage in stages if stage is not Stage.DAMAGE}
    preds, gts, failures = [], [], []
    for result in results:
        if "missing" in result:
            raise MissingLayerError(*result["missing"])
        if "failure" in result:
            failures.append(result["failure"])
            continue
        for stage, counts in result["counts"].items():
            tallies[stage] = tallies[stage].merge(PixelConfusion(stage.table, counts))
        for pred, gt in result["pairs"]:
            preds.append(pred)
            gts.append(gt)

    reports = {}
    for stage in stages:
        if stage is Stage.DAMAGE:
            conf = ConfusionMatrix(DAMAGE_TABLE)
            if preds:
                conf = classification_confusion(preds, gts, DAMAGE_TABLE)
            reports[EVAL_KEYS[stage]] = classification_report(conf)
        else:
            reports[EVAL_KEYS[stage]] = segmentation_report(tallies[stage])
    return Evaluation(reports, failures)


def evaluate_pipeline(cfg: PipelineConfig, manifest: Manifest, stages: Optional[Iterable[Stage]] = None,
                      jobs: int = 1) -> Dict[str, MetricsReport]:
    """Per-stage metrics; raises MissingLayerError when a requested stage has no ground truth."""
    return evaluate_batch(cfg, manifest, stages, jobs).reports

