#!/usr/bin/env python3
"""
Shared builders for the test modules: on-disk fixture datasets and small
in-memory image records.
"""

import os
import sys

import numpy as np

# Add the package project directory to the path to import modules
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..', 'damage_inspection')))

from damage_inspection.core_model import (BINARY_TABLE, COMPONENT_TABLE, DAMAGE_TABLE, ComponentClass,
                                          DamageState, DefectClass, ImageRecord, MaskLayer)
from damage_inspection.dataset import generate_fixture_dataset
from damage_inspection.scene_generator import SceneParameters, load_sidecar


def make_fixture(out_dir: str, seed: int = 7, **overrides):
    """Fixture dataset under out_dir; returns (manifest, sidecar)."""
    params = SceneParameters(**overrides)
    manifest = generate_fixture_dataset(params, seed, out_dir)
    return manifest, load_sidecar(out_dir)


def tiny_record(image_id: str = "tiny", width: int = 40, height: int = 30) -> ImageRecord:
    """
    A wall (16x10 at 4,4) with a 6 px crack and a 3x3 spalling patch, a
    column (6x12 at 26,6) and a 2x2 balcony speck below the size threshold.
    """
    rgb = np.full((height, width, 3), 90, dtype=np.uint8)
    components = np.zeros((height, width), dtype=np.uint8)
    components[4:14, 4:20] = ComponentClass.WALL
    components[6:18, 26:32] = ComponentClass.COLUMN
    components[24:26, 10:12] = ComponentClass.BALCONY
    rgb[components != 0] = (200, 190, 170)

    crack = np.zeros((height, width), dtype=np.uint8)
    crack[9, 6:12] = 1
    spalling = np.zeros((height, width), dtype=np.uint8)
    spalling[6:9, 15:18] = 1
    damage = np.zeros((height, width), dtype=np.uint8)
    damage[4:14, 4:20] = DamageState.MODERATE

    return ImageRecord(
        id=image_id,
        rgb=rgb,
        component_mask=MaskLayer(components, COMPONENT_TABLE),
        defect_masks={DefectClass.CRACKING: MaskLayer(crack, BINARY_TABLE),
                      DefectClass.SPALLING: MaskLayer(spalling, BINARY_TABLE),
                      DefectClass.EXPOSED_REBAR: MaskLayer(np.zeros_like(crack), BINARY_TABLE)},
        damage_mask=MaskLayer(damage, DAMAGE_TABLE),
        foreground_mask=MaskLayer((components != 0).astype(np.uint8), BINARY_TABLE),
    )
