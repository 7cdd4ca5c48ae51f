#!/usr/bin/env python3
"""
Configuration for the inspection toolkit
Documented defaults plus environment-driven runtime settings
"""

import logging
import os
import sys
from dataclasses import dataclass
from typing import Optional, Tuple

# Dataset preparation / pipeline geometry
DEFAULT_PADDING_FRACTION = 0.10     # per side, relative to the instance bbox
DEFAULT_PATCH_SIDE = 224            # warped surface patch edge (px)
DEFAULT_MIN_INSTANCE_PIXELS = 16    # smaller instances are label speckle
DEFAULT_FILL: Tuple[int, int, int] = (0, 0, 0)
DEFAULT_TEST_FRACTION = 0.2

# Shallow classifiers
DEFAULT_TREE_DEPTH = 59
DEFAULT_FOREST_SIZE = 200
NB_VARIANCE_FLOOR = 1e-9

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


@dataclass(frozen=True)
class Settings:
    """Runtime settings read from the environment."""
    jobs: int = 1
    log_level: str = "INFO"

    @classmethod
    def from_env(cls) -> "Settings":
        raw_jobs = os.getenv("SHM_JOBS", "1")
        try:
            jobs = max(1, int(raw_jobs))
        except ValueError:
            logging.getLogger(__name__).warning("Ignoring non-integer SHM_JOBS=%r", raw_jobs)
            jobs = 1
        return cls(jobs=jobs, log_level=os.getenv("SHM_LOG_LEVEL", "INFO").upper())


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """Configure the root logger once: stderr always, a run log file on request."""
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, mode="w", encoding="utf-8"))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format=LOG_FORMAT, handlers=handlers, force=True)
