"""
Damage Inspection
Dataset tooling, staged model nodes, shallow damage classifiers and
evaluation metrics for post-earthquake UAV structural inspection.
"""

__version__ = "0.1.0"
