#!/usr/bin/env python3
"""
Tests for confusion tallies, segmentation/classification metrics and report files
"""

import json
import os
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..', 'damage_inspection')))

from damage_inspection.core_model import BINARY_TABLE, COMPONENT_TABLE, DAMAGE_TABLE
from damage_inspection.errors import CodeTableError, DataError, DimensionMismatchError, EmptyInputError
from damage_inspection.metrics import (ConfusionMatrix, PixelConfusion, accumulate_confusion, classification_metrics,
                                       iou, pixel_accuracy, report_table, segmentation_report, write_report_json,
                                       write_table_csv)
from damage_inspection.report_plots import ReportPlotter
from damage_inspection.seeding import SplitMix64


class TestPixelConfusion(unittest.TestCase):

    def test_matches_double_loop_tally(self):
        rng = SplitMix64(11)
        streamed = PixelConfusion(COMPONENT_TABLE)
        expected = np.zeros((8, 8), dtype=np.int64)
        for _ in range(100):
            pred = rng.integers(8, 32 * 32).reshape(32, 32)
            gt = rng.integers(8, 32 * 32).reshape(32, 32)
            streamed = streamed.merge(accumulate_confusion(pred, gt, COMPONENT_TABLE))
            for y in range(32):
                for x in range(32):
                    expected[gt[y, x], pred[y, x]] += 1
        np.testing.assert_array_equal(streamed.counts, expected)
        self.assertEqual(streamed.total, 100 * 32 * 32)

    def test_merge_is_order_independent(self):
        rng = SplitMix64(3)
        parts = [accumulate_confusion(rng.integers(2, 64).reshape(8, 8), rng.integers(2, 64).reshape(8, 8),
                                      BINARY_TABLE) for _ in range(4)]
        forward = parts[0] + parts[1] + parts[2] + parts[3]
        backward = parts[3] + parts[2] + parts[1] + parts[0]
        np.testing.assert_array_equal(forward.counts, backward.counts)

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            accumulate_confusion(np.zeros((4, 4)), np.zeros((4, 5)), BINARY_TABLE)

    def test_code_outside_table(self):
        pred = np.zeros((2, 2), dtype=np.uint8)
        pred[0, 0] = 4
        with self.assertRaises(CodeTableError):
            accumulate_confusion(pred, np.zeros((2, 2), dtype=np.uint8), DAMAGE_TABLE)

    def test_merge_different_tables(self):
        with self.assertRaises(DataError):
            PixelConfusion(BINARY_TABLE).merge(PixelConfusion(DAMAGE_TABLE))


class TestSegmentationMetrics(unittest.TestCase):

    def setUp(self):
        gt = np.array([[1, 1], [0, 0]], dtype=np.uint8)
        pred = np.array([[1, 0], [0, 0]], dtype=np.uint8)
        self.conf = accumulate_confusion(pred, gt, BINARY_TABLE)

    def test_per_class_values(self):
        self.assertAlmostEqual(iou(self.conf, 1), 0.5)
        self.assertAlmostEqual(pixel_accuracy(self.conf, 1), 0.5)
        self.assertAlmostEqual(iou(self.conf, 0), 2.0 / 3.0)
        self.assertAlmostEqual(pixel_accuracy(self.conf, 0), 1.0)

    def test_report_means(self):
        report = segmentation_report(self.conf)
        self.assertEqual(report.included_classes, ("Background", "Foreground"))
        self.assertAlmostEqual(report.mean_iou, (0.5 + 2.0 / 3.0) / 2.0)
        self.assertAlmostEqual(report.mean_pixel_accuracy, 0.75)
        self.assertEqual(report.sample_count, 4)

    def test_class_absent_from_both(self):
        conf = accumulate_confusion(np.zeros((3, 3)), np.zeros((3, 3)), BINARY_TABLE)
        self.assertEqual(iou(conf, 1), 1.0)
        self.assertEqual(pixel_accuracy(conf, 1), 1.0)
        report = segmentation_report(conf)
        self.assertEqual(report.included_classes, ("Background",))
        self.assertEqual(report.mean_iou, 1.0)

    def test_ratios_match_hand_tally(self):
        rng = SplitMix64(12)
        for trial in range(100):
            pred = rng.integers(8, 32 * 32).reshape(32, 32)
            gt = rng.integers(8, 32 * 32).reshape(32, 32)
            conf = accumulate_confusion(pred, gt, COMPONENT_TABLE)
            pairs = list(zip(gt.ravel().tolist(), pred.ravel().tolist()))
            for code in COMPONENT_TABLE.codes:
                tp = fp = fn = 0
                for g, p in pairs:
                    hit_gt, hit_pred = g == code, p == code
                    tp += int(hit_gt and hit_pred)
                    fp += int(hit_pred and not hit_gt)
                    fn += int(hit_gt and not hit_pred)
                with self.subTest(trial=trial, code=code):
                    if tp + fp + fn:
                        self.assertLessEqual(abs(iou(conf, code) - tp / (tp + fp + fn)), 1e-12)
                    if tp + fn:
                        self.assertLessEqual(abs(pixel_accuracy(conf, code) - tp / (tp + fn)), 1e-12)
                    self.assertLessEqual(iou(conf, code), pixel_accuracy(conf, code))

    def test_false_positive_only_class(self):
        pred = np.array([[1, 0]], dtype=np.uint8)
        conf = accumulate_confusion(pred, np.zeros((1, 2)), BINARY_TABLE)
        self.assertEqual(iou(conf, 1), 0.0)
        self.assertEqual(pixel_accuracy(conf, 1), 0.0)
        self.assertNotIn("Foreground", segmentation_report(conf).included_classes)


class TestClassificationMetrics(unittest.TestCase):

    def test_hand_computed_values(self):
        gts = [0, 0, 1, 1, 2, 3]
        preds = [0, 1, 1, 1, 2, 2]
        report = classification_metrics(preds, gts)
        self.assertAlmostEqual(report.per_class_accuracy["NoDamage"], 0.5)
        self.assertAlmostEqual(report.per_class_accuracy["Light"], 1.0)
        self.assertAlmostEqual(report.per_class_accuracy["Severe"], 0.0)
        self.assertAlmostEqual(report.per_class_f1["NoDamage"], 2.0 / 3.0)
        self.assertAlmostEqual(report.per_class_f1["Light"], 0.8)
        self.assertAlmostEqual(report.average_accuracy, 4.0 / 6.0)
        self.assertAlmostEqual(report.macro_f1, (2.0 / 3.0 + 0.8 + 2.0 / 3.0 + 0.0) / 4.0)

    def test_class_missing_from_ground_truth(self):
        report = classification_metrics([0, 1, 3], [0, 1, 1])
        self.assertIsNone(report.per_class_accuracy["Severe"])
        self.assertEqual(report.included_classes, ("NoDamage", "Light"))
        self.assertAlmostEqual(report.macro_f1, (1.0 + 2.0 / 3.0) / 2.0)

    def test_constant_predictor(self):
        gts = [0] * 10 + [1] * 20 + [2] * 30 + [3] * 40
        report = classification_metrics([2] * len(gts), gts)
        self.assertAlmostEqual(report.average_accuracy, 0.3)
        self.assertAlmostEqual(report.per_class_f1["Moderate"], 60.0 / 130.0)
        self.assertEqual(report.per_class_f1["NoDamage"], 0.0)
        self.assertAlmostEqual(report.macro_f1, 60.0 / 130.0 / 4.0)

    def test_perfect_predictions(self):
        report = classification_metrics([3, 2, 1, 0], [3, 2, 1, 0])
        self.assertEqual(report.average_accuracy, 1.0)
        self.assertEqual(report.macro_f1, 1.0)

    def test_empty_and_mismatched_input(self):
        with self.assertRaises(EmptyInputError):
            classification_metrics([], [])
        with self.assertRaises(DataError):
            classification_metrics([0, 1], [0])

    def test_negative_counts_rejected(self):
        counts = np.zeros((4, 4), dtype=np.int64)
        counts[0, 1] = -1
        with self.assertRaises(DataError):
            ConfusionMatrix(DAMAGE_TABLE, counts)


class TestReportFiles(unittest.TestCase):

    def setUp(self):
        self.seg = segmentation_report(accumulate_confusion(np.array([[1, 0]]), np.array([[1, 1]]), BINARY_TABLE))
        self.cls = classification_metrics([0, 1, 2, 2], [0, 1, 2, 3])

    def test_table_layout(self):
        seg_table = report_table(self.seg)
        self.assertEqual(list(seg_table.columns), ["Background", "Foreground", "Mean"])
        self.assertAlmostEqual(seg_table.loc["IoU [%]", "Foreground"], 50.0)
        cls_table = report_table(self.cls)
        self.assertEqual(list(cls_table.columns)[-2:], ["Average accuracy", "Average F1"])
        self.assertAlmostEqual(cls_table.loc["Accuracy [%]", "Average accuracy"], 75.0)

    def test_json_and_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "metrics.json")
            write_report_json({"task1_cracking": self.seg, "task3_damage_state": self.cls}, path,
                              extra={"nodes": ["cracking=oracle"]})
            with open(path, encoding="utf-8") as f:
                document = json.load(f)
            self.assertEqual(set(document["stages"]), {"task1_cracking", "task3_damage_state"})
            self.assertIn("mean_iou", document["stages"]["task1_cracking"])
            self.assertIn("macro_f1", document["stages"]["task3_damage_state"])
            self.assertEqual(document["nodes"], ["cracking=oracle"])

            csv_path = os.path.join(tmp, "tables", "seg.csv")
            write_table_csv(self.seg, csv_path)
            table = pd.read_csv(csv_path, index_col="Metric")
            self.assertAlmostEqual(table.loc["Pixel accuracy [%]", "Foreground"], 50.0)

    def test_plots(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = ReportPlotter(os.path.join(tmp, "plots")).plot_all({"seg": self.seg, "cls": self.cls})
            self.assertEqual(len(paths), 2)
            for path in paths:
                self.assertTrue(os.path.getsize(path) > 0)


if __name__ == '__main__':
    unittest.main()
