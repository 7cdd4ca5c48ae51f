#!/usr/bin/env python3
"""
Tests for the command-line surface: exit codes, output files and the
fixture -> prepare -> fit -> run -> eval workflow
"""

import io
import json
import os
import shutil
import sys
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout

import numpy as np
from PIL import Image

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..', 'damage_inspection')))

from damage_inspection.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from damage_inspection.core_model import read_mask_codes


def run_cli(*argv):
    """main() with quiet logging; returns (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(list(argv) + ["--log-level", "ERROR"])
    return code, out.getvalue(), err.getvalue()


class TestCliWorkflow(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.mkdtemp()
        cls.fixture = os.path.join(cls.tmp, "fixture")
        cls.manifest = os.path.join(cls.fixture, "manifest.json")
        code, _, err = run_cli("fixture", "--out", cls.fixture, "--seed", "3", "--images", "5",
                               "--defect-density", "1.0")
        assert code == EXIT_OK, err

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)

    def path(self, *parts):
        return os.path.join(self.tmp, *parts)

    def test_oracle_evaluation(self):
        code, stdout, _ = run_cli("eval", "--manifest", self.manifest, "--out", self.path("eval"), "--oracle-all")
        self.assertEqual(code, EXIT_OK)
        self.assertIn("EVALUATION", stdout)
        with open(self.path("eval", "metrics.json"), encoding="utf-8") as f:
            document = json.load(f)
        self.assertEqual(document["failures"], [])
        self.assertEqual(len(document["nodes"]), 6)
        for key, stage in document["stages"].items():
            headline = ("mean_iou", "mean_pixel_accuracy") if "mean_iou" in stage else ("average_accuracy", "macro_f1")
            for name in headline:
                self.assertAlmostEqual(stage[name], 1.0, msg=f"{key}.{name}")
            self.assertTrue(os.path.isfile(self.path("eval", "tables", f"{key}.csv")))

    def test_eval_stage_subset_and_plots(self):
        code, _, _ = run_cli("eval", "--manifest", self.manifest, "--out", self.path("subset"), "--oracle-all",
                             "--stages", "cracking,damage", "--plots")
        self.assertEqual(code, EXIT_OK)
        with open(self.path("subset", "metrics.json"), encoding="utf-8") as f:
            self.assertEqual(set(json.load(f)["stages"]), {"task1_cracking", "task3_damage_state"})
        self.assertEqual(len(os.listdir(self.path("subset", "plots"))), 2)

    def test_split_is_reproducible(self):
        for name in ("split_a", "split_b"):
            code, stdout, _ = run_cli("split", "--manifest", self.manifest, "--out", self.path(name), "--seed", "11")
            self.assertEqual(code, EXIT_OK)
            self.assertIn("Train: 4", stdout)
        for name in ("train.json", "test.json"):
            with open(self.path("split_a", name), "rb") as a, open(self.path("split_b", name), "rb") as b:
                self.assertEqual(a.read(), b.read())

    def test_audit(self):
        code, _, _ = run_cli("audit", "--manifest", self.manifest, "--out", self.path("audit"))
        self.assertEqual(code, EXIT_OK)
        with open(self.path("audit", "collisions.json"), encoding="utf-8") as f:
            self.assertEqual(json.load(f)["image_count"], 5)
        with open(self.path("audit", "pixel_stats.json"), encoding="utf-8") as f:
            stats = json.load(f)
        self.assertEqual(set(stats), {"components", "defects", "damage", "foreground"})
        self.assertIn("Wall", stats["components"]["classes"])

    def test_prepare_fit_and_run_with_model(self):
        code, _, _ = run_cli("prepare", "features", "--manifest", self.manifest, "--out", self.path("features"))
        self.assertEqual(code, EXIT_OK)
        features = self.path("features", "features.csv")
        model = self.path("models", "tree.json")
        code, stdout, _ = run_cli("fit", "tree", "--features", features, "--out", model,
                                  "--seed", "2", "--cv-folds", "2")
        self.assertEqual(code, EXIT_OK)
        self.assertIn("CV accuracy", stdout)
        self.assertTrue(os.path.isfile(self.path("models", "tree_cv.json")))

        code, _, _ = run_cli("run", "--manifest", self.manifest, "--out", self.path("run"),
                             "--oracle-all", "--node", f"damage=model:{model}")
        self.assertEqual(code, EXIT_OK)
        with open(self.path("run", "summary.json"), encoding="utf-8") as f:
            summary = json.load(f)
        self.assertEqual(summary["succeeded"], 5)
        self.assertIn("damage=classifier:tree", summary["nodes"])

    def test_fit_from_manifest_with_balancing(self):
        code, _, _ = run_cli("fit", "nb", "--manifest", self.manifest, "--out", self.path("models", "nb.json"),
                             "--balance", "over", "--seed", "1", "--normalized")
        self.assertEqual(code, EXIT_OK)
        with open(self.path("models", "nb.json"), encoding="utf-8") as f:
            self.assertIn("nb", json.dumps(json.load(f)))

    def test_prepare_task0(self):
        code, _, _ = run_cli("prepare", "task0", "--manifest", self.manifest, "--out", self.path("task0"),
                             "--fill", "0,0,0")
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(os.path.isfile(self.path("task0", "manifest.json")))
        self.assertEqual(len(os.listdir(self.path("task0", "foreground"))), 5)

    def test_external_masks_from_run_output(self):
        out = self.path("oracle_run")
        self.assertEqual(run_cli("run", "--manifest", self.manifest, "--out", out, "--oracle-all")[0], EXIT_OK)
        code, _, _ = run_cli("eval", "--manifest", self.manifest, "--out", self.path("swap"),
                             "--oracle-all", "--external-dir", out, "--node", f"damage=external:{out}")
        self.assertEqual(code, EXIT_OK)
        with open(self.path("swap", "metrics.json"), encoding="utf-8") as f:
            document = json.load(f)
        self.assertIn("cracking=external", document["nodes"])
        self.assertAlmostEqual(document["stages"]["task1_cracking"]["mean_iou"], 1.0)


class TestCliErrors(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_usage_errors(self):
        manifest = os.path.join(self.tmp, "manifest.json")
        cases = [
            ("fixture", "--out", self.tmp),
            ("split", "--manifest", manifest, "--out", self.tmp, "--seed", "1", "--bogus"),
            ("fit", "forest", "--features", "x.csv", "--out", "m.json"),
            ("fit", "tree", "--out", "m.json"),
            ("fixture", "--out", self.tmp, "--seed", "1", "--jobs", "0"),
        ]
        for argv in cases:
            with self.subTest(argv=argv):
                code, _, err = run_cli(*argv)
                self.assertEqual(code, EXIT_USAGE)
                self.assertIn("usage error", err)

    def test_unbound_stages(self):
        fixture = os.path.join(self.tmp, "fixture")
        self.assertEqual(run_cli("fixture", "--out", fixture, "--seed", "1", "--images", "1")[0], EXIT_OK)
        code, _, err = run_cli("run", "--manifest", os.path.join(fixture, "manifest.json"),
                               "--out", os.path.join(self.tmp, "run"), "--node", "cracking=oracle")
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("unbound pipeline stages", err)

    def test_missing_manifest(self):
        code, _, err = run_cli("eval", "--manifest", os.path.join(self.tmp, "absent.json"),
                               "--out", self.tmp, "--oracle-all")
        self.assertEqual(code, EXIT_DATA)
        self.assertIn("data error", err)

    def test_import_labels(self):
        input_dir = os.path.join(self.tmp, "colors")
        os.makedirs(input_dir)
        label = np.zeros((6, 8, 3), dtype=np.uint8)
        label[2:4, 2:6] = (255, 0, 0)
        Image.fromarray(label).save(os.path.join(input_dir, "img.png"))
        palette = os.path.join(self.tmp, "palette.json")
        with open(palette, "w", encoding="utf-8") as f:
            json.dump({"table": "components", "colors": {"#000000": 0, "#FF0000": 1}}, f)

        out = os.path.join(self.tmp, "coded")
        code, _, _ = run_cli("import-labels", "--palette", palette, "--input", input_dir, "--out", out)
        self.assertEqual(code, EXIT_OK)
        expected = np.zeros((6, 8), dtype=np.uint8)
        expected[2:4, 2:6] = 1
        np.testing.assert_array_equal(read_mask_codes(os.path.join(out, "img.png")), expected)

        empty = os.path.join(self.tmp, "empty")
        os.makedirs(empty)
        code, _, _ = run_cli("import-labels", "--palette", palette, "--input", empty, "--out", out)
        self.assertEqual(code, EXIT_DATA)

    def test_malformed_inputs_exit_with_data_error(self):
        palette = os.path.join(self.tmp, "palette.json")
        with open(palette, "w", encoding="utf-8") as f:
            f.write('{"table": "components", "colors": {')
        input_dir = os.path.join(self.tmp, "labels")
        os.makedirs(input_dir)
        with open(os.path.join(input_dir, "img.png"), "wb") as f:
            f.write(b"not a png")
        code, _, err = run_cli("import-labels", "--palette", palette, "--input", input_dir,
                               "--out", os.path.join(self.tmp, "coded"))
        self.assertEqual(code, EXIT_DATA)
        self.assertIn("not a JSON palette", err)

        with open(palette, "w", encoding="utf-8") as f:
            json.dump({"table": "components", "colors": {"#000000": 0}}, f)
        code, _, err = run_cli("import-labels", "--palette", palette, "--input", input_dir,
                               "--out", os.path.join(self.tmp, "coded"))
        self.assertEqual(code, EXIT_DATA)
        self.assertIn("cannot read raster", err)

        features = os.path.join(self.tmp, "features.csv")
        with open(features, "w", encoding="utf-8") as f:
            f.write("E_t,E_sr,C_r,R_r,S_r,E_s\n0.1,0.2,x,0.0,0.0,1\n")
        code, _, _ = run_cli("fit", "tree", "--features", features, "--out", os.path.join(self.tmp, "m.json"))
        self.assertEqual(code, EXIT_DATA)

    def test_corrupt_image_in_manifest(self):
        fixture = os.path.join(self.tmp, "fixture")
        self.assertEqual(run_cli("fixture", "--out", fixture, "--seed", "4", "--images", "2")[0], EXIT_OK)
        with open(os.path.join(fixture, "rgb", "scene_001.png"), "wb") as f:
            f.write(b"not a png")
        code, _, err = run_cli("audit", "--manifest", os.path.join(fixture, "manifest.json"),
                               "--out", os.path.join(self.tmp, "audit"))
        self.assertEqual(code, EXIT_DATA)
        self.assertIn("scene_001", err)

    def test_unwritable_output_locations(self):
        fixture = os.path.join(self.tmp, "fixture")
        self.assertEqual(run_cli("fixture", "--out", fixture, "--seed", "4", "--images", "2")[0], EXIT_OK)
        manifest = os.path.join(fixture, "manifest.json")
        blocker = os.path.join(self.tmp, "blocker")
        with open(blocker, "w", encoding="utf-8") as f:
            f.write("a file, not a directory")
        cases = [
            ("split", "--manifest", manifest, "--out", os.path.join(blocker, "split"), "--seed", "1"),
            ("eval", "--manifest", manifest, "--out", os.path.join(blocker, "eval"), "--oracle-all"),
            ("audit", "--manifest", manifest, "--out", self.tmp, "--log-file", os.path.join(blocker, "run.log")),
        ]
        for argv in cases:
            with self.subTest(command=argv[0]):
                code, _, err = run_cli(*argv)
                self.assertEqual(code, EXIT_DATA)
                self.assertIn("data error", err)

    def test_help_lists_commands(self):
        out = io.StringIO()
        with redirect_stdout(out), self.assertRaises(SystemExit) as ctx:
            main(["--help"])
        self.assertEqual(ctx.exception.code, 0)
        for command in ("fixture", "split", "audit", "prepare", "fit", "run", "eval", "import-labels"):
            self.assertIn(command, out.getvalue())

        out = io.StringIO()
        with redirect_stdout(out), self.assertRaises(SystemExit):
            main(["run", "--help"])
        for flag in ("--node", "--oracle-all", "--external-dir", "--jobs", "--padding"):
            self.assertIn(flag, out.getvalue())


if __name__ == '__main__':
    unittest.main()
