#!/usr/bin/env python3
"""
Tests for the seeded generator and the shallow damage-state classifiers
"""

import json
import math
import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..', 'damage_inspection')))

from damage_inspection.core_model import DamageState, DefectClass
from damage_inspection.errors import DataError, EmptyInputError, NotFittedError, UsageError
from damage_inspection.models import FeatureVector
from damage_inspection.scene_generator import damage_rule
from damage_inspection.seeding import SplitMix64, derive_seed
from damage_inspection.shallow import (DecisionTreeModel, cross_validate, fit_decision_tree, fit_naive_bayes,
                                       fit_random_forest, load_model, predict, predict_many, save_model)


def rule_vectors(count: int, seed: int):
    """Feature vectors labeled by the fixture damage rule (rebar > spalling > crack)."""
    rng = SplitMix64(seed)
    vectors = []
    for _ in range(count):
        ratios = {}
        for defect in (DefectClass.CRACKING, DefectClass.SPALLING, DefectClass.EXPOSED_REBAR):
            ratios[defect] = 0.05 + 0.45 * rng.random() if rng.below(3) == 0 else 0.0
        planted = [d for d, r in ratios.items() if r > 0]
        vectors.append(FeatureVector(e_t=float(rng.between(1, 7)), e_sr=0.001 + 0.2 * rng.random(),
                                     c_r=ratios[DefectClass.CRACKING], r_r=ratios[DefectClass.EXPOSED_REBAR],
                                     s_r=ratios[DefectClass.SPALLING], label=damage_rule(planted)))
    return vectors


def clustered_data(per_class: int, seed: int):
    """Four well separated clusters in five dimensions."""
    rng = SplitMix64(seed)
    X, y = [], []
    for state in DamageState:
        for _ in range(per_class):
            X.append([10.0 * int(state) + 2.0 * (rng.random() - 0.5) for _ in range(5)])
            y.append(int(state))
    return np.array(X), np.array(y)


def threshold_rule_data(count: int, seed: int):
    """Random five-feature rows labeled by thresholds on E_t and S_r only."""
    rng = SplitMix64(seed)
    X = np.empty((count, 5))
    y = np.empty(count, dtype=np.int64)
    for i in range(count):
        e_t, s_r = float(rng.between(1, 7)), rng.random() * 0.5
        X[i] = [e_t, 0.2 * rng.random(), rng.random() * 0.5, rng.random() * 0.5, s_r]
        if s_r > 0.3:
            y[i] = DamageState.SEVERE
        elif s_r > 0.1:
            y[i] = DamageState.MODERATE if e_t <= 3 else DamageState.LIGHT
        else:
            y[i] = DamageState.LIGHT if e_t == 2 else DamageState.NO_DAMAGE
    return X, y


def gaussian_draws(rng: SplitMix64, count: int, mean: float, sigma: float) -> np.ndarray:
    """Box-Muller normals from the seeded stream."""
    out = np.empty(count)
    for i in range(count):
        u1, u2 = rng.random(), rng.random()
        out[i] = mean + sigma * math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)
    return out


def noisy_rule_data(count: int, seed: int, flip: float = 0.15):
    vectors = rule_vectors(count, seed)
    X = np.array([v.as_array() for v in vectors])
    y = np.array([int(v.label) for v in vectors])
    rng = SplitMix64(derive_seed(seed, "noise"))
    for i in range(count):
        if rng.random() < flip:
            y[i] = rng.below(4)
    return X, y


class TestSeeding(unittest.TestCase):

    def test_reference_stream(self):
        rng = SplitMix64(0)
        self.assertEqual(rng.next_u64(), 0xE220A8397B1DCDAF)
        self.assertEqual(rng.next_u64(), 0x6E789E6AA1B965F4)

    def test_vectorised_draws_match_scalar_draws(self):
        for bound in (7, 1000, 3 * 2 ** 61):
            with self.subTest(bound=bound):
                a, b = SplitMix64(42), SplitMix64(42)
                block = a.integers(bound, 300)
                scalar = [b.below(bound) for _ in range(300)]
                self.assertEqual(block.tolist(), scalar)
                self.assertEqual(a.state, b.state)

    def test_derived_seeds(self):
        self.assertEqual(derive_seed(7, "tree", 3), derive_seed(7, "tree", 3))
        self.assertNotEqual(derive_seed(7, "tree", 3), derive_seed(7, "tree", 4))
        self.assertNotEqual(derive_seed(7, "split"), derive_seed(8, "split"))

    def test_shuffle_is_a_permutation(self):
        items = list(range(50))
        SplitMix64(1).shuffle(items)
        self.assertEqual(sorted(items), list(range(50)))
        self.assertNotEqual(items, list(range(50)))


class TestDecisionTree(unittest.TestCase):

    def test_fits_rule_data_exactly(self):
        data = rule_vectors(300, 1)
        model = fit_decision_tree(data)
        predictions = predict_many(model, data)
        self.assertEqual(predictions.tolist(), [int(v.label) for v in data])
        self.assertLessEqual(model.depth, 59)

    def test_depth_limit(self):
        model = fit_decision_tree(rule_vectors(200, 2), max_depth=1)
        self.assertEqual(model.depth, 1)
        self.assertEqual(model.node_count, 3)

    def test_inseparable_rows_tie_to_most_severe(self):
        model = fit_decision_tree((np.zeros((2, 5)), np.array([0, 3])))
        self.assertEqual(model.node_count, 1)
        self.assertIs(predict(model, np.zeros(5)), DamageState.SEVERE)

    def test_midpoint_threshold(self):
        model = fit_decision_tree((np.array([[0.0], [1.0]]), np.array([0, 2])))
        self.assertEqual(model.threshold_[0], 0.5)
        self.assertEqual(predict_many(model, np.array([[0.5], [0.51]])).tolist(), [0, 2])

    def test_unfitted_model(self):
        with self.assertRaises(NotFittedError):
            predict(DecisionTreeModel(), np.zeros(5))

    def test_unlabeled_and_non_finite_input(self):
        with self.assertRaises(DataError):
            fit_decision_tree([FeatureVector(1.0, 0.1, 0.0, 0.0, 0.0)])
        with self.assertRaises(DataError):
            fit_decision_tree((np.array([[np.nan, 1.0]]), np.array([0])))
        with self.assertRaises(EmptyInputError):
            fit_decision_tree([])

    def test_feature_width_checked(self):
        model = fit_decision_tree(rule_vectors(50, 3))
        with self.assertRaises(DataError):
            predict_many(model, np.zeros((2, 4)))


    def test_threshold_rule_fixture_fits_exactly(self):
        X, y = threshold_rule_data(10000, 21)
        self.assertEqual(len(np.unique(y)), 4)
        model = fit_decision_tree((X, y), max_depth=None)
        np.testing.assert_array_equal(model.predict_codes(X), y)

class TestRandomForest(unittest.TestCase):

    def test_seeded_reproducibility(self):
        data = rule_vectors(150, 4)
        first = fit_random_forest(data, n_trees=15, seed=9)
        second = fit_random_forest(data, n_trees=15, seed=9)
        self.assertEqual(json.dumps(first.to_dict()), json.dumps(second.to_dict()))
        other = fit_random_forest(data, n_trees=15, seed=10)
        self.assertNotEqual(json.dumps(first.to_dict()), json.dumps(other.to_dict()))

    def test_parallel_fit_matches_sequential(self):
        data = rule_vectors(120, 5)
        sequential = fit_random_forest(data, n_trees=8, seed=3, jobs=1)
        parallel = fit_random_forest(data, n_trees=8, seed=3, jobs=2)
        self.assertEqual(json.dumps(sequential.to_dict()), json.dumps(parallel.to_dict()))

    def test_default_feature_subset_and_accuracy(self):
        data = rule_vectors(300, 6)
        model = fit_random_forest(data, n_trees=25, seed=1)
        self.assertEqual(model.max_features, 3)
        correct = np.mean(predict_many(model, data) == np.array([int(v.label) for v in data]))
        self.assertGreaterEqual(correct, 0.95)

    def test_vote_counts(self):
        data = rule_vectors(80, 7)
        model = fit_random_forest(data, n_trees=11, seed=2)
        votes = model.vote_counts(np.array([v.as_array() for v in data]))
        self.assertTrue(np.all(votes.sum(axis=1) == 11))


    def test_not_worse_than_shallow_tree_on_noisy_data(self):
        X, y = noisy_rule_data(600, 22)
        forest = fit_random_forest((X, y), n_trees=25, seed=5)
        again = fit_random_forest((X, y), n_trees=25, seed=5)
        np.testing.assert_array_equal(forest.predict_codes(X), again.predict_codes(X))
        self.assertEqual(json.dumps(forest.to_dict()), json.dumps(again.to_dict()))
        stump = fit_decision_tree((X, y), max_depth=3)
        self.assertGreaterEqual(np.mean(forest.predict_codes(X) == y), np.mean(stump.predict_codes(X) == y))

    def test_single_full_search_tree_without_bootstrap(self):
        X, y = noisy_rule_data(200, 23)
        forest = fit_random_forest((X, y), n_trees=1, seed=8, bootstrap=False, max_features=5)
        tree = DecisionTreeModel(max_depth=None).fit(X, y)
        self.assertEqual(forest.trees[0].to_dict()["nodes"], tree.to_dict()["nodes"])
        grid = np.array([[float(e), 0.05, c, r, s] for e in range(1, 8)
                         for c in (0.0, 0.2) for r in (0.0, 0.3) for s in (0.0, 0.1)])
        np.testing.assert_array_equal(forest.predict_codes(grid), tree.predict_codes(grid))
        np.testing.assert_array_equal(forest.predict_codes(X), tree.predict_codes(X))

    def test_feature_subset_default_applies_without_bootstrap(self):
        model = fit_random_forest(rule_vectors(60, 24), n_trees=3, seed=1, bootstrap=False)
        self.assertEqual(model.max_features, 3)
        self.assertEqual(model.to_dict()["max_features"], 3)

class TestNaiveBayes(unittest.TestCase):

    def test_separates_clusters(self):
        X, y = clustered_data(60, 8)
        for normalized in (False, True):
            with self.subTest(normalized=normalized):
                model = fit_naive_bayes((X, y), normalized=normalized)
                self.assertGreaterEqual(np.mean(model.predict_codes(X) == y), 0.99)
                posteriors = model.posteriors(X[:10])
                np.testing.assert_allclose(posteriors.sum(axis=1), 1.0)

    def test_constant_feature_is_floored(self):
        X, y = clustered_data(10, 9)
        X[:, 2] = 0.5
        model = fit_naive_bayes((X, y))
        self.assertTrue(np.all(model.variances_ >= 1e-9))
        self.assertTrue(np.all(np.isfinite(model.joint_log_likelihood(X))))

    def test_requested_class_without_samples(self):
        X, y = clustered_data(5, 10)
        keep = y != 3
        with self.assertRaises(EmptyInputError):
            fit_naive_bayes((X[keep], y[keep]), classes=[0, 1, 2, 3])


    def test_separated_gaussians_held_out(self):
        rng = SplitMix64(25)
        train_x = np.concatenate([gaussian_draws(rng, 100, 0.0, 1.0), gaussian_draws(rng, 100, 10.0, 1.0)])
        train_y = np.array([0] * 100 + [2] * 100)
        test_x = np.concatenate([gaussian_draws(rng, 500, 0.0, 1.0), gaussian_draws(rng, 500, 10.0, 1.0)])
        test_y = np.array([0] * 500 + [2] * 500)
        for normalized in (False, True):
            with self.subTest(normalized=normalized):
                model = fit_naive_bayes((train_x, train_y), normalized=normalized)
                self.assertGreaterEqual(np.mean(model.predict_codes(test_x.reshape(-1, 1)) == test_y), 0.99)

    def test_symmetric_classes_tie_to_most_severe(self):
        model = fit_naive_bayes((np.array([[-3.0], [-1.0], [1.0], [3.0]]), np.array([0, 0, 2, 2])))
        self.assertIs(predict(model, np.array([0.0])), DamageState.MODERATE)
        self.assertIs(predict(model, np.array([-0.5])), DamageState.NO_DAMAGE)

    def test_single_sample_predicts_its_class(self):
        model = fit_naive_bayes((np.array([[0.3, 0.1]]), np.array([1])))
        for row in ([0.0, 0.0], [5.0, -2.0], [0.3, 0.1]):
            self.assertIs(predict(model, np.array(row)), DamageState.LIGHT)

    def test_normalization_keeps_winners(self):
        X, y = clustered_data(40, 26)
        X[:, 1] *= 100.0
        raw = fit_naive_bayes((X, y))
        scaled = fit_naive_bayes((X, y), normalized=True)
        held_out, _ = clustered_data(10, 27)
        held_out[:, 1] *= 100.0
        np.testing.assert_array_equal(raw.predict_codes(held_out), scaled.predict_codes(held_out))

    def test_normalization_bounds_stored(self):
        X, y = clustered_data(10, 28)
        X[:, 2] = 0.5
        model = fit_naive_bayes((X, y), normalized=True)
        bounds = model.to_dict()["normalization"]
        self.assertEqual(bounds["method"], "min-max")
        np.testing.assert_array_equal(bounds["data_min"], X.min(axis=0))
        np.testing.assert_array_equal(bounds["data_max"], X.max(axis=0))
        scaled = model.scaler_.transform(X)
        np.testing.assert_allclose(scaled.min(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.delete(scaled.max(axis=0), 2), 1.0, atol=1e-12)
        np.testing.assert_array_equal(scaled[:, 2], 0.0)
        self.assertTrue(np.all(np.isfinite(model.joint_log_likelihood(X))))

class TestPersistence(unittest.TestCase):

    def test_saved_models_predict_identically(self):
        data = rule_vectors(120, 11)
        X = np.array([v.as_array() for v in data])
        models = [fit_decision_tree(data), fit_random_forest(data, n_trees=5, seed=1),
                  fit_naive_bayes(data, normalized=True)]
        with tempfile.TemporaryDirectory() as tmp:
            for model in models:
                path = os.path.join(tmp, f"{model.kind}.json")
                save_model(model, path)
                loaded = load_model(path)
                self.assertEqual(loaded.kind, model.kind)
                np.testing.assert_array_equal(loaded.predict_codes(X), model.predict_codes(X))

    def test_rejects_foreign_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.json")
            with open(path, "w", encoding="utf-8") as f:
                json.dump({"format": "something-else"}, f)
            with self.assertRaises(DataError):
                load_model(path)
            with self.assertRaises(DataError):
                load_model(os.path.join(tmp, "missing.json"))


class TestCrossValidation(unittest.TestCase):

    def test_every_sample_predicted_once(self):
        data = rule_vectors(90, 12)
        result = cross_validate("tree", data, folds=3, seed=4)
        self.assertEqual(len(result.fold_reports), 3)
        self.assertEqual(sum(r.sample_count for r in result.fold_reports), 90)
        self.assertEqual(result.pooled.sample_count, 90)
        self.assertGreater(result.mean_average_accuracy, 0.5)

    def test_reproducible(self):
        data = rule_vectors(60, 13)
        a = cross_validate("nb", data, folds=3, seed=4)
        b = cross_validate("nb", data, folds=3, seed=4)
        self.assertEqual(a.to_dict(), b.to_dict())

    def test_invalid_arguments(self):
        data = rule_vectors(10, 14)
        with self.assertRaises(UsageError):
            cross_validate("svm", data)
        with self.assertRaises(UsageError):
            cross_validate("tree", data, folds=1)
        with self.assertRaises(UsageError):
            cross_validate("tree", data, folds=11)


if __name__ == '__main__':
    unittest.main()
