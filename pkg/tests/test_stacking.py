import json

import numpy as np
import pytest

from retinastack.base_trainer import PredictionMatrix
from retinastack.errors import (
    CoverageGap,
    DegenerateInput,
    DegenerateTarget,
    DimensionMismatch,
    EmptyForest,
    LeakageDetected,
    MissingFoldPrediction,
)
from retinastack.stacking import (
    Forest,
    GbdtMetaLearner,
    GbdtParams,
    GbdtTree,
    OofMatrix,
    assemble_oof,
    build_tree,
    feature_importance,
    fit_gbdt,
    fit_meta,
    holdout_split,
    predict_meta,
    save_importance,
    sort_order,
    split_gain,
)
from retinastack.stratify import split_views, stratified_kfold

from .conftest import make_truth
from .oracles import exhaustive_best_split, reference_tree, tree_as_tuple, trees_match

HAND = GbdtParams(rounds=1, max_depth=1, eta=1.0, reg_lambda=0.0, gamma=0.0, min_child_weight=0.0)


def fold_predictions(truth, fa, model_ids, rng):
    preds = {}
    for m in model_ids:
        for fold in range(fa.k):
            _, valid = split_views(fa, fold)
            preds[(m, fold)] = PredictionMatrix(tuple(valid), rng.uniform(size=(len(valid), len(truth.labels))), m, truth.labels)
    return preds


class TestAssembleOof:
    def test_width_66(self, rng):
        truth = make_truth(rng.random((100, 11)) < 0.3)
        fa = stratified_kfold(truth, 5, 0)
        models = [f"m{i}" for i in range(6)]
        oof = assemble_oof(fold_predictions(truth, fa, models, rng), fa, truth.labels)
        assert oof.features.shape == (100, 66)
        assert oof.feature_names[:2] == (f"m0:{truth.labels[0]}", f"m0:{truth.labels[1]}")
        assert oof.feature_names[11] == f"m1:{truth.labels[0]}"
        assert oof.model_ids == models

    def test_minimal_concatenation(self, rng):
        truth = make_truth([[1], [0], [1], [0]])
        fa = stratified_kfold(truth, 2, 0)
        preds = fold_predictions(truth, fa, ["m"], rng)
        oof = assemble_oof(preds, fa, truth.labels)
        assert oof.features.shape == (4, 1)
        for fold in range(2):
            p = preds[("m", fold)]
            np.testing.assert_array_equal(oof.take(p.sample_ids).features, p.probs)

    def test_leakage(self, rng):
        truth = make_truth(rng.random((30, 2)) < 0.5)
        fa = stratified_kfold(truth, 3, 0)
        preds = fold_predictions(truth, fa, ["m"], rng)
        train, _ = split_views(fa, 1)
        bad = preds[("m", 1)]
        preds[("m", 1)] = PredictionMatrix((*bad.sample_ids, train[0]), np.vstack([bad.probs, [[0.5, 0.5]]]), "m", bad.labels)
        with pytest.raises(LeakageDetected) as info:
            assemble_oof(preds, fa, truth.labels)
        assert info.value.sample_id == train[0] and info.value.model_id == "m"

    def test_missing_and_gap(self, rng):
        truth = make_truth(rng.random((30, 2)) < 0.5)
        fa = stratified_kfold(truth, 3, 0)
        preds = fold_predictions(truth, fa, ["m"], rng)
        del preds[("m", 2)]
        with pytest.raises(MissingFoldPrediction):
            assemble_oof(preds, fa, truth.labels)
        preds = fold_predictions(truth, fa, ["m"], rng)
        p = preds[("m", 0)]
        preds[("m", 0)] = PredictionMatrix(p.sample_ids[1:], p.probs[1:], "m", p.labels)
        with pytest.raises(CoverageGap):
            assemble_oof(preds, fa, truth.labels)

    def test_csv_round_trip(self, tmp_path, rng):
        oof = OofMatrix(("a", "b"), rng.uniform(size=(2, 2)), ("m:x", "m:y"))
        oof.save_csv(tmp_path / "oof.csv")
        back = OofMatrix.load_csv(tmp_path / "oof.csv")
        assert back.feature_names == oof.feature_names
        np.testing.assert_array_equal(back.features, oof.features)


class TestHoldoutSplit:
    def test_quarter(self, rng):
        truth = make_truth(rng.random((200, 4)) < 0.3)
        oof = OofMatrix(truth.sample_ids, rng.uniform(size=(200, 4)), tuple(f"m:{lab}" for lab in truth.labels))
        fit, ev = holdout_split(oof, truth, 0.25, seed=0)
        assert len(ev.oof) == 50 and len(fit.oof) == 150
        assert set(fit.oof.sample_ids).isdisjoint(ev.oof.sample_ids)
        dev = np.abs(ev.truth.values.sum(axis=0) - truth.values.sum(axis=0) / 4)
        assert dev.max() <= 1.0

    def test_half(self, rng):
        truth = make_truth(rng.random((101, 2)) < 0.4)
        oof = OofMatrix(truth.sample_ids, np.zeros((101, 1)), ("m:a",))
        fit, ev = holdout_split(oof, truth, 0.5, seed=3)
        assert abs(len(fit.oof) - len(ev.oof)) <= 1

    def test_bad_fraction(self, rng):
        truth = make_truth([[0], [1]])
        with pytest.raises(DegenerateInput):
            holdout_split(OofMatrix(truth.sample_ids, np.zeros((2, 1)), ("m:a",)), truth, 1.0)


class TestTrees:
    def test_hand_example(self):
        x = np.array([[0.0], [0.0], [1.0], [1.0]])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        forest = fit_gbdt(x, y, HAND)
        tree = forest.trees[0]
        assert tree.feature[0] == 0 and tree.threshold[0] == 0.5
        np.testing.assert_allclose(tree.predict(x), [-2.0, -2.0, 2.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(forest.predict_proba(x), [0.1192, 0.1192, 0.8808, 0.8808], atol=1e-4)

    def test_zero_rounds(self, rng):
        forest = fit_gbdt(rng.normal(size=(10, 2)), np.arange(10) % 2, GbdtParams(rounds=0))
        np.testing.assert_array_equal(forest.predict_proba(rng.normal(size=(5, 2))), 0.5)

    def test_constant_feature_never_used(self, rng):
        x = np.column_stack([np.ones(50), rng.normal(size=50)])
        forest = fit_gbdt(x, (x[:, 1] > 0).astype(float), GbdtParams(rounds=5, max_depth=3))
        for tree in forest.trees:
            assert 0 not in tree.feature

    def test_degenerate_target(self, rng):
        with pytest.raises(DegenerateTarget):
            fit_gbdt(rng.normal(size=(5, 2)), np.zeros(5))

    def test_gain_formula(self):
        assert split_gain(1.0, 0.5, -1.0, 0.5, 0.0, 0.0) == pytest.approx(2.0)
        assert split_gain(1.0, 0.5, -1.0, 0.5, 1.0, 0.5) == pytest.approx(0.5 * (1 / 1.5 + 1 / 1.5) - 0.5)

    def test_matches_exhaustive_reference(self, rng):
        for _ in range(40):
            n, d = int(rng.integers(2, 60)), int(rng.integers(1, 6))
            x = np.round(rng.normal(size=(n, d)), 1)
            g = rng.normal(size=n)
            h = rng.uniform(0.05, 0.25, size=n)
            params = GbdtParams(max_depth=int(rng.integers(1, 4)), eta=0.3, reg_lambda=float(rng.uniform(0, 2)), gamma=0.0, min_child_weight=0.1)
            tree = build_tree(x, sort_order(x), g, h, params)
            expected = reference_tree(x, g, h, params.max_depth, params.eta, params.reg_lambda, params.gamma, params.min_child_weight)
            assert trees_match(tree_as_tuple(tree), expected)
            assert tree.depth <= params.max_depth

    def test_root_split_tie_break(self):
        # two identical columns: the lower index must win
        x = np.column_stack([[0.0, 1.0, 2.0, 3.0]] * 2)
        g = np.array([1.0, 1.0, -1.0, -1.0])
        tree = build_tree(x, sort_order(x), g, np.full(4, 0.25), GbdtParams(max_depth=1, min_child_weight=0.0))
        assert tree.feature[0] == 0 and tree.threshold[0] == 1.5
        assert exhaustive_best_split(x, g, np.full(4, 0.25), 1.0, 0.0)[1:] == (0, 1.5)

    def test_mirrored_partition_tie(self):
        # column 1 orders the rows in reverse, so both columns offer the same
        # split with left and right exchanged; the lower feature must win
        x = np.array([[0.1, 0.7], [0.2, 0.6], [0.3, 0.5], [0.4, 0.4], [0.5, 0.3], [0.6, 0.2]])
        g = np.array([0.3, -1.1, 0.7, 0.9, -0.2, 0.05])
        h = np.array([0.11, 0.13, 0.17, 0.19, 0.23, 0.29])
        params = GbdtParams(max_depth=1, reg_lambda=0.3, min_child_weight=0.0)
        tree = build_tree(x, sort_order(x), g, h, params)
        best = exhaustive_best_split(x, g, h, 0.3, 0.0)
        assert tree.feature[0] == best[1] == 0
        assert tree.threshold[0] == best[2]

    def test_training_loss_non_increasing(self, rng):
        for _ in range(5):
            x = rng.uniform(size=(200, 6))
            y = (x[:, 0] + 0.3 * rng.normal(size=200) > 0.5).astype(float)
            forest = fit_gbdt(x, y, GbdtParams(rounds=50, eta=0.3))
            assert np.all(np.diff(forest.train_loss) <= 1e-12)

    def test_batch_partition_invariance(self, rng):
        x = rng.uniform(size=(80, 4))
        forest = fit_gbdt(x, (x[:, 1] > 0.4).astype(float), GbdtParams(rounds=10))
        full = forest.predict_proba(x)
        np.testing.assert_array_equal(full, np.concatenate([forest.predict_proba(x[i : i + 9]) for i in range(0, 80, 9)]))

    def test_tree_dict_round_trip(self, rng):
        x = rng.uniform(size=(40, 3))
        tree = fit_gbdt(x, (x[:, 0] > 0.5).astype(float), GbdtParams(rounds=1)).trees[0]
        back = GbdtTree.from_dict(json.loads(json.dumps(tree.to_dict())))
        np.testing.assert_array_equal(back.predict(x), tree.predict(x))


def meta_problem(rng, n=300, n_models=3, n_labels=4):
    truth = make_truth(rng.random((n, n_labels)) < 0.3)
    cols = [np.clip(truth.values * 0.4 + rng.uniform(size=truth.values.shape) * 0.6, 0, 1) for _ in range(n_models)]
    names = tuple(f"m{m}:{lab}" for m in range(n_models) for lab in truth.labels)
    return OofMatrix(truth.sample_ids, np.concatenate(cols, axis=1), names), truth


class TestMeta:
    def test_one_forest_per_label(self, rng):
        oof, truth = meta_problem(rng)
        meta = fit_meta(oof, truth, GbdtParams(rounds=5))
        assert len(meta.forests) == len(truth.labels) and meta.degenerate_labels == []

    def test_degenerate_label_gets_prevalence(self, rng):
        oof, truth = meta_problem(rng)
        values = truth.values.copy()
        values[:, 1] = 0
        truth = make_truth(values, truth.labels)
        meta = fit_meta(oof, truth, GbdtParams(rounds=3))
        assert meta.degenerate_labels == [truth.labels[1]]
        np.testing.assert_array_equal(predict_meta(meta, oof).probs[:, 1], 0.0)
        with pytest.raises(EmptyForest):
            feature_importance(meta, truth.labels[1])

    def test_column_permutation_invariance(self, rng):
        oof, truth = meta_problem(rng, n=150)
        params = GbdtParams(rounds=8, max_depth=3)
        perm = rng.permutation(oof.features.shape[1])
        shuffled = OofMatrix(oof.sample_ids, oof.features[:, perm], tuple(oof.feature_names[i] for i in perm))
        a = predict_meta(fit_meta(oof, truth, params), oof).probs
        b = predict_meta(fit_meta(shuffled, truth, params), shuffled).probs
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_deterministic_and_round_trip(self, tmp_path, rng):
        oof, truth = meta_problem(rng)
        params = GbdtParams(rounds=6)
        meta = fit_meta(oof, truth, params, seed=1)
        meta.save(tmp_path / "meta.json")
        back = GbdtMetaLearner.load(tmp_path / "meta.json")
        np.testing.assert_array_equal(predict_meta(back, oof).probs, predict_meta(meta, oof).probs)
        np.testing.assert_array_equal(predict_meta(fit_meta(oof, truth, params, seed=1), oof).probs, predict_meta(meta, oof).probs)

    def test_empty_forests_predict_half(self, rng):
        meta = GbdtMetaLearner(("a",), ("m:a",), (Forest((), 0.0, (0.0,)),), GbdtParams(), (0.3,))
        np.testing.assert_array_equal(predict_meta(meta, rng.uniform(size=(4, 1))).probs, 0.5)

    def test_dimension_mismatch(self, rng):
        oof, truth = meta_problem(rng, n=60)
        meta = fit_meta(oof, truth, GbdtParams(rounds=2))
        with pytest.raises(DimensionMismatch):
            predict_meta(meta, rng.uniform(size=(3, 5)))


class TestImportance:
    def test_single_split(self):
        x = np.column_stack([np.zeros(4), [0.0, 0.0, 1.0, 1.0], np.arange(4.0)])
        truth = make_truth([0, 0, 1, 1], ["a"])
        oof = OofMatrix(truth.sample_ids, x, ("m0:a", "m1:a", "m2:a"))
        meta = fit_meta(oof, truth, HAND)
        ranked = feature_importance(meta, "a")
        assert ranked[0] == ("m1:a", 1.0)
        assert dict(ranked)["m0:a"] == 0.0 and dict(ranked)["m2:a"] == 0.0

    def test_shares_recomputed(self, tmp_path, rng):
        oof, truth = meta_problem(rng)
        meta = fit_meta(oof, truth, GbdtParams(rounds=20))
        label = truth.labels[0]
        ranked = feature_importance(meta, label)
        totals = dict.fromkeys(oof.feature_names, 0.0)
        for tree in meta.forests[0].trees:
            for f, gain in zip(tree.feature, tree.gain):
                if f >= 0:
                    totals[oof.feature_names[f]] += gain
        s = sum(totals.values())
        for name, share in ranked:
            assert share == pytest.approx(totals[name] / s, abs=1e-12)
        assert abs(sum(share for _, share in ranked) - 1.0) < 1e-12
        assert all(share >= 0 for _, share in ranked)
        assert [share for _, share in ranked] == sorted((share for _, share in ranked), reverse=True)
        save_importance(ranked, tmp_path / "imp.csv", top_k=10)
        lines = (tmp_path / "imp.csv").read_text().splitlines()
        assert lines[0] == "feature,gain_share" and len(lines) == 11
