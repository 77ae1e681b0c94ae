import json
import math

import numpy as np
import pytest
from unittest.mock import patch

import selector_core as core


def _dataset(features, labels, task="regression"):
    features = np.asarray(features, dtype=float)
    return core.TabularDataset(
        name="toy",
        features=features,
        feature_names=[f"f{i}" for i in range(features.shape[1])],
        labels=np.asarray(labels),
        task=task,
    )


def test_log_message_returns_message():
    assert core.log_message("hello") == "hello"
    assert core.log_message("careful", "WARNING") == "careful"


def test_load_settings_missing_file_uses_defaults(tmp_path):
    """A missing settings file falls back to the published defaults."""
    settings = core.load_settings(str(tmp_path / "absent.json"))
    assert settings["collector"]["episodes"] == 300
    assert settings["corpus"]["augment_copies"] == 25
    assert settings["search"]["n_starts"] == 25
    assert settings["search"]["trade_off"] == 0.1


def test_load_settings_reports_every_bad_field(tmp_path):
    path = tmp_path / "settings.json"
    path.write_text(json.dumps({
        "collector": {"episodes": 0, "channel": "psychic"},
        "model": {"kl_form": "weird"},
    }))
    with pytest.raises(ValueError) as excinfo:
        core.load_settings(str(path))
    message = str(excinfo.value)
    assert "collector.episodes" in message
    assert "collector.channel" in message
    assert "model.kl_form" in message


def test_load_settings_rejects_unknown_keys(tmp_path):
    path = tmp_path / "settings.json"
    path.write_text(json.dumps({"collector": {"episode": 5}}))
    with pytest.raises(ValueError, match="collector.episode: unknown setting"):
        core.load_settings(str(path))


def test_load_settings_invalid_json(tmp_path):
    path = tmp_path / "settings.json"
    path.write_text("{not json")
    with pytest.raises(ValueError, match="not valid JSON"):
        core.load_settings(str(path))


def test_dotted_overrides_and_profile(tmp_path):
    """Desk profile shrinks episodes and epochs; dotted overrides apply after it."""
    settings = core.load_settings(
        str(tmp_path / "absent.json"),
        overrides={"collector.channel": "unsupervised"},
        profile="desk",
    )
    assert settings["collector"]["episodes"] == 50
    assert settings["model"]["pretrain_epochs"] == 100
    assert settings["model"]["finetune_epochs"] == 40
    assert settings["model"]["learning_rate"] == 0.001
    assert settings["model"]["dropout"] == 0.0
    assert settings["collector"]["steps_per_episode"] == 4
    assert settings["corpus"]["augment_copies"] == 10
    assert settings["collector"]["channel"] == "unsupervised"
    assert settings["profile"] == "desk"


def test_unknown_override_is_rejected(tmp_path):
    with pytest.raises(ValueError, match="nope.field"):
        core.load_settings(str(tmp_path / "absent.json"), overrides={"nope.field": 1})


def test_heads_must_divide_embedding(tmp_path):
    with pytest.raises(ValueError, match="attention_heads"):
        core.load_settings(str(tmp_path / "absent.json"), overrides={"model.attention_heads": 5})


def test_boolean_is_not_an_integer(tmp_path):
    with pytest.raises(ValueError, match="collector.episodes"):
        core.load_settings(str(tmp_path / "absent.json"), overrides={"collector.episodes": True})


def test_resolve_loss_weights_regimes():
    with_red = core.resolve_loss_weights({"use_redundancy": True, "alpha": None, "beta": None,
                                          "gamma": None, "delta": None})
    assert (with_red["alpha"], with_red["beta"], with_red["gamma"], with_red["delta"]) == (0.5, 0.3, 0.001, 0.2)
    without = core.resolve_loss_weights({"use_redundancy": False, "alpha": None, "beta": None,
                                         "gamma": None, "delta": None})
    assert (without["alpha"], without["beta"], without["gamma"], without["delta"]) == (0.8, 0.2, 0.001, 0.0)
    explicit = core.resolve_loss_weights({"use_redundancy": True, "alpha": 1.0, "beta": None,
                                          "gamma": None, "delta": None})
    assert explicit["alpha"] == 1.0


def test_save_settings_round_trip(tmp_path):
    path = tmp_path / "saved.json"
    settings = core.load_settings(str(tmp_path / "absent.json"))
    assert core.save_settings(settings, str(path)) is True
    assert core.load_settings(str(path)) == settings


def test_save_settings_failure_returns_false(tmp_path):
    with patch("builtins.open", side_effect=OSError("read-only")):
        assert core.save_settings({}, str(tmp_path / "x.json")) is False


def test_log_stage_file_appends(tmp_path):
    core.log_stage_file(str(tmp_path), "collect", "10 records")
    core.log_stage_file(str(tmp_path), "train", "3 epochs")
    lines = (tmp_path / core.PIPELINE_LOG_NAME).read_text().splitlines()
    assert len(lines) == 2
    assert "collect: 10 records" in lines[0]


def test_load_csv_basic(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("a,b,y\n1,2,3\n4,5,6\n7,8,9\n1,1,1\n")
    dataset = core.load_csv(str(path), "regression", "y")
    assert dataset.n_features == 2
    assert dataset.n_samples == 4
    assert dataset.feature_names == ["a", "b"]
    assert dataset.metadata["dropped_rows"] == 0


def test_load_csv_drops_rows_with_missing_cells(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("a,b,y\n1,2,3\n4,,6\n7,8,9\n1,1,1\n")
    dataset = core.load_csv(str(path), "regression", "y")
    assert dataset.n_samples == 3
    assert dataset.metadata["dropped_rows"] == 1


def test_load_csv_errors(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("a,b,y\n1,2,3\n4,5,6\n")
    with pytest.raises(ValueError, match="Unknown label column"):
        core.load_csv(str(path), "regression", "z")
    with pytest.raises(FileNotFoundError):
        core.load_csv(str(tmp_path / "missing.csv"), "regression", "y")

    empty = tmp_path / "empty.csv"
    empty.write_text("a,b,y\n1,,3\n,5,6\n")
    with pytest.raises(ValueError, match="No usable rows"):
        core.load_csv(str(empty), "regression", "y")

    text_label = tmp_path / "text.csv"
    text_label.write_text("a,b,y\n1,2,low\n4,5,high\n")
    with pytest.raises(ValueError, match="not numeric"):
        core.load_csv(str(text_label), "regression", "y")


def test_load_csv_encodes_categoricals(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("color,b,y\nred,2,yes\nblue,5,no\nred,8,yes\n")
    dataset = core.load_csv(str(path), "classification", "y")
    assert dataset.features[:, 0].tolist() == [1.0, 0.0, 1.0]
    assert dataset.metadata["categorical_encodings"]["color"] == ["blue", "red"]
    assert dataset.labels.tolist() == [1, 0, 1]


def test_dataset_needs_two_features():
    with pytest.raises(ValueError, match="at least 2 features"):
        _dataset(np.ones((10, 1)), np.zeros(10))


def test_feature_subset_invariants():
    with pytest.raises(ValueError):
        core.FeatureSubset(())
    with pytest.raises(ValueError):
        core.FeatureSubset((1, 1))
    with pytest.raises(ValueError):
        core.FeatureSubset((3,)).check_range(3)
    assert core.FeatureSubset((2, 0)).sorted() == (0, 2)


def test_split_ab_is_deterministic():
    dataset = _dataset(np.arange(20).reshape(10, 2), np.arange(10))
    first = core.split_ab(dataset, 0.2, 7)
    second = core.split_ab(dataset, 0.2, 7)
    assert first == second
    assert len(first.train_indices) == 8
    assert len(first.test_indices) == 2
    first.validate(10)


def test_split_ab_ceil_rule_and_degenerate_fraction():
    dataset = _dataset(np.arange(20).reshape(10, 2), np.arange(10))
    assert len(core.split_ab(dataset, 0.05, 0).test_indices) == 1
    with pytest.raises(ValueError, match="Degenerate"):
        core.split_ab(dataset, 0.999, 0)


def test_split_ab_needs_ten_samples():
    dataset = _dataset(np.arange(18).reshape(9, 2), np.arange(9))
    with pytest.raises(ValueError, match="at least 10 samples"):
        core.split_ab(dataset, 0.2, 0)


def test_split_ab_stratifies_classes():
    labels = np.array([0] * 30 + [1] * 10)
    dataset = _dataset(np.random.default_rng(0).normal(size=(40, 2)), labels, "classification")
    split = core.split_ab(dataset, 0.25, 3)
    test_labels = labels[list(split.test_indices)]
    assert (test_labels == 1).sum() == 2 or (test_labels == 1).sum() == 3


def test_one_minus_rae_extremes():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    assert core.one_minus_rae(y, y, train_mean=2.0) == 1.0
    assert core.one_minus_rae(y, np.full(4, 2.5), train_mean=2.5) == 0.0
    assert core.one_minus_rae(y, y + 10, train_mean=2.5) < 0


def test_evaluate_subset_regression_perfect_predictor():
    """A decision tree on the label itself reproduces the labels exactly."""
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(5, dtype=float), 10)
    features = np.column_stack([labels, rng.normal(size=50)])
    dataset = _dataset(features, labels)
    split = core.split_ab(dataset, 0.25, 0)
    score = core.evaluate_subset(dataset, split, core.FeatureSubset((0,)), seed=0, model="decision_tree")
    assert score == pytest.approx(1.0)


def test_evaluate_subset_order_invariant():
    rng = np.random.default_rng(1)
    features = rng.normal(size=(60, 4))
    labels = features[:, 0] + 0.5 * features[:, 2]
    dataset = _dataset(features, labels)
    split = core.split_ab(dataset, 0.3, 0)
    a = core.evaluate_subset(dataset, split, core.FeatureSubset((0, 2, 3)), seed=4, n_estimators=20)
    b = core.evaluate_subset(dataset, split, core.FeatureSubset((3, 0, 2)), seed=4, n_estimators=20)
    assert a == b


def test_evaluate_subset_separable_accuracy():
    rng = np.random.default_rng(2)
    labels = np.arange(100) % 2
    features = np.where(labels[:, None] == 1, 2.0, -2.0) + rng.normal(size=(100, 2))
    dataset = _dataset(features, labels, "classification")
    split = core.split_ab(dataset, 0.3, 0)
    score = core.evaluate_subset(dataset, split, core.FeatureSubset((0, 1)), seed=0)
    assert score >= 0.95


def test_evaluate_subset_rejects_out_of_range():
    dataset = _dataset(np.random.default_rng(0).normal(size=(10, 2)), np.arange(10.0))
    split = core.split_ab(dataset, 0.3, 0)
    with pytest.raises(ValueError, match="references column"):
        core.evaluate_subset(dataset, split, core.FeatureSubset((0, 5)), seed=0)


def test_make_downstream_model_choices():
    for name in core.DOWNSTREAM_MODELS:
        assert core.make_downstream_model(name, "classification", 0) is not None
        assert core.make_downstream_model(name, "regression", 0) is not None
    with pytest.raises(ValueError):
        core.make_downstream_model("svm", "regression", 0)


def test_brute_force_counts():
    rng = np.random.default_rng(3)
    three = _dataset(rng.normal(size=(30, 3)), rng.normal(size=30))
    split = core.split_ab(three, 0.3, 0)
    assert len(core.brute_force_best_subset(three, split, model="decision_tree")) == 7

    eight = _dataset(rng.normal(size=(30, 8)), rng.normal(size=30))
    split = core.split_ab(eight, 0.3, 0)
    ranked = core.brute_force_best_subset(eight, split, model="decision_tree", workers=2)
    assert len(ranked) == 255
    scores = [score for _, score in ranked]
    assert scores == sorted(scores, reverse=True)


def test_brute_force_finds_planted_feature():
    rng = np.random.default_rng(4)
    features = rng.normal(size=(80, 4))
    labels = (features[:, 0] > 0).astype(int)
    dataset = _dataset(features, labels, "classification")
    split = core.split_ab(dataset, 0.3, 0)
    ranked = core.brute_force_best_subset(dataset, split, model="decision_tree")
    top_score = ranked[0][1]
    top = [subset for subset, score in ranked if score == top_score]
    assert all(0 in subset.indices for subset in top)


def test_brute_force_too_many_features():
    dataset = _dataset(np.zeros((10, 13)) + np.arange(13), np.arange(10.0))
    split = core.split_ab(dataset, 0.3, 0)
    with pytest.raises(ValueError, match="Too many features"):
        core.brute_force_best_subset(dataset, split)


def test_internal_split_stays_inside_partition_a():
    dataset = _dataset(np.random.default_rng(0).normal(size=(40, 2)), np.arange(40.0))
    split = core.split_ab(dataset, 0.25, 0)
    inner = core.internal_split(dataset, split, 0.2, 0)
    assert set(inner.train_indices) | set(inner.test_indices) == set(split.train_indices)
    assert len(inner.test_indices) == math.ceil(len(split.train_indices) * 0.2)


def test_variant_settings_are_validated(tmp_path):
    absent = str(tmp_path / "absent.json")
    settings = core.load_settings(absent, overrides={
        "collector.channel": "redundancy", "model.encoder_kind": "lstm", "model.variational": False,
    })
    assert settings["model"]["encoder_kind"] == "lstm"
    for key, value in (
        ("collector.select_probability", [0.9, 0.1]),
        ("collector.select_probability", [0.5]),
        ("model.encoder_kind", "gru"),
        ("model.variational", 1),
        ("model.keep_checkpoints", -1),
    ):
        with pytest.raises(ValueError, match=key):
            core.load_settings(absent, overrides={key: value})

