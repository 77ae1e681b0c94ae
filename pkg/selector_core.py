# SPDX-License-Identifier: Apache-2.0

import os
import copy
import json
import math
import hashlib
import logging
import datetime
import itertools
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor
from sklearn.linear_model import LogisticRegression, Ridge
from sklearn.metrics import accuracy_score
from sklearn.model_selection import train_test_split
from sklearn.neighbors import KNeighborsClassifier, KNeighborsRegressor
from sklearn.tree import DecisionTreeClassifier, DecisionTreeRegressor

# --- Configuration ---
SETTINGS_FILE = "settings.json"
PIPELINE_LOG_NAME = "pipeline_log.txt"

TASKS = ("classification", "regression")
CHANNELS = ("supervised", "unsupervised", "redundancy")
ENCODER_KINDS = ("transformer", "lstm")
REDUNDANCY_METRICS = ("mutual_information", "covariance", "pearson")
DOWNSTREAM_MODELS = ("random_forest", "decision_tree", "knn", "linear")
BASELINE_METHODS = ("k_best", "mrmr", "lasso", "rfe")
SYNTHETIC_KINDS = ("noise", "redundant", "separable")

# Loss weights published for the two training regimes.
LOSS_WEIGHTS_WITH_REDUNDANCY = {"alpha": 0.5, "beta": 0.3, "gamma": 0.001, "delta": 0.2}
LOSS_WEIGHTS_WITHOUT_REDUNDANCY = {"alpha": 0.8, "beta": 0.2, "gamma": 0.001, "delta": 0.0}

DEFAULT_SETTINGS = {
    "dataset": {
        "path": None,
        "label_column": "y",
        "task": "regression",
        "synthetic": {
            "kind": "noise",
            "informative": 5,
            "noise": 45,
            "duplicates": 5,
            "duplicate_factor": 0.95,
            "samples": 500,
            "nonlinear": True,
            "seed": 0,
        },
    },
    "split": {"test_fraction": 0.3, "seed": 0},
    "downstream": {"model": "random_forest", "n_estimators": 100, "seed": 0},
    "redundancy": {"metric": "mutual_information", "bins": None},
    "collector": {
        "episodes": 300,
        "steps_per_episode": 1,
        "channel": "supervised",
        "strategy": "dqn",
        "epsilon_start": 1.0,
        "epsilon_end": 0.1,
        "epsilon_decay_fraction": 0.6,
        "select_probability": [0.1, 0.9],
        "hidden_units": 64,
        "replay_capacity": 5000,
        "batch_size": 32,
        "target_sync_every": 50,
        "discount": 0.9,
        "learning_rate": 0.001,
        "validation_fraction": 0.2,
        "k_neighbors": 5,
        "seed": 0,
    },
    "corpus": {"augment_copies": 25, "seed": 0},
    "model": {
        "use_redundancy": True,
        "variational": True,
        "encoder_kind": "transformer",
        "token_embedding_dim": 64,
        "encoder_layers": 2,
        "decoder_layers": 2,
        "attention_heads": 8,
        "feedforward_dim": 256,
        "latent_dim": 64,
        "evaluator_hidden": 200,
        "dropout": 0.1,
        "alpha": None,
        "beta": None,
        "gamma": None,
        "delta": None,
        "batch_size": 64,
        "learning_rate": 0.0001,
        "pretrain_epochs": 210,
        "finetune_epochs": 90,
        "grad_clip": 1.0,
        "kl_form": "printed",
        "keep_checkpoints": 1,
        "seed": 0,
    },
    "search": {
        "n_starts": 25,
        "steps": 20,
        "step_size": 0.1,
        "trade_off": 0.1,
        "max_decode_length": None,
        "rerank_with_ground_truth": False,
        "trade_off_sweep": [],
        "seed": 0,
    },
    "baselines": {
        "methods": list(BASELINE_METHODS),
        "k": None,
        "lasso_grid": [0.0001, 0.001, 0.01, 0.1, 1.0],
        "rfe_step": 1,
    },
    "runtime": {"blas_threads": 2, "workers": 1, "progress": True},
    "output_dir": "runs/default",
    "profile": "full",
}

PROFILES = {
    "full": {},
    # 200 scored subsets, 100 + 40 epochs
    "desk": {
        "collector": {"episodes": 50, "steps_per_episode": 4},
        "corpus": {"augment_copies": 10},
        "model": {
            "pretrain_epochs": 100,
            "finetune_epochs": 40,
            "learning_rate": 0.001,
            "dropout": 0.0,
        },
    },
}

# field -> (types, check, message); check None means type check only
SETTINGS_SCHEMA = {
    "dataset.path": ((str, type(None)), None, "path or null"),
    "dataset.label_column": ((str,), lambda v: bool(v), "non-empty string"),
    "dataset.task": ((str,), lambda v: v in TASKS, f"one of {TASKS}"),
    "dataset.synthetic.kind": ((str,), lambda v: v in SYNTHETIC_KINDS, f"one of {SYNTHETIC_KINDS}"),
    "dataset.synthetic.informative": ((int,), lambda v: v >= 1, "integer >= 1"),
    "dataset.synthetic.noise": ((int,), lambda v: v >= 0, "integer >= 0"),
    "dataset.synthetic.duplicates": ((int,), lambda v: v >= 0, "integer >= 0"),
    "dataset.synthetic.duplicate_factor": ((int, float), lambda v: 0.0 <= v <= 1.0, "number in [0, 1]"),
    "dataset.synthetic.samples": ((int,), lambda v: v >= 10, "integer >= 10"),
    "dataset.synthetic.nonlinear": ((bool,), None, "boolean"),
    "dataset.synthetic.seed": ((int,), None, "integer"),
    "split.test_fraction": ((int, float), lambda v: 0.0 < v < 1.0, "number in (0, 1)"),
    "split.seed": ((int,), None, "integer"),
    "downstream.model": ((str,), lambda v: v in DOWNSTREAM_MODELS, f"one of {DOWNSTREAM_MODELS}"),
    "downstream.n_estimators": ((int,), lambda v: v >= 1, "integer >= 1"),
    "downstream.seed": ((int,), None, "integer"),
    "redundancy.metric": ((str,), lambda v: v in REDUNDANCY_METRICS, f"one of {REDUNDANCY_METRICS}"),
    "redundancy.bins": ((int, type(None)), lambda v: v is None or v >= 2, "integer >= 2 or null"),
    "collector.episodes": ((int,), lambda v: v >= 1, "integer >= 1"),
    "collector.steps_per_episode": ((int,), lambda v: v >= 1, "integer >= 1"),
    "collector.channel": ((str,), lambda v: v in CHANNELS, f"one of {CHANNELS}"),
    "collector.strategy": ((str,), lambda v: v in ("dqn", "random"), "one of ('dqn', 'random')"),
    "collector.epsilon_start": ((int, float), lambda v: 0.0 <= v <= 1.0, "number in [0, 1]"),
    "collector.epsilon_end": ((int, float), lambda v: 0.0 <= v <= 1.0, "number in [0, 1]"),
    "collector.epsilon_decay_fraction": ((int, float), lambda v: 0.0 < v <= 1.0, "number in (0, 1]"),
    "collector.select_probability": ((list,), lambda v: len(v) == 2 and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v) and 0.0 <= v[0] <= v[1] <= 1.0, "[low, high] with 0 <= low <= high <= 1"),
    "collector.hidden_units": ((int,), lambda v: v >= 1, "integer >= 1"),
    "collector.replay_capacity": ((int,), lambda v: v >= 1, "integer >= 1"),
    "collector.batch_size": ((int,), lambda v: v >= 1, "integer >= 1"),
    "collector.target_sync_every": ((int,), lambda v: v >= 1, "integer >= 1"),
    "collector.discount": ((int, float), lambda v: 0.0 <= v < 1.0, "number in [0, 1)"),
    "collector.learning_rate": ((int, float), lambda v: v > 0, "number > 0"),
    "collector.validation_fraction": ((int, float), lambda v: 0.0 < v < 1.0, "number in (0, 1)"),
    "collector.k_neighbors": ((int,), lambda v: v >= 1, "integer >= 1"),
    "collector.seed": ((int,), None, "integer"),
    "corpus.augment_copies": ((int,), lambda v: v >= 0, "integer >= 0"),
    "corpus.seed": ((int,), None, "integer"),
    "model.use_redundancy": ((bool,), None, "boolean"),
    "model.variational": ((bool,), None, "boolean"),
    "model.encoder_kind": ((str,), lambda v: v in ENCODER_KINDS, f"one of {ENCODER_KINDS}"),
    "model.token_embedding_dim": ((int,), lambda v: v >= 1, "integer >= 1"),
    "model.encoder_layers": ((int,), lambda v: v >= 1, "integer >= 1"),
    "model.decoder_layers": ((int,), lambda v: v >= 1, "integer >= 1"),
    "model.attention_heads": ((int,), lambda v: v >= 1, "integer >= 1"),
    "model.feedforward_dim": ((int,), lambda v: v >= 1, "integer >= 1"),
    "model.latent_dim": ((int,), lambda v: v >= 1, "integer >= 1"),
    "model.evaluator_hidden": ((int,), lambda v: v >= 1, "integer >= 1"),
    "model.dropout": ((int, float), lambda v: 0.0 <= v < 1.0, "number in [0, 1)"),
    "model.alpha": ((int, float, type(None)), lambda v: v is None or v >= 0, "number >= 0 or null"),
    "model.beta": ((int, float, type(None)), lambda v: v is None or v >= 0, "number >= 0 or null"),
    "model.gamma": ((int, float, type(None)), lambda v: v is None or v >= 0, "number >= 0 or null"),
    "model.delta": ((int, float, type(None)), lambda v: v is None or v >= 0, "number >= 0 or null"),
    "model.batch_size": ((int,), lambda v: v >= 1, "integer >= 1"),
    "model.learning_rate": ((int, float), lambda v: v > 0, "number > 0"),
    "model.pretrain_epochs": ((int,), lambda v: v >= 0, "integer >= 0"),
    "model.finetune_epochs": ((int,), lambda v: v >= 0, "integer >= 0"),
    "model.grad_clip": ((int, float), lambda v: v > 0, "number > 0"),
    "model.kl_form": ((str,), lambda v: v in ("printed", "standard"), "one of ('printed', 'standard')"),
    "model.keep_checkpoints": ((int,), lambda v: v >= 0, "integer >= 0"),
    "model.seed": ((int,), None, "integer"),
    "search.n_starts": ((int,), lambda v: v >= 1, "integer >= 1"),
    "search.steps": ((int,), lambda v: v >= 0, "integer >= 0"),
    "search.step_size": ((int, float), lambda v: v > 0, "number > 0"),
    "search.trade_off": ((int, float), lambda v: v >= 0, "number >= 0"),
    "search.max_decode_length": ((int, type(None)), lambda v: v is None or v >= 2, "integer >= 2 or null"),
    "search.rerank_with_ground_truth": ((bool,), None, "boolean"),
    "search.trade_off_sweep": ((list,), lambda v: all(isinstance(x, (int, float)) and x >= 0 for x in v), "list of numbers >= 0"),
    "search.seed": ((int,), None, "integer"),
    "baselines.methods": ((list,), lambda v: all(m in BASELINE_METHODS for m in v), f"subset of {BASELINE_METHODS}"),
    "baselines.k": ((int, type(None)), lambda v: v is None or v >= 1, "integer >= 1 or null"),
    "baselines.lasso_grid": ((list,), lambda v: bool(v) and all(isinstance(x, (int, float)) and x > 0 for x in v), "non-empty list of numbers > 0"),
    "baselines.rfe_step": ((int,), lambda v: v >= 1, "integer >= 1"),
    "runtime.blas_threads": ((int,), lambda v: v >= 1, "integer >= 1"),
    "runtime.workers": ((int,), lambda v: v >= 1, "integer >= 1"),
    "runtime.progress": ((bool,), None, "boolean"),
    "output_dir": ((str,), lambda v: bool(v), "non-empty string"),
    "profile": ((str,), lambda v: v in PROFILES, f"one of {tuple(PROFILES)}"),
}

# --- Logging Setup ---
logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s"
)


def log_message(message, level="INFO"):
    """Logs messages to console."""
    logger = logging.getLogger()
    if level == "INFO":
        logger.info(message)
    elif level == "WARNING":
        logger.warning(message)
    elif level == "ERROR":
        logger.error(message)
    elif level == "DEBUG":
        logger.debug(message)
    return message


def log_stage_file(output_dir, stage, detail):
    """Appends a stage event to the run's pipeline log."""
    timestamp = datetime.datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    log_file = os.path.join(output_dir, PIPELINE_LOG_NAME)
    try:
        os.makedirs(output_dir, exist_ok=True)
        with open(log_file, "a", encoding="utf-8") as f:
            f.write(f"[{timestamp}] {stage}: {detail}\n")
    except OSError as e:
        log_message(f"Error writing to pipeline log: {e}", "ERROR")


# --- Settings ---
def deep_merge(base, overrides):
    """Returns a copy of `base` with `overrides` merged in recursively."""
    merged = copy.deepcopy(base)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def get_setting(settings, dotted_key):
    node = settings
    for part in dotted_key.split("."):
        node = node[part]
    return node


def set_setting(settings, dotted_key, value):
    """Sets a dotted key in place; unknown keys raise KeyError."""
    parts = dotted_key.split(".")
    node = settings
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise KeyError(f"Unknown setting: {dotted_key}")
        node = node[part]
    if parts[-1] not in node:
        raise KeyError(f"Unknown setting: {dotted_key}")
    node[parts[-1]] = value


def validate_settings(settings):
    """Checks settings against SETTINGS_SCHEMA.

    Returns:
        A list of `field: message` strings; empty when the settings are valid.
    """
    errors = []
    for dotted_key, (types, check, expected) in SETTINGS_SCHEMA.items():
        try:
            value = get_setting(settings, dotted_key)
        except (KeyError, TypeError):
            errors.append(f"{dotted_key}: missing")
            continue
        # bool is an int subclass; only accept it where booleans are expected
        if isinstance(value, bool) and bool not in types:
            errors.append(f"{dotted_key}: expected {expected}, got {value!r}")
            continue
        if not isinstance(value, types):
            errors.append(f"{dotted_key}: expected {expected}, got {value!r}")
            continue
        if check is not None and not check(value):
            errors.append(f"{dotted_key}: expected {expected}, got {value!r}")

    known = set(SETTINGS_SCHEMA)
    for dotted_key in _flatten_keys(settings):
        if dotted_key not in known:
            errors.append(f"{dotted_key}: unknown setting")

    model = settings.get("model", {}) if isinstance(settings, dict) else {}
    heads = model.get("attention_heads")
    dim = model.get("token_embedding_dim")
    if isinstance(heads, int) and isinstance(dim, int) and heads > 0 and dim % heads:
        errors.append("model.attention_heads: must divide model.token_embedding_dim")
    return errors


def _flatten_keys(settings, prefix=""):
    for key, value in settings.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten_keys(value, dotted + ".")
        else:
            yield dotted


def apply_profile(settings, profile):
    if profile not in PROFILES:
        raise ValueError(f"profile: expected one of {tuple(PROFILES)}, got {profile!r}")
    merged = deep_merge(settings, PROFILES[profile])
    merged["profile"] = profile
    return merged


def resolve_loss_weights(model_settings):
    """Fills unset loss weights from the regime picked by `use_redundancy`."""
    defaults = (
        LOSS_WEIGHTS_WITH_REDUNDANCY
        if model_settings.get("use_redundancy", True)
        else LOSS_WEIGHTS_WITHOUT_REDUNDANCY
    )
    resolved = dict(model_settings)
    for name, value in defaults.items():
        if resolved.get(name) is None:
            resolved[name] = value
    return resolved


def load_settings(path=SETTINGS_FILE, overrides=None, profile=None):
    """Loads settings from `path`, merged over DEFAULT_SETTINGS.

    Args:
        path: JSON settings document; a missing file means defaults.
        overrides: mapping of dotted keys to values, applied last.
        profile: optional profile name applied before the overrides.

    Returns:
        The validated settings dict.

    Raises:
        ValueError: listing every invalid field.
    """
    loaded = {}
    if path and os.path.exists(path):
        try:
            with open(path, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: not valid JSON ({e})") from e
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: top level must be an object")
        log_message(f"Loaded settings from {path}")
    else:
        log_message(f"{path} not found. Using defaults.")

    settings = deep_merge(DEFAULT_SETTINGS, loaded)
    chosen_profile = profile or settings.get("profile", "full")
    settings = apply_profile(settings, chosen_profile)

    errors = []
    for dotted_key, value in (overrides or {}).items():
        try:
            set_setting(settings, dotted_key, value)
        except KeyError:
            errors.append(f"{dotted_key}: unknown setting")
    errors.extend(validate_settings(settings))
    if errors:
        raise ValueError("Invalid settings:\n  " + "\n  ".join(errors))
    return settings


def save_settings(settings, path=SETTINGS_FILE):
    """Saves settings to `path`."""
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(settings, f, indent=2)
        log_message(f"Saved settings to {path}")
        return True
    except OSError as e:
        log_message(f"Error saving settings: {e}", "ERROR")
        return False


# --- Artifact helpers ---
def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sanitize_for_json(obj):
    """Converts numpy scalars/arrays and tuples into JSON-serializable values."""
    if isinstance(obj, (str, bool)) or obj is None:
        return obj
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [sanitize_for_json(x) for x in obj.tolist()]
    if isinstance(obj, (int, float)):
        return obj
    if isinstance(obj, (list, tuple)):
        return [sanitize_for_json(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): sanitize_for_json(v) for k, v in obj.items()}
    return str(obj)


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(sanitize_for_json(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# --- Tabular core ---
@dataclass
class TabularDataset:
    """Feature matrix with named columns, labels and a task type."""

    name: str
    features: np.ndarray
    feature_names: list
    labels: np.ndarray
    task: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.feature_names = [str(n) for n in self.feature_names]
        if self.task not in TASKS:
            raise ValueError(f"Unknown task: {self.task}")
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if self.n_features < 2:
            raise ValueError(f"Dataset needs at least 2 features, got {self.n_features}")
        if self.n_samples < 1:
            raise ValueError("Dataset has no usable rows")
        if len(self.feature_names) != self.n_features:
            raise ValueError("feature_names length does not match the feature matrix")
        if len(set(self.feature_names)) != self.n_features:
            raise ValueError("feature_names must be unique")
        if len(self.labels) != self.n_samples:
            raise ValueError("labels length does not match n_samples")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain missing or non-finite values")

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class DataSplit:
    train_indices: tuple
    test_indices: tuple
    seed: int

    def validate(self, n_samples):
        train = set(self.train_indices)
        test = set(self.test_indices)
        if not train or not test:
            raise ValueError("Both sides of a split must be nonempty")
        if train & test:
            raise ValueError("Split sides overlap")
        if train | test != set(range(n_samples)):
            raise ValueError("Split must cover every row exactly once")


@dataclass(frozen=True)
class FeatureSubset:
    """Ordered list of distinct 0-based feature indices."""

    indices: tuple

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", indices)
        if not indices:
            raise ValueError("Feature subset must be nonempty")
        if len(set(indices)) != len(indices):
            raise ValueError(f"Feature subset has duplicates: {indices}")
        if min(indices) < 0:
            raise ValueError(f"Feature subset has negative indices: {indices}")

    def check_range(self, n_features):
        if max(self.indices) >= n_features:
            raise ValueError(
                f"Feature subset references column {max(self.indices)} "
                f"but the dataset has {n_features} features"
            )
        return self

    def sorted(self):
        return tuple(sorted(self.indices))

    def __len__(self):
        return len(self.indices)


def load_csv(path, task, label_column, name=None):
    """Reads a UTF-8 CSV with a header row into a TabularDataset.

    Rows with any missing cell are dropped and counted; non-numeric feature
    columns are integer-encoded.

    Raises:
        FileNotFoundError: `path` does not exist.
        ValueError: unknown label column, no usable rows, or a non-numeric
            label under regression.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Dataset file not found: {path}")
    if task not in TASKS:
        raise ValueError(f"Unknown task: {task}")
    frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    if label_column not in frame.columns:
        raise ValueError(f"Unknown label column '{label_column}' in {path}")

    rows_read = len(frame)
    frame = frame.replace(r"^\s*$", np.nan, regex=True).dropna(axis=0, how="any")
    dropped = rows_read - len(frame)
    if len(frame) == 0:
        raise ValueError(f"No usable rows in {path}")
    if dropped:
        log_message(f"Dropped {dropped} rows with missing values from {path}", "WARNING")

    encodings = {}
    columns = []
    feature_names = [c for c in frame.columns if c != label_column]
    for column in feature_names:
        series = frame[column]
        if pd.api.types.is_numeric_dtype(series):
            columns.append(series.to_numpy(dtype=np.float64))
        else:
            codes, uniques = pd.factorize(series.astype(str), sort=True)
            encodings[column] = [str(u) for u in uniques]
            columns.append(codes.astype(np.float64))
    features = np.column_stack(columns) if columns else np.empty((len(frame), 0))

    label_series = frame[label_column]
    classes = None
    if task == "regression":
        try:
            labels = pd.to_numeric(label_series, errors="raise").to_numpy(dtype=np.float64)
        except (ValueError, TypeError) as e:
            raise ValueError(f"Label column '{label_column}' is not numeric: {e}") from e
    else:
        codes, uniques = pd.factorize(label_series.astype(str), sort=True)
        labels = codes.astype(np.int64)
        classes = [str(u) for u in uniques]

    metadata = {
        "source": os.path.abspath(path),
        "rows_read": rows_read,
        "dropped_rows": dropped,
        "label_column": label_column,
        "categorical_encodings": encodings,
        "classes": classes,
    }
    log_message(f"Loaded {len(frame)} rows x {len(feature_names)} features from {path}")
    return TabularDataset(
        name=name or os.path.splitext(os.path.basename(path))[0],
        features=features,
        feature_names=feature_names,
        labels=labels,
        task=task,
        metadata=metadata,
    )


def save_csv(dataset, path):
    """Writes a dataset back to CSV (labels last, column named by metadata)."""
    label_column = dataset.metadata.get("label_column", "y")
    frame = pd.DataFrame(dataset.features, columns=dataset.feature_names)
    frame[label_column] = dataset.labels
    frame.to_csv(path, index=False, encoding="utf-8")


def split_ab(dataset, test_fraction, seed):
    """Splits rows into partition A (train) and held-out partition B (test).

    The test side holds ceil(n * test_fraction) rows. Classification splits
    are class-stratified when every class has at least two rows.
    """
    n = dataset.n_samples
    if n < 10:
        raise ValueError(f"Dataset needs at least 10 samples to split, got {n}")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"Degenerate test fraction: {test_fraction}")
    n_test = int(math.ceil(n * test_fraction))
    if n_test < 1 or n - n_test < 1:
        raise ValueError(
            f"Degenerate test fraction {test_fraction}: {n - n_test} train / {n_test} test rows"
        )

    indices = np.arange(n)
    stratify = None
    if dataset.task == "classification":
        _, counts = np.unique(dataset.labels, return_counts=True)
        n_classes = len(counts)
        if counts.min() >= 2 and n_test >= n_classes and n - n_test >= n_classes:
            stratify = dataset.labels
        else:
            log_message("Stratified split not possible; using a plain random split.", "DEBUG")

    if stratify is not None:
        train, test = train_test_split(
            indices, test_size=n_test, stratify=stratify, random_state=seed
        )
    else:
        order = np.random.default_rng(seed).permutation(n)
        test, train = order[:n_test], order[n_test:]
    return DataSplit(
        train_indices=tuple(int(i) for i in np.sort(train)),
        test_indices=tuple(int(i) for i in np.sort(test)),
        seed=int(seed),
    )


def internal_split(dataset, split, validation_fraction, seed):
    """Sub-splits partition A into train/validation folds; B is never touched."""
    rows = np.asarray(split.train_indices)
    n_val = int(math.ceil(len(rows) * validation_fraction))
    if n_val < 1 or len(rows) - n_val < 1:
        raise ValueError("Partition A is too small for an internal validation fold")
    order = np.random.default_rng(seed).permutation(len(rows))
    val, train = rows[order[:n_val]], rows[order[n_val:]]
    return DataSplit(
        train_indices=tuple(int(i) for i in np.sort(train)),
        test_indices=tuple(int(i) for i in np.sort(val)),
        seed=int(seed),
    )


def make_downstream_model(name, task, seed, n_estimators=100):
    """Factory for the downstream model that scores a subset."""
    classification = task == "classification"
    if name == "random_forest":
        cls = RandomForestClassifier if classification else RandomForestRegressor
        return cls(n_estimators=n_estimators, random_state=seed, n_jobs=1)
    if name == "decision_tree":
        cls = DecisionTreeClassifier if classification else DecisionTreeRegressor
        return cls(random_state=seed)
    if name == "knn":
        return KNeighborsClassifier() if classification else KNeighborsRegressor()
    if name == "linear":
        if classification:
            return LogisticRegression(max_iter=1000)
        return Ridge(alpha=1.0)
    raise ValueError(f"Unknown downstream model: {name}")


def one_minus_rae(y_true, y_pred, train_mean):
    """1 - RAE, where RAE = sum|y - y_hat| / sum|y - mean(y_train)|."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    numerator = np.abs(y_true - y_pred).sum()
    denominator = np.abs(y_true - train_mean).sum()
    if denominator == 0:
        return 1.0 if numerator == 0 else 0.0
    return float(1.0 - numerator / denominator)


def evaluate_subset(dataset, split, subset, seed, model="random_forest", n_estimators=100):
    """Fits the downstream model on train rows restricted to `subset`.

    Returns:
        Accuracy on the test rows for classification, 1 - RAE for regression.
    """
    subset.check_range(dataset.n_features)
    # canonical column order keeps the fit independent of index order
    columns = list(subset.sorted())
    train = np.asarray(split.train_indices)
    test = np.asarray(split.test_indices)
    x_train = dataset.features[np.ix_(train, columns)]
    x_test = dataset.features[np.ix_(test, columns)]
    y_train = dataset.labels[train]
    y_test = dataset.labels[test]

    estimator = make_downstream_model(model, dataset.task, seed, n_estimators)
    estimator.fit(x_train, y_train)
    predictions = estimator.predict(x_test)
    if dataset.task == "classification":
        return float(accuracy_score(y_test, predictions))
    return one_minus_rae(y_test, predictions, float(np.mean(y_train)))


def brute_force_best_subset(dataset, split, max_features=12, seed=0, workers=1,
                            model="random_forest", n_estimators=100):
    """Scores every nonempty subset; the oracle for small datasets.

    Returns:
        List of (FeatureSubset, score) sorted by descending score.
    """
    if max_features > 12:
        raise ValueError("brute force is capped at 12 features")
    if dataset.n_features > max_features:
        raise ValueError(
            f"Too many features for brute force: {dataset.n_features} > {max_features}"
        )
    subsets = [
        FeatureSubset(combo)
        for size in range(1, dataset.n_features + 1)
        for combo in itertools.combinations(range(dataset.n_features), size)
    ]
    log_message(f"Brute force: scoring {len(subsets)} subsets with {workers} worker(s)")

    def _score(subset):
        return evaluate_subset(dataset, split, subset, seed, model, n_estimators)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="subset-eval") as executor:
            scores = list(executor.map(_score, subsets))
    else:
        scores = [_score(s) for s in subsets]

    ranked = sorted(
        zip(subsets, scores), key=lambda item: (-item[1], len(item[0]), item[0].indices)
    )
    return ranked


def take_rows(dataset, rows):
    """Dataset restricted to `rows`, e.g. partition A."""
    rows = np.asarray(rows)
    metadata = dict(dataset.metadata)
    metadata["row_subset"] = len(rows)
    return TabularDataset(
        name=dataset.name,
        features=dataset.features[rows],
        feature_names=list(dataset.feature_names),
        labels=dataset.labels[rows],
        task=dataset.task,
        metadata=metadata,
    )
