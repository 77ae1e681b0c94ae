# SPDX-License-Identifier: Apache-2.0
"""Reference feature selectors: K-Best, mRMR, LASSO and RFE."""

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor
from sklearn.feature_selection import RFE, mutual_info_classif, mutual_info_regression
from sklearn.linear_model import LassoCV, LogisticRegressionCV
from sklearn.preprocessing import StandardScaler

import selector_core as core
import redundancy


@dataclass
class BaselineSpec:
    method: str
    k: int = None
    alpha_grid: tuple = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
    step: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.method not in core.BASELINE_METHODS:
            raise ValueError(f"Unknown baseline method: {self.method}")
        if self.k is not None and self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.step < 1:
            raise ValueError(f"step must be >= 1, got {self.step}")


@dataclass
class BaselineResult:
    method: str
    subset: core.FeatureSubset
    score: float
    wall_time: float
    details: dict = field(default_factory=dict)


def _partition_a(dataset, split):
    rows = np.asarray(split.train_indices)
    return dataset.features[rows], dataset.labels[rows]


def relevance_scores(dataset, split, seed):
    """Mutual information between each feature and the label on partition A."""
    x, y = _partition_a(dataset, split)
    if dataset.task == "classification":
        return mutual_info_classif(x, y, random_state=seed)
    return mutual_info_regression(x, y, random_state=seed)


def select_k_best(relevance, k):
    order = np.argsort(-np.asarray(relevance), kind="stable")
    return core.FeatureSubset(order[:k].tolist())


def select_mrmr(relevance, matrix, k):
    """Greedy max relevance minus mean redundancy to the selected set.

    Returns:
        (FeatureSubset, trace) where the trace lists (feature, objective) per pick.
    """
    relevance = np.asarray(relevance, dtype=np.float64)
    n = len(relevance)
    selected = []
    trace = []
    remaining = list(range(n))
    while len(selected) < k and remaining:
        if selected:
            penalty = matrix.values[np.ix_(remaining, selected)].mean(axis=1)
        else:
            penalty = np.zeros(len(remaining))
        objective = relevance[remaining] - penalty
        pick = int(np.argmax(objective))
        feature = remaining.pop(pick)
        selected.append(feature)
        trace.append((feature, float(objective[pick])))
    return core.FeatureSubset(selected), trace


def select_lasso(dataset, split, alpha_grid, seed):
    """Nonzero-coefficient features of a cross-validated L1 model on standardized A."""
    x, y = _partition_a(dataset, split)
    x = StandardScaler().fit_transform(x)
    if dataset.task == "classification":
        model = LogisticRegressionCV(
            Cs=[1.0 / a for a in alpha_grid],
            cv=3,
            penalty="l1",
            solver="saga",
            max_iter=5000,
            random_state=seed,
        )
        model.fit(x, y)
        coefficients = np.abs(np.atleast_2d(model.coef_)).max(axis=0)
    else:
        model = LassoCV(alphas=list(alpha_grid), cv=3, random_state=seed, max_iter=10000)
        model.fit(x, y)
        coefficients = np.abs(model.coef_)

    chosen = np.flatnonzero(coefficients > 0)
    if chosen.size == 0:
        fallback = int(np.argmax(coefficients))
        core.log_message(
            f"LASSO selected no features; falling back to feature {fallback}", "WARNING"
        )
        chosen = np.array([fallback])
    return core.FeatureSubset(chosen.tolist()), coefficients


def select_rfe(dataset, split, k, step, seed, n_estimators=100):
    x, y = _partition_a(dataset, split)
    cls = RandomForestClassifier if dataset.task == "classification" else RandomForestRegressor
    selector = RFE(
        estimator=cls(n_estimators=n_estimators, random_state=seed, n_jobs=1),
        n_features_to_select=k,
        step=step,
    )
    selector.fit(x, y)
    return core.FeatureSubset(np.flatnonzero(selector.support_).tolist())


def run_baseline(spec, dataset, split, default_k=None, matrix=None, downstream=None):
    """Selects a subset with one baseline and scores it on partition B.

    Args:
        spec: BaselineSpec; `spec.k` overrides `default_k`.
        default_k: subset size used when `spec.k` is None.
        matrix: RedundancyMatrix for mrmr; built with mutual information if omitted.
        downstream: the `downstream` settings section.

    Returns:
        BaselineResult with the held-out score.
    """
    downstream = downstream or core.DEFAULT_SETTINGS["downstream"]
    k = spec.k or default_k
    if k is None:
        k = max(1, dataset.n_features // 2)
        core.log_message(f"No baseline size given; using k={k}", "WARNING")
    if k > dataset.n_features:
        raise ValueError(f"k={k} exceeds the {dataset.n_features} available features")

    started = time.perf_counter()
    details = {"k": k}
    if spec.method == "k_best":
        relevance = relevance_scores(dataset, split, spec.seed)
        subset = select_k_best(relevance, k)
    elif spec.method == "mrmr":
        if matrix is None:
            matrix = redundancy.build_matrix(
                core.take_rows(dataset, split.train_indices), "mutual_information"
            )
        relevance = relevance_scores(dataset, split, spec.seed)
        subset, trace = select_mrmr(relevance, matrix, k)
        details["trace"] = trace
    elif spec.method == "lasso":
        subset, coefficients = select_lasso(dataset, split, spec.alpha_grid, spec.seed)
        details["k"] = len(subset)
        details["abs_coefficients"] = coefficients.tolist()
    else:
        subset = select_rfe(
            dataset, split, k, spec.step, spec.seed, downstream.get("n_estimators", 100)
        )

    score = core.evaluate_subset(
        dataset,
        split,
        subset,
        downstream.get("seed", 0),
        downstream.get("model", "random_forest"),
        downstream.get("n_estimators", 100),
    )
    wall_time = time.perf_counter() - started
    core.log_message(
        f"Baseline {spec.method}: {len(subset)} features, score {score:.4f} ({wall_time:.1f}s)"
    )
    return BaselineResult(spec.method, subset, score, wall_time, details)
