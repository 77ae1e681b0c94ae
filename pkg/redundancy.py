# SPDX-License-Identifier: Apache-2.0
"""Feature-feature redundancy measures and subset redundancy scoring."""

import math
from dataclasses import dataclass

import numpy as np

import selector_core as core


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise ValueError(f"Length mismatch: {len(x)} != {len(y)}")
    if len(x) < 2:
        raise ValueError("Need at least 2 samples")
    return x, y


def default_bins(n_samples):
    return max(2, int(math.floor(math.sqrt(n_samples))))


def mutual_information(x, y, bins):
    """Mutual information in bits over an equal-width joint histogram."""
    x, y = _check_pair(x, y)
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    counts, _, _ = np.histogram2d(x, y, bins=bins)
    joint = counts / counts.sum()
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    rows, cols = np.nonzero(joint)
    # cell terms are summed exactly so I(x, y) == I(y, x)
    terms = [
        joint[i, j] * math.log2(joint[i, j] / (px[i] * py[j]))
        for i, j in zip(rows, cols)
    ]
    return max(0.0, math.fsum(terms))


def covariance_abs(x, y):
    """|Cov(x, y)| with population (1/n) normalization."""
    x, y = _check_pair(x, y)
    return abs(float(np.mean((x - x.mean()) * (y - y.mean()))))


def pearson_abs(x, y):
    """|Pearson correlation|; 0 when either input is constant."""
    x, y = _check_pair(x, y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    r = abs(float(np.dot(dx, dy))) / math.sqrt(sxx * syy)
    return min(1.0, r)


@dataclass
class RedundancyMatrix:
    values: np.ndarray
    metric: str
    n_features: int

    def save(self, path):
        np.savez(
            path,
            values=self.values,
            metric=np.array(self.metric),
            n_features=np.array(self.n_features),
        )

    @classmethod
    def load(cls, path):
        if not str(path).endswith(".npz"):
            path = f"{path}.npz"
        with np.load(path, allow_pickle=False) as data:
            return cls(
                values=data["values"].copy(),
                metric=str(data["metric"]),
                n_features=int(data["n_features"]),
            )


def build_matrix(dataset, metric, bins=None):
    """Pairwise redundancy over feature columns, mirrored from the upper triangle."""
    if metric not in core.REDUNDANCY_METRICS:
        raise ValueError(f"Unknown redundancy metric: {metric}")
    if metric == "mutual_information":
        n_bins = bins or default_bins(dataset.n_samples)
        measure = lambda a, b: mutual_information(a, b, n_bins)  # noqa: E731
    elif metric == "covariance":
        measure = covariance_abs
    else:
        measure = pearson_abs

    n = dataset.n_features
    values = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i, n):
            values[i, j] = measure(dataset.features[:, i], dataset.features[:, j])
            values[j, i] = values[i, j]
    core.log_message(f"Built {n}x{n} {metric} redundancy matrix")
    return RedundancyMatrix(values=values, metric=metric, n_features=n)


def subset_redundancy(matrix, subset):
    """Sum of matrix entries over unordered pairs inside the subset."""
    indices = subset.sorted()
    if indices[-1] >= matrix.n_features:
        raise ValueError(
            f"Subset index {indices[-1]} out of range for {matrix.n_features} features"
        )
    return math.fsum(
        matrix.values[a, b]
        for pos, a in enumerate(indices)
        for b in indices[pos + 1:]
    )


def normalize_redundancy(raw, full_set_raw):
    """Redundancy relative to the full feature set, clamped to [0, 1]."""
    if full_set_raw <= 0:
        raise ValueError(
            "Full-set redundancy is not positive; redundancy targets are unavailable"
        )
    return float(min(1.0, max(0.0, raw / full_set_raw)))


def full_set_redundancy(matrix):
    return subset_redundancy(matrix, core.FeatureSubset(range(matrix.n_features)))
