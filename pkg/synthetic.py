# SPDX-License-Identifier: Apache-2.0
"""Synthetic tabular datasets with known informative features."""

import numpy as np

import selector_core as core


def _check_counts(informative, noise, samples, duplicates=0, duplicate_factor=1.0):
    if informative < 1:
        raise ValueError(f"informative must be >= 1, got {informative}")
    if noise < 0 or duplicates < 0:
        raise ValueError("noise and duplicates must be >= 0")
    if samples < 10:
        raise ValueError(f"samples must be >= 10, got {samples}")
    if not 0.0 <= duplicate_factor <= 1.0:
        raise ValueError(f"duplicate_factor must be in [0, 1], got {duplicate_factor}")
    if informative + duplicates + noise < 2:
        raise ValueError("A dataset needs at least 2 features")


def _target(signal, task, nonlinear, rng):
    """Label from the informative block: a weighted sum, optionally with nonlinear terms."""
    weights = np.linspace(1.0, 2.0, signal.shape[1])
    latent = signal @ weights
    if nonlinear:
        latent = latent + np.sin(signal[:, 0]) * 2.0
        if signal.shape[1] > 1:
            latent = latent + 0.5 * signal[:, 1] ** 2
    latent = latent + 0.1 * rng.standard_normal(len(latent))
    if task == "classification":
        return (latent > np.median(latent)).astype(np.int64)
    return latent


def _names(n):
    return [f"f{i}" for i in range(n)]


def noise_dataset(informative=5, noise=45, samples=500, task="regression", nonlinear=True, seed=0):
    """Informative columns first, standard-normal noise columns after."""
    _check_counts(informative, noise, samples)
    rng = np.random.default_rng(seed)
    signal = rng.standard_normal((samples, informative))
    clutter = rng.standard_normal((samples, noise))
    labels = _target(signal, task, nonlinear, rng)
    features = np.hstack([signal, clutter])
    return core.TabularDataset(
        name=f"synthetic_noise_{informative}_{noise}",
        features=features,
        feature_names=_names(features.shape[1]),
        labels=labels,
        task=task,
        metadata={
            "kind": "noise",
            "seed": seed,
            "informative": list(range(informative)),
            "label_column": "y",
        },
    )


def redundant_dataset(informative=5, duplicates=5, noise=10, samples=500, duplicate_factor=0.95,
                      task="regression", nonlinear=True, seed=0):
    """Informative columns, then near-duplicates of them, then noise.

    Duplicate j copies informative column j mod `informative` as
    rho * x + sqrt(1 - rho^2) * z; rho = 1 gives exact copies.
    """
    _check_counts(informative, noise, samples, duplicates, duplicate_factor)
    rng = np.random.default_rng(seed)
    signal = rng.standard_normal((samples, informative))
    sources = [j % informative for j in range(duplicates)]
    blur = np.sqrt(max(0.0, 1.0 - duplicate_factor ** 2))
    copies = [
        duplicate_factor * signal[:, s] + blur * rng.standard_normal(samples) if blur else signal[:, s].copy()
        for s in sources
    ]
    clutter = rng.standard_normal((samples, noise))
    labels = _target(signal, task, nonlinear, rng)
    blocks = [signal] + ([np.column_stack(copies)] if copies else []) + [clutter]
    features = np.hstack(blocks)
    return core.TabularDataset(
        name=f"synthetic_redundant_{informative}_{duplicates}_{noise}",
        features=features,
        feature_names=_names(features.shape[1]),
        labels=labels,
        task=task,
        metadata={
            "kind": "redundant",
            "seed": seed,
            "informative": list(range(informative)),
            "duplicates": {informative + j: s for j, s in enumerate(sources)},
            "duplicate_factor": duplicate_factor,
            "label_column": "y",
        },
    )


def separable_dataset(informative=2, noise=8, samples=200, seed=0):
    """Two Gaussian blobs at -2 and +2 on the informative axes, plus noise."""
    _check_counts(informative, noise, samples)
    rng = np.random.default_rng(seed)
    labels = np.arange(samples) % 2
    rng.shuffle(labels)
    centers = np.where(labels == 1, 2.0, -2.0)[:, None]
    signal = centers + rng.standard_normal((samples, informative))
    clutter = rng.standard_normal((samples, noise))
    features = np.hstack([signal, clutter])
    return core.TabularDataset(
        name=f"synthetic_separable_{informative}_{noise}",
        features=features,
        feature_names=_names(features.shape[1]),
        labels=labels.astype(np.int64),
        task="classification",
        metadata={
            "kind": "separable",
            "seed": seed,
            "informative": list(range(informative)),
            "label_column": "y",
        },
    )


def generate_synthetic(spec, task="regression"):
    """Builds a dataset from the `dataset.synthetic` settings section."""
    kind = spec.get("kind", "noise")
    seed = spec.get("seed", 0)
    if kind == "noise":
        dataset = noise_dataset(
            spec.get("informative", 5), spec.get("noise", 45), spec.get("samples", 500),
            task, spec.get("nonlinear", True), seed,
        )
    elif kind == "redundant":
        dataset = redundant_dataset(
            spec.get("informative", 5), spec.get("duplicates", 5), spec.get("noise", 10),
            spec.get("samples", 500), spec.get("duplicate_factor", 0.95),
            task, spec.get("nonlinear", True), seed,
        )
    elif kind == "separable":
        dataset = separable_dataset(
            spec.get("informative", 2), spec.get("noise", 8), spec.get("samples", 200), seed
        )
    else:
        raise ValueError(f"Unknown synthetic kind: {kind}")
    core.log_message(
        f"Generated {dataset.name}: {dataset.n_samples} rows x {dataset.n_features} features"
    )
    return dataset
