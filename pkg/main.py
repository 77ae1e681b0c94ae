# SPDX-License-Identifier: Apache-2.0

import os
import sys
import json
import time
import argparse
import contextlib

import numpy as np
import torch
import threadpoolctl
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor

# Import core functionality
import selector_core as core
import redundancy
import collector
import corpus as corpus_lib
import subset_model
import latent_search
import baselines
import synthetic
import reporting

# --- Artifact names ---
DATASET_CSV = "dataset.csv"
DATASET_META = "dataset.meta.json"
REDUNDANCY_FILE = "redundancy.npz"
COLLECTION_FILE = "collection.jsonl"
CORPUS_FILE = "corpus.jsonl"
MODEL_FILE = "model.pt"
HISTORY_FILE = "history.json"
SEARCH_FILE = "search.json"
EVALUATION_FILE = "evaluation.json"
SYNTHETIC_CSV = "synthetic.csv"
LOCK_FILE = ".lock"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def artifact(output_dir, name):
    return os.path.join(output_dir, name)


def require_artifact(output_dir, name, stage):
    """Path of an upstream artifact; raises naming the file when it is missing."""
    path = artifact(output_dir, name)
    if not os.path.exists(path):
        raise FileNotFoundError(f"Missing artifact {path}; run `{stage}` first")
    return path


@contextlib.contextmanager
def output_lock(output_dir):
    """Exclusive ownership of an output directory for one run."""
    os.makedirs(output_dir, exist_ok=True)
    path = artifact(output_dir, LOCK_FILE)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise RuntimeError(f"Output directory {output_dir} is locked by another run ({path})") from e
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield path
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(path)


# --- Dataset stage ---
def prepare_dataset(settings, output_dir):
    """Loads or generates the dataset, splits it and writes dataset.csv + meta."""
    source = settings["dataset"]
    if source["path"]:
        dataset = core.load_csv(source["path"], source["task"], source["label_column"])
    else:
        dataset = synthetic.generate_synthetic(source["synthetic"], source["task"])
        dataset.metadata["label_column"] = source["label_column"]
    split = core.split_ab(dataset, settings["split"]["test_fraction"], settings["split"]["seed"])
    split.validate(dataset.n_samples)

    csv_path = artifact(output_dir, DATASET_CSV)
    core.save_csv(dataset, csv_path)
    core.write_json(artifact(output_dir, DATASET_META), {
        "name": dataset.name,
        "task": dataset.task,
        "label_column": dataset.metadata.get("label_column", source["label_column"]),
        "n_samples": dataset.n_samples,
        "n_features": dataset.n_features,
        "informative": dataset.metadata.get("informative"),
        "dropped_rows": dataset.metadata.get("dropped_rows", 0),
        "train_indices": list(split.train_indices),
        "test_indices": list(split.test_indices),
        "split_seed": split.seed,
    })
    core.log_stage_file(output_dir, "dataset", f"{dataset.name} {dataset.n_samples}x{dataset.n_features}")
    return dataset, split


def load_dataset_artifact(output_dir):
    """Reads dataset.csv and its split back from the output directory."""
    csv_path = require_artifact(output_dir, DATASET_CSV, "collect")
    meta = core.read_json(require_artifact(output_dir, DATASET_META, "collect"))
    dataset = core.load_csv(csv_path, meta["task"], meta["label_column"], name=meta["name"])
    dataset.metadata["informative"] = meta.get("informative")
    split = core.DataSplit(
        train_indices=tuple(meta["train_indices"]),
        test_indices=tuple(meta["test_indices"]),
        seed=meta["split_seed"],
    )
    split.validate(dataset.n_samples)
    return dataset, split


# --- Pipeline stages ---
def stage_collect(settings, output_dir):
    prepare_dataset(settings, output_dir)
    # later stages read dataset.csv, so collection does too
    dataset, split = load_dataset_artifact(output_dir)
    partition_a = core.take_rows(dataset, split.train_indices)
    matrix = redundancy.build_matrix(
        partition_a, settings["redundancy"]["metric"], settings["redundancy"]["bins"]
    )
    matrix.save(artifact(output_dir, REDUNDANCY_FILE))

    cfg = settings["collector"]
    log = collector.run_collection(
        dataset,
        split,
        cfg["episodes"],
        cfg["steps_per_episode"],
        cfg["channel"],
        matrix,
        cfg,
        downstream=settings["downstream"],
        progress=settings["runtime"]["progress"],
    )
    log_path = artifact(output_dir, COLLECTION_FILE)
    collector.save_log(log, log_path, upstream_hash=core.file_sha256(artifact(output_dir, DATASET_CSV)))
    core.log_stage_file(
        output_dir, "collect",
        f"{len(log.records)} records, {len(log.unique_records())} unique, {log.wall_time:.1f}s",
    )
    return log


def stage_train(settings, output_dir):
    log_path = require_artifact(output_dir, COLLECTION_FILE, "collect")
    log = collector.load_log(log_path)
    meta = core.read_json(require_artifact(output_dir, DATASET_META, "collect"))

    corpus = corpus_lib.build_corpus(
        log,
        meta["n_features"],
        settings["corpus"]["augment_copies"],
        settings["corpus"]["seed"],
        source_hash=core.file_sha256(log_path),
    )
    corpus_path = artifact(output_dir, CORPUS_FILE)
    corpus_lib.save_corpus(corpus, corpus_path)

    config = subset_model.ModelConfig.from_settings(settings["model"])
    model = subset_model.build_model(config, corpus.vocabulary.size, corpus.max_sequence_length)
    history = subset_model.train(
        model, corpus, config, checkpoint_dir=output_dir, progress=settings["runtime"]["progress"]
    )
    accuracy = subset_model.teacher_forced_accuracy(model, corpus)
    core.log_message(f"Teacher-forced next-token accuracy: {accuracy:.4f}")

    subset_model.save_checkpoint(
        model, artifact(output_dir, MODEL_FILE), meta["n_features"],
        upstream_hash=core.file_sha256(corpus_path),
    )
    core.write_json(artifact(output_dir, HISTORY_FILE), {
        "history": history,
        "teacher_forced_accuracy": accuracy,
        "loss_weights": config.weights(),
    })
    core.log_stage_file(
        output_dir, "train",
        f"{len(history)} epochs, final total {history[-1]['total'] if history else float('nan'):.4f}",
    )
    return model, corpus, history


def _ground_truth_reranker(settings, output_dir):
    dataset, split = load_dataset_artifact(output_dir)
    inner = core.internal_split(
        dataset, split, settings["collector"]["validation_fraction"], settings["collector"]["seed"]
    )
    downstream = settings["downstream"]

    def score(subset):
        return core.evaluate_subset(
            dataset, inner, subset, downstream["seed"], downstream["model"], downstream["n_estimators"]
        )
    return score


def stage_search(settings, output_dir, trade_off=None, write=True):
    model_path = require_artifact(output_dir, MODEL_FILE, "train")
    corpus = corpus_lib.load_corpus(require_artifact(output_dir, CORPUS_FILE, "train"))
    model, _ = subset_model.load_checkpoint(model_path)

    search_settings = dict(settings["search"])
    if trade_off is not None:
        search_settings["trade_off"] = trade_off
    config = latent_search.SearchConfig.from_settings(search_settings, settings["runtime"]["workers"])
    reranker = _ground_truth_reranker(settings, output_dir) if config.rerank_with_ground_truth else None
    result = latent_search.search(model, corpus, config, reranker=reranker)

    if write:
        record = result.to_record()
        record["upstream_hash"] = core.file_sha256(model_path)
        core.write_json(artifact(output_dir, SEARCH_FILE), record)
        core.log_stage_file(output_dir, "search", f"subset {list(result.subset.sorted())}")
    return result


def subset_redundancy_share(matrix, subset):
    full = redundancy.full_set_redundancy(matrix)
    return redundancy.normalize_redundancy(redundancy.subset_redundancy(matrix, subset), full)


def stage_evaluate(settings, output_dir):
    search_path = require_artifact(output_dir, SEARCH_FILE, "search")
    record = core.read_json(search_path)
    dataset, split = load_dataset_artifact(output_dir)
    matrix = redundancy.RedundancyMatrix.load(require_artifact(output_dir, REDUNDANCY_FILE, "collect"))
    downstream = settings["downstream"]

    subset = core.FeatureSubset(record["subset"]).check_range(dataset.n_features)
    full = core.FeatureSubset(range(dataset.n_features))
    score = core.evaluate_subset(
        dataset, split, subset, downstream["seed"], downstream["model"], downstream["n_estimators"]
    )
    full_score = core.evaluate_subset(
        dataset, split, full, downstream["seed"], downstream["model"], downstream["n_estimators"]
    )
    evaluation = {
        "subset": list(subset.sorted()),
        "feature_names": [dataset.feature_names[i] for i in subset.sorted()],
        "score": score,
        "full_set_score": full_score,
        "redundancy": subset_redundancy_share(matrix, subset),
        "upstream_hash": core.file_sha256(search_path),
    }
    core.write_json(artifact(output_dir, EVALUATION_FILE), evaluation)
    core.log_message(f"Held-out score {score:.4f} with {len(subset)} features (full set {full_score:.4f})")
    core.log_stage_file(output_dir, "evaluate", f"score {score:.4f}")
    return evaluation


def verify_artifact_chain(output_dir):
    """Recomputes every upstream hash; raises RuntimeError on the first mismatch."""
    links = [
        (COLLECTION_FILE + ".meta.json", "upstream_hash", DATASET_CSV),
        (CORPUS_FILE + ".header.json", "source_hash", COLLECTION_FILE),
        (SEARCH_FILE, "upstream_hash", MODEL_FILE),
        (EVALUATION_FILE, "upstream_hash", SEARCH_FILE),
    ]
    checked = []
    for holder, key, upstream in links:
        recorded = core.read_json(require_artifact(output_dir, holder, "benchmark"))[key]
        actual = core.file_sha256(require_artifact(output_dir, upstream, "benchmark"))
        if recorded != actual:
            raise RuntimeError(f"Artifact chain broken: {holder} does not match {upstream}")
        checked.append((holder, upstream))

    model_path = require_artifact(output_dir, MODEL_FILE, "train")
    payload = torch.load(model_path, map_location="cpu", weights_only=True)
    if payload["upstream_hash"] != core.file_sha256(artifact(output_dir, CORPUS_FILE)):
        raise RuntimeError(f"Artifact chain broken: {MODEL_FILE} does not match {CORPUS_FILE}")
    checked.append((MODEL_FILE, CORPUS_FILE))
    return checked


def feature_importances(dataset, split, subset, downstream):
    """Random-forest importances of the selected features, fit on partition A."""
    columns = list(subset.sorted())
    rows = np.asarray(split.train_indices)
    cls = RandomForestClassifier if dataset.task == "classification" else RandomForestRegressor
    forest = cls(n_estimators=downstream["n_estimators"], random_state=downstream["seed"], n_jobs=1)
    forest.fit(dataset.features[np.ix_(rows, columns)], dataset.labels[rows])
    return {
        dataset.feature_names[c]: float(v) for c, v in zip(columns, forest.feature_importances_)
    }


def config_snapshot(settings):
    return {k: v for k, v in settings.items() if k not in ("output_dir", "runtime")}


def run_benchmark(settings, output_dir):
    """Chains every stage plus the baselines and emits the report."""
    started = time.perf_counter()
    stage_collect(settings, output_dir)
    _, _, history = stage_train(settings, output_dir)
    result = stage_search(settings, output_dir)
    evaluation = stage_evaluate(settings, output_dir)
    generative_time = time.perf_counter() - started
    verify_artifact_chain(output_dir)

    dataset, split = load_dataset_artifact(output_dir)
    matrix = redundancy.RedundancyMatrix.load(artifact(output_dir, REDUNDANCY_FILE))
    downstream = settings["downstream"]
    subset = core.FeatureSubset(evaluation["subset"])
    full = core.FeatureSubset(range(dataset.n_features))

    rows = [
        reporting.MethodRow("full_set", list(full.sorted()), evaluation["full_set_score"], 1.0, 0.0),
        reporting.MethodRow(
            "generative", list(subset.sorted()), evaluation["score"], evaluation["redundancy"],
            generative_time,
        ),
    ]

    for method in settings["baselines"]["methods"]:
        spec = baselines.BaselineSpec(
            method=method,
            k=settings["baselines"]["k"],
            alpha_grid=tuple(settings["baselines"]["lasso_grid"]),
            step=settings["baselines"]["rfe_step"],
            seed=downstream["seed"],
        )
        outcome = baselines.run_baseline(
            spec, dataset, split, default_k=len(subset), matrix=matrix, downstream=downstream
        )
        rows.append(reporting.MethodRow(
            method, list(outcome.subset.sorted()), outcome.score,
            subset_redundancy_share(matrix, outcome.subset), outcome.wall_time,
        ))

    for trade_off in settings["search"]["trade_off_sweep"]:
        sweep_started = time.perf_counter()
        swept = stage_search(settings, output_dir, trade_off=trade_off, write=False)
        swept_score = core.evaluate_subset(
            dataset, split, swept.subset, downstream["seed"], downstream["model"], downstream["n_estimators"]
        )
        rows.append(reporting.MethodRow(
            f"generative@{trade_off:g}", list(swept.subset.sorted()), swept_score,
            subset_redundancy_share(matrix, swept.subset), time.perf_counter() - sweep_started,
        ))

    collection_meta = core.read_json(artifact(output_dir, COLLECTION_FILE + ".meta.json"))
    training = core.read_json(artifact(output_dir, HISTORY_FILE))
    informative = dataset.metadata.get("informative")
    extras = {
        "teacher_forced_accuracy": training["teacher_forced_accuracy"],
        "collection_records": collection_meta["n_records"],
        "collection_channel": collection_meta["channel"],
        "search_v_hat": result.v_hat,
        "search_u_hat": result.u_hat,
    }
    if informative is not None:
        extras["informative"] = informative
        extras["informative_selected"] = len(set(informative) & set(subset.indices))

    report = reporting.BenchmarkReport(
        dataset=dataset.name,
        task=dataset.task,
        rows=rows,
        config=config_snapshot(settings),
        fingerprint=reporting.environment_fingerprint(),
        feature_importances=feature_importances(dataset, split, subset, downstream),
        history=history,
        trajectories=result.trajectories,
        extras=extras,
    )
    reporting.emit_report(report, output_dir)
    print(reporting.format_table(report))
    core.log_stage_file(output_dir, "benchmark", f"{len(rows)} rows")
    return report


def run_synth(settings, output_dir):
    dataset = synthetic.generate_synthetic(settings["dataset"]["synthetic"], settings["dataset"]["task"])
    dataset.metadata["label_column"] = settings["dataset"]["label_column"]
    os.makedirs(output_dir, exist_ok=True)
    path = artifact(output_dir, SYNTHETIC_CSV)
    core.save_csv(dataset, path)
    core.write_json(path + ".meta.json", {
        "name": dataset.name,
        "task": dataset.task,
        "label_column": dataset.metadata["label_column"],
        "informative": dataset.metadata["informative"],
        "spec": settings["dataset"]["synthetic"],
    })
    core.log_message(f"Synthetic dataset written to {path}")
    return path


COMMANDS = {
    "collect": stage_collect,
    "train": stage_train,
    "search": stage_search,
    "evaluate": stage_evaluate,
    "benchmark": run_benchmark,
    "synth": run_synth,
}

SYNTH_FLAGS = {
    "kind": "dataset.synthetic.kind",
    "informative": "dataset.synthetic.informative",
    "noise": "dataset.synthetic.noise",
    "duplicates": "dataset.synthetic.duplicates",
    "duplicate_factor": "dataset.synthetic.duplicate_factor",
    "samples": "dataset.synthetic.samples",
    "seed": "dataset.synthetic.seed",
    "task": "dataset.task",
}


def parse_value(text):
    """JSON scalars and lists; anything else stays a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens):
    """Turns `--section.field value` pairs into a dotted-key dict."""
    overrides = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--"):
            raise ValueError(f"Unexpected argument: {token}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ValueError(f"Missing value for --{key}")
            value = tokens[i + 1]
            i += 2
        if key in ("output-dir", "output_dir"):
            key = "output_dir"
        elif "." not in key:
            raise ValueError(f"Unknown option --{key}")
        overrides[key] = parse_value(value)
    return overrides


def build_parser():
    parser = argparse.ArgumentParser(
        prog="feature-subset-search",
        allow_abbrev=False,
        description="Generative feature-subset search: collect, train, search, evaluate, benchmark.",
        epilog="Any setting can be overridden as --section.field VALUE (e.g. --collector.episodes 50).",
    )
    parser.add_argument("--settings", default=core.SETTINGS_FILE, help="Settings JSON document")
    parser.add_argument("--profile", choices=sorted(core.PROFILES), default=None)
    parser.add_argument("--output-dir", dest="output_dir_flag", default=None)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("collect", "train", "search", "evaluate", "benchmark"):
        sub.add_parser(name)
    synth = sub.add_parser("synth", help="Write a synthetic dataset CSV")
    synth.add_argument("--kind", choices=core.SYNTHETIC_KINDS)
    synth.add_argument("--informative", type=int)
    synth.add_argument("--noise", type=int)
    synth.add_argument("--duplicates", type=int)
    synth.add_argument("--duplicate-factor", dest="duplicate_factor", type=float)
    synth.add_argument("--samples", type=int)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--task", choices=core.TASKS)
    return parser


def resolve_settings(args, extra):
    overrides = parse_overrides(extra)
    if args.output_dir_flag:
        overrides["output_dir"] = args.output_dir_flag
    if args.command == "synth":
        for flag, dotted in SYNTH_FLAGS.items():
            value = getattr(args, flag, None)
            if value is not None:
                overrides[dotted] = value
    return core.load_settings(args.settings, overrides=overrides, profile=args.profile)


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        settings = resolve_settings(args, extra)
    except (ValueError, KeyError) as e:
        core.log_message(f"Configuration error: {e}", "ERROR")
        return EXIT_CONFIG

    output_dir = settings["output_dir"]
    blas_threads = settings["runtime"]["blas_threads"]
    try:
        with output_lock(output_dir), threadpoolctl.threadpool_limits(limits=blas_threads):
            torch.set_num_threads(blas_threads)
            core.log_stage_file(output_dir, "start", f"{args.command} (profile {settings['profile']})")
            COMMANDS[args.command](settings, output_dir)
            core.log_stage_file(output_dir, "done", args.command)
    except Exception as e:
        core.log_message(f"{args.command} failed: {e}", "ERROR")
        core.log_stage_file(output_dir, "failed", f"{args.command}: {e}")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
