# SPDX-License-Identifier: Apache-2.0
"""Gradient search over subset embeddings and reconstruction of the best subset."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import torch

import selector_core as core
import subset_model
from corpus import PAD, SOS, EOS


class EmptyDecodeError(ValueError):
    """Decoding terminated before emitting any feature token."""


@dataclass
class SearchConfig:
    n_starts: int = 25
    steps: int = 20
    step_size: float = 0.1
    trade_off: float = 0.1
    max_decode_length: int = None
    seed: int = 0
    rerank_with_ground_truth: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.trade_off < 0:
            raise ValueError("trade_off must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    @classmethod
    def from_settings(cls, search_settings, workers=1):
        return cls(
            n_starts=search_settings["n_starts"],
            steps=search_settings["steps"],
            step_size=search_settings["step_size"],
            trade_off=search_settings["trade_off"],
            max_decode_length=search_settings.get("max_decode_length"),
            seed=search_settings.get("seed", 0),
            rerank_with_ground_truth=search_settings.get("rerank_with_ground_truth", False),
            workers=workers,
        )


@dataclass
class Candidate:
    start: int
    start_tokens: tuple
    embedding: torch.Tensor
    subset: core.FeatureSubset
    v_hat: float
    u_hat: float
    trajectory: list
    fell_back: bool = False
    true_score: float = None

    def objective(self, trade_off):
        return self.v_hat - trade_off * self.u_hat


@dataclass
class SearchResult:
    best_embedding: torch.Tensor
    subset: core.FeatureSubset
    v_hat: float
    u_hat: float
    trajectories: list
    candidates: list = field(default_factory=list)
    trade_off: float = 0.1
    test_score: float = None

    def to_record(self):
        return {
            "subset": list(self.subset.sorted()),
            "v_hat": float(self.v_hat),
            "u_hat": float(self.u_hat),
            "trade_off": float(self.trade_off),
            "test_score": self.test_score,
            "trajectories": [
                [{"step": s, "v_hat": v, "u_hat": u} for s, v, u in trajectory]
                for trajectory in self.trajectories
            ],
            "candidates": [
                {
                    "start": c.start,
                    "subset": list(c.subset.sorted()),
                    "v_hat": c.v_hat,
                    "u_hat": c.u_hat,
                    "fell_back": c.fell_back,
                    "true_score": c.true_score,
                }
                for c in self.candidates
            ],
        }


def select_starts(corpus, model, n):
    """Deterministic embeddings of the n best distinct base records.

    Ordered by v descending, then u ascending, then token order.

    Returns:
        List of (record, latent vector).
    """
    bases = sorted(corpus.base_records(), key=lambda r: (-r.v, r.u, r.key()))
    chosen = bases[:n]
    model.eval()
    return [(record, subset_model.latent_of(model, record.tokens)) for record in chosen]


def gradient_ascend(model, embedding, config):
    """Moves e along d(v_hat)/de - trade_off * d(u_hat)/de.

    `model` is anything with a `predict_scores(latent)` method returning
    (v_hat, u_hat) tensors. Model parameters are not updated.

    Returns:
        (final embedding, trajectory) where the trajectory holds
        (step, v_hat, u_hat) for the start and every step.

    Raises:
        FloatingPointError: a gradient became non-finite.
    """
    e = embedding.detach().clone()
    trajectory = []
    for step in range(config.steps + 1):
        e.requires_grad_(True)
        v_hat, u_hat = model.predict_scores(e)
        trajectory.append((step, float(v_hat.detach()), float(u_hat.detach())))
        if step == config.steps:
            break
        objective = v_hat - config.trade_off * u_hat
        (grad,) = torch.autograd.grad(objective, e)
        if not torch.all(torch.isfinite(grad)):
            raise FloatingPointError(f"Non-finite gradient at step {step}")
        e = (e + config.step_size * grad).detach()
    return e.detach(), trajectory


def decode_subset(model, embedding, vocab, max_len):
    """Constrained greedy decoding from SOS.

    PAD, SOS and already-emitted features are never chosen. Decoding stops
    at EOS or after max_len decoder positions.

    Raises:
        EmptyDecodeError: no feature token was emitted.
    """
    max_len = min(max_len, model.max_len)
    prefix = [SOS]
    emitted = []
    with torch.no_grad():
        while True:
            probs = subset_model.decode_step(model, embedding, prefix).clone()
            probs[PAD] = -1.0
            probs[SOS] = -1.0
            for token in emitted:
                probs[token] = -1.0
            token = int(torch.argmax(probs))
            if token == EOS:
                break
            emitted.append(token)
            prefix.append(token)
            if len(prefix) >= max_len:
                break
    if not emitted:
        raise EmptyDecodeError("Decoder produced no feature tokens")
    return vocab.subset_for(emitted)


def rank_candidates(candidates, trade_off):
    """Best first by v_hat - trade_off * u_hat; ties keep start order."""
    return sorted(
        candidates, key=lambda c: (-c.objective(trade_off), c.start)
    )


def _run_start(model, corpus, config, max_len, index, record, latent):
    try:
        final, trajectory = gradient_ascend(model, latent, config)
    except FloatingPointError as e:
        core.log_message(f"Search start {index} aborted: {e}", "WARNING")
        return None
    fell_back = False
    try:
        subset = decode_subset(model, final, corpus.vocabulary, max_len)
    except EmptyDecodeError:
        core.log_message(f"Search start {index}: empty decode, using the start subset", "WARNING")
        subset = corpus.vocabulary.subset_for(record.tokens)
        fell_back = True
    tokens = corpus.vocabulary.tokens_for(subset)
    with torch.no_grad():
        v_hat, u_hat = model.predict_scores(subset_model.latent_of(model, tokens))
    return Candidate(
        start=index,
        start_tokens=record.tokens,
        embedding=final,
        subset=subset,
        v_hat=float(v_hat),
        u_hat=float(u_hat),
        trajectory=trajectory,
        fell_back=fell_back,
    )


def search(model, corpus, config, reranker=None):
    """Ascends and decodes from each start, returning the best candidate.

    Args:
        reranker: optional callable FeatureSubset -> score used to rescore
            candidates when `config.rerank_with_ground_truth` is set.

    Raises:
        RuntimeError: every start failed.
    """
    model.eval()
    torch.manual_seed(config.seed)
    starts = select_starts(corpus, model, config.n_starts)
    max_len = config.max_decode_length or corpus.max_sequence_length
    jobs = [(i, record, latent) for i, (record, latent) in enumerate(starts)]
    # starts are independent; results keep start order
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers, thread_name_prefix="latent-search") as executor:
            results = list(executor.map(
                lambda job: _run_start(model, corpus, config, max_len, *job), jobs
            ))
    else:
        results = [_run_start(model, corpus, config, max_len, *job) for job in jobs]

    candidates = [c for c in results if c is not None]
    if not candidates:
        raise RuntimeError("All search starts failed")

    if config.rerank_with_ground_truth and reranker is not None:
        for candidate in candidates:
            candidate.true_score = float(reranker(candidate.subset))
        ranked = sorted(candidates, key=lambda c: (-c.true_score, -c.objective(config.trade_off), c.start))
    else:
        ranked = rank_candidates(candidates, config.trade_off)
    best = ranked[0]
    core.log_message(
        f"Search picked {len(best.subset)} features from start {best.start} "
        f"(v_hat={best.v_hat:.4f}, u_hat={best.u_hat:.4f})"
    )
    return SearchResult(
        best_embedding=best.embedding,
        subset=best.subset,
        v_hat=best.v_hat,
        u_hat=best.u_hat,
        trajectories=[c.trajectory for c in candidates],
        candidates=candidates,
        trade_off=config.trade_off,
    )


def rerank_pool(candidates, trade_off):
    """Picks from an existing candidate pool under a different trade-off."""
    if not candidates:
        raise ValueError("Empty candidate pool")
    return rank_candidates(candidates, trade_off)[0]
