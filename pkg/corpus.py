# SPDX-License-Identifier: Apache-2.0
"""Tokenized, shuffle-augmented training corpus built from a collection log."""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

import selector_core as core

PAD, SOS, EOS = 0, 1, 2
N_SPECIAL = 3


@dataclass(frozen=True)
class Vocabulary:
    n_features: int

    @property
    def size(self):
        return self.n_features + N_SPECIAL

    def token_for(self, feature_index):
        if not 0 <= feature_index < self.n_features:
            raise ValueError(f"Feature index {feature_index} out of range")
        return int(feature_index) + N_SPECIAL

    def feature_for(self, token):
        if not N_SPECIAL <= token < self.size:
            raise ValueError(f"Token {token} is not a feature token")
        return int(token) - N_SPECIAL

    def tokens_for(self, subset):
        return tuple(self.token_for(i) for i in subset.indices)

    def subset_for(self, tokens):
        return core.FeatureSubset(tuple(self.feature_for(t) for t in tokens))


@dataclass(frozen=True)
class SubsetRecord:
    tokens: tuple
    v: float
    u: float

    def __post_init__(self):
        tokens = tuple(int(t) for t in self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if not tokens:
            raise ValueError("SubsetRecord needs at least one token")
        if len(set(tokens)) != len(tokens):
            raise ValueError(f"SubsetRecord tokens must be distinct: {tokens}")
        if min(tokens) < N_SPECIAL:
            raise ValueError(f"SubsetRecord tokens must be feature tokens: {tokens}")

    def key(self):
        return tuple(sorted(self.tokens))


@dataclass
class TokenCorpus:
    records: list
    vocabulary: Vocabulary
    max_sequence_length: int
    augment_copies: int
    source_hash: str = ""
    base_count: int = field(default=0)

    def __len__(self):
        return len(self.records)

    def base_records(self):
        """First occurrence of each token set, in corpus order."""
        seen = set()
        bases = []
        for record in self.records:
            key = record.key()
            if key not in seen:
                seen.add(key)
                bases.append(record)
        return bases

    def header(self):
        return {
            "n_features": self.vocabulary.n_features,
            "max_len": self.max_sequence_length,
            "augment_copies": self.augment_copies,
            "source_hash": self.source_hash,
            "n_records": len(self.records),
            "n_base_records": self.base_count,
        }

    def tensors(self):
        """Stacked (input ids, target ids, mask, v, u) numpy arrays."""
        encoded = [encode_sequence(r, self.vocabulary, self.max_sequence_length) for r in self.records]
        inputs = np.stack([e[0] for e in encoded])
        targets = np.stack([e[1] for e in encoded])
        masks = np.stack([e[2] for e in encoded])
        v = np.array([r.v for r in self.records], dtype=np.float32)
        u = np.array([r.u for r in self.records], dtype=np.float32)
        return inputs, targets, masks, v, u


def augment_shuffle(record, copies, seed):
    """Original record plus `copies` random token orderings with the same (v, u)."""
    if copies < 0:
        raise ValueError(f"copies must be >= 0, got {copies}")
    rng = np.random.default_rng(seed)
    out = [record]
    for _ in range(copies):
        order = rng.permutation(len(record.tokens))
        out.append(SubsetRecord(tuple(record.tokens[i] for i in order), record.v, record.u))
    return out


def base_records_from_log(log, vocabulary):
    """Deduplicated token records, max-v per index set, in sorted-set order."""
    bases = []
    for collected in log.unique_records():
        subset = core.FeatureSubset(tuple(sorted(collected.features)))
        bases.append(SubsetRecord(vocabulary.tokens_for(subset), collected.v, collected.u))
    return bases


def log_fingerprint(log):
    digest = hashlib.sha256()
    for line in log.to_lines():
        digest.update(line.encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


def build_corpus(log, n_features, copies, seed, source_hash=None):
    """Deduplicates a collection log and applies shuffle augmentation.

    Args:
        log: CollectionLog with at least one record.
        n_features: vocabulary size in features.
        copies: shuffled copies per base record.
        seed: base seed; each base record gets its own child seed.
        source_hash: SHA-256 of the on-disk log, when known.
    """
    if not log.records:
        raise ValueError("Cannot build a corpus from an empty collection log")
    vocabulary = Vocabulary(n_features)
    bases = base_records_from_log(log, vocabulary)
    child_seeds = np.random.SeedSequence(seed).spawn(len(bases))
    records = []
    for base, child in zip(bases, child_seeds):
        records.extend(augment_shuffle(base, copies, child))
    longest = max(len(r.tokens) for r in bases)
    corpus = TokenCorpus(
        records=records,
        vocabulary=vocabulary,
        max_sequence_length=longest + 2,
        augment_copies=copies,
        source_hash=source_hash or log_fingerprint(log),
        base_count=len(bases),
    )
    core.log_message(
        f"Corpus: {len(bases)} base records x {copies + 1} = {len(records)} sequences "
        f"(max_len={corpus.max_sequence_length})"
    )
    return corpus


def encode_sequence(record, vocab, max_len):
    """Teacher-forcing layout.

    input  = [SOS, t1..tk, PAD...]
    target = [t1..tk, EOS, PAD...]
    mask   = target != PAD
    """
    tokens = list(record.tokens)
    if not tokens:
        raise ValueError("Cannot encode an empty record")
    if len(tokens) + 2 > max_len:
        raise ValueError(f"Record of length {len(tokens)} does not fit max_len={max_len}")
    if max(tokens) >= vocab.size:
        raise ValueError(f"Token {max(tokens)} outside a vocabulary of {vocab.size}")
    inputs = np.full(max_len, PAD, dtype=np.int64)
    targets = np.full(max_len, PAD, dtype=np.int64)
    inputs[0] = SOS
    inputs[1:len(tokens) + 1] = tokens
    targets[:len(tokens)] = tokens
    targets[len(tokens)] = EOS
    return inputs, targets, targets != PAD


def decode_sequence(target_ids):
    """Feature tokens of a target row, up to the first EOS."""
    tokens = []
    for token in np.asarray(target_ids).tolist():
        if token == EOS:
            break
        if token >= N_SPECIAL:
            tokens.append(int(token))
    return tuple(tokens)


def save_corpus(corpus, path):
    with open(path, "w", encoding="utf-8") as f:
        for record in corpus.records:
            f.write(json.dumps({"tokens": list(record.tokens), "v": record.v, "u": record.u}) + "\n")
    core.write_json(f"{path}.header.json", corpus.header())


def load_corpus(path):
    header = core.read_json(f"{path}.header.json")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                row = json.loads(line)
                records.append(SubsetRecord(tuple(row["tokens"]), float(row["v"]), float(row["u"])))
    return TokenCorpus(
        records=records,
        vocabulary=Vocabulary(int(header["n_features"])),
        max_sequence_length=int(header["max_len"]),
        augment_copies=int(header["augment_copies"]),
        source_hash=header.get("source_hash", ""),
        base_count=int(header.get("n_base_records", 0)),
    )
