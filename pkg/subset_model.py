# SPDX-License-Identifier: Apache-2.0
"""Sequence encoder (transformer or LSTM), autoregressive decoder and evaluator heads."""

import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

import selector_core as core
from corpus import PAD, SOS, EOS

CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    token_embedding_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 8
    feedforward_dim: int = 256
    latent_dim: int = 64
    evaluator_hidden: int = 200
    dropout: float = 0.1
    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.001
    delta: float = 0.2
    batch_size: int = 64
    learning_rate: float = 1e-4
    pretrain_epochs: int = 210
    finetune_epochs: int = 90
    grad_clip: float = 1.0
    kl_form: str = "printed"
    variational: bool = True
    encoder_kind: str = "transformer"
    keep_checkpoints: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        if self.token_embedding_dim % self.attention_heads:
            raise ValueError("attention_heads must divide token_embedding_dim")
        for name in ("alpha", "beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")
        if self.kl_form not in ("printed", "standard"):
            raise ValueError(f"Unknown kl_form: {self.kl_form}")
        if self.encoder_kind not in core.ENCODER_KINDS:
            raise ValueError(f"Unknown encoder_kind: {self.encoder_kind}")
        if self.keep_checkpoints < 0:
            raise ValueError("keep_checkpoints must be nonnegative")

    @classmethod
    def from_settings(cls, model_settings):
        """Builds a config from the `model` settings section."""
        resolved = core.resolve_loss_weights(model_settings)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in resolved.items() if k in known})

    def weights(self, stage="finetune"):
        gamma = 0.0 if stage == "pretrain" or not self.variational else self.gamma
        return {"alpha": self.alpha, "beta": self.beta, "gamma": gamma, "delta": self.delta}


@dataclass
class LatentEncoding:
    mean: torch.Tensor
    log_scale: torch.Tensor
    sample: torch.Tensor


def sinusoidal_table(length, dim):
    position = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: dim // 2])
    return table


def _evaluator(latent_dim, hidden):
    return nn.Sequential(
        nn.Linear(latent_dim, hidden),
        nn.ReLU(),
        nn.Linear(hidden, hidden),
        nn.ReLU(),
        nn.Linear(hidden, 1),
    )


class SubsetEmbeddingModel(nn.Module):
    """Encoder, decoder, performance head and redundancy head over one latent."""

    def __init__(self, config, vocab_size, max_len):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        self.max_len = max_len
        d = config.token_embedding_dim

        self.register_buffer("positions", sinusoidal_table(max_len, d), persistent=False)

        self.encoder_embedding = nn.Embedding(vocab_size, d, padding_idx=PAD)
        self.decoder_embedding = nn.Embedding(vocab_size, d, padding_idx=PAD)
        self.latent_to_memory = nn.Linear(config.latent_dim, d)
        if config.encoder_kind == "lstm":
            self.encoder = nn.LSTM(d, d, config.encoder_layers, batch_first=True)
            self.decoder = nn.LSTM(d, d, config.decoder_layers, batch_first=True)
            self.latent_to_state = nn.Linear(config.latent_dim, config.decoder_layers * d)
        else:
            encoder_layer = nn.TransformerEncoderLayer(
                d, config.attention_heads, config.feedforward_dim, config.dropout, batch_first=True
            )
            self.encoder = nn.TransformerEncoder(
                encoder_layer, config.encoder_layers, enable_nested_tensor=False
            )
            decoder_layer = nn.TransformerDecoderLayer(
                d, config.attention_heads, config.feedforward_dim, config.dropout, batch_first=True
            )
            self.decoder = nn.TransformerDecoder(decoder_layer, config.decoder_layers)
        self.fc_mean = nn.Linear(d, config.latent_dim)
        self.fc_logscale = nn.Linear(d, config.latent_dim)
        self.output_projection = nn.Linear(d, vocab_size)

        self.performance_head = _evaluator(config.latent_dim, config.evaluator_hidden)
        self.redundancy_head = _evaluator(config.latent_dim, config.evaluator_hidden)

    def _check_ids(self, ids):
        if ids.shape[-1] > self.max_len:
            raise ValueError(f"Sequence length {ids.shape[-1]} exceeds max_len={self.max_len}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise ValueError("Token id outside the vocabulary")

    def encode(self, input_ids, pad_mask=None, stochastic=True, noise=None):
        """Maps token rows to (m, sigma, e*).

        Args:
            input_ids: (batch, length) long tensor, PAD-padded.
            pad_mask: bool tensor, True at real positions; defaults to ids != PAD.
            stochastic: sample e* = m + eps * exp(sigma); otherwise e* = m.
                Non-variational models always return e* = m.
            noise: explicit eps, used instead of a fresh normal draw.
        """
        self._check_ids(input_ids)
        if pad_mask is None:
            pad_mask = input_ids != PAD
        length = input_ids.shape[1]
        hidden = self.encoder_embedding(input_ids) + self.positions[:length]
        if self.config.encoder_kind == "lstm":
            hidden, _ = self.encoder(hidden)
        else:
            hidden = self.encoder(hidden, src_key_padding_mask=~pad_mask)

        keep = pad_mask.unsqueeze(-1)
        summed = torch.where(keep, hidden, torch.zeros_like(hidden)).sum(dim=1)
        pooled = summed / keep.sum(dim=1).clamp(min=1)

        mean = self.fc_mean(pooled)
        log_scale = self.fc_logscale(pooled)
        if stochastic and self.config.variational:
            eps = torch.randn_like(mean) if noise is None else noise
            sample = mean + eps * torch.exp(log_scale)
        else:
            sample = mean
        return LatentEncoding(mean, log_scale, sample)

    def decode_logits(self, latent, input_ids):
        """Teacher-forced logits, (batch, length, vocab)."""
        self._check_ids(input_ids)
        length = input_ids.shape[1]
        memory = self.latent_to_memory(latent).unsqueeze(1)
        hidden = self.decoder_embedding(input_ids) + self.positions[:length]
        if self.config.encoder_kind == "lstm":
            d = self.config.token_embedding_dim
            h0 = self.latent_to_state(latent).reshape(-1, self.config.decoder_layers, d)
            h0 = torch.tanh(h0).transpose(0, 1).contiguous()
            hidden, _ = self.decoder(hidden + memory, (h0, torch.zeros_like(h0)))
            return self.output_projection(hidden)
        causal = torch.triu(
            torch.ones(length, length, dtype=torch.bool, device=input_ids.device), diagonal=1
        )
        hidden = self.decoder(hidden, memory, tgt_mask=causal)
        return self.output_projection(hidden)

    def predict_scores(self, latent):
        if latent.shape[-1] != self.config.latent_dim:
            raise ValueError(
                f"Latent has dimension {latent.shape[-1]}, expected {self.config.latent_dim}"
            )
        v_hat = self.performance_head(latent).squeeze(-1)
        u_hat = self.redundancy_head(latent).squeeze(-1)
        return v_hat, u_hat


def build_model(config, vocab_size, max_len):
    torch.manual_seed(config.seed)
    return SubsetEmbeddingModel(config, vocab_size, max_len)


def encode(model, input_ids, pad_mask=None, stochastic=False, noise=None):
    return model.encode(input_ids, pad_mask, stochastic=stochastic, noise=noise)


def predict_scores(model, latent):
    return model.predict_scores(latent)


def decode_step(model, latent, prefix_ids):
    """Next-token distribution given e* and a prefix starting with SOS."""
    prefix = torch.as_tensor(prefix_ids, dtype=torch.long).reshape(-1)
    if prefix.numel() == 0 or int(prefix[0]) != SOS:
        raise ValueError("Decoding prefix must start with SOS")
    if prefix.numel() > model.max_len:
        raise ValueError(f"Prefix of length {prefix.numel()} exceeds max_len={model.max_len}")
    logits = model.decode_logits(latent.reshape(1, -1), prefix.unsqueeze(0))
    return F.softmax(logits[0, -1], dim=-1)


def shift_right(target_ids):
    """Decoder inputs for a target row: [SOS, target[:-1]] with EOS blanked to PAD."""
    inputs = torch.full_like(target_ids, PAD)
    inputs[:, 0] = SOS
    inputs[:, 1:] = target_ids[:, :-1]
    inputs[:, 1:][inputs[:, 1:] == EOS] = PAD
    return inputs


def sequence_log_likelihood(model, latent, target_ids, mask):
    """Sum of teacher-forced log-probabilities over unmasked positions, per row."""
    logits = model.decode_logits(latent, shift_right(target_ids))
    log_probs = F.log_softmax(logits, dim=-1)
    picked = log_probs.gather(-1, target_ids.unsqueeze(-1)).squeeze(-1)
    return torch.where(mask, picked, torch.zeros_like(picked)).sum(dim=-1)


def kl_term(mean, log_scale, form="printed"):
    """Latent alignment loss, averaged over the batch.

    printed:  sum(exp(s) - (1 + s) + m^2)
    standard: 0.5 * sum(exp(2s) + m^2 - 1 - 2s)
    """
    if form == "printed":
        per_row = (torch.exp(log_scale) - (1.0 + log_scale) + mean.pow(2)).sum(dim=-1)
    elif form == "standard":
        per_row = 0.5 * (torch.exp(2.0 * log_scale) + mean.pow(2) - 1.0 - 2.0 * log_scale).sum(dim=-1)
    else:
        raise ValueError(f"Unknown kl_form: {form}")
    return per_row.mean()


def weighted_total(components, weights):
    return (
        weights["alpha"] * components["performance"]
        + weights["beta"] * components["reconstruction"]
        + weights["gamma"] * components["kl"]
        + weights["delta"] * components["redundancy"]
    )


def joint_loss(model, batch, weights, kl_form="printed", noise=None):
    """Four-term training loss.

    Args:
        batch: (input ids, target ids, mask, v, u) tensors.
        weights: dict with alpha, beta, gamma, delta.

    Returns:
        Dict of tensors: total, performance, reconstruction, kl, redundancy.
    """
    input_ids, target_ids, mask, v, u = batch
    encoding = model.encode(input_ids, input_ids != PAD, stochastic=True, noise=noise)
    v_hat, u_hat = model.predict_scores(encoding.sample)
    components = {
        "performance": F.mse_loss(v_hat, v),
        "reconstruction": -sequence_log_likelihood(model, encoding.sample, target_ids, mask).mean(),
        "kl": (
            kl_term(encoding.mean, encoding.log_scale, kl_form)
            if model.config.variational
            else torch.zeros((), device=v.device)
        ),
        "redundancy": F.mse_loss(u_hat, u),
    }
    components["total"] = weighted_total(components, weights)
    return components


def corpus_tensors(corpus):
    inputs, targets, masks, v, u = corpus.tensors()
    return (
        torch.as_tensor(inputs),
        torch.as_tensor(targets),
        torch.as_tensor(masks),
        torch.as_tensor(v),
        torch.as_tensor(u),
    )


def train(model, corpus, config, checkpoint_dir=None, progress=False):
    """Two-stage training: pretrain with gamma = 0, then finetune with gamma restored.

    With a checkpoint_dir, each epoch writes checkpoint_epoch_NNNN.pt and only the
    newest config.keep_checkpoints files are kept; 0 writes none.

    Returns:
        Per-epoch history entries with every loss component.

    Raises:
        RuntimeError: when the total loss becomes non-finite.
    """
    if len(corpus) == 0:
        raise ValueError("Cannot train on an empty corpus")
    tensors = corpus_tensors(corpus)
    n = tensors[0].shape[0]
    generator = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    schedule = ["pretrain"] * config.pretrain_epochs + ["finetune"] * config.finetune_epochs
    history = []
    written = []
    for epoch, stage in enumerate(tqdm(schedule, desc="Training", disable=not progress)):
        model.train()
        weights = config.weights(stage)
        totals = {k: 0.0 for k in ("total", "performance", "reconstruction", "kl", "redundancy")}
        order = torch.randperm(n, generator=generator)
        for start in range(0, n, config.batch_size):
            picks = order[start:start + config.batch_size]
            batch = tuple(t[picks] for t in tensors)
            losses = joint_loss(model, batch, weights, config.kl_form)
            if not torch.isfinite(losses["total"]):
                raise RuntimeError(f"Training diverged at epoch {epoch} ({stage}): non-finite loss")
            optimizer.zero_grad()
            losses["total"].backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            for key in totals:
                totals[key] += float(losses[key].detach()) * len(picks)

        entry = {"epoch": epoch, "stage": stage}
        entry.update({k: v / n for k, v in totals.items()})
        history.append(entry)
        if epoch % 10 == 0 or epoch == len(schedule) - 1:
            core.log_message(
                f"Epoch {epoch} [{stage}] total={entry['total']:.4f} "
                f"rec={entry['reconstruction']:.4f} kl={entry['kl']:.4f}",
                "DEBUG",
            )
        if checkpoint_dir and config.keep_checkpoints:
            path = os.path.join(checkpoint_dir, checkpoint_name(epoch))
            save_checkpoint(model, path, n_features=corpus.vocabulary.n_features,
                            extra={"epoch": epoch, "stage": stage})
            written.append(path)
            while len(written) > config.keep_checkpoints:
                os.remove(written.pop(0))
    model.eval()
    return history


def checkpoint_name(epoch):
    return f"checkpoint_epoch_{epoch:04d}.pt"


def teacher_forced_accuracy(model, corpus, batch_size=256):
    """Fraction of unmasked target positions whose argmax matches, using e* = m."""
    tensors = corpus_tensors(corpus)
    model.eval()
    correct = 0
    total = 0
    with torch.no_grad():
        for start in range(0, tensors[0].shape[0], batch_size):
            input_ids, target_ids, mask, _, _ = (t[start:start + batch_size] for t in tensors)
            latent = model.encode(input_ids, input_ids != PAD, stochastic=False).sample
            logits = model.decode_logits(latent, shift_right(target_ids))
            hits = (logits.argmax(dim=-1) == target_ids) & mask
            correct += int(hits.sum())
            total += int(mask.sum())
    return correct / total if total else 0.0


def save_checkpoint(model, path, n_features, upstream_hash="", extra=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "vocab_size": model.vocab_size,
        "max_len": model.max_len,
        "n_features": n_features,
        "upstream_hash": upstream_hash,
        "state_dict": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns (model in eval mode, checkpoint payload)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Model checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    config = ModelConfig(**payload["config"])
    model = SubsetEmbeddingModel(config, payload["vocab_size"], payload["max_len"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def latent_of(model, tokens):
    """Deterministic embedding of a single token sequence."""
    row = np.full(model.max_len, PAD, dtype=np.int64)
    row[0] = SOS
    row[1:len(tokens) + 1] = tokens
    ids = torch.as_tensor(row).unsqueeze(0)
    with torch.no_grad():
        return model.encode(ids, ids != PAD, stochastic=False).sample[0]
