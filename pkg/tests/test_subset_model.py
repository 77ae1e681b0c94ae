import dataclasses
import math
import time
from unittest.mock import patch

import numpy as np
import pytest
import torch

import collector
import corpus
import selector_core as core
import subset_model


def _config(**overrides):
    values = dict(
        token_embedding_dim=16,
        encoder_layers=1,
        decoder_layers=1,
        attention_heads=2,
        feedforward_dim=32,
        latent_dim=8,
        evaluator_hidden=16,
        dropout=0.0,
        batch_size=8,
        learning_rate=5e-3,
        pretrain_epochs=3,
        finetune_epochs=2,
    )
    values.update(overrides)
    return subset_model.ModelConfig(**values)


def _corpus(copies=2):
    rows = [((0, 1), 0.9, 0.2), ((2, 3, 4), 0.5, 0.6), ((5,), 0.1, 0.0), ((1, 4), 0.7, 0.3)]
    log = collector.CollectionLog(
        records=[collector.CollectedSubset(f, v, u) for f, v, u in rows],
        episodes=1,
        channel="supervised",
        redundancy_metric="pearson",
    )
    return corpus.build_corpus(log, n_features=6, copies=copies, seed=0)


def _model(config=None, built=None):
    built = built or _corpus()
    config = config or _config()
    return subset_model.build_model(config, built.vocabulary.size, built.max_sequence_length), built


def test_config_validation():
    with pytest.raises(ValueError, match="attention_heads"):
        _config(attention_heads=3)
    with pytest.raises(ValueError, match="kl_form"):
        _config(kl_form="other")
    with pytest.raises(ValueError, match="nonnegative"):
        _config(beta=-0.1)
    with pytest.raises(ValueError, match="encoder_kind"):
        _config(encoder_kind="gru")
    with pytest.raises(ValueError, match="keep_checkpoints"):
        _config(keep_checkpoints=-1)


def test_config_from_settings_resolves_weights():
    config = subset_model.ModelConfig.from_settings({"use_redundancy": False, "latent_dim": 4,
                                                     "attention_heads": 8})
    assert (config.alpha, config.beta, config.delta) == (0.8, 0.2, 0.0)
    assert config.latent_dim == 4
    assert config.weights("pretrain")["gamma"] == 0.0
    assert config.weights("finetune")["gamma"] == 0.001


def test_kl_term_closed_forms():
    zero = torch.zeros(1, 2)
    assert subset_model.kl_term(zero, zero, "printed").item() == 0.0
    assert subset_model.kl_term(zero, zero, "standard").item() == 0.0

    mean = torch.tensor([[1.0, 2.0]])
    assert subset_model.kl_term(mean, zero, "printed").item() == pytest.approx(5.0)
    assert subset_model.kl_term(mean, zero, "standard").item() == pytest.approx(2.5)

    log_scale = torch.tensor([[math.log(2.0)]])
    expected = 2.0 - 1.0 - math.log(2.0)
    assert subset_model.kl_term(torch.zeros(1, 1), log_scale).item() == pytest.approx(expected, rel=1e-6)
    with pytest.raises(ValueError):
        subset_model.kl_term(zero, zero, "other")


def test_weighted_total():
    components = {"performance": 0.2, "reconstruction": 1.0, "kl": 3.0, "redundancy": 0.5}
    weights = {"alpha": 0.5, "beta": 0.3, "gamma": 0.001, "delta": 0.2}
    assert subset_model.weighted_total(components, weights) == pytest.approx(0.503)


def test_shift_right():
    targets = torch.tensor([[5, 7, corpus.EOS, corpus.PAD]])
    assert subset_model.shift_right(targets).tolist() == [[corpus.SOS, 5, 7, corpus.PAD]]


def test_encode_shapes_and_deterministic_mode():
    model, built = _model()
    inputs, _, _, _, _ = subset_model.corpus_tensors(built)
    encoding = subset_model.encode(model.eval(), inputs[:3])
    assert encoding.mean.shape == (3, 8)
    assert torch.equal(encoding.sample, encoding.mean)
    v_hat, u_hat = subset_model.predict_scores(model, encoding.sample)
    assert v_hat.shape == u_hat.shape == (3,)


def test_encode_ignores_padding_length():
    model, _ = _model()
    model.eval()
    short = torch.tensor([[corpus.SOS, 4, 6, corpus.PAD]])
    long = torch.tensor([[corpus.SOS, 4, 6, corpus.PAD, corpus.PAD]])
    with torch.no_grad():
        a = model.encode(short, stochastic=False).mean
        b = model.encode(long, stochastic=False).mean
    assert torch.allclose(a, b, atol=1e-5)


def test_model_input_checks():
    model, built = _model()
    with pytest.raises(ValueError, match="dimension"):
        model.predict_scores(torch.zeros(1, 5))
    with pytest.raises(ValueError, match="vocabulary"):
        model.encode(torch.tensor([[corpus.SOS, built.vocabulary.size]]))
    with pytest.raises(ValueError, match="max_len"):
        model.encode(torch.full((1, built.max_sequence_length + 1), corpus.SOS))
    with pytest.raises(ValueError, match="SOS"):
        subset_model.decode_step(model, torch.zeros(8), [4])


def test_zero_projection_gives_uniform_distribution():
    model, built = _model()
    model.eval()
    with torch.no_grad():
        model.output_projection.weight.zero_()
        model.output_projection.bias.zero_()
    vocab = built.vocabulary.size
    probs = subset_model.decode_step(model, torch.zeros(8), [corpus.SOS, 4])
    assert torch.allclose(probs, torch.full((vocab,), 1.0 / vocab))

    _, targets, masks, _, _ = subset_model.corpus_tensors(built)
    with torch.no_grad():
        log_likelihood = subset_model.sequence_log_likelihood(model, torch.zeros(len(targets), 8), targets, masks)
    expected = masks.sum(dim=1).double() * math.log(1.0 / vocab)
    assert torch.allclose(log_likelihood.double(), expected, atol=1e-4)


def test_joint_loss_gradients_match_finite_differences():
    """Double-precision central differences on parameters from each block."""
    model, built = _model()
    model.double().train()
    inputs, targets, masks, v, u = subset_model.corpus_tensors(built)
    batch = (inputs[:4], targets[:4], masks[:4], v[:4].double(), u[:4].double())
    noise = torch.randn(4, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    weights = {"alpha": 0.5, "beta": 0.3, "gamma": 0.01, "delta": 0.2}

    def total():
        return subset_model.joint_loss(model, batch, weights, noise=noise)["total"]

    model.zero_grad()
    total().backward()
    checked = [
        (model.fc_mean.weight, (0, 0)),
        (model.fc_logscale.bias, (1,)),
        (model.performance_head[0].weight, (2, 3)),
        (model.redundancy_head[4].bias, (0,)),
        (model.output_projection.weight, (4, 1)),
        (model.encoder_embedding.weight, (4, 0)),
    ]
    step = 1e-6
    for param, index in checked:
        analytic = param.grad[index].item()
        with torch.no_grad():
            original = param[index].item()
            param[index] = original + step
            plus = total().item()
            param[index] = original - step
            minus = total().item()
            param[index] = original
        numeric = (plus - minus) / (2 * step)
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-7)


def test_train_history_and_stage_weights():
    model, built = _model()
    config = model.config
    with patch("subset_model.joint_loss", wraps=subset_model.joint_loss) as mock_loss:
        history = subset_model.train(model, built, config)
    assert len(history) == 5
    assert [h["stage"] for h in history] == ["pretrain"] * 3 + ["finetune"] * 2
    for entry in history:
        assert all(np.isfinite(entry[k]) for k in ("total", "performance", "reconstruction", "kl", "redundancy"))
    gammas = [c.args[2]["gamma"] for c in mock_loss.call_args_list]
    batches = math.ceil(len(built) / config.batch_size)
    assert gammas[: 3 * batches] == [0.0] * (3 * batches)
    assert gammas[3 * batches:] == [config.gamma] * (2 * batches)
    assert not model.training


def test_train_reduces_reconstruction_loss():
    model, built = _model(_config(pretrain_epochs=25, finetune_epochs=5))
    history = subset_model.train(model, built, model.config)
    assert history[-1]["reconstruction"] < history[0]["reconstruction"]
    assert 0.0 <= subset_model.teacher_forced_accuracy(model, built) <= 1.0


def test_train_rejects_non_finite_loss():
    model, built = _model()

    def broken(*args, **kwargs):
        nan = torch.tensor(float("nan"), requires_grad=True)
        return {k: nan for k in ("total", "performance", "reconstruction", "kl", "redundancy")}

    with patch("subset_model.joint_loss", side_effect=broken):
        with pytest.raises(RuntimeError, match="non-finite"):
            subset_model.train(model, built, model.config)


def test_train_keeps_newest_epoch_checkpoints(tmp_path):
    model, built = _model(_config(keep_checkpoints=2))
    subset_model.train(model, built, model.config, checkpoint_dir=str(tmp_path))
    kept = sorted(p.name for p in tmp_path.glob("checkpoint_epoch_*.pt"))
    assert kept == ["checkpoint_epoch_0003.pt", "checkpoint_epoch_0004.pt"]
    _, payload = subset_model.load_checkpoint(str(tmp_path / kept[-1]))
    assert payload["extra"] == {"epoch": 4, "stage": "finetune"}


def test_train_without_checkpoint_retention_writes_nothing(tmp_path):
    model, built = _model(_config(keep_checkpoints=0))
    subset_model.train(model, built, model.config, checkpoint_dir=str(tmp_path))
    assert not list(tmp_path.iterdir())


def test_checkpoint_round_trip_is_exact(tmp_path):
    model, built = _model()
    subset_model.train(model, built, model.config)
    path = str(tmp_path / "model.pt")
    subset_model.save_checkpoint(model, path, n_features=6, upstream_hash="abc")

    loaded, payload = subset_model.load_checkpoint(path)
    assert payload["upstream_hash"] == "abc"
    assert payload["n_features"] == 6
    for key, tensor in model.state_dict().items():
        assert torch.equal(tensor, loaded.state_dict()[key])
    tokens = (4, 7)
    assert torch.equal(subset_model.latent_of(model, tokens), subset_model.latent_of(loaded, tokens))


def test_load_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        subset_model.load_checkpoint(str(tmp_path / "absent.pt"))


def test_zero_noise_sample_equals_deterministic_encoding():
    model, built = _model()
    model.eval()
    inputs, _, _, _, _ = subset_model.corpus_tensors(built)
    with torch.no_grad():
        sampled = model.encode(inputs[:4], stochastic=True, noise=torch.zeros(4, 8)).sample
        fixed = model.encode(inputs[:4], stochastic=False).sample
    assert torch.equal(sampled, fixed)


def test_score_head_latent_gradients_match_finite_differences():
    """Gradients of both predicted scores with respect to the latent itself."""
    model, _ = _model()
    model.double().eval()
    latent = torch.randn(1, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    step = 1e-6
    for head in (0, 1):
        point = latent.clone().requires_grad_(True)
        model.predict_scores(point)[head].sum().backward()
        for index in range(8):
            shifted = latent.clone()
            shifted[0, index] += step
            plus = model.predict_scores(shifted)[head].item()
            shifted[0, index] -= 2 * step
            minus = model.predict_scores(shifted)[head].item()
            numeric = (plus - minus) / (2 * step)
            assert point.grad[0, index].item() == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_pretraining_moves_every_parameter():
    model, built = _model(_config(pretrain_epochs=2, finetune_epochs=0))
    initial = {name: p.detach().clone() for name, p in model.named_parameters()}
    subset_model.train(model, built, model.config)
    unchanged = [name for name, p in model.named_parameters() if torch.equal(p, initial[name])]
    assert unchanged == []


def test_non_variational_model_uses_the_mean_and_drops_kl():
    model, built = _model(_config(variational=False))
    assert model.config.weights("finetune")["gamma"] == 0.0
    inputs, targets, masks, v, u = subset_model.corpus_tensors(built)
    encoding = model.encode(inputs[:3], stochastic=True)
    assert torch.equal(encoding.sample, encoding.mean)
    losses = subset_model.joint_loss(model, (inputs[:3], targets[:3], masks[:3], v[:3], u[:3]),
                                     model.config.weights())
    assert losses["kl"].item() == 0.0
    history = subset_model.train(model, built, model.config)
    assert all(entry["kl"] == 0.0 for entry in history)


def test_lstm_encoder_shapes_and_padding():
    model, built = _model(_config(encoder_kind="lstm"))
    model.eval()
    inputs, _, _, _, _ = subset_model.corpus_tensors(built)
    encoding = subset_model.encode(model, inputs[:3])
    assert encoding.mean.shape == (3, 8)
    short = torch.tensor([[corpus.SOS, 4, 6, corpus.PAD]])
    long = torch.tensor([[corpus.SOS, 4, 6, corpus.PAD, corpus.PAD]])
    with torch.no_grad():
        a = model.encode(short, stochastic=False).mean
        b = model.encode(long, stochastic=False).mean
    assert torch.allclose(a, b, atol=1e-5)
    probs = subset_model.decode_step(model, encoding.sample[0], [corpus.SOS, 4])
    assert probs.shape == (built.vocabulary.size,)
    assert probs.sum().item() == pytest.approx(1.0, abs=1e-5)


def test_lstm_model_trains_and_round_trips(tmp_path):
    model, built = _model(_config(encoder_kind="lstm", pretrain_epochs=25, finetune_epochs=5))
    history = subset_model.train(model, built, model.config)
    assert history[-1]["reconstruction"] < history[0]["reconstruction"]

    path = str(tmp_path / "model.pt")
    subset_model.save_checkpoint(model, path, n_features=6)
    loaded, _ = subset_model.load_checkpoint(path)
    assert loaded.config.encoder_kind == "lstm"
    assert torch.equal(subset_model.latent_of(model, (4, 7)), subset_model.latent_of(loaded, (4, 7)))


@pytest.mark.slow
def test_desk_pretraining_reconstructs_a_small_corpus(tmp_path):
    """200 records over 20 features, stage 1 only, with the desk training settings."""
    rng = np.random.default_rng(0)
    records, seen = [], set()
    while len(records) < 40:
        size = int(rng.integers(1, 9))
        features = tuple(sorted(int(i) for i in rng.choice(20, size=size, replace=False)))
        if features in seen:
            continue
        seen.add(features)
        records.append(collector.CollectedSubset(features, float(rng.random()), float(rng.random())))
    log = collector.CollectionLog(records=records, episodes=40, channel="supervised",
                                  redundancy_metric="pearson")
    built = corpus.build_corpus(log, n_features=20, copies=4, seed=0)
    assert len(built) == 200

    settings = core.load_settings(str(tmp_path / "absent.json"), profile="desk")
    config = dataclasses.replace(subset_model.ModelConfig.from_settings(settings["model"]),
                                 finetune_epochs=0)
    model = subset_model.build_model(config, built.vocabulary.size, built.max_sequence_length)
    started = time.perf_counter()
    subset_model.train(model, built, config)
    assert time.perf_counter() - started < 300
    assert subset_model.teacher_forced_accuracy(model, built) >= 0.95
