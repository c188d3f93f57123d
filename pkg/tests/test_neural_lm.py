import math

import numpy as np
import pytest
import torch

from cdasr import neural_lm, subword
from cdasr.neural_lm import (
    NeuralLMConfig,
    build_model,
    neural_lm_logprob,
    train_neural_lm,
)
from cdasr.subword import train_subwords, encode_ids


@pytest.fixture(scope="module")
def tiny_setup():
    rng = np.random.default_rng(5)
    words = ["ab", "ba", "abb", "bab", "aab"]
    sentences = [
        " ".join(rng.choice(words, size=rng.integers(2, 6))) for _ in range(120)
    ]
    vocab = train_subwords(sentences, target_size=12)
    seqs = [encode_ids(vocab, s) for s in sentences]
    return vocab, sentences, seqs


@pytest.fixture(scope="module")
def trained(tiny_setup):
    vocab, _, seqs = tiny_setup
    cfg = NeuralLMConfig(layer_count=2, layer_dim=32, epochs=5, seed=1)
    return train_neural_lm(seqs[:100], vocab, cfg), seqs[100:]


def test_beats_uniform_perplexity(trained, tiny_setup):
    vocab, _, _ = tiny_setup
    lm, heldout = trained
    assert neural_lm.perplexity(lm, heldout) < vocab.size


def test_training_reduces_heldout_nll(tiny_setup, trained):
    vocab, _, seqs = tiny_setup
    lm, heldout = trained
    untrained = build_model(vocab, lm.config)
    assert neural_lm.mean_nll(lm, heldout) < neural_lm.mean_nll(untrained, heldout)


def test_per_step_distribution_normalized(trained):
    lm, heldout = trained
    for prefix in ([], heldout[0][:3], heldout[1][:1]):
        logprobs = lm.step_logprobs(prefix)
        assert float(np.exp(logprobs).sum()) == pytest.approx(1.0, abs=1e-6)


def test_sequence_logprob_is_sum_of_steps(trained, tiny_setup):
    vocab, _, _ = tiny_setup
    lm, heldout = trained
    seq = heldout[0][:4]
    stepwise = 0.0
    for i, t in enumerate(seq):
        stepwise += float(lm.step_logprobs(seq[:i])[t])
    stepwise += float(lm.step_logprobs(seq)[vocab.eos_id])
    assert lm.sequence_logprob(seq) == pytest.approx(stepwise, rel=1e-6)


def test_scoring_deterministic(trained):
    lm, heldout = trained
    a = [lm.step_logprobs(s[:3]) for s in heldout[:5]]
    b = [lm.step_logprobs(s[:3]) for s in heldout[:5]]
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_training_deterministic(tiny_setup):
    vocab, _, seqs = tiny_setup
    cfg = NeuralLMConfig(layer_count=1, layer_dim=16, epochs=2, seed=7)
    lm1 = train_neural_lm(seqs[:40], vocab, cfg)
    lm2 = train_neural_lm(seqs[:40], vocab, cfg)
    for p1, p2 in zip(lm1.module.parameters(), lm2.module.parameters()):
        assert torch.equal(p1, p2)


def test_memorizes_single_sentence(tiny_setup):
    vocab, _, seqs = tiny_setup
    seq = seqs[0]
    cfg = NeuralLMConfig(layer_count=1, layer_dim=32, epochs=60, batch_size=8, seed=3)
    lm = train_neural_lm([seq] * 32, vocab, cfg)  # ~2k steps total
    assert neural_lm.mean_nll(lm, [seq]) < 0.05


def test_zero_head_gives_uniform(tiny_setup):
    vocab, _, _ = tiny_setup
    lm = build_model(vocab, NeuralLMConfig(layer_count=1, layer_dim=16, seed=0))
    with torch.no_grad():
        lm.module.head.weight.zero_()
        lm.module.head.bias.zero_()
    logprobs = lm.step_logprobs([1, 2])
    assert np.allclose(logprobs, -math.log(vocab.size), atol=1e-6)


def test_unit_not_in_vocab_errors(trained, tiny_setup):
    vocab, _, _ = tiny_setup
    lm, _ = trained
    with pytest.raises(neural_lm.NeuralLMError):
        neural_lm_logprob(lm, [], "nosuchunit")


def test_bad_ids_rejected(tiny_setup):
    vocab, _, seqs = tiny_setup
    with pytest.raises(neural_lm.NeuralLMError):
        train_neural_lm([[vocab.size + 3]], vocab, NeuralLMConfig(epochs=1))


def test_gradient_matches_finite_differences(tiny_setup):
    vocab, _, seqs = tiny_setup
    torch.manual_seed(0)
    lm = build_model(vocab, NeuralLMConfig(layer_count=1, layer_dim=8, seed=0))
    module = lm.module.double()

    def loss_fn():
        inputs, targets, mask = neural_lm._make_batch(seqs[:3], vocab)
        logprobs, _ = module(inputs)
        nll = -logprobs.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
        return (nll * mask).sum() / mask.sum()

    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(1)
    for name, p in module.named_parameters():
        flat = p.detach().reshape(-1)
        gflat = p.grad.reshape(-1)
        for idx in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
            eps = 1e-6
            with torch.no_grad():
                flat[idx] += eps
                hi = float(loss_fn())
                flat[idx] -= 2 * eps
                lo = float(loss_fn())
                flat[idx] += eps
            fd = (hi - lo) / (2 * eps)
            analytic = float(gflat[idx])
            denom = max(abs(fd), abs(analytic), 1e-8)
            assert abs(fd - analytic) / denom <= 1e-3, name


def test_checkpoint_roundtrip(tmp_path, trained, tiny_setup):
    lm, heldout = trained
    path = tmp_path / "lm.cdck"
    neural_lm.save_neural_lm(lm, path)
    loaded = neural_lm.load_neural_lm(path)
    assert np.allclose(
        loaded.step_logprobs(heldout[0][:3]), lm.step_logprobs(heldout[0][:3])
    )
