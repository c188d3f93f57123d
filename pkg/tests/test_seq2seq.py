"""Attention recognizer: augmentation, schedule, loss, training, decoding."""

import itertools
import math

import numpy as np
import pytest
import torch

from cdasr import corpus, neural_lm, subword
from cdasr.seq2seq import (
    LRSchedule,
    S2SDecodeConfig,
    S2SModule,
    Seq2SeqConfig,
    Seq2SeqError,
    SpecAugmentPolicy,
    _smoothed_nll_torch,
    label_smoothed_loss,
    load_seq2seq,
    lr_at,
    s2s_attention,
    s2s_decode,
    save_seq2seq,
    spec_augment,
    train_seq2seq,
)
from cdasr.seq2seq import decode_units_to_words


class TestSpecAugment:
    def test_zero_policy_is_identity(self):
        feats = np.random.default_rng(0).normal(size=(30, 8)).astype(np.float32)
        policy = SpecAugmentPolicy(0, 0, 0, 0, 0.0)
        np.testing.assert_array_equal(spec_augment(feats, policy, 1), feats)

    def test_full_band_frequency_mask_is_constant(self):
        feats = np.random.default_rng(1).normal(size=(20, 4)).astype(np.float64)
        policy = SpecAugmentPolicy(freq_mask_width=4, freq_mask_count=1,
                                   time_mask_width=0, time_mask_count=0,
                                   max_time_mask_fraction=0.0)
        for seed in range(50):
            out = spec_augment(feats, policy, seed)
            masked_cols = [
                j for j in range(4)
                if np.all(out[:, j] == feats.mean())
                and not np.allclose(out[:, j], feats[:, j])
            ]
            for j in masked_cols:
                assert np.ptp(out[:, j]) == 0.0

    def test_time_mask_fraction_bound_over_many_trials(self):
        rng = np.random.default_rng(3)
        policy = SpecAugmentPolicy()
        for trial in range(1000):
            t = int(rng.integers(10, 120))
            feats = rng.normal(size=(t, 6))
            out = spec_augment(feats, policy, trial)
            fill = feats.mean()
            masked_rows = np.sum(np.all(out == fill, axis=1))
            # rows that happened to equal the mean anyway are impossible
            # with continuous features, so this counts masked columns
            assert masked_rows <= policy.max_time_mask_fraction * t

    def test_deterministic_given_seed(self):
        feats = np.random.default_rng(2).normal(size=(50, 6))
        a = spec_augment(feats, SpecAugmentPolicy(), 7)
        b = spec_augment(feats, SpecAugmentPolicy(), 7)
        np.testing.assert_array_equal(a, b)

    def test_negative_policy_field_rejected(self):
        with pytest.raises(Seq2SeqError):
            SpecAugmentPolicy(freq_mask_width=-1)


class TestLRSchedule:
    def test_closed_form_values(self):
        s = LRSchedule()
        assert lr_at(s, 500) == pytest.approx(1e-3)
        assert lr_at(s, 500 + 150_000 + 260_000) == pytest.approx(1e-5)
        assert lr_at(s, 500 + 150_000 + 130_000) == pytest.approx(5.05e-4)
        assert lr_at(s, 10_000_000) == pytest.approx(1e-5)
        assert lr_at(s, 0) == 0.0
        assert lr_at(s, 250) == pytest.approx(5e-4)

    def test_continuity_at_phase_boundaries(self):
        s = LRSchedule(warmup_steps=10, peak_rate=1.0, hold_steps=20,
                       decay_steps=40, floor_rate=0.1)
        for b in (10, 30, 70):
            assert lr_at(s, b - 1) == pytest.approx(lr_at(s, b), abs=0.11)
            left = lr_at(s, b)
            right = lr_at(s, b + 1)
            assert abs(left - lr_at(s, b)) < 1e-12
            assert abs(right - left) <= 1.0 / 10 + 1e-12

    def test_negative_step_rejected(self):
        with pytest.raises(Seq2SeqError):
            lr_at(LRSchedule(), -1)


class TestLabelSmoothedLoss:
    def test_uniform_prediction_is_log_k_for_any_p(self):
        dist = np.full((3, 4), 0.25)
        for p in (0.0, 0.1, 0.5, 0.9):
            loss = label_smoothed_loss(dist, [0, 1, 3], p)
            assert loss == pytest.approx(math.log(4))

    def test_no_smoothing_near_certain_prediction(self):
        dist = np.array([[0.99, 0.004, 0.003, 0.003]])
        assert label_smoothed_loss(dist, [0], 0.0) == pytest.approx(-math.log(0.99))

    def test_hand_worked_smoothed_value(self):
        dist = np.array([[0.7, 0.1, 0.1, 0.1]])
        want = -(0.925 * math.log(0.7) + 0.025 * 3 * math.log(0.1))
        assert label_smoothed_loss(dist, [0], 0.1) == pytest.approx(want)
        assert want == pytest.approx(0.5027, abs=1e-4)

    def test_unnormalized_row_rejected(self):
        dist = np.array([[0.5, 0.2, 0.2, 0.2]])
        with pytest.raises(Seq2SeqError, match="not normalized"):
            label_smoothed_loss(dist, [0], 0.1)

    def test_length_mismatch_rejected(self):
        with pytest.raises(Seq2SeqError):
            label_smoothed_loss(np.full((2, 4), 0.25), [0], 0.1)

    def test_torch_version_matches_numpy(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(5, 6))
        dist = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        targets = [0, 3, 5, 1, 2]
        want = label_smoothed_loss(dist, targets, 0.1)
        got = _smoothed_nll_torch(
            torch.from_numpy(np.log(dist)), torch.tensor(targets), 0.1
        ).item() / 5
        assert got == pytest.approx(want)


def toy_vocab():
    sents = ["ab ba", "a b", "ab a", "ba b"]
    return subword.train_subwords(sents, target_size=8)


def toy_utts(n=12, feat_dim=4, seed=5):
    alphabet = ["a", "b", corpus.SEPARATOR]
    means = np.eye(feat_dim)[:3] * 3.0
    rng = np.random.default_rng(seed)
    words = ["ab", "ba", "a", "b"]
    utts = []
    for i in range(n):
        transcript = [words[i % 4], words[(i + 1) % 4]]
        frames = []
        for s in corpus.grapheme_sequence(transcript):
            dur = rng.integers(5, 8)
            frames.append(
                means[alphabet.index(s)] + 0.15 * rng.normal(size=(dur, feat_dim))
            )
        feats = np.concatenate(frames).astype(np.float32)
        utts.append(corpus.Utterance(
            utt_id=f"u{i:03d}", domain=corpus.CTS, num_frames=feats.shape[0],
            features=feats, transcript=transcript,
        ))
    return utts


def tiny_config(**kw):
    base = dict(
        dim=24, epochs=1, batch_size=4,
        schedule=LRSchedule(warmup_steps=5, peak_rate=3e-3, hold_steps=40,
                            decay_steps=60, floor_rate=1e-4),
        policy=SpecAugmentPolicy(2, 1, 4, 1, 0.1),
        val_fraction=0.1, seed=0,
    )
    base.update(kw)
    return Seq2SeqConfig(**base)


class TestTraining:
    def test_empty_training_set_rejected(self):
        with pytest.raises(Seq2SeqError, match="empty"):
            train_seq2seq([], toy_vocab(), tiny_config())

    def test_deterministic_given_seed(self):
        utts = toy_utts(8)
        vocab = toy_vocab()
        m1 = train_seq2seq(utts, vocab, tiny_config(epochs=2))
        m2 = train_seq2seq(utts, vocab, tiny_config(epochs=2))
        assert m1.best_val_wer == m2.best_val_wer
        h1 = s2s_decode(m1, utts[0].features, S2SDecodeConfig(beam=2))
        h2 = s2s_decode(m2, utts[0].features, S2SDecodeConfig(beam=2))
        assert h1 == h2

    def test_memorizes_small_training_set(self):
        utts = toy_utts(12)
        vocab = toy_vocab()
        cfg = tiny_config(
            epochs=40, dim=32,
            schedule=LRSchedule(warmup_steps=10, peak_rate=3e-3,
                                hold_steps=3000, decay_steps=100,
                                floor_rate=1e-4),
            policy=SpecAugmentPolicy(0, 0, 0, 0, 0.0),
        )
        model = train_seq2seq(utts, vocab, cfg)
        errs = 0
        total = 0
        for u in utts:
            hyp = s2s_decode(model, u.features, S2SDecodeConfig(beam=4))
            words = decode_units_to_words(vocab, hyp.units)
            errs += words != u.transcript
            total += 1
        assert errs / total < 0.2

    def test_attention_rows_sum_to_one(self):
        utts = toy_utts(6)
        vocab = toy_vocab()
        model = train_seq2seq(utts, vocab, tiny_config())
        units = subword.encode_ids(vocab, " ".join(utts[0].transcript))
        att = s2s_attention(model, utts[0].features, units)
        np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-6)
        assert att.shape[1] == math.ceil(utts[0].features.shape[0] / 4)

    def test_checkpoint_round_trip(self, tmp_path):
        utts = toy_utts(6)
        vocab = toy_vocab()
        model = train_seq2seq(utts, vocab, tiny_config())
        save_seq2seq(model, tmp_path / "m.ckpt")
        loaded = load_seq2seq(tmp_path / "m.ckpt")
        assert loaded.config == model.config
        h1 = s2s_decode(model, utts[0].features, S2SDecodeConfig(beam=2))
        h2 = s2s_decode(loaded, utts[0].features, S2SDecodeConfig(beam=2))
        assert h1 == h2


class TestGradients:
    def test_loss_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        module = S2SModule(feat_dim=3, dim=4, enc_layers=1, dec_layers=1,
                           n_units=6).double()
        x = torch.randn(1, 9, 3, dtype=torch.float64)
        inputs = torch.tensor([[1, 3, 4, 5]])
        targets = torch.tensor([3, 4, 5, 2])

        def loss_fn():
            logp, _ = module(x, None, inputs)
            return _smoothed_nll_torch(logp[0], targets, 0.1) / 4

        loss = loss_fn()
        module.zero_grad()
        loss.backward()
        eps = 1e-6
        checked = 0
        for name, param in module.named_parameters():
            grad = param.grad
            flat = param.data.view(-1)
            idxs = [0, flat.numel() // 2] if flat.numel() > 1 else [0]
            for i in idxs:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                a = grad.view(-1)[i].item()
                assert abs(a - fd) <= 1e-3 * max(abs(fd), 1e-8), (name, i, a, fd)
                checked += 1
        assert checked >= 20
        # attention parameters were among the checked groups
        names = [n for n, _ in module.named_parameters()]
        assert any("att" in n for n in names)


def enum_units(vocab, max_len):
    ids = [k for k in range(vocab.size) if k != vocab.bos_id and k != vocab.eos_id]
    for n in range(max_len + 1):
        for seq in itertools.product(ids, repeat=n):
            yield seq


def model_seq_logprob(model, feats, units, terminated):
    module = model.module
    x = torch.from_numpy(np.ascontiguousarray(feats, dtype=np.float32)).unsqueeze(0)
    inp = torch.tensor([[model.vocab.bos_id] + list(units)])
    with torch.no_grad():
        logp, _ = module(x, None, inp)
    logp = logp[0].double().numpy()
    total = sum(float(logp[i, u]) for i, u in enumerate(units))
    if terminated:
        total += float(logp[len(units), model.vocab.eos_id])
    return total


class TestDecoding:
    def make_model(self, vocab=None):
        vocab = vocab or toy_vocab()
        utts = toy_utts(6)
        return train_seq2seq(utts, vocab, tiny_config()), utts

    def test_beam_one_is_greedy_rollout(self):
        model, utts = self.make_model()
        hyp = s2s_decode(model, utts[0].features, S2SDecodeConfig(beam=1))
        # reproduce the greedy rollout by hand
        module = model.module
        x = torch.from_numpy(utts[0].features).unsqueeze(0)
        with torch.no_grad():
            enc, enc_lengths = module.encode(x)
            enc_proj = module.att_enc(enc)
            state = module.init_state(1, x.dtype, x.device)
            last = model.vocab.bos_id
            units = []
            for _ in range(2 * int(enc_lengths[0]) + 10):
                logp, state, _ = module.step(enc, enc_proj, enc_lengths, state,
                                             torch.tensor([last]))
                row = logp[0].double().numpy()
                row[model.vocab.bos_id] = -np.inf
                last = int(np.argmax(row))
                if last == model.vocab.eos_id:
                    break
                units.append(last)
        assert hyp.units == units

    def test_unlimited_beam_matches_enumeration(self):
        model, utts = self.make_model()
        feats = utts[0].features[:10]
        max_len = 3
        hyp = s2s_decode(
            model, feats, S2SDecodeConfig(beam=math.inf, max_len=max_len)
        )
        best = None
        for seq in enum_units(model.vocab, max_len - 1):
            am = model_seq_logprob(model, feats, seq, terminated=True)
            score = am / (len(seq) + 1)
            if best is None or score > best[0]:
                best = (score, list(seq))
        for seq in enum_units(model.vocab, max_len):
            if len(seq) != max_len:
                continue
            am = model_seq_logprob(model, feats, seq, terminated=False)
            score = am / len(seq)
            if score > best[0]:
                best = (score, list(seq))
        assert hyp.units == best[1]
        assert hyp.total_score == pytest.approx(best[0], rel=1e-9)

    def test_unlimited_beam_matches_enumeration_with_fusion(self):
        vocab = toy_vocab()
        model, utts = self.make_model(vocab)
        seqs = [subword.encode_ids(vocab, "ab ba"),
                subword.encode_ids(vocab, "a b")]
        lm = neural_lm.train_neural_lm(
            seqs, vocab, neural_lm.NeuralLMConfig(epochs=1, layer_dim=8)
        )
        feats = utts[0].features[:10]
        max_len = 3
        lam = 0.4
        hyp = s2s_decode(model, feats, S2SDecodeConfig(
            beam=math.inf, max_len=max_len, fusion_lm=lm, lm_weight=lam))
        best = None
        for seq in enum_units(vocab, max_len - 1):
            am = model_seq_logprob(model, feats, seq, terminated=True)
            lms = lm.sequence_logprob(list(seq), include_eos=True)
            score = (am + lam * lms) / (len(seq) + 1)
            if best is None or score > best[0]:
                best = (score, list(seq), am, lms)
        for seq in enum_units(vocab, max_len):
            if len(seq) != max_len:
                continue
            am = model_seq_logprob(model, feats, seq, terminated=False)
            lms = lm.sequence_logprob(list(seq), include_eos=False)
            score = (am + lam * lms) / len(seq)
            if score > best[0]:
                best = (score, list(seq), am, lms)
        assert hyp.units == best[1]
        assert hyp.total_score == pytest.approx(best[0], rel=1e-9)
        assert hyp.am_score == pytest.approx(best[2], rel=1e-9)
        assert hyp.lm_score == pytest.approx(best[3], rel=1e-9)

    def test_zero_weight_fusion_matches_no_fusion(self):
        vocab = toy_vocab()
        model, utts = self.make_model(vocab)
        lm = neural_lm.train_neural_lm(
            [subword.encode_ids(vocab, "ab")], vocab,
            neural_lm.NeuralLMConfig(epochs=1, layer_dim=8),
        )
        h0 = s2s_decode(model, utts[0].features, S2SDecodeConfig(beam=3))
        h1 = s2s_decode(model, utts[0].features,
                        S2SDecodeConfig(beam=3, fusion_lm=lm, lm_weight=0.0))
        assert h0.units == h1.units
        assert h0.total_score == pytest.approx(h1.total_score)

    def test_score_non_decreasing_in_beam_width(self):
        model, utts = self.make_model()
        scores = []
        for beam in [1, 2, 4, 8, math.inf]:
            hyp = s2s_decode(model, utts[1].features,
                             S2SDecodeConfig(beam=beam, max_len=6))
            scores.append(hyp.total_score)
        for lo, hi in zip(scores, scores[1:]):
            assert hi >= lo - 1e-9

    def test_vocab_mismatch_rejected(self):
        vocab = toy_vocab()
        model, utts = self.make_model(vocab)
        other = subword.SubwordVocab(
            units=list(subword.SPECIALS) + ["a", "b", "c"], merges=[],
            target_size=7,
        )
        assert other.size != vocab.size
        lm = neural_lm.train_neural_lm(
            [subword.encode_ids(other, "c")], other,
            neural_lm.NeuralLMConfig(epochs=1, layer_dim=8),
        )
        with pytest.raises(Seq2SeqError, match="vocab"):
            s2s_decode(model, utts[0].features,
                       S2SDecodeConfig(beam=2, fusion_lm=lm, lm_weight=0.3))

    def test_bad_beam_rejected(self):
        model, utts = self.make_model()
        with pytest.raises(Seq2SeqError, match="beam"):
            s2s_decode(model, utts[0].features, S2SDecodeConfig(beam=0))
