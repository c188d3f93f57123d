"""Integrated recognizer: downsampling encoder with additive-attention
decoder over subword units.

Training uses feature masking augmentation, label-smoothed cross-entropy,
and a warmup/hold/linear-decay learning-rate schedule; the checkpoint with
the best validation WER is retained. Decoding is a beam search over units
with optional shallow fusion of an external unit-level LM.
"""

import dataclasses
import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import containers, torchutil
from .hypothesis import Hypothesis
from .kernels import NEG_INF, edit_counts

EOS_CAP_FACTOR = 2  # decode length cap: EOS_CAP_FACTOR * enc_len + 10


class Seq2SeqError(ValueError):
    pass


# ---------------------------------------------------------------------------
# feature masking augmentation


@dataclass(frozen=True)
class SpecAugmentPolicy:
    freq_mask_width: int = 4
    freq_mask_count: int = 1
    time_mask_width: int = 20
    time_mask_count: int = 2
    max_time_mask_fraction: float = 0.2

    def __post_init__(self):
        for name in ("freq_mask_width", "freq_mask_count", "time_mask_width",
                     "time_mask_count", "max_time_mask_fraction"):
            if getattr(self, name) < 0:
                raise Seq2SeqError(f"{name} must be non-negative")

    def to_dict(self):
        return dataclasses.asdict(self)


def spec_augment(features, policy, seed):
    """Mask random frequency bands and time spans with the utterance mean.

    Time-mask widths are drawn U[0, width] but cumulatively capped so the
    total masked time columns never exceed max_time_mask_fraction * frames.
    """
    rng = np.random.default_rng(seed)
    out = np.array(features, dtype=features.dtype, copy=True)
    t, f = out.shape
    fill = out.mean()
    for _ in range(policy.freq_mask_count):
        w = int(rng.integers(0, policy.freq_mask_width + 1))
        w = min(w, f)
        if w == 0:
            continue
        start = int(rng.integers(0, f - w + 1))
        out[:, start : start + w] = fill
    budget = int(policy.max_time_mask_fraction * t)
    for _ in range(policy.time_mask_count):
        w = int(rng.integers(0, policy.time_mask_width + 1))
        w = min(w, budget, t)
        if w == 0:
            continue
        start = int(rng.integers(0, t - w + 1))
        out[start : start + w, :] = fill
        budget -= w
    return out


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass(frozen=True)
class LRSchedule:
    warmup_steps: int = 500
    peak_rate: float = 1e-3
    hold_steps: int = 150_000
    decay_steps: int = 260_000
    floor_rate: float = 1e-5

    def to_dict(self):
        return dataclasses.asdict(self)


def lr_at(schedule, step):
    """Piecewise rate: linear 0→peak over warmup, constant peak for hold,
    linear peak→floor over decay, constant floor after. Continuous at all
    phase boundaries."""
    s = schedule
    if step < 0:
        raise Seq2SeqError(f"step must be >= 0, got {step}")
    if step <= s.warmup_steps:
        if s.warmup_steps == 0:
            return s.peak_rate
        return s.peak_rate * step / s.warmup_steps
    step -= s.warmup_steps
    if step <= s.hold_steps:
        return s.peak_rate
    step -= s.hold_steps
    if step <= s.decay_steps:
        frac = step / s.decay_steps
        return s.peak_rate + frac * (s.floor_rate - s.peak_rate)
    return s.floor_rate


# ---------------------------------------------------------------------------
# label-smoothed loss


def label_smoothed_loss(step_distributions, targets, p):
    """Cross-entropy of predicted probability rows against smoothed targets
    ((1-p) on gold plus p/K uniform), averaged over steps."""
    if not 0.0 <= p < 1.0:
        raise Seq2SeqError(f"smoothing p must be in [0, 1), got {p}")
    dist = np.asarray(step_distributions, dtype=np.float64)
    targets = list(targets)
    if dist.shape[0] != len(targets):
        raise Seq2SeqError("one distribution row per target required")
    sums = dist.sum(axis=1)
    bad = np.nonzero(np.abs(sums - 1.0) > 1e-4)[0]
    if bad.size:
        raise Seq2SeqError(f"distribution rows not normalized: {bad.tolist()}")
    k = dist.shape[1]
    with np.errstate(divide="ignore"):
        logd = np.log(dist)
    gold_w = (1.0 - p) + p / k
    uni_w = p / k
    total = 0.0
    for i, tgt in enumerate(targets):
        total -= gold_w * logd[i, tgt] + uni_w * (logd[i].sum() - logd[i, tgt])
    return total / len(targets)


def _smoothed_nll_torch(log_probs, targets, p):
    """Torch version over (L, K) log probs; sum (not mean) over steps."""
    k = log_probs.shape[1]
    gold = log_probs.gather(1, targets.unsqueeze(1)).squeeze(1)
    gold_w = (1.0 - p) + p / k
    uni_w = p / k
    return -(gold_w * gold + uni_w * (log_probs.sum(dim=1) - gold)).sum()


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class Seq2SeqConfig:
    dim: int = 64
    enc_layers: int = 2
    dec_layers: int = 1
    subsample: int = 4
    epochs: int = 10
    batch_size: int = 16
    label_smoothing: float = 0.1
    schedule: LRSchedule = field(default_factory=lambda: LRSchedule(
        warmup_steps=50, hold_steps=400, decay_steps=600))
    policy: SpecAugmentPolicy = field(default_factory=SpecAugmentPolicy)
    val_fraction: float = 0.05
    seed: int = 0

    def to_dict(self):
        d = dataclasses.asdict(self)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["schedule"] = LRSchedule(**d["schedule"])
        d["policy"] = SpecAugmentPolicy(**d["policy"])
        return Seq2SeqConfig(**d)


class S2SModule(nn.Module):
    """Conv front-end (time reduction x4) + biLSTM encoder; unidirectional
    decoder with additive attention over encoder states."""

    def __init__(self, feat_dim, dim, enc_layers, dec_layers, n_units):
        super().__init__()
        self.conv1 = nn.Conv1d(feat_dim, dim, 3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(dim, dim, 3, stride=2, padding=1)
        self.encoder = nn.LSTM(dim, dim, num_layers=enc_layers,
                               batch_first=True, bidirectional=True)
        self.embed = nn.Embedding(n_units, dim)
        self.att_enc = nn.Linear(2 * dim, dim)
        self.att_dec = nn.Linear(dim, dim, bias=False)
        self.att_v = nn.Linear(dim, 1, bias=False)
        self.cells = nn.ModuleList(
            [nn.LSTMCell(dim + 2 * dim if i == 0 else dim, dim)
             for i in range(dec_layers)]
        )
        self.out = nn.Linear(dim + 2 * dim, n_units)
        self.dim = dim
        self.dec_layers = dec_layers

    def encode(self, x, lengths=None):
        h = torch.relu(self.conv1(x.transpose(1, 2)))
        h = torch.relu(self.conv2(h)).transpose(1, 2)
        enc, _ = self.encoder(h)
        if lengths is None:
            enc_lengths = torch.full((x.shape[0],), enc.shape[1], dtype=torch.long)
        else:
            enc_lengths = torch.div(lengths + 3, 4, rounding_mode="floor")
        return enc, enc_lengths

    def init_state(self, batch, dtype, device):
        zeros = torch.zeros(batch, self.dim, dtype=dtype, device=device)
        return [(zeros.clone(), zeros.clone()) for _ in range(self.dec_layers)]

    def attend(self, enc, enc_proj, enc_lengths, query):
        # enc: (B, T, 2D); query: (B, D) -> context (B, 2D), weights (B, T)
        e = self.att_v(torch.tanh(enc_proj + self.att_dec(query).unsqueeze(1)))
        e = e.squeeze(-1)
        mask = torch.arange(enc.shape[1], device=enc.device).unsqueeze(0)
        e = e.masked_fill(mask >= enc_lengths.unsqueeze(1), float("-inf"))
        w = torch.softmax(e, dim=1)
        return torch.bmm(w.unsqueeze(1), enc).squeeze(1), w

    def step(self, enc, enc_proj, enc_lengths, state, unit_ids):
        """One decoder step; returns (log_probs, new_state, attention)."""
        context, att = self.attend(enc, enc_proj, enc_lengths, state[0][0])
        inp = torch.cat([self.embed(unit_ids), context], dim=1)
        new_state = []
        h = inp
        for i, cell in enumerate(self.cells):
            hc = cell(h, state[i])
            new_state.append(hc)
            h = hc[0]
        logits = self.out(torch.cat([h, context], dim=1))
        return torch.log_softmax(logits, dim=-1), new_state, att

    def forward(self, x, lengths, inputs):
        """Teacher-forced pass. inputs: (B, L) decoder input unit ids.
        Returns (B, L, K) log probs and (B, L, T') attention rows."""
        enc, enc_lengths = self.encode(x, lengths)
        enc_proj = self.att_enc(enc)
        state = self.init_state(x.shape[0], x.dtype, x.device)
        outs, atts = [], []
        for i in range(inputs.shape[1]):
            logp, state, att = self.step(enc, enc_proj, enc_lengths, state,
                                         inputs[:, i])
            outs.append(logp)
            atts.append(att)
        return torch.stack(outs, dim=1), torch.stack(atts, dim=1)


@dataclass
class Seq2SeqModel:
    vocab: "object"  # SubwordVocab
    config: Seq2SeqConfig
    module: S2SModule = field(repr=False, default=None)

    @property
    def n_units(self):
        return self.vocab.size


# ---------------------------------------------------------------------------
# training


def _encode_targets(vocab, transcript):
    from . import subword

    ids = subword.encode_ids(vocab, " ".join(transcript))
    return [vocab.bos_id] + ids + [vocab.eos_id]


def _greedy_wer(model, utts, targets):
    errs = 0
    total = 0
    for utt, tgt in zip(utts, targets):
        hyp = s2s_decode(model, utt.features, S2SDecodeConfig(beam=1))
        ref_words = list(utt.transcript)
        hyp_words = decode_units_to_words(model.vocab, hyp.units)
        s, d, i = edit_counts(
            *_word_id_arrays(ref_words, hyp_words)
        )
        errs += s + d + i
        total += len(ref_words)
    return 100.0 * errs / max(total, 1)


def _word_id_arrays(ref_words, hyp_words):
    idx = {}
    for w in ref_words + hyp_words:
        idx.setdefault(w, len(idx))
    return (
        np.array([idx[w] for w in ref_words], dtype=np.int64),
        np.array([idx[w] for w in hyp_words], dtype=np.int64),
    )


def decode_units_to_words(vocab, unit_ids):
    from . import subword

    return subword.decode_ids(vocab, unit_ids).split()


def train_seq2seq(utterances, vocab, config=Seq2SeqConfig()):
    """Train on supervised utterances; retains the best-validation-WER
    checkpoint. Deterministic given config.seed."""
    usable = [u for u in utterances if u.transcript]
    if not usable:
        raise Seq2SeqError("empty training set")
    torchutil.seed_all(config.seed)
    model = Seq2SeqModel(vocab=vocab, config=config)
    model.module = S2SModule(
        usable[0].features.shape[1], config.dim, config.enc_layers,
        config.dec_layers, vocab.size,
    )

    targets = [_encode_targets(vocab, u.transcript) for u in usable]
    order = np.random.default_rng(config.seed).permutation(len(usable))
    n_val = max(1, int(round(config.val_fraction * len(usable)))) \
        if len(usable) > 1 else 0
    val_idx = set(order[:n_val].tolist())
    train_items = [(usable[i], targets[i]) for i in range(len(usable))
                   if i not in val_idx]
    val_items = [(usable[i], targets[i]) for i in sorted(val_idx)]
    if not train_items:
        train_items = [(usable[i], targets[i]) for i in sorted(val_idx)]

    train_items.sort(key=lambda it: (it[0].features.shape[0], it[0].utt_id))
    batches = [train_items[i : i + config.batch_size]
               for i in range(0, len(train_items), config.batch_size)]
    opt = torch.optim.Adam(model.module.parameters(), lr=config.schedule.peak_rate)
    gen = torch.Generator().manual_seed(config.seed)
    step = 0
    best = (math.inf, None)
    p = config.label_smoothing
    for epoch in range(config.epochs):
        model.module.train()
        for b in torch.randperm(len(batches), generator=gen).tolist():
            batch = batches[b]
            step += 1
            for g in opt.param_groups:
                g["lr"] = lr_at(config.schedule, step)
            feats, lengths = torchutil.pad_features(
                [spec_augment(it[0].features, config.policy,
                              seed=(config.seed, epoch,
                                    zlib.crc32(it[0].utt_id.encode())))
                 for it in batch]
            )
            max_len = max(len(it[1]) for it in batch) - 1
            inp = torch.zeros(len(batch), max_len, dtype=torch.long)
            out_t = torch.full((len(batch), max_len), -1, dtype=torch.long)
            for i, (_, tgt) in enumerate(batch):
                inp[i, : len(tgt) - 1] = torch.tensor(tgt[:-1])
                out_t[i, : len(tgt) - 1] = torch.tensor(tgt[1:])
            logp, _ = model.module(feats, lengths, inp)
            valid = out_t >= 0
            loss = _smoothed_nll_torch(
                logp[valid], out_t[valid], p
            ) / int(valid.sum())
            opt.zero_grad()
            loss.backward()
            opt.step()
        if val_items:
            val_wer = _greedy_wer(model, [it[0] for it in val_items],
                                  [it[1] for it in val_items])
        else:
            val_wer = 0.0
        if val_wer <= best[0]:
            best = (val_wer, {k: v.detach().clone()
                              for k, v in model.module.state_dict().items()})
    if best[1] is not None:
        model.module.load_state_dict(best[1])
    model.module.eval()
    model.best_val_wer = best[0] if best[1] is not None else None
    return model


# ---------------------------------------------------------------------------
# decoding


@dataclass(frozen=True)
class S2SDecodeConfig:
    beam: float = 8
    fusion_lm: "object" = None  # NeuralLM sharing the model's vocab
    lm_weight: float = 0.0
    max_len: int | None = None


def s2s_decode(model, features, cfg=S2SDecodeConfig()):
    """Beam search over units; per-step score adds the model log prob plus
    lm_weight times the fusion LM log prob; hypotheses end on the end unit;
    final ranking is length-normalized."""
    if not (cfg.beam == math.inf or cfg.beam >= 1):
        raise Seq2SeqError(f"beam must be >= 1, got {cfg.beam}")
    lm = cfg.fusion_lm
    lam = cfg.lm_weight if lm is not None else 0.0
    if lm is not None and lm.vocab.size != model.vocab.size:
        raise Seq2SeqError(
            f"fusion LM vocab size {lm.vocab.size} != model vocab size "
            f"{model.vocab.size}"
        )
    module = model.module
    module.eval()
    vocab = model.vocab
    with torch.no_grad():
        x = torch.from_numpy(
            np.ascontiguousarray(features, dtype=np.float32)
        ).unsqueeze(0)
        enc, enc_lengths = module.encode(x)
        enc_proj = module.att_enc(enc)
        max_len = cfg.max_len
        if max_len is None:
            max_len = EOS_CAP_FACTOR * int(enc_lengths[0]) + 10

        # live entries: (score, units, dec state, lm state, lm row, am, lms, last)
        state0 = module.init_state(1, x.dtype, x.device)
        if lm is not None:
            lm_state0, lm_row0 = lm.start_state()
        else:
            lm_state0, lm_row0 = None, None
        live = [(0.0, (), state0, lm_state0, lm_row0, 0.0, 0.0, vocab.bos_id)]
        done = []
        for _ in range(max_len):
            if not live:
                break
            expanded = []
            for score, units, state, lm_state, lm_row, am, lms, last in live:
                logp, new_state, _ = module.step(
                    enc, enc_proj, enc_lengths, state,
                    torch.tensor([last], dtype=torch.long),
                )
                row = logp[0].double().numpy()
                for k in range(len(row)):
                    if k == vocab.bos_id:
                        continue
                    s_am = am + float(row[k])
                    s_lm = lms + (float(lm_row[k]) if lm_row is not None else 0.0)
                    s = s_am + lam * s_lm
                    if k == vocab.eos_id:
                        n = len(units) + 1
                        done.append(
                            Hypothesis(am_score=s_am, lm_score=s_lm,
                                       total_score=s / n, units=list(units))
                        )
                    else:
                        expanded.append(
                            (s, units + (k,), new_state, lm_state,
                             s_am, s_lm, k)
                        )
            if cfg.beam != math.inf and len(expanded) > cfg.beam:
                expanded.sort(key=lambda e: (-e[0], e[1]))
                expanded = expanded[: int(cfg.beam)]
            live = []
            for s, units, dec_state, parent_lm_state, s_am, s_lm, k in expanded:
                if lm is not None:
                    child_state, child_row = lm.advance(parent_lm_state, k)
                else:
                    child_state, child_row = None, None
                live.append((s, units, dec_state, child_state, child_row,
                             s_am, s_lm, k))
        for score, units, _, _, _, am, lms, _ in live:
            # length-capped hypotheses compete without an end-unit term
            n = max(len(units), 1)
            done.append(Hypothesis(am_score=am, lm_score=lms,
                                   total_score=score / n, units=list(units)))
    done.sort(key=lambda h: (-h.total_score, tuple(h.units)))
    return done[0]


def s2s_attention(model, features, unit_ids):
    """Teacher-forced attention rows for diagnostics; (L, T') array."""
    module = model.module
    module.eval()
    with torch.no_grad():
        x = torch.from_numpy(
            np.ascontiguousarray(features, dtype=np.float32)
        ).unsqueeze(0)
        inp = torch.tensor([[model.vocab.bos_id] + list(unit_ids)],
                           dtype=torch.long)
        _, att = module(x, None, inp)
    return att[0].double().numpy()


# ---------------------------------------------------------------------------
# checkpointing


def save_seq2seq(model, path):
    from . import subword

    config = {
        "kind": "seq2seq",
        "vocab": subword.vocab_to_dict(model.vocab),
        "config": model.config.to_dict(),
        "feat_dim": model.module.conv1.in_channels,
    }
    torchutil.save_module(path, config, model.module)


def load_seq2seq(path):
    from . import subword

    config, tensors = containers.read_checkpoint(path)
    vocab = subword.vocab_from_dict(config["vocab"])
    cfg = Seq2SeqConfig.from_dict(config["config"])
    model = Seq2SeqModel(vocab=vocab, config=cfg)
    model.module = S2SModule(config["feat_dim"], cfg.dim, cfg.enc_layers,
                             cfg.dec_layers, vocab.size)
    torchutil.load_module_state(model.module, tensors)
    model.module.eval()
    return model
