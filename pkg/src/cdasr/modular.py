"""Modular recognizer: frame-posterior acoustic model with an external,
swappable lexicon and word trigram LM.

The acoustic model emits per-frame posteriors over graphemes plus a
word-separator symbol and a blank, trained with an alignment-free sequence
loss (negated CTC forward score). Decoding is a time-synchronous prefix
beam search constrained to a trie over the lexicon's grapheme spellings;
the trigram LM and word-insertion penalty apply at each word boundary.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import containers, corpus, ngram, torchutil
from .kernels import NEG_INF, ctc_forward, ctc_occupancy, extend_with_blanks
from .hypothesis import Hypothesis

log = logging.getLogger(__name__)

BLANK = "<blank>"


class ModularError(ValueError):
    pass


@dataclass(frozen=True)
class ModularAMConfig:
    hidden: int = 48
    conv_channels: int = 48
    subsample: int = 4
    epochs: int = 8
    batch_size: int = 16
    lr: float = 3e-3
    seed: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ModularDecodeConfig:
    beam: float = 8
    lm_weight: float = 1.0
    word_insertion_penalty: float = 0.0


class AMModule(nn.Module):
    """Strided convolutions (time reduction x2 or x4) into a biLSTM."""

    def __init__(self, feat_dim, channels, hidden, n_out, subsample=4):
        super().__init__()
        if subsample not in (2, 4):
            raise ModularError(f"subsample must be 2 or 4, got {subsample}")
        self.conv1 = nn.Conv1d(feat_dim, channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, 3,
                               stride=subsample // 2, padding=1)
        self.lstm = nn.LSTM(channels, hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden, n_out)

    def forward(self, x):
        # x: (B, T, F) -> log posteriors (B, ceil(T/subsample), n_out)
        h = torch.relu(self.conv1(x.transpose(1, 2)))
        h = torch.relu(self.conv2(h)).transpose(1, 2)
        h, _ = self.lstm(h)
        return torch.log_softmax(self.proj(h), dim=-1)


@dataclass
class ModularAM:
    alphabet: list  # emission symbols (graphemes + separator); blank appended
    config: ModularAMConfig
    module: AMModule = field(repr=False, default=None)

    def __post_init__(self):
        self.sym_to_id = {s: i for i, s in enumerate(self.alphabet)}

    @property
    def blank_id(self):
        return len(self.alphabet)

    @property
    def n_out(self):
        return len(self.alphabet) + 1

    def labels_for(self, transcript):
        return [self.sym_to_id[s] for s in corpus.grapheme_sequence(transcript)]

    def log_posteriors(self, features):
        """(T, F) features -> (ceil(T/subsample), n_out) log posterior rows."""
        self.module.eval()
        x = torch.from_numpy(np.ascontiguousarray(features, dtype=np.float32))
        with torch.no_grad():
            out = self.module(x.unsqueeze(0))[0]
        return out.double().numpy()

    def posteriors(self, features):
        return np.exp(self.log_posteriors(features))


def min_frames_needed(labels):
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


# ---------------------------------------------------------------------------
# CTC forward score


def ctc_forward_logprob(posteriors, labels, blank_id=None):
    """Log total probability over all blank-augmented monotone paths.

    posteriors: (T', V) probability rows (each summing to 1). Returns the
    -inf sentinel when the label sequence is unreachable in T' frames.
    """
    post = np.asarray(posteriors, dtype=np.float64)
    if blank_id is None:
        blank_id = post.shape[1] - 1
    with np.errstate(divide="ignore"):
        logp = np.log(post)
    ext = extend_with_blanks(list(labels), blank_id)
    return float(ctc_forward(logp, ext))


class _CTCLogZ(torch.autograd.Function):
    """CTC forward score with analytic occupancy gradient (kernel-backed)."""

    @staticmethod
    def forward(ctx, log_probs, ext):
        lp = log_probs.detach().cpu().double().numpy()
        logz, grad = ctc_occupancy(lp, ext)
        ctx.grad = torch.from_numpy(grad).to(log_probs.dtype)
        return log_probs.new_tensor(logz)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output * ctx.grad, None


def ctc_loss_torch(log_probs, labels, blank_id):
    """-log P(labels | log_probs) as a differentiable torch scalar."""
    ext = extend_with_blanks(list(labels), blank_id)
    return -_CTCLogZ.apply(log_probs, ext)


# ---------------------------------------------------------------------------
# training


def train_modular_am(utterances, alphabet, config=ModularAMConfig()):
    """Train on supervised utterances (each with .features and .transcript)."""
    torchutil.seed_all(config.seed)
    am = ModularAM(alphabet=list(alphabet), config=config)
    am.module = AMModule(
        utterances[0].features.shape[1], config.conv_channels, config.hidden,
        am.n_out, config.subsample,
    )

    items = []
    for utt in utterances:
        if utt.transcript is None:
            raise ModularError(f"{utt.utt_id}: supervised utterance lacks transcript")
        try:
            labels = am.labels_for(utt.transcript)
        except KeyError as e:
            raise ModularError(f"{utt.utt_id}: unspellable transcript symbol {e}")
        t_red = math.ceil(utt.features.shape[0] / config.subsample)
        if min_frames_needed(labels) > t_red:
            log.warning("skipping %s: %d labels need more than %d frames",
                        utt.utt_id, len(labels), t_red)
            continue
        items.append((utt, labels))
    if not items:
        raise ModularError("no trainable utterances (all skipped)")

    items.sort(key=lambda it: (it[0].features.shape[0], it[0].utt_id))
    batches = [
        items[i : i + config.batch_size]
        for i in range(0, len(items), config.batch_size)
    ]
    opt = torch.optim.Adam(am.module.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    am.module.train()
    for _epoch in range(config.epochs):
        order = torch.randperm(len(batches), generator=gen).tolist()
        for b in order:
            batch = batches[b]
            feats, lengths = torchutil.pad_features([it[0].features for it in batch])
            out = am.module(feats)
            loss = feats.new_zeros(())
            n_frames = 0
            for i, (utt, labels) in enumerate(batch):
                t_red = math.ceil(int(lengths[i]) / config.subsample)
                loss = loss + ctc_loss_torch(out[i, :t_red], labels, am.blank_id)
                n_frames += t_red
            loss = loss / n_frames
            opt.zero_grad()
            loss.backward()
            opt.step()
    am.module.eval()
    return am


def mean_ctc_loss(am, utterances):
    """Per-reduced-frame sequence loss; diagnostic for training progress."""
    total = 0.0
    frames = 0
    for utt in utterances:
        labels = am.labels_for(utt.transcript)
        logp = am.log_posteriors(utt.features)
        if min_frames_needed(labels) > logp.shape[0]:
            continue
        lp = ctc_forward(logp, extend_with_blanks(labels, am.blank_id))
        total += -lp
        frames += logp.shape[0]
    return total / max(frames, 1)


# ---------------------------------------------------------------------------
# decoding


def greedy_decode(am, features):
    """Best-path decode: argmax per frame (ties toward blank), collapse
    repeats, drop blanks, split words on the separator symbol."""
    logp = am.log_posteriors(features)
    ids = []
    for row in logp:
        k = int(np.argmax(row))
        if row[k] == row[am.blank_id]:
            k = am.blank_id
        ids.append(k)
    out = []
    prev = None
    for k in ids:
        if k != prev and k != am.blank_id:
            out.append(am.alphabet[k])
        prev = k
    words = [w for w in "".join(out).split(corpus.SEPARATOR) if w]
    return words


def _build_prefix_tables(lexicon, sym_to_id):
    prefixes = set()
    terminals = {}
    for word, graphemes in lexicon.entries.items():
        for g in graphemes:
            if g not in sym_to_id:
                raise ModularError(f"lexicon word {word!r} not spellable by the AM")
        for i in range(1, len(graphemes) + 1):
            prefixes.add(graphemes[:i])
        terminals[tuple(graphemes)] = word
    return prefixes, terminals


def decode_modular(log_posteriors, lexicon, lm, cfg=ModularDecodeConfig(),
                   alphabet=None, sym_to_id=None, sep_id=None, blank_id=None):
    """Prefix beam search over the lexicon trie with LM at word boundaries.

    log_posteriors: (T', V) log posterior rows from a ModularAM (blank last
    unless blank_id given). States are keyed by (committed words, partial
    grapheme prefix, last emitted symbol); words commit when the separator
    symbol is emitted after a complete word, or at the final frame.
    """
    if len(lexicon.entries) == 0:
        raise ModularError("empty lexicon")
    if not (cfg.beam == math.inf or cfg.beam >= 1):
        raise ModularError(f"beam must be >= 1, got {cfg.beam}")
    logp = np.asarray(log_posteriors, dtype=np.float64)
    t_max, v = logp.shape
    if blank_id is None:
        blank_id = v - 1
    if sym_to_id is None:
        if alphabet is None:
            raise ModularError("need alphabet or sym_to_id")
        sym_to_id = {s: i for i, s in enumerate(alphabet)}
    if sep_id is None:
        sep_id = sym_to_id[corpus.SEPARATOR]
    lam = cfg.lm_weight
    wip = cfg.word_insertion_penalty

    prefixes, terminals = _build_prefix_tables(lexicon, sym_to_id)
    id_of = {p: tuple(sym_to_id[g] for g in p) for p in prefixes}
    children = {}  # partial prefix -> list of (next grapheme id, new prefix)
    children[()] = []
    for p in prefixes:
        parent = p[:-1]
        children.setdefault(parent, [])
        children.setdefault(p, [])
        children[parent].append((sym_to_id[p[-1]], p))
    for lst in children.values():
        lst.sort()

    def lm_step(words, new_word):
        if lm is None:
            return 0.0
        return lm.logprob(((ngram.BOS,) + words)[-2:], new_word)

    # state: (words tuple, partial prefix tuple-of-graphemes, last symbol id)
    # value: [log p_blank, log p_nonblank, lm logprob accumulated]
    init = ((), (), -1)
    beams = {init: [0.0, NEG_INF, 0.0]}

    for t in range(t_max):
        row = logp[t]
        new_beams = {}

        def add(key, which, value, lm_score):
            slot = new_beams.get(key)
            if slot is None:
                slot = [NEG_INF, NEG_INF, lm_score]
                new_beams[key] = slot
            slot[which] = np.logaddexp(slot[which], value)

        for (words, partial, last), (pb, pnb, lms) in beams.items():
            both = np.logaddexp(pb, pnb)
            # blank keeps the state
            add((words, partial, last), 0, both + row[blank_id], lms)
            # repeated emission of the last symbol keeps the state
            if last >= 0 and pnb != NEG_INF:
                add((words, partial, last), 1, pnb + row[last], lms)
            # extend the partial word with a grapheme
            for g, new_partial in children[partial]:
                mass = pb if g == last else both
                if mass == NEG_INF:
                    continue
                add((words, new_partial, g), 1, mass + row[g], lms)
            # separator commits a complete word
            if partial in terminals and both != NEG_INF:
                w = terminals[partial]
                add(
                    (words + (w,), (), sep_id),
                    1,
                    both + row[sep_id],
                    lms + lm_step(words, w),
                )

        if cfg.beam != math.inf and len(new_beams) > cfg.beam:
            def rank(item):
                (words, partial, last), (pb, pnb, lms) = item
                score = np.logaddexp(pb, pnb) + lam * lms + wip * len(words)
                return (-score, words, partial, last)

            kept = sorted(new_beams.items(), key=rank)[: int(cfg.beam)]
            new_beams = dict(kept)
        beams = new_beams

    # finalization: commit a trailing complete word; drop dangling prefixes
    # and trailing separators (no word sequence produces those label strings)
    candidates = []
    for (words, partial, last), (pb, pnb, lms) in beams.items():
        am_score = float(np.logaddexp(pb, pnb))
        if am_score == NEG_INF:
            continue
        if partial == ():
            if last == sep_id:
                continue
            candidates.append((words, am_score, lms))
        elif partial in terminals:
            w = terminals[partial]
            candidates.append((words + (w,), am_score, lms + lm_step(words, w)))
    if not candidates:
        return Hypothesis(am_score=NEG_INF, lm_score=0.0, total_score=NEG_INF)

    def total(c):
        words, am_score, lms = c
        return am_score + lam * lms + wip * len(words)

    merged = {}
    for words, am_score, lms in candidates:
        if words in merged:
            prev_am, prev_lms = merged[words]
            merged[words] = (float(np.logaddexp(prev_am, am_score)), prev_lms)
        else:
            merged[words] = (am_score, lms)
    ranked = sorted(
        ((w, a, l) for w, (a, l) in merged.items()),
        key=lambda c: (-total(c), c[0]),
    )
    words, am_score, lms = ranked[0]
    return Hypothesis(
        am_score=am_score,
        lm_score=lms,
        total_score=total((words, am_score, lms)),
        words=list(words),
    )


# ---------------------------------------------------------------------------
# checkpointing


def save_modular_am(am, path):
    config = {
        "kind": "modular",
        "alphabet": am.alphabet,
        "config": am.config.to_dict(),
        "feat_dim": am.module.conv1.in_channels,
    }
    torchutil.save_module(path, config, am.module)


def load_modular_am(path):
    config, tensors = containers.read_checkpoint(path)
    cfg = ModularAMConfig(**config["config"])
    am = ModularAM(alphabet=config["alphabet"], config=cfg)
    am.module = AMModule(config["feat_dim"], cfg.conv_channels, cfg.hidden,
                         am.n_out, cfg.subsample)
    torchutil.load_module_state(am.module, tensors)
    am.module.eval()
    return am
