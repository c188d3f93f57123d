"""Byte-pair-encoding subword inventory over grapheme strings.

Words are split into graphemes; a word-boundary marker is a standalone unit
between consecutive words and never participates in merges, so merges stay
within words and decode can restore spacing exactly.
"""

from dataclasses import dataclass, field

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
BOUNDARY = "▁"  # "▁"

SPECIALS = (BOS, EOS, UNK, BOUNDARY)


class SubwordError(ValueError):
    pass


@dataclass
class SubwordVocab:
    units: list  # ordered; specials first, then graphemes, then merged units
    merges: list  # ordered list of (left, right) unit pairs
    target_size: int
    unit_to_id: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.unit_to_id:
            self.unit_to_id = {u: i for i, u in enumerate(self.units)}

    @property
    def size(self):
        return len(self.units)

    @property
    def bos_id(self):
        return self.unit_to_id[BOS]

    @property
    def eos_id(self):
        return self.unit_to_id[EOS]

    @property
    def unk_id(self):
        return self.unit_to_id[UNK]


def _word_frequencies(sentences):
    freqs = {}
    for sentence in sentences:
        for word in sentence.split():
            freqs[word] = freqs.get(word, 0) + 1
    return freqs


def train_subwords(sentences, target_size, inventory=None, min_pair_count=2):
    """Learn greedy pair merges until target_size units exist, no candidate
    pair occurs at least min_pair_count times, or nothing is left to merge."""
    freqs = _word_frequencies(sentences)
    if not freqs:
        raise SubwordError("empty training corpus")
    if inventory is None:
        inventory = sorted({ch for w in freqs for ch in w})
    units = list(SPECIALS) + list(inventory)
    if target_size < len(units):
        raise SubwordError(
            f"target_size {target_size} below minimum {len(units)} "
            "(graphemes plus special units)"
        )
    known = set(inventory)
    symbolized = {w: tuple(ch if ch in known else UNK for ch in w) for w in freqs}
    merges = []
    while len(units) < target_size:
        pair_counts = {}
        for word, syms in symbolized.items():
            f = freqs[word]
            for a, b in zip(syms, syms[1:]):
                if a != UNK and b != UNK:
                    pair_counts[(a, b)] = pair_counts.get((a, b), 0) + f
        if not pair_counts:
            break
        best = min(pair_counts, key=lambda p: (-pair_counts[p], p))
        if pair_counts[best] < min_pair_count:
            break
        merges.append(best)
        merged = best[0] + best[1]
        units.append(merged)
        symbolized = {
            w: _apply_merge(syms, best, merged) for w, syms in symbolized.items()
        }
    return SubwordVocab(units=units, merges=merges, target_size=target_size)


def _apply_merge(syms, pair, merged):
    out = []
    i = 0
    n = len(syms)
    while i < n:
        if i + 1 < n and syms[i] == pair[0] and syms[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return tuple(out)


def encode_word(vocab, word, _cache=None):
    if _cache is not None and word in _cache:
        return _cache[word]
    known = {u for u in vocab.units}
    syms = tuple(ch if ch in known else UNK for ch in word)
    for pair in vocab.merges:
        if len(syms) < 2:
            break
        syms = _apply_merge(syms, pair, pair[0] + pair[1])
    result = list(syms)
    if _cache is not None:
        _cache[word] = result
    return result


def encode(vocab, sentence):
    """Apply merges in learned order; boundary units separate words."""
    words = sentence.split()
    out = []
    cache = {}
    for i, word in enumerate(words):
        if i:
            out.append(BOUNDARY)
        out.extend(encode_word(vocab, word, cache))
    return out


def decode(vocab, units):
    """Inverse of encode on clean text: concatenate and restore spaces."""
    text = "".join(units)
    return " ".join(text.split(BOUNDARY))


def encode_ids(vocab, sentence):
    return [vocab.unit_to_id[u] for u in encode(vocab, sentence)]


def decode_ids(vocab, ids):
    return decode(vocab, [vocab.units[i] for i in ids])


def vocab_to_dict(vocab):
    return {
        "units": vocab.units,
        "merges": [list(m) for m in vocab.merges],
        "target_size": vocab.target_size,
    }


def vocab_from_dict(d):
    return SubwordVocab(
        units=list(d["units"]),
        merges=[tuple(m) for m in d["merges"]],
        target_size=d["target_size"],
    )
