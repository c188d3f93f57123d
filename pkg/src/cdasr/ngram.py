"""Trigram back-off language model with interpolated absolute discounting.

A single discount D in (0,1) is subtracted from every seen count and the
freed mass is interpolated with the next-lower order, which keeps every
conditional distribution exactly normalized. Serialization uses the
standard ARPA text layout (log10 probabilities plus back-off weights); a
round-tripped model scores identically to the trained one.
"""

import math
from dataclasses import dataclass, field

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"

ORDER = 3


class NGramError(ValueError):
    pass


@dataclass
class NGramLM:
    order: int
    discount: float
    vocab: list  # predictable tokens: words + EOS + UNK (never BOS)
    counts: dict  # n -> {ngram tuple: count}; kept for diagnostics/tests
    probs: dict = field(repr=False, default=None)  # n -> {ngram: log10 p}
    backoffs: dict = field(repr=False, default=None)  # n -> {history: log10 bow}
    oov_class_size: int = 1

    def __post_init__(self):
        self._vocab_set = set(self.vocab)

    def normalize_token(self, word):
        return word if word in self._vocab_set or word == BOS else UNK

    def logprob(self, history, word):
        """Natural-log conditional probability; total via back-off to UNK."""
        in_vocab = word in self._vocab_set
        w = word if in_vocab else UNK
        hist = tuple(self.normalize_token(h) for h in history)[-(self.order - 1):]
        lp10 = self._chain(hist, w)
        lp = lp10 * math.log(10.0)
        if not in_vocab and self.oov_class_size > 1:
            lp -= math.log(self.oov_class_size)
        return lp

    def _chain(self, hist, w):
        for n in range(min(self.order, len(hist) + 1), 0, -1):
            gram = tuple(hist[len(hist) - (n - 1):]) + (w,)
            if gram in self.probs[n]:
                bow = 0.0
                for m in range(n, min(self.order, len(hist) + 1)):
                    h = tuple(hist[len(hist) - m:])
                    bow += self.backoffs[m + 1].get(h, 0.0)
                return self.probs[n][gram] + bow
        raise NGramError(f"no unigram probability for {w!r}")  # pragma: no cover


def _collect_counts(sentence_sets, weights):
    counts = {n: {} for n in range(1, ORDER + 1)}
    total_sentences = 0
    for sentences, weight in zip(sentence_sets, weights):
        for sentence in sentences:
            words = sentence.split() if isinstance(sentence, str) else list(sentence)
            if not words:
                continue
            total_sentences += 1
            stream = [BOS] * (ORDER - 1) + words + [EOS]
            for n in range(1, ORDER + 1):
                tab = counts[n]
                for i in range(ORDER - n, len(stream) - n + 1):
                    gram = tuple(stream[i : i + n])
                    if n == 1 and gram[0] == BOS:
                        continue
                    tab[gram] = tab.get(gram, 0) + weight
    return counts, total_sentences


def train_ngram(sentence_sets, discount=0.7, weights=None, oov_class_size=1):
    """sentence_sets: list of sentence lists; weights: per-set integer
    duplication factors (default 1 each)."""
    if not 0.0 < discount < 1.0:
        raise NGramError(f"discount must be in (0,1), got {discount}")
    if weights is None:
        weights = [1] * len(sentence_sets)
    if len(weights) != len(sentence_sets):
        raise NGramError("one weight per sentence set required")
    counts, total_sentences = _collect_counts(sentence_sets, weights)
    if total_sentences == 0:
        raise NGramError("no sentences to train on")

    words = sorted({g[0] for g in counts[1]})
    vocab = words + ([] if EOS in words else [EOS]) + [UNK]
    lm = NGramLM(
        order=ORDER,
        discount=discount,
        vocab=vocab,
        counts=counts,
        oov_class_size=oov_class_size,
    )
    _build_tables(lm)
    return lm


def _build_tables(lm):
    d = lm.discount
    v = len(lm.vocab)
    c1 = lm.counts[1]
    n_tokens = sum(c1.values())
    t1 = len(c1)

    probs = {n: {} for n in range(1, ORDER + 1)}
    backoffs = {n: {} for n in range(2, ORDER + 1)}

    # unigrams interpolate with the uniform distribution over the vocab
    p1 = {}
    for w in lm.vocab:
        c = c1.get((w,), 0)
        p1[w] = (max(c - d, 0.0) + d * t1 / v) / n_tokens
        probs[1][(w,)] = math.log10(p1[w])

    for n in (2, 3):
        cn = lm.counts[n]
        hist_totals = {}
        hist_types = {}
        for gram, c in cn.items():
            h = gram[:-1]
            hist_totals[h] = hist_totals.get(h, 0) + c
            hist_types[h] = hist_types.get(h, 0) + 1
        for h, total in hist_totals.items():
            backoffs[n][h] = math.log10(d * hist_types[h] / total)
        for gram, c in cn.items():
            h = gram[:-1]
            lower = _lower_prob(lm, probs, backoffs, n - 1, gram[1:])
            lam = d * hist_types[h] / hist_totals[h]
            p = max(c - d, 0.0) / hist_totals[h] + lam * lower
            probs[n][gram] = math.log10(p)

    lm.probs = probs
    lm.backoffs = backoffs


def _lower_prob(lm, probs, backoffs, n, gram):
    """Linear-domain probability of gram under the order-n model built so far."""
    while n > 1:
        if gram in probs[n]:
            return 10.0 ** probs[n][gram]
        bow = backoffs[n].get(gram[:-1], 0.0)
        return 10.0**bow * _lower_prob(lm, probs, backoffs, n - 1, gram[1:])
    w = gram[0] if gram[0] in lm._vocab_set else UNK
    return 10.0 ** probs[1][(w,)]


def ngram_logprob(lm, history, word):
    return lm.logprob(history, word)


def sentence_logprob(lm, words, include_eos=True):
    stream = [BOS] * (lm.order - 1) + list(words)
    total = 0.0
    for i in range(lm.order - 1, len(stream)):
        total += lm.logprob(stream[i - lm.order + 1 : i], stream[i])
    if include_eos:
        total += lm.logprob(stream[-(lm.order - 1):], EOS)
    return total


# ---------------------------------------------------------------------------
# ARPA serialization


def save_arpa(lm, path):
    lines = ["\\data\\"]
    grams = {n: sorted(lm.probs[n]) for n in range(1, ORDER + 1)}
    # BOS needs a unigram entry (with backoff weight) even though it is
    # never predicted; the conventional placeholder log10 prob is -99.
    for n in range(1, ORDER + 1):
        count = len(grams[n]) + (1 if n == 1 else 0)
        lines.append(f"ngram {n}={count}")
    for n in range(1, ORDER + 1):
        lines.append("")
        lines.append(f"\\{n}-grams:")
        if n == 1:
            bow = lm.backoffs[2].get((BOS,), 0.0)
            lines.append(f"-99\t{BOS}\t{bow:.10g}")
        for gram in grams[n]:
            p = lm.probs[n][gram]
            entry = f"{p:.10g}\t{' '.join(gram)}"
            if n < ORDER:
                bow = lm.backoffs[n + 1].get(gram, None)
                if bow is not None and gram != (BOS,):
                    entry += f"\t{bow:.10g}"
            lines.append(entry)
    lines += ["", "\\end\\", ""]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))


def load_arpa(path, discount=0.7, oov_class_size=1):
    probs = {n: {} for n in range(1, ORDER + 1)}
    backoffs = {n: {} for n in range(2, ORDER + 1)}
    section = 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line == "\\data\\" or line.startswith("ngram "):
                continue
            if line == "\\end\\":
                break
            if line.startswith("\\") and line.endswith("-grams:"):
                section = int(line[1])
                continue
            parts = line.split("\t")
            p = float(parts[0])
            gram = tuple(parts[1].split())
            if not (section == 1 and gram == (BOS,)):
                probs[section][gram] = p
            if len(parts) > 2 and section < ORDER:
                backoffs[section + 1][gram] = float(parts[2])
    vocab = sorted(w for (w,) in probs[1])
    lm = NGramLM(
        order=ORDER,
        discount=discount,
        vocab=vocab,
        counts={n: {} for n in range(1, ORDER + 1)},
        probs=probs,
        backoffs=backoffs,
        oov_class_size=oov_class_size,
    )
    return lm
