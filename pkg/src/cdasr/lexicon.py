"""Graphemic pronunciation lexicon with nested base/semisup/expanded tiers."""

from dataclasses import dataclass
from enum import Enum
from pathlib import Path


class LexiconError(ValueError):
    pass


class Tier(str, Enum):
    BASE = "base"
    SEMISUP = "semisup"
    EXPANDED = "expanded"


@dataclass
class Lexicon:
    entries: dict  # word -> tuple of graphemes (the word's spelling)
    tier: Tier

    def __contains__(self, word):
        return word in self.entries

    def __len__(self):
        return len(self.entries)

    @property
    def words(self):
        return sorted(self.entries)


def build_lexicon(sources, tier):
    """sources: iterable of text sets (each an iterable of sentences).

    The caller passes tier-appropriate sources: base = supervised
    transcripts; semisup = base sources plus pseudotranscripts; expanded =
    semisup sources plus an external word list (one word per "sentence").
    Nesting of the tiers holds by construction because each tier's sources
    are a superset of the previous tier's.
    """
    tier = Tier(tier)
    words = set()
    for source in sources:
        for sentence in source:
            words.update(sentence.split())
    if not words:
        raise LexiconError("no words in any source")
    return Lexicon(entries={w: tuple(w) for w in sorted(words)}, tier=tier)


def save_lexicon(lexicon, path):
    with open(path, "w", encoding="utf-8") as f:
        for word in lexicon.words:
            f.write(f"{word}\t{' '.join(lexicon.entries[word])}\n")


def load_lexicon(path, tier=Tier.BASE):
    entries = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        word, graphemes = line.split("\t")
        entries[word] = tuple(graphemes.split())
    if not entries:
        raise LexiconError(f"{path}: empty lexicon")
    return Lexicon(entries=entries, tier=Tier(tier))
