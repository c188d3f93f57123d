"""Decoded hypothesis shared by both recognizer paradigms."""

from dataclasses import dataclass, field


@dataclass
class Hypothesis:
    am_score: float
    lm_score: float
    total_score: float
    words: list = field(default_factory=list)  # modular decoder output
    units: list = field(default_factory=list)  # seq2seq decoder output
