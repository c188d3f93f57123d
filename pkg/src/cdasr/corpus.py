"""Synthetic two-domain speech-like corpus generator.

Features are synthesized directly from grapheme emissions (no waveform
stage). Domain mismatch has two independent dials: a per-domain affine
channel transform on the features (acoustic mismatch) and per-domain word
distributions with a BN-only vocabulary slice (lexical mismatch).
"""

import dataclasses
import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import containers

CTS = "CTS"
BN = "BN"
SEPARATOR = "_"
EVAL_SUBSETS = ("news", "topical")

MAX_UTTERANCE_FRAMES = 400


class CorpusError(ValueError):
    pass


class MismatchUnachievableError(CorpusError):
    """Requested domain divergence cannot be met by the configuration."""


@dataclass(frozen=True)
class GeneratorConfig:
    n_graphemes: int = 10
    n_words: int = 120
    feat_dim: int = 8
    word_len: tuple = (2, 5)
    duration: tuple = (2, 4)
    sep_duration: tuple = (2, 3)
    sentence_len: tuple = (4, 9)
    bn_only_fraction: float = 0.25
    bn_only_mass: float = 0.32
    divergence_floor: float = 0.3
    bigram_tilt: float = 0.12
    subset_tilt: float = 0.3
    emission_spread: float = 1.7
    cts_noise: float = 0.25
    bn_noise: float = 0.6
    bn_mix: float = 0.9
    bn_bias: float = 1.0

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ChannelTransform:
    gain: np.ndarray  # (F, F)
    bias: np.ndarray  # (F,)
    noise_scale: float


@dataclass(frozen=True)
class LanguageSpec:
    grapheme_inventory: list  # letters; SEPARATOR is emitted between words
    word_list: list
    domain_unigrams: dict  # domain -> (V,) marginal word distribution
    domain_word_dists: dict  # domain -> (V+1, V) bigram rows; row 0 = start
    subset_dists: dict  # eval subset -> (V+1, V) bigram rows (BN topic mixes)
    emission_means: np.ndarray  # (G+1, F); last row is the separator
    durations: list  # per emission symbol (lo, hi) frame ranges
    channel_transforms: dict  # domain -> ChannelTransform
    rng_seed: int

    @property
    def feat_dim(self):
        return self.emission_means.shape[1]

    @property
    def emission_symbols(self):
        return list(self.grapheme_inventory) + [SEPARATOR]

    def word_index(self):
        return {w: i for i, w in enumerate(self.word_list)}

    def bn_only_words(self):
        cts = self.domain_unigrams[CTS]
        return [w for i, w in enumerate(self.word_list) if cts[i] == 0.0]


@dataclass
class Utterance:
    utt_id: str
    domain: str
    num_frames: int
    features: np.ndarray
    transcript: list | None = None
    eval_subset: str | None = None


@dataclass
class CorpusManifest:
    splits: dict  # split name -> list of Utterance
    text_sets: dict  # "set1"/"set2" -> list of sentences (space-joined words)
    language_spec_ref: str
    diagnostics: dict = field(default_factory=dict)  # utt_id -> held-back truth


@dataclass(frozen=True)
class SplitPlan:
    """Per-split frame budgets. Defaults scale a CTS-heavy supervised set
    against a much larger unlabeled broadcast set (ratio 68.3 : 57.6 :
    149.0 : 5.3)."""

    sup_cts: int = 68300
    unsup_cts: int = 57600
    unsup_bn: int = 149000
    eval_bn: int = 5300
    set1_words: int = 60000
    set2_words: int = 400000

    @classmethod
    def scaled(cls, scale):
        return cls(
            sup_cts=int(68300 * scale),
            unsup_cts=int(57600 * scale),
            unsup_bn=int(149000 * scale),
            eval_bn=int(5300 * scale),
            set1_words=int(60000 * scale),
            set2_words=int(400000 * scale),
        )

    def budgets(self):
        return {
            "sup_cts": self.sup_cts,
            "unsup_cts": self.unsup_cts,
            "unsup_bn": self.unsup_bn,
            "eval_bn": self.eval_bn,
        }

    def to_dict(self):
        return dataclasses.asdict(self)


def tv_distance(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def _zipf_weights(n, rng, exponent=1.0):
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-exponent)
    rng.shuffle(w)
    return w / w.sum()


def _tilted_bigram(unigram, alpha, rng):
    """Bigram rows = (1-alpha)*unigram + alpha*(per-history reweighting).

    Row 0 is the sentence-start history and equals the unigram exactly, so
    empirical unigram statistics stay close to the stored marginal.
    """
    v = unigram.shape[0]
    rows = np.empty((v + 1, v))
    rows[0] = unigram
    for h in range(v):
        tilt = unigram * np.exp(rng.normal(0.0, 1.0, size=v))
        tilt = tilt / tilt.sum()
        row = (1.0 - alpha) * unigram + alpha * tilt
        rows[h + 1] = row / row.sum()
    return rows


def build_language_spec(config: GeneratorConfig, seed: int) -> LanguageSpec:
    if config.n_graphemes > len(string.ascii_lowercase):
        raise CorpusError("grapheme inventory limited to 26 letters")
    rng = np.random.default_rng([seed, 0x1A])
    graphemes = list(string.ascii_lowercase[: config.n_graphemes])

    words = []
    seen = set()
    lo, hi = config.word_len
    attempts = 0
    while len(words) < config.n_words:
        attempts += 1
        if attempts > 1000 * config.n_words:
            raise CorpusError("cannot generate enough unique words; shrink n_words or widen word_len")
        length = int(rng.integers(lo, hi + 1))
        w = "".join(rng.choice(graphemes, size=length))
        if w not in seen:
            seen.add(w)
            words.append(w)

    n_bn_only = int(round(config.bn_only_fraction * config.n_words))
    bn_only_idx = set(range(config.n_words - n_bn_only, config.n_words))
    shared_idx = [i for i in range(config.n_words) if i not in bn_only_idx]

    cts_uni = np.zeros(config.n_words)
    cts_uni[shared_idx] = _zipf_weights(len(shared_idx), rng)

    bn_uni = np.zeros(config.n_words)
    if n_bn_only:
        bn_uni[sorted(bn_only_idx)] = config.bn_only_mass * _zipf_weights(n_bn_only, rng)
    shared_mass = 1.0 - bn_uni.sum()
    bn_shared = cts_uni[shared_idx] * np.exp(rng.normal(0.0, 0.7, size=len(shared_idx)))
    bn_uni[shared_idx] = shared_mass * bn_shared / bn_shared.sum()
    bn_uni = bn_uni / bn_uni.sum()

    if n_bn_only == 0:
        raise MismatchUnachievableError(
            "mismatch unachievable: BN-only word fraction is zero"
        )
    tv = tv_distance(cts_uni, bn_uni)
    if tv < config.divergence_floor:
        raise MismatchUnachievableError(
            f"mismatch unachievable: TV distance {tv:.3f} below floor "
            f"{config.divergence_floor:.3f}"
        )

    bigrams = {
        CTS: _tilted_bigram(cts_uni, config.bigram_tilt, rng),
        BN: _tilted_bigram(bn_uni, config.bigram_tilt, rng),
    }

    subset_dists = {}
    for name in EVAL_SUBSETS:
        tilt = bn_uni * np.exp(rng.normal(0.0, config.subset_tilt, size=config.n_words))
        sub_uni = (1.0 - config.subset_tilt) * bn_uni + config.subset_tilt * tilt / tilt.sum()
        sub_uni = sub_uni / sub_uni.sum()
        subset_dists[name] = _tilted_bigram(sub_uni, config.bigram_tilt, rng)

    n_sym = config.n_graphemes + 1  # + separator
    means = rng.normal(0.0, 1.0, size=(n_sym, config.feat_dim)) * config.emission_spread
    durations = [tuple(config.duration)] * config.n_graphemes + [tuple(config.sep_duration)]

    f = config.feat_dim
    mix = rng.normal(0.0, 1.0, size=(f, f)) / np.sqrt(f)
    channels = {
        CTS: ChannelTransform(np.eye(f), np.zeros(f), config.cts_noise),
        BN: ChannelTransform(
            np.eye(f) + config.bn_mix * mix,
            config.bn_bias * rng.normal(0.0, 1.0, size=f),
            config.bn_noise,
        ),
    }

    spec = LanguageSpec(
        grapheme_inventory=graphemes,
        word_list=words,
        domain_unigrams={CTS: cts_uni, BN: bn_uni},
        domain_word_dists=bigrams,
        subset_dists=subset_dists,
        emission_means=means,
        durations=durations,
        channel_transforms=channels,
        rng_seed=seed,
    )
    _check_spec(spec)
    return spec


def _check_spec(spec):
    inv = set(spec.grapheme_inventory)
    for w in spec.word_list:
        if not set(w) <= inv:
            raise CorpusError(f"word {w!r} uses out-of-inventory graphemes")
    for dists in (spec.domain_word_dists, spec.subset_dists):
        for name, rows in dists.items():
            sums = rows.sum(axis=1)
            if np.abs(sums - 1.0).max() > 1e-9:
                raise CorpusError(f"bigram rows for {name} are not normalized")


def sample_sentence(rows, word_list, length, rng, cum_rows=None):
    if cum_rows is None:
        cum_rows = np.cumsum(rows, axis=1)
    words = []
    hist = 0  # start state
    draws = rng.random(length)
    for r in draws:
        idx = int(np.searchsorted(cum_rows[hist], r))
        words.append(word_list[idx])
        hist = idx + 1
    return words


def grapheme_sequence(transcript):
    """Graphemes with a separator symbol between consecutive words."""
    out = []
    for i, word in enumerate(transcript):
        if i:
            out.append(SEPARATOR)
        out.extend(word)
    return out


def render_features(transcript, domain, spec: LanguageSpec, seed: int) -> np.ndarray:
    feats, _ = render_with_alignment(transcript, domain, spec, seed)
    return feats


def render_with_alignment(transcript, domain, spec, seed):
    """Like render_features but also returns the per-frame emission symbol
    index (diagnostics only; downstream training never sees alignments)."""
    if not transcript:
        raise CorpusError("cannot render an empty transcript")
    sym_index = {s: i for i, s in enumerate(spec.emission_symbols)}
    word_set = set(spec.word_list)
    for w in transcript:
        if w not in word_set:
            raise CorpusError(f"out-of-vocabulary word {w!r}")
    rng = np.random.default_rng([seed, 0x5E])
    blocks = []
    labels = []
    for sym in grapheme_sequence(transcript):
        idx = sym_index[sym]
        lo, hi = spec.durations[idx]
        dur = int(rng.integers(lo, hi + 1))
        blocks.append(np.tile(spec.emission_means[idx], (dur, 1)))
        labels.extend([idx] * dur)
    emitted = np.concatenate(blocks, axis=0)
    ch = spec.channel_transforms[domain]
    out = emitted @ ch.gain.T + ch.bias
    if ch.noise_scale:
        out = out + ch.noise_scale * rng.normal(0.0, 1.0, size=out.shape)
    return out.astype(np.float32), np.asarray(labels, dtype=np.int64)


def _estimate_frames_per_word(spec, config_like=None):
    mean_word_len = float(np.mean([len(w) for w in spec.word_list]))
    g_lo, g_hi = spec.durations[0]
    s_lo, s_hi = spec.durations[-1]
    return mean_word_len * (g_lo + g_hi) / 2 + (s_lo + s_hi) / 2


def synth_corpus(spec: LanguageSpec, plan: SplitPlan, seed: int) -> CorpusManifest:
    if plan.sup_cts <= 0:
        raise CorpusError("supervised split budget must be positive")
    rng = np.random.default_rng([seed, spec.rng_seed, 0xC0])
    fpw = _estimate_frames_per_word(spec)
    splits = {}
    diagnostics = {}
    domain_of = {"sup_cts": CTS, "unsup_cts": CTS, "unsup_bn": BN, "eval_bn": BN}
    transcribed = {"sup_cts", "eval_bn"}
    cum_cache = {
        CTS: np.cumsum(spec.domain_word_dists[CTS], axis=1),
        BN: np.cumsum(spec.domain_word_dists[BN], axis=1),
    }
    for name in EVAL_SUBSETS:
        cum_cache[name] = np.cumsum(spec.subset_dists[name], axis=1)

    for split, budget in plan.budgets().items():
        domain = domain_of[split]
        utts = []
        total = 0
        i = 0
        while total < 0.98 * budget:
            subset = None
            if split == "eval_bn":
                subset = EVAL_SUBSETS[i % len(EVAL_SUBSETS)]
                rows, cum = spec.subset_dists[subset], cum_cache[subset]
            else:
                rows, cum = spec.domain_word_dists[domain], cum_cache[domain]
            lo, hi = 4, 9
            remaining = 1.02 * budget - total
            hi = max(1, min(hi, int(remaining / fpw)))
            lo = min(lo, hi)
            for _attempt in range(20):
                length = int(rng.integers(lo, hi + 1))
                sentence = sample_sentence(rows, spec.word_list, length, rng, cum)
                feats, _ = render_with_alignment(
                    sentence, domain, spec, int(rng.integers(0, 2**31))
                )
                if feats.shape[0] <= MAX_UTTERANCE_FRAMES and total + feats.shape[0] <= 1.02 * budget:
                    break
                hi = lo = 1
            else:
                break
            utt_id = f"{split}_{i:05d}"
            utt = Utterance(
                utt_id=utt_id,
                domain=domain,
                num_frames=feats.shape[0],
                features=feats,
                transcript=sentence if split in transcribed else None,
                eval_subset=subset,
            )
            if split not in transcribed:
                diagnostics[utt_id] = sentence
            utts.append(utt)
            total += feats.shape[0]
            i += 1
        splits[split] = utts

    text_sets = {}
    for name, word_target in (("set1", plan.set1_words), ("set2", plan.set2_words)):
        rows, cum = spec.domain_word_dists[BN], cum_cache[BN]
        sentences = []
        count = 0
        while count < word_target:
            length = int(rng.integers(4, 10))
            sentence = sample_sentence(rows, spec.word_list, length, rng, cum)
            sentences.append(" ".join(sentence))
            count += length
        text_sets[name] = sentences

    return CorpusManifest(
        splits=splits,
        text_sets=text_sets,
        language_spec_ref=f"spec-seed{spec.rng_seed}",
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# serialization


def _spec_to_dict(spec):
    return {
        "grapheme_inventory": spec.grapheme_inventory,
        "word_list": spec.word_list,
        "domain_unigrams": {k: v.tolist() for k, v in spec.domain_unigrams.items()},
        "domain_word_dists": {k: v.tolist() for k, v in spec.domain_word_dists.items()},
        "subset_dists": {k: v.tolist() for k, v in spec.subset_dists.items()},
        "emission_means": spec.emission_means.tolist(),
        "durations": [list(d) for d in spec.durations],
        "channel_transforms": {
            k: {
                "gain": c.gain.tolist(),
                "bias": c.bias.tolist(),
                "noise_scale": c.noise_scale,
            }
            for k, c in spec.channel_transforms.items()
        },
        "rng_seed": spec.rng_seed,
    }


def _spec_from_dict(d):
    return LanguageSpec(
        grapheme_inventory=list(d["grapheme_inventory"]),
        word_list=list(d["word_list"]),
        domain_unigrams={k: np.asarray(v) for k, v in d["domain_unigrams"].items()},
        domain_word_dists={k: np.asarray(v) for k, v in d["domain_word_dists"].items()},
        subset_dists={k: np.asarray(v) for k, v in d["subset_dists"].items()},
        emission_means=np.asarray(d["emission_means"]),
        durations=[tuple(x) for x in d["durations"]],
        channel_transforms={
            k: ChannelTransform(
                np.asarray(c["gain"]), np.asarray(c["bias"]), c["noise_scale"]
            )
            for k, c in d["channel_transforms"].items()
        },
        rng_seed=d["rng_seed"],
    )


def save_corpus(manifest: CorpusManifest, spec: LanguageSpec, out_dir):
    out = containers.ensure_dir(out_dir)
    feat_dir = containers.ensure_dir(out / "features")
    records = []
    for split, utts in manifest.splits.items():
        for utt in utts:
            feature_file = f"features/{utt.utt_id}.caf"
            containers.write_features(feat_dir / f"{utt.utt_id}.caf", utt.features)
            rec = {
                "utt_id": utt.utt_id,
                "domain": utt.domain,
                "split": split,
                "num_frames": utt.num_frames,
                "feature_file": feature_file,
            }
            if utt.eval_subset is not None:
                rec["eval_subset"] = utt.eval_subset
            if utt.transcript is not None:
                rec["transcript"] = " ".join(utt.transcript)
            records.append(rec)
    containers.write_jsonl(out / "manifest.jsonl", records)
    for name, sentences in manifest.text_sets.items():
        (out / f"{name}.txt").write_text("\n".join(sentences) + "\n", encoding="utf-8")
    containers.write_jsonl(
        out / "diagnostics.jsonl",
        [
            {"utt_id": k, "transcript": " ".join(v)}
            for k, v in sorted(manifest.diagnostics.items())
        ],
    )
    (out / "language_spec.json").write_text(
        json.dumps(_spec_to_dict(spec), sort_keys=True), encoding="utf-8"
    )


def load_corpus(in_dir):
    root = Path(in_dir)
    spec = _spec_from_dict(json.loads((root / "language_spec.json").read_text()))
    splits = {}
    for rec in containers.read_jsonl(root / "manifest.jsonl"):
        feats = containers.read_features(root / rec["feature_file"])
        utt = Utterance(
            utt_id=rec["utt_id"],
            domain=rec["domain"],
            num_frames=rec["num_frames"],
            features=feats,
            transcript=rec["transcript"].split() if "transcript" in rec else None,
            eval_subset=rec.get("eval_subset"),
        )
        splits.setdefault(rec["split"], []).append(utt)
    text_sets = {}
    for name in ("set1", "set2"):
        path = root / f"{name}.txt"
        if path.exists():
            text_sets[name] = path.read_text(encoding="utf-8").splitlines()
    diagnostics = {}
    diag_path = root / "diagnostics.jsonl"
    if diag_path.exists():
        for rec in containers.read_jsonl(diag_path):
            diagnostics[rec["utt_id"]] = rec["transcript"].split()
    manifest = CorpusManifest(
        splits=splits,
        text_sets=text_sets,
        language_spec_ref=f"spec-seed{spec.rng_seed}",
        diagnostics=diagnostics,
    )
    return manifest, spec
