"""Self-training orchestration: pseudotranscribe unlabeled audio with a seed
model, merge with supervised data, retrain the target paradigm from scratch,
and build the semisupervised lexicon/LM assets.

Stages execute sequentially with checkpointed outputs, so an interrupted run
resumes from the last completed stage. Retraining never reads seed-model
parameters: once the pseudotranscript manifest exists the seed itself is no
longer needed.
"""

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import (
    containers,
    corpus,
    evalkit,
    lexicon as lexicon_mod,
    modular,
    ngram,
    seq2seq,
)

SEED_MODELS = ("S0", "H0", "H1", "H2")
TARGETS = ("seq2seq", "modular")
SEQ2SEQ_SEEDS = ("S0",)  # seed ids whose decoder is the integrated recognizer


class SSTError(ValueError):
    pass


@dataclass(frozen=True)
class SSTPlan:
    seed_model: str
    target_paradigm: str
    decode_cfg: dict = field(default_factory=dict)
    lm_assets: tuple = ()  # extra text-set names joining post-training LMs
    keep_all: bool = True
    min_score_per_frame: float | None = None
    seed: int = 0

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lm_assets"] = list(self.lm_assets)
        d["decode_cfg"] = {
            k: v for k, v in self.decode_cfg.items() if k != "fusion_lm_obj"
        }
        return d


def validate_plan(plan):
    """Reject invalid plans before any compute. In particular a seq2seq seed
    must not request fusion for pseudotranscription (it destabilizes the
    retrained model)."""
    if plan.seed_model not in SEED_MODELS:
        raise SSTError(f"unknown seed model {plan.seed_model!r}")
    if plan.target_paradigm not in TARGETS:
        raise SSTError(f"unknown target paradigm {plan.target_paradigm!r}")
    if plan.seed_model in SEQ2SEQ_SEEDS and _wants_fusion(plan.decode_cfg):
        raise SSTError(
            "fusion is not allowed when pseudotranscribing with a seq2seq "
            "seed (it destabilizes retraining); remove the fusion settings"
        )
    if not plan.keep_all and plan.min_score_per_frame is None:
        raise SSTError("keep_all=false requires min_score_per_frame")


def _wants_fusion(decode_cfg):
    return bool(decode_cfg.get("fusion")) or bool(decode_cfg.get("fusion_lm_obj"))


@dataclass
class ModularSeed:
    """A modular seed: acoustic model plus the lexicon/LM used to decode."""

    am: "modular.ModularAM"
    lexicon: "lexicon_mod.Lexicon"
    lm: "ngram.NGramLM"


@dataclass
class TranscriptManifest:
    entries: dict  # utt_id -> {"transcript": [words], "score": float,
    #                           "provenance": seed id}

    def to_records(self):
        return [
            {"utt_id": k, **v} for k, v in sorted(self.entries.items())
        ]

    @staticmethod
    def from_records(records):
        return TranscriptManifest(
            entries={
                r["utt_id"]: {k: v for k, v in r.items() if k != "utt_id"}
                for r in records
            }
        )


def pseudotranscribe(seed, utterances, decode_cfg, provenance):
    """Decode every unlabeled utterance with the seed's own decoder. Empty
    hypotheses are kept (recorded with an empty transcript)."""
    if isinstance(seed, seq2seq.Seq2SeqModel) and _wants_fusion(decode_cfg):
        raise SSTError(
            "fusion is not allowed when pseudotranscribing with a seq2seq seed"
        )
    entries = {}
    for utt in utterances:
        if isinstance(seed, ModularSeed):
            logp = seed.am.log_posteriors(utt.features)
            cfg = modular.ModularDecodeConfig(
                beam=decode_cfg.get("beam", 8),
                lm_weight=decode_cfg.get("ngram_weight", 1.0),
                word_insertion_penalty=decode_cfg.get(
                    "word_insertion_penalty", 0.0
                ),
            )
            hyp = modular.decode_modular(
                logp, seed.lexicon, seed.lm, cfg, alphabet=seed.am.alphabet
            )
            words = hyp.words
        elif isinstance(seed, seq2seq.Seq2SeqModel):
            cfg = seq2seq.S2SDecodeConfig(beam=decode_cfg.get("beam", 8))
            hyp = seq2seq.s2s_decode(seed, utt.features, cfg)
            words = seq2seq.decode_units_to_words(seed.vocab, hyp.units)
        else:
            raise SSTError(f"unsupported seed model type {type(seed).__name__}")
        entries[utt.utt_id] = {
            "transcript": list(words),
            "score": float(hyp.total_score),
            "provenance": provenance,
        }
    return TranscriptManifest(entries=entries)


def merge_training_set(sup_utterances, pseudo_manifest, unsup_utterances,
                       keep_all=True, min_score_per_frame=None):
    """Union of supervised and pseudotranscribed utterances; pseudotranscripts
    carry no special weighting. keep_all=False filters by score per frame."""
    sup_ids = {u.utt_id for u in sup_utterances}
    collisions = sorted(
        u.utt_id for u in unsup_utterances if u.utt_id in sup_ids
    )
    if collisions:
        raise SSTError(f"utterance id collision: {collisions}")
    merged = list(sup_utterances)
    for utt in unsup_utterances:
        entry = pseudo_manifest.entries.get(utt.utt_id)
        if entry is None:
            raise SSTError(f"no pseudotranscript for {utt.utt_id}")
        if not keep_all:
            if entry["score"] / max(utt.num_frames, 1) < min_score_per_frame:
                continue
        merged.append(dataclasses.replace(
            utt, transcript=list(entry["transcript"])
        ))
    return merged


def _sentences(utterances):
    return [" ".join(u.transcript) for u in utterances if u.transcript]


def _stage(report, name, fn, out_path=None, load=None, save=None):
    """Run a checkpointed stage: reuse out_path if present, else compute,
    persist, and record the timing."""
    if out_path is not None and Path(out_path).exists():
        report["stages"][name] = {"cached": True}
        return load(out_path)
    t0 = time.monotonic()
    result = fn()
    if out_path is not None:
        save(result, out_path)
    report["stages"][name] = {
        "cached": False, "seconds": round(time.monotonic() - t0, 3)
    }
    return result


def run_sst(plan, assets, out_dir):
    """Execute the full loop. assets keys:

    - seed: seed model object (may be None when resuming past stage 1)
    - sup / unsup / eval: utterance lists (eval utterances carry transcripts)
    - text_sets: name -> sentence list (for plan.lm_assets)
    - vocab: subword vocabulary (seq2seq target)
    - alphabet: emission symbols (modular target)
    - train_cfg: config for the target paradigm's from-scratch training
    - diagnostics: optional utt_id -> true word list for the unsup split

    Returns {"model", "lexicon", "lm", "report"}; the report (JSON-persisted)
    records config hash, stage timings, data hashes, and diagnostic WERs.
    """
    validate_plan(plan)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "plan": plan.to_dict(),
        "config_sha256": containers.config_sha256(plan.to_dict()),
        "stages": {},
        "diagnostics": {},
        "data_hashes": {},
    }
    report_path = out_dir / "report.json"
    try:
        result = _run_sst_stages(plan, assets, out_dir, report)
    except Exception as e:
        report["error"] = f"{type(e).__name__}: {e}"
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
        raise
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    result["report"] = report
    return result


def _run_sst_stages(plan, assets, out_dir, report):
    sup = assets["sup"]
    unsup = assets["unsup"]
    pseudo_path = out_dir / "pseudotranscripts.jsonl"

    def do_pseudo():
        seed = assets.get("seed")
        if seed is None:
            raise SSTError("seed model required (no cached pseudotranscripts)")
        return pseudotranscribe(seed, unsup, plan.decode_cfg, plan.seed_model)

    pseudo = _stage(
        report, "pseudotranscribe", do_pseudo, pseudo_path,
        load=lambda p: TranscriptManifest.from_records(containers.read_jsonl(p)),
        save=lambda m, p: containers.write_jsonl(p, m.to_records()),
    )
    report["data_hashes"]["pseudotranscripts"] = containers.file_sha256(pseudo_path)
    report["data_hashes"]["supervised"] = containers.config_sha256(
        [(u.utt_id, u.transcript) for u in sup]
    )
    report["diagnostics"]["empty_pseudotranscripts"] = sum(
        1 for e in pseudo.entries.values() if not e["transcript"]
    )

    diag = assets.get("diagnostics") or {}
    if diag:
        pairs = [
            (diag[k], e["transcript"])
            for k, e in pseudo.entries.items() if k in diag and diag[k]
        ]
        if pairs:
            report["diagnostics"]["pseudotranscript_wer"] = round(
                evalkit.pooled_wer(pairs).wer_percent, 2
            )

    merged = merge_training_set(
        sup, pseudo, unsup, plan.keep_all, plan.min_score_per_frame
    )
    report["diagnostics"]["merged_size"] = len(merged)

    # semisupervised text assets: supervised + pseudotranscripts (+ extras)
    text_sets = assets.get("text_sets", {})
    lm_sources = [_sentences(sup), _sentences(merged[len(sup):])]
    for name in plan.lm_assets:
        if name not in text_sets:
            raise SSTError(f"unknown text set {name!r} in lm_assets")
        lm_sources.append(list(text_sets[name]))

    semisup_lexicon = lexicon_mod.build_lexicon(
        lm_sources[:2], lexicon_mod.Tier.SEMISUP
    )
    semisup_lm = ngram.train_ngram(lm_sources)

    model_path = out_dir / "model.ckpt"
    if plan.target_paradigm == "modular":
        trainable = [u for u in merged if u.transcript]
        model = _stage(
            report, "retrain",
            lambda: modular.train_modular_am(
                trainable, assets["alphabet"], assets["train_cfg"]
            ),
            model_path,
            load=modular.load_modular_am,
            save=lambda m, p: modular.save_modular_am(m, p),
        )
    else:
        trainable = [u for u in merged if u.transcript]
        model = _stage(
            report, "retrain",
            lambda: seq2seq.train_seq2seq(
                trainable, assets["vocab"], assets["train_cfg"]
            ),
            model_path,
            load=seq2seq.load_seq2seq,
            save=lambda m, p: seq2seq.save_seq2seq(m, p),
        )

    eval_utts = assets.get("eval") or []
    if eval_utts:
        decodes = {}
        for utt in eval_utts:
            if plan.target_paradigm == "modular":
                hyp = modular.decode_modular(
                    model.log_posteriors(utt.features), semisup_lexicon,
                    semisup_lm,
                    modular.ModularDecodeConfig(
                        beam=plan.decode_cfg.get("beam", 8),
                        lm_weight=plan.decode_cfg.get("ngram_weight", 1.0),
                    ),
                    alphabet=model.alphabet,
                )
                decodes[utt.utt_id] = hyp.words
            else:
                hyp = seq2seq.s2s_decode(
                    model, utt.features,
                    seq2seq.S2SDecodeConfig(beam=plan.decode_cfg.get("beam", 8)),
                )
                decodes[utt.utt_id] = seq2seq.decode_units_to_words(
                    model.vocab, hyp.units
                )
        scores = evalkit.score_eval(decodes, eval_utts)
        report["diagnostics"]["eval_wer"] = round(scores["average"], 2)

    return {"model": model, "lexicon": semisup_lexicon, "lm": semisup_lm}
