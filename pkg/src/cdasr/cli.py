"""Command-line interface for the recognizer pipeline."""

import dataclasses
import json
import sys
from pathlib import Path

import click
import yaml

from . import (
    containers,
    corpus,
    evalkit,
    experiments,
    lexicon as lexicon_mod,
    modular,
    neural_lm,
    ngram,
    seq2seq,
    sst,
    subword,
)


@click.group()
def main():
    """Cross-domain speech recognition benchmark pipeline."""


# ---------------------------------------------------------------------------
# corpus


@main.group("corpus")
def corpus_group():
    """Synthetic two-domain corpus generation."""


@corpus_group.command("synth")
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--scale", default=1.0, show_default=True,
              help="Scale factor applied to the default split budgets.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="YAML file with generator parameters.")
def corpus_synth(out, seed, scale, config_path):
    """Generate the synthetic corpus and write it to --out."""
    params = {}
    if config_path:
        params = yaml.safe_load(Path(config_path).read_text()) or {}
    gen = corpus.GeneratorConfig(**params)
    spec = corpus.build_language_spec(gen, seed)
    manifest = corpus.synth_corpus(spec, corpus.SplitPlan.scaled(scale), seed)
    corpus.save_corpus(manifest, spec, out)
    counts = {k: len(v) for k, v in manifest.splits.items()}
    click.echo(json.dumps({"out": str(out), "utterances": counts}))


def _load_corpus(path):
    return corpus.load_corpus(path)


def _split_utts(manifest, split):
    if split not in manifest.splits:
        raise click.ClickException(
            f"unknown split {split!r}; have {sorted(manifest.splits)}"
        )
    return manifest.splits[split]


# ---------------------------------------------------------------------------
# tokenize


@main.group("tokenize")
def tokenize_group():
    """Subword vocabulary training and application."""


@tokenize_group.command("train")
@click.option("--text", "texts", multiple=True, type=click.Path(exists=True),
              help="Plain-text file, one sentence per line (repeatable).")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True),
              help="Use the supervised transcripts of a corpus directory.")
@click.option("--size", default=200, show_default=True)
@click.option("--out", required=True, type=click.Path())
def tokenize_train(texts, corpus_dir, size, out):
    sentences = []
    for t in texts:
        sentences.extend(Path(t).read_text(encoding="utf-8").splitlines())
    if corpus_dir:
        manifest, _ = _load_corpus(corpus_dir)
        sentences.extend(
            " ".join(u.transcript) for u in manifest.splits["sup_cts"]
        )
    if not sentences:
        raise click.ClickException("no training text (use --text or --corpus)")
    vocab = subword.train_subwords(sentences, size)
    Path(out).write_text(json.dumps(subword.vocab_to_dict(vocab)),
                         encoding="utf-8")
    click.echo(json.dumps({"out": str(out), "size": vocab.size}))


def _load_vocab(path):
    return subword.vocab_from_dict(
        json.loads(Path(path).read_text(encoding="utf-8"))
    )


@tokenize_group.command("encode")
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.argument("sentence")
def tokenize_encode(vocab, sentence):
    click.echo(" ".join(subword.encode(_load_vocab(vocab), sentence)))


@tokenize_group.command("decode")
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.argument("units", nargs=-1, required=True)
def tokenize_decode(vocab, units):
    click.echo(subword.decode(_load_vocab(vocab), list(units)))


# ---------------------------------------------------------------------------
# lm


@main.group("lm")
def lm_group():
    """Count-based and neural language models."""


def _text_sources(texts, corpus_dir, sets):
    sources = []
    for t in texts:
        sources.append(Path(t).read_text(encoding="utf-8").splitlines())
    if corpus_dir:
        manifest, _ = _load_corpus(corpus_dir)
        for name in sets:
            if name == "sup":
                sources.append(
                    [" ".join(u.transcript)
                     for u in manifest.splits["sup_cts"]]
                )
            else:
                if name not in manifest.text_sets:
                    raise click.ClickException(f"unknown text set {name!r}")
                sources.append(list(manifest.text_sets[name]))
    if not sources:
        raise click.ClickException("no training text")
    return sources


@lm_group.command("train-ngram")
@click.option("--text", "texts", multiple=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True))
@click.option("--sets", default="sup", show_default=True,
              help="Comma-separated corpus text sets (sup,set1,set2).")
@click.option("--discount", default=0.7, show_default=True)
@click.option("--out", required=True, type=click.Path())
def lm_train_ngram(texts, corpus_dir, sets, discount, out):
    sources = _text_sources(texts, corpus_dir, sets.split(",") if sets else [])
    lm = ngram.train_ngram(sources, discount=discount)
    ngram.save_arpa(lm, out)
    click.echo(json.dumps({"out": str(out), "vocab": len(lm.vocab)}))


@lm_group.command("train-neural")
@click.option("--text", "texts", multiple=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True))
@click.option("--sets", default="sup", show_default=True)
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.option("--epochs", default=6, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def lm_train_neural(texts, corpus_dir, sets, vocab, epochs, seed, out):
    sources = _text_sources(texts, corpus_dir, sets.split(",") if sets else [])
    v = _load_vocab(vocab)
    seqs = [subword.encode_ids(v, s) for src in sources for s in src]
    lm = neural_lm.train_neural_lm(
        seqs, v, neural_lm.NeuralLMConfig(epochs=epochs, seed=seed)
    )
    neural_lm.save_neural_lm(lm, out)
    click.echo(json.dumps({"out": str(out), "perplexity":
                           round(neural_lm.perplexity(lm, seqs), 3)}))


@lm_group.command("score")
@click.option("--lm", "lm_path", required=True, type=click.Path(exists=True))
@click.option("--text", required=True, type=click.Path(exists=True))
def lm_score(lm_path, text):
    lm = ngram.load_arpa(lm_path)
    total = 0.0
    words = 0
    for line in Path(text).read_text(encoding="utf-8").splitlines():
        sentence = line.split()
        if not sentence:
            continue
        total += ngram.sentence_logprob(lm, sentence)
        words += len(sentence) + 1  # sentence-end token included
    click.echo(json.dumps({
        "logprob": round(total, 4),
        "perplexity": round(float(10 ** (-total / max(words, 1))), 4)
        if words else None,
    }))


# ---------------------------------------------------------------------------
# am


@main.group("am")
def am_group():
    """Acoustic / integrated model training."""


@am_group.command("train-modular")
@click.option("--corpus", "corpus_dir", required=True,
              type=click.Path(exists=True))
@click.option("--epochs", default=8, show_default=True)
@click.option("--subsample", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def am_train_modular(corpus_dir, epochs, subsample, seed, out):
    manifest, spec = _load_corpus(corpus_dir)
    cfg = modular.ModularAMConfig(epochs=epochs, subsample=subsample,
                                  seed=seed)
    am = modular.train_modular_am(
        manifest.splits["sup_cts"], spec.emission_symbols, cfg
    )
    modular.save_modular_am(am, out)
    click.echo(json.dumps({"out": str(out)}))


@am_group.command("train-seq2seq")
@click.option("--corpus", "corpus_dir", required=True,
              type=click.Path(exists=True))
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.option("--epochs", default=12, show_default=True)
@click.option("--dim", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def am_train_seq2seq(corpus_dir, vocab, epochs, dim, seed, out):
    manifest, _ = _load_corpus(corpus_dir)
    cfg = seq2seq.Seq2SeqConfig(dim=dim, epochs=epochs, seed=seed)
    model = seq2seq.train_seq2seq(
        manifest.splits["sup_cts"], _load_vocab(vocab), cfg
    )
    seq2seq.save_seq2seq(model, out)
    click.echo(json.dumps({"out": str(out),
                           "best_val_wer": model.best_val_wer}))


# ---------------------------------------------------------------------------
# decode


@main.group("decode")
def decode_group():
    """Decode a corpus split with a trained model."""


def _write_decodes(out, decodes):
    containers.write_jsonl(
        out, [{"utt_id": k, "words": v} for k, v in sorted(decodes.items())]
    )
    click.echo(json.dumps({"out": str(out), "utterances": len(decodes)}))


@decode_group.command("modular")
@click.option("--am", "am_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True,
              type=click.Path(exists=True))
@click.option("--split", default="eval_bn", show_default=True)
@click.option("--lexicon", "lexicon_path", required=True,
              type=click.Path(exists=True))
@click.option("--lm", "lm_path", type=click.Path(exists=True))
@click.option("--beam", default=8.0, show_default=True)
@click.option("--lm-weight", default=1.0, show_default=True)
@click.option("--wip", default=0.0, show_default=True,
              help="Word insertion penalty.")
@click.option("--out", required=True, type=click.Path())
def decode_modular_cmd(am_path, corpus_dir, split, lexicon_path, lm_path,
                       beam, lm_weight, wip, out):
    manifest, _ = _load_corpus(corpus_dir)
    am = modular.load_modular_am(am_path)
    lex = lexicon_mod.load_lexicon(lexicon_path)
    lm = ngram.load_arpa(lm_path) if lm_path else None
    cfg = modular.ModularDecodeConfig(beam=beam, lm_weight=lm_weight,
                                      word_insertion_penalty=wip)
    decodes = {}
    for u in _split_utts(manifest, split):
        hyp = modular.decode_modular(
            am.log_posteriors(u.features), lex, lm, cfg, alphabet=am.alphabet
        )
        decodes[u.utt_id] = hyp.words
    _write_decodes(out, decodes)


@decode_group.command("seq2seq")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True,
              type=click.Path(exists=True))
@click.option("--split", default="eval_bn", show_default=True)
@click.option("--beam", default=8.0, show_default=True)
@click.option("--fusion-lm", "fusion_path", type=click.Path(exists=True))
@click.option("--lm-weight", default=0.3, show_default=True)
@click.option("--out", required=True, type=click.Path())
def decode_seq2seq_cmd(model_path, corpus_dir, split, beam, fusion_path,
                       lm_weight, out):
    manifest, _ = _load_corpus(corpus_dir)
    model = seq2seq.load_seq2seq(model_path)
    fusion = neural_lm.load_neural_lm(fusion_path) if fusion_path else None
    cfg = seq2seq.S2SDecodeConfig(
        beam=beam, fusion_lm=fusion,
        lm_weight=lm_weight if fusion is not None else 0.0,
    )
    decodes = {}
    for u in _split_utts(manifest, split):
        hyp = seq2seq.s2s_decode(model, u.features, cfg)
        decodes[u.utt_id] = seq2seq.decode_units_to_words(
            model.vocab, hyp.units
        )
    _write_decodes(out, decodes)


# ---------------------------------------------------------------------------
# score


@main.group("score")
def score_group():
    """Scoring decoded hypotheses against references."""


@score_group.command("wer")
@click.option("--ref", required=True, type=click.Path(exists=True),
              help="JSONL with utt_id + transcript (word list or string).")
@click.option("--hyp", required=True, type=click.Path(exists=True),
              help="JSONL with utt_id + words.")
def score_wer(ref, hyp):
    def words_of(rec, key_candidates):
        for key in key_candidates:
            if key in rec:
                v = rec[key]
                return v.split() if isinstance(v, str) else list(v)
        raise click.ClickException(f"record lacks {key_candidates}: {rec}")

    refs = {
        r["utt_id"]: words_of(r, ("transcript", "words"))
        for r in containers.read_jsonl(ref)
    }
    hyps = {
        r["utt_id"]: words_of(r, ("words", "transcript"))
        for r in containers.read_jsonl(hyp)
    }
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise click.ClickException(f"missing hypotheses: {missing}")
    pooled = evalkit.pooled_wer([(refs[k], hyps[k]) for k in sorted(refs)])
    click.echo(json.dumps({
        "wer_percent": round(pooled.wer_percent, 2),
        "substitutions": pooled.substitutions,
        "deletions": pooled.deletions,
        "insertions": pooled.insertions,
        "ref_len": pooled.ref_len,
    }))


# ---------------------------------------------------------------------------
# sst


@main.group("sst")
def sst_group():
    """Self-training: pseudotranscribe, merge, retrain."""


def _load_seed(plan_data):
    kind = plan_data.get("seed_kind", "modular")
    if kind == "seq2seq":
        return seq2seq.load_seq2seq(plan_data["seed_checkpoint"])
    am = modular.load_modular_am(plan_data["seed_checkpoint"])
    lex = lexicon_mod.load_lexicon(plan_data["seed_lexicon"])
    lm = ngram.load_arpa(plan_data["seed_lm"])
    return sst.ModularSeed(am, lex, lm)


def _plan_from_data(data):
    return sst.SSTPlan(
        seed_model=data["seed_model"],
        target_paradigm=data["target"],
        decode_cfg=data.get("decode", {}),
        lm_assets=tuple(data.get("lm_assets", [])),
        keep_all=data.get("keep_all", True),
        min_score_per_frame=data.get("min_score_per_frame"),
        seed=data.get("seed", 0),
    )


@sst_group.command("run")
@click.option("--plan", "plan_path", required=True,
              type=click.Path(exists=True),
              help="YAML plan: seed_model, target, decode, lm_assets, "
                   "keep_all, seed, plus corpus/seed artifact paths.")
@click.option("--out", required=True, type=click.Path())
def sst_run_cmd(plan_path, out):
    data = yaml.safe_load(Path(plan_path).read_text()) or {}
    plan = _plan_from_data(data)
    manifest, spec = _load_corpus(data["corpus"])
    assets = {
        "seed": _load_seed(data) if data.get("seed_checkpoint") else None,
        "sup": manifest.splits["sup_cts"],
        "unsup": manifest.splits[data.get("unsup_split", "unsup_bn")],
        "eval": manifest.splits.get("eval_bn", []),
        "diagnostics": manifest.diagnostics,
        "text_sets": manifest.text_sets,
        "alphabet": spec.emission_symbols,
        "vocab": _load_vocab(data["vocab"]) if data.get("vocab") else None,
        "train_cfg": (
            modular.ModularAMConfig(**data.get("train", {}))
            if plan.target_paradigm == "modular"
            else seq2seq.Seq2SeqConfig(**data.get("train", {}))
        ),
    }
    result = sst.run_sst(plan, assets, out)
    click.echo(json.dumps(result["report"]["diagnostics"]))


@sst_group.command("pseudotranscribe")
@click.option("--plan", "plan_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def sst_pseudo_cmd(plan_path, out):
    data = yaml.safe_load(Path(plan_path).read_text()) or {}
    plan = _plan_from_data(data)
    sst.validate_plan(plan)
    manifest, _ = _load_corpus(data["corpus"])
    seed = _load_seed(data)
    pseudo = sst.pseudotranscribe(
        seed, manifest.splits[data.get("unsup_split", "unsup_bn")],
        plan.decode_cfg, plan.seed_model,
    )
    containers.write_jsonl(out, pseudo.to_records())
    click.echo(json.dumps({"out": str(out), "utterances": len(pseudo.entries)}))


@sst_group.command("merge")
@click.option("--corpus", "corpus_dir", required=True,
              type=click.Path(exists=True))
@click.option("--pseudo", required=True, type=click.Path(exists=True))
@click.option("--unsup-split", default="unsup_bn", show_default=True)
@click.option("--keep-all/--filter", default=True, show_default=True)
@click.option("--min-score-per-frame", type=float)
@click.option("--out", required=True, type=click.Path())
def sst_merge_cmd(corpus_dir, pseudo, unsup_split, keep_all,
                  min_score_per_frame, out):
    manifest, _ = _load_corpus(corpus_dir)
    pseudo_manifest = sst.TranscriptManifest.from_records(
        containers.read_jsonl(pseudo)
    )
    merged = sst.merge_training_set(
        manifest.splits["sup_cts"], pseudo_manifest,
        manifest.splits[unsup_split], keep_all, min_score_per_frame,
    )
    containers.write_jsonl(out, [
        {"utt_id": u.utt_id, "transcript": " ".join(u.transcript)}
        for u in merged
    ])
    click.echo(json.dumps({"out": str(out), "utterances": len(merged)}))


# ---------------------------------------------------------------------------
# exp


@main.group("exp")
def exp_group():
    """Experiment matrix."""


@exp_group.command("run")
@click.option("--matrix", "matrix_path", type=click.Path(exists=True),
              help="YAML matrix config; defaults used when omitted.")
@click.option("--out", required=True, type=click.Path())
def exp_run(matrix_path, out):
    cfg = (experiments.MatrixConfig.from_file(matrix_path)
           if matrix_path else experiments.MatrixConfig())
    result = experiments.run_experiment_matrix(cfg, out)
    click.echo(result["table"].to_csv())
    unevaluable = [o for o in result["orderings"]
                   if o["status"] == "unevaluable"]
    for o in result["orderings"]:
        click.echo(f"[{o['status']}] {o['name']}")
    if unevaluable:
        sys.exit(1)


if __name__ == "__main__":
    main()
