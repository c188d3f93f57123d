"""End-to-end tests of the command-line interface on a miniature corpus."""

import json

import pytest
import yaml
from click.testing import CliRunner

from cdasr import containers, corpus, lexicon as lexicon_mod, ngram
from cdasr.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A corpus plus shared artifacts built through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()

    def run(args):
        result = runner.invoke(main, args, catch_exceptions=False)
        assert result.exit_code == 0, result.output
        return result.output

    run(["corpus", "synth", "--out", str(root / "corpus"),
         "--scale", "0.05", "--seed", "0"])
    run(["tokenize", "train", "--corpus", str(root / "corpus"),
         "--size", "40", "--out", str(root / "vocab.json")])
    run(["lm", "train-ngram", "--corpus", str(root / "corpus"),
         "--sets", "sup", "--out", str(root / "sup.arpa")])
    run(["am", "train-modular", "--corpus", str(root / "corpus"),
         "--epochs", "3", "--out", str(root / "am.ckpt")])
    manifest, _ = corpus.load_corpus(root / "corpus")
    lex = lexicon_mod.build_lexicon(
        [[" ".join(u.transcript) for u in manifest.splits["sup_cts"]]],
        lexicon_mod.Tier.BASE,
    )
    lexicon_mod.save_lexicon(lex, root / "lex.json")
    return root, runner


def invoke(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result.output


def test_corpus_synth_reports_counts(workdir):
    root, _ = workdir
    manifest, _ = corpus.load_corpus(root / "corpus")
    assert set(manifest.splits) == {
        "sup_cts", "unsup_cts", "unsup_bn", "eval_bn"
    }


def test_tokenize_encode_decode_round_trip(workdir):
    root, runner = workdir
    manifest, _ = corpus.load_corpus(root / "corpus")
    sentence = " ".join(manifest.splits["sup_cts"][0].transcript)
    units = invoke(
        runner, ["tokenize", "encode", "--vocab", str(root / "vocab.json"),
                 sentence]
    ).split()
    decoded = invoke(
        runner, ["tokenize", "decode", "--vocab", str(root / "vocab.json")]
        + units
    ).strip()
    assert decoded == sentence


def test_lm_score_outputs_perplexity(workdir, tmp_path):
    root, runner = workdir
    manifest, _ = corpus.load_corpus(root / "corpus")
    text = tmp_path / "text.txt"
    text.write_text(
        "\n".join(" ".join(u.transcript)
                  for u in manifest.splits["sup_cts"][:5]),
        encoding="utf-8",
    )
    out = json.loads(invoke(
        runner, ["lm", "score", "--lm", str(root / "sup.arpa"),
                 "--text", str(text)]
    ))
    assert out["logprob"] < 0
    assert out["perplexity"] > 1


def test_decode_and_score(workdir, tmp_path):
    root, runner = workdir
    hyp = tmp_path / "hyp.jsonl"
    invoke(runner, [
        "decode", "modular", "--am", str(root / "am.ckpt"),
        "--corpus", str(root / "corpus"), "--split", "eval_bn",
        "--lexicon", str(root / "lex.json"), "--lm", str(root / "sup.arpa"),
        "--beam", "4", "--out", str(hyp),
    ])
    records = containers.read_jsonl(hyp)
    manifest, _ = corpus.load_corpus(root / "corpus")
    assert len(records) == len(manifest.splits["eval_bn"])

    ref = tmp_path / "ref.jsonl"
    containers.write_jsonl(ref, [
        {"utt_id": u.utt_id, "transcript": " ".join(u.transcript)}
        for u in manifest.splits["eval_bn"]
    ])
    out = json.loads(invoke(
        runner, ["score", "wer", "--ref", str(ref), "--hyp", str(hyp)]
    ))
    assert 0.0 <= out["wer_percent"]
    assert out["ref_len"] > 0


def test_score_wer_missing_hypothesis_fails(workdir, tmp_path):
    root, runner = workdir
    ref = tmp_path / "ref.jsonl"
    hyp = tmp_path / "hyp.jsonl"
    containers.write_jsonl(ref, [{"utt_id": "a", "transcript": "x y"}])
    containers.write_jsonl(hyp, [])
    result = runner.invoke(
        main, ["score", "wer", "--ref", str(ref), "--hyp", str(hyp)]
    )
    assert result.exit_code != 0
    assert "missing hypotheses" in result.output


def test_sst_pseudotranscribe_and_merge(workdir, tmp_path):
    root, runner = workdir
    plan = tmp_path / "plan.yaml"
    plan.write_text(yaml.safe_dump({
        "seed_model": "H0",
        "target": "modular",
        "corpus": str(root / "corpus"),
        "seed_checkpoint": str(root / "am.ckpt"),
        "seed_lexicon": str(root / "lex.json"),
        "seed_lm": str(root / "sup.arpa"),
        "decode": {"beam": 4},
    }))
    pseudo = tmp_path / "pseudo.jsonl"
    out = json.loads(invoke(
        runner, ["sst", "pseudotranscribe", "--plan", str(plan),
                 "--out", str(pseudo)]
    ))
    manifest, _ = corpus.load_corpus(root / "corpus")
    assert out["utterances"] == len(manifest.splits["unsup_bn"])

    merged = tmp_path / "merged.jsonl"
    out = json.loads(invoke(
        runner, ["sst", "merge", "--corpus", str(root / "corpus"),
                 "--pseudo", str(pseudo), "--out", str(merged)]
    ))
    expected = (len(manifest.splits["sup_cts"])
                + len(manifest.splits["unsup_bn"]))
    assert out["utterances"] == expected


def test_sst_run_cli(workdir, tmp_path):
    root, runner = workdir
    plan = tmp_path / "plan.yaml"
    plan.write_text(yaml.safe_dump({
        "seed_model": "H0",
        "target": "modular",
        "corpus": str(root / "corpus"),
        "seed_checkpoint": str(root / "am.ckpt"),
        "seed_lexicon": str(root / "lex.json"),
        "seed_lm": str(root / "sup.arpa"),
        "decode": {"beam": 4},
        "train": {"epochs": 2, "subsample": 2},
    }))
    out_dir = tmp_path / "sst"
    invoke(runner, ["sst", "run", "--plan", str(plan), "--out", str(out_dir)])
    report = json.loads((out_dir / "report.json").read_text())
    assert "stages" in report


def test_exp_run_exits_nonzero_when_unevaluable(workdir, tmp_path):
    _, runner = workdir
    matrix = tmp_path / "matrix.yaml"
    matrix.write_text(yaml.safe_dump({
        "scale": 0.05, "eval_frames": 1200, "vocab_size": 40, "beam": 4,
        "modular_epochs": 3, "conditions": ["H0"],
    }))
    result = runner.invoke(
        main, ["exp", "run", "--matrix", str(matrix),
               "--out", str(tmp_path / "exp")],
        catch_exceptions=False,
    )
    # with a single condition most orderings are unevaluable -> exit 1
    assert result.exit_code == 1
    assert "unevaluable" in result.output
    assert (tmp_path / "exp" / "benchmark.csv").exists()
