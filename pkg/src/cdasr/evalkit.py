"""Word-error-rate scoring, subset-averaged evaluation, and result tables."""

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from . import corpus
from .kernels import edit_counts


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class WERBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    def __post_init__(self):
        if self.ref_len <= 0:
            raise EvalError("ref_len must be positive")

    @property
    def total_edits(self):
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer_percent(self):
        return 100.0 * self.total_edits / self.ref_len


def _id_arrays(ref, hyp):
    idx = {}
    for w in list(ref) + list(hyp):
        idx.setdefault(w, len(idx))
    return (
        np.array([idx[w] for w in ref], dtype=np.int64),
        np.array([idx[w] for w in hyp], dtype=np.int64),
    )


def wer(ref, hyp):
    """Minimum-edit alignment with unit costs; ties prefer substitutions,
    then deletions."""
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        raise EvalError("empty reference")
    r, h = _id_arrays(ref, hyp)
    s, d, i = edit_counts(r, h)
    return WERBreakdown(substitutions=int(s), deletions=int(d),
                        insertions=int(i), ref_len=len(ref))


def pooled_wer(pairs):
    """Pooled-count WER over (ref, hyp) pairs: sum edits / sum ref lengths."""
    subs = dels = ins = ref_len = 0
    for ref, hyp in pairs:
        b = wer(ref, hyp)
        subs += b.substitutions
        dels += b.deletions
        ins += b.insertions
        ref_len += b.ref_len
    return WERBreakdown(substitutions=subs, deletions=dels, insertions=ins,
                        ref_len=ref_len)


def score_eval(decodes, eval_utterances):
    """decodes: utt_id -> hypothesized word list. Returns per-subset pooled
    WER breakdowns plus their unweighted mean under key "average"."""
    missing = sorted(
        u.utt_id for u in eval_utterances if u.utt_id not in decodes
    )
    if missing:
        raise EvalError(f"missing decodes for utterances: {missing}")
    by_subset = {}
    for u in eval_utterances:
        subset = u.eval_subset or "all"
        by_subset.setdefault(subset, []).append(
            (u.transcript, decodes[u.utt_id])
        )
    result = {subset: pooled_wer(pairs) for subset, pairs in by_subset.items()}
    mean = sum(b.wer_percent for b in result.values()) / len(result)
    result["average"] = mean
    return result


def round1(x):
    """One-decimal rounding, half away from zero."""
    return float(Decimal(repr(float(x))).quantize(Decimal("0.1"),
                                                  rounding=ROUND_HALF_UP))


def average_across(values):
    """Unweighted mean of WER values, one-decimal half-away-from-zero."""
    values = list(values)
    if not values:
        raise EvalError("empty value list")
    return round1(sum(values) / len(values))


# ---------------------------------------------------------------------------
# result tables


FAILED = "—"  # em dash marks a failed cell


@dataclass
class ResultTable:
    name: str
    columns: list  # condition column labels (Avg. appended on render)
    rows: list = field(default_factory=list)  # (label, {column: float|None})

    def add_row(self, label, cells):
        unknown = set(cells) - set(self.columns)
        if unknown:
            raise EvalError(f"unknown columns: {sorted(unknown)}")
        self.rows.append((label, dict(cells)))

    def row_avg(self, cells):
        vals = [cells.get(c) for c in self.columns]
        if any(v is None for v in vals):
            return None
        return average_across(vals)

    def _cell(self, v):
        return FAILED if v is None else f"{round1(v):.1f}"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition"] + self.columns + ["Avg."])
        for label, cells in self.rows:
            row = [self._cell(cells.get(c)) for c in self.columns]
            w.writerow([label] + row + [self._cell(self.row_avg(cells))])
        return buf.getvalue()

    @staticmethod
    def from_csv(name, text):
        rows = list(csv.reader(io.StringIO(text)))
        columns = rows[0][1:-1]
        table = ResultTable(name=name, columns=columns)
        for row in rows[1:]:
            cells = {
                c: (None if v == FAILED else float(v))
                for c, v in zip(columns, row[1:-1])
            }
            table.add_row(row[0], cells)
        return table

    def to_markdown(self):
        header = ["condition"] + self.columns + ["Avg."]
        lines = [
            "| " + " | ".join(header) + " |",
            "| " + " | ".join("---" for _ in header) + " |",
        ]
        for label, cells in self.rows:
            vals = [self._cell(cells.get(c)) for c in self.columns]
            vals.append(self._cell(self.row_avg(cells)))
            lines.append("| " + " | ".join([label] + vals) + " |")
        return "\n".join(lines) + "\n"


def emit_report(table, out_dir):
    """Write CSV, markdown, and a bar chart for a ResultTable; byte-stable
    given identical inputs. Returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    csv_path = out_dir / f"{table.name}.csv"
    csv_path.write_text(table.to_csv(), encoding="utf-8")
    paths["csv"] = csv_path
    md_path = out_dir / f"{table.name}.md"
    md_path.write_text(table.to_markdown(), encoding="utf-8")
    paths["md"] = md_path
    paths["png"] = _bar_chart(table, out_dir / f"{table.name}.png")
    return paths


def _bar_chart(table, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [label for label, _ in table.rows]
    avgs = [table.row_avg(cells) for _, cells in table.rows]
    xs = np.arange(len(labels))
    heights = [0.0 if a is None else a for a in avgs]
    fig, ax = plt.subplots(figsize=(max(6, len(labels)), 4))
    ax.bar(xs, heights, color="#4878a8")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("WER (%)")
    ax.set_title(table.name)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
