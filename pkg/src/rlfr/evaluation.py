"""Held-out evaluation: adequacy proxy, exact match and entity accuracy."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from .corpus import ParallelExample
from .policy import Model, greedy_decode, render_prompt
from .reward import ChrFScorer, SemanticScorer

COMPARISON_COLUMNS = ("checkpoint", "adequacy", "exact_match", "entity_acc", "n_examples")


class IncompatibleVocab(ValueError):
    pass


@dataclass(frozen=True)
class EvalResult:
    adequacy: float
    exact_match: float
    entity_acc: float | None  # None when the corpus has no entity annotations
    n_examples: int
    n_entities: int
    entities_correct: int

    def as_dict(self) -> dict:
        return asdict(self)


def _count_occurrences(seq: Sequence[str], pattern: Sequence[str]) -> int:
    n, m = len(seq), len(pattern)
    return sum(1 for i in range(n - m + 1) if tuple(seq[i : i + m]) == tuple(pattern))


def entity_hits(output: Sequence[str], example: ParallelExample) -> int:
    """Annotated entities whose canonical rendering appears in ``output``.

    An entity annotated ``c`` times is credited at most as often as its
    rendering occurs.
    """
    wanted: dict[tuple[str, ...], int] = {}
    for ent in example.entities:
        wanted[ent.target_tokens] = wanted.get(ent.target_tokens, 0) + 1
    return sum(min(c, _count_occurrences(output, r)) for r, c in wanted.items())


def decode_corpus(model: Model, corpus: Sequence[ParallelExample]) -> list[list[str]]:
    vocab = model.vocab
    try:
        prompts = [render_prompt(vocab, ex.source, ex.direction) for ex in corpus]
    except KeyError as exc:
        raise IncompatibleVocab(f"corpus does not match the checkpoint vocabulary: {exc}") from None
    return [vocab.decode(ids) for ids in greedy_decode(model, prompts)]


def evaluate(model: Model, corpus: Sequence[ParallelExample], scorer: SemanticScorer | None = None) -> EvalResult:
    if not corpus:
        raise ValueError("cannot evaluate on an empty corpus")
    if any(ex.gold is None for ex in corpus):
        raise ValueError("evaluation needs gold targets for every example")
    scorer = scorer or ChrFScorer()
    outputs = decode_corpus(model, corpus)
    adequacy = exact = 0.0
    n_ent = hits = 0
    for ex, out in zip(corpus, outputs):
        adequacy += scorer.score(ex.source, out, ex.gold)
        exact += tuple(out) == ex.gold
        n_ent += len(ex.entities)
        hits += entity_hits(out, ex)
    n = len(corpus)
    return EvalResult(
        adequacy=adequacy / n,
        exact_match=exact / n,
        entity_acc=hits / n_ent if n_ent else None,
        n_examples=n,
        n_entities=n_ent,
        entities_correct=hits,
    )


def compare(
    checkpoints: Sequence[tuple[str, Model]], corpus: Sequence[ParallelExample], scorer: SemanticScorer | None = None
) -> list[dict]:
    """One row per checkpoint, in the order given."""
    if len(checkpoints) < 2:
        raise ValueError("compare needs at least two checkpoints")
    if not corpus:
        raise ValueError("cannot compare on an empty corpus")
    rows = []
    for name, model in checkpoints:
        res = evaluate(model, corpus, scorer)
        rows.append({
            "checkpoint": name,
            "adequacy": res.adequacy,
            "exact_match": res.exact_match,
            "entity_acc": res.entity_acc,
            "n_examples": res.n_examples,
        })
    return rows


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def comparison_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else r[k]) for k in COMPARISON_COLUMNS})
    return buf.getvalue()


def comparison_table(rows: Sequence[dict]) -> str:
    cells = [list(COMPARISON_COLUMNS)] + [[_fmt(r[k]) for k in COMPARISON_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(COMPARISON_COLUMNS))]
    lines = []
    for n, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_comparison(out_dir: str | Path, rows: Sequence[dict]) -> None:
    out_dir = Path(out_dir)
    (out_dir / "comparison.csv").write_text(comparison_csv(rows))
    (out_dir / "comparison.txt").write_text(comparison_table(rows))
