"""Exact set match and dialogue-level accuracy metrics.

Predictions are compared structurally over canonicalized trees, so two
queries that differ only in the order of SELECT columns or of AND/OR
operands count as equal. Metrics follow the usual dialogue conventions:
question-level accuracy, interaction-level accuracy (every scored turn
of a dialogue must match), and a per-turn breakdown. A fine-grained
phenomenon breakdown is computed from annotation labels when present.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .data import Corpus, DataError, Dialogue
from .grammar import AST, actions_to_ast, canonicalize
from .nn import ContractError

logger = logging.getLogger(__name__)

__all__ = [
    "CellStat",
    "MetricsReport",
    "COARSE_OF",
    "FINE_LABELS",
    "exact_set_match",
    "compute_metrics",
    "phenomenon_breakdown",
    "load_annotations",
    "apply_annotations",
    "emit_report",
    "read_report",
]


# Fine phenomenon labels and the coarse class each belongs to.
COARSE_OF = {
    "context_independent": "semantically_complete",
    "bridging_anaphora": "coreference",
    "definite_noun_phrases": "coreference",
    "one_anaphora": "coreference",
    "demonstrative_pronoun": "coreference",
    "possessive_determiner": "coreference",
    "continuation": "ellipsis",
    "substitution_explicit": "ellipsis",
    "substitution_implicit": "ellipsis",
    "substitution_schema": "ellipsis",
    "substitution_operator": "ellipsis",
}
FINE_LABELS = tuple(COARSE_OF)


@dataclass(frozen=True)
class CellStat:
    """Matched-over-total counts behind one reported fraction."""

    matched: int
    total: int

    def __post_init__(self):
        if not 0 <= self.matched <= self.total:
            raise ContractError(f"bad cell counts {self.matched}/{self.total}")

    @property
    def fraction(self) -> float:
        return self.matched / self.total if self.total else 0.0


@dataclass
class MetricsReport:
    ques_match: CellStat
    int_match: CellStat
    turn_match: dict[int, CellStat] = field(default_factory=dict)
    per_phenomenon: dict[str, CellStat] = field(default_factory=dict)


def exact_set_match(pred: AST | None, gold: AST) -> bool:
    """Structural equality of canonicalized trees; invalid pred is wrong."""
    if pred is None:
        return False
    return canonicalize(pred) == canonicalize(gold)


def _scored_examples(corpus: Corpus):
    for ex in corpus.examples():
        if ex.supported and ex.scored:
            yield ex


def _matches(predictions: dict, corpus: Corpus) -> dict[tuple[str, int], bool]:
    out = {}
    for ex in _scored_examples(corpus):
        if ex.key() not in predictions:
            raise ContractError(
                f"no prediction for dialogue {ex.dialogue_id!r} turn {ex.turn_index}")
        gold = actions_to_ast(list(ex.gold_actions))
        out[ex.key()] = exact_set_match(predictions[ex.key()], gold)
    return out


def compute_metrics(predictions: dict[tuple[str, int], AST | None],
                    corpus: Corpus) -> MetricsReport:
    """Question, interaction, and per-turn exact-match accuracy.

    ``predictions`` maps (dialogue_id, turn_index) to a parse tree or
    None for an invalid/truncated decode. Every supported, scored
    example needs an entry; unsupported and context-only turns are
    excluded from all denominators.
    """
    matches = _matches(predictions, corpus)

    ques = CellStat(sum(matches.values()), len(matches))

    int_matched = 0
    int_total = 0
    for d in corpus.dialogues:
        keys = [ex.key() for ex in d.turns if ex.supported and ex.scored]
        if not keys:
            continue
        int_total += 1
        int_matched += all(matches[k] for k in keys)

    by_turn: dict[int, list[bool]] = {}
    for ex in _scored_examples(corpus):
        by_turn.setdefault(ex.turn_index, []).append(matches[ex.key()])
    turn_match = {t: CellStat(sum(hits), len(hits))
                  for t, hits in sorted(by_turn.items())}

    labeled = [ex for ex in _scored_examples(corpus) if ex.phenomenon]
    per_phenomenon = phenomenon_breakdown(predictions, corpus) if labeled else {}

    return MetricsReport(ques, CellStat(int_matched, int_total), turn_match,
                         per_phenomenon)


def phenomenon_breakdown(predictions: dict[tuple[str, int], AST | None],
                         corpus: Corpus) -> dict[str, CellStat]:
    """Per-fine-label accuracy over the annotated examples."""
    matches = _matches(predictions, corpus)
    by_label: dict[str, list[bool]] = {}
    for ex in _scored_examples(corpus):
        if not ex.phenomenon:
            continue
        if ex.phenomenon not in COARSE_OF:
            raise DataError(
                f"dialogue {ex.dialogue_id!r} turn {ex.turn_index}: "
                f"unknown phenomenon label {ex.phenomenon!r}")
        by_label.setdefault(ex.phenomenon, []).append(matches[ex.key()])
    if not by_label:
        raise ContractError("no labeled examples to break down")
    return {label: CellStat(sum(hits), len(hits))
            for label, hits in sorted(by_label.items())}


# ---------------------------------------------------------------------------
# Annotation sidecar


def load_annotations(path: str | Path) -> dict[str, dict[int, str]]:
    """Read a dialogue_id -> turn_index -> fine-label JSON sidecar."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise DataError(f"{path}: invalid JSON: {err.msg}") from err
    if not isinstance(raw, dict):
        raise DataError(f"{path}: expected an object keyed by dialogue id")
    out: dict[str, dict[int, str]] = {}
    for dialogue_id, turns in raw.items():
        if not isinstance(turns, dict):
            raise DataError(f"{path}: {dialogue_id!r}: expected turn->label object")
        entry = {}
        for turn_key, label in turns.items():
            try:
                turn = int(turn_key)
            except ValueError as err:
                raise DataError(
                    f"{path}: {dialogue_id!r}: bad turn index {turn_key!r}") from err
            if label not in COARSE_OF:
                raise DataError(
                    f"{path}: {dialogue_id!r} turn {turn}: unknown label {label!r}")
            entry[turn] = label
        out[dialogue_id] = entry
    return out


def apply_annotations(corpus: Corpus,
                      annotations: dict[str, dict[int, str]]) -> Corpus:
    """Attach sidecar labels; unmatched annotation entries are an error."""
    known = {d.dialogue_id: {ex.turn_index for ex in d.turns}
             for d in corpus.dialogues}
    for dialogue_id, turns in annotations.items():
        if dialogue_id not in known:
            raise DataError(f"annotation for unknown dialogue {dialogue_id!r}")
        for turn in turns:
            if turn not in known[dialogue_id]:
                raise DataError(
                    f"annotation for unknown turn {turn} of dialogue {dialogue_id!r}")
    dialogues = []
    for d in corpus.dialogues:
        labels = annotations.get(d.dialogue_id, {})
        turns = [replace(ex, phenomenon=labels.get(ex.turn_index, ex.phenomenon))
                 for ex in d.turns]
        dialogues.append(Dialogue(d.dialogue_id, d.db_id, turns))
    return Corpus(dialogues, dict(corpus.schemas))


# ---------------------------------------------------------------------------
# Report files


def _report_rows(report: MetricsReport) -> list[tuple[str, float, int]]:
    rows = [("ques_match", report.ques_match.fraction, report.ques_match.total),
            ("int_match", report.int_match.fraction, report.int_match.total)]
    for turn in sorted(report.turn_match):
        cell = report.turn_match[turn]
        rows.append((f"turn_match_{turn}", cell.fraction, cell.total))
    for label in sorted(report.per_phenomenon):
        cell = report.per_phenomenon[label]
        rows.append((f"phenomenon_{label}", cell.fraction, cell.total))
    return rows


def _cell_dict(cell: CellStat) -> dict:
    return {"matched": cell.matched, "total": cell.total, "fraction": cell.fraction}


def emit_report(report: MetricsReport, format: str, path: str | Path) -> None:
    """Write the report as csv (metric,value,count) or schema-backed JSON."""
    path = Path(path)
    if format == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value", "count"])
            for metric, value, count in _report_rows(report):
                writer.writerow([metric, repr(value), count])
    elif format == "json":
        blob = {
            "ques_match": _cell_dict(report.ques_match),
            "int_match": _cell_dict(report.int_match),
            "turn_match": {str(t): _cell_dict(c)
                           for t, c in sorted(report.turn_match.items())},
            "per_phenomenon": {label: _cell_dict(c)
                               for label, c in sorted(report.per_phenomenon.items())},
        }
        path.write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    else:
        raise ContractError(f"unknown report format {format!r}")


def _cell_from_row(value: float, count: int) -> CellStat:
    return CellStat(round(value * count), count)


def read_report(path: str | Path, format: str | None = None) -> MetricsReport:
    """Inverse of emit_report; format inferred from the suffix by default."""
    path = Path(path)
    if format is None:
        format = "json" if path.suffix == ".json" else "csv"
    if format == "json":
        blob = json.loads(path.read_text(encoding="utf-8"))
        def cell(d):
            return CellStat(d["matched"], d["total"])
        return MetricsReport(
            cell(blob["ques_match"]), cell(blob["int_match"]),
            {int(t): cell(c) for t, c in blob["turn_match"].items()},
            {label: cell(c) for label, c in blob["per_phenomenon"].items()})

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["metric", "value", "count"]:
            raise DataError(f"{path}: unexpected header {header}")
        cells = {name: _cell_from_row(float(value), int(count))
                 for name, value, count in reader}
    turn_match = {}
    per_phenomenon = {}
    ques = interactions = None
    for name, cell in cells.items():
        if name == "ques_match":
            ques = cell
        elif name == "int_match":
            interactions = cell
        elif name.startswith("turn_match_"):
            turn_match[int(name[len("turn_match_"):])] = cell
        elif name.startswith("phenomenon_"):
            per_phenomenon[name[len("phenomenon_"):]] = cell
        else:
            raise DataError(f"{path}: unknown metric {name!r}")
    if ques is None or interactions is None:
        raise DataError(f"{path}: report is missing ques_match or int_match")
    return MetricsReport(ques, interactions, turn_match, per_phenomenon)


def report_schema() -> dict:
    """The JSON schema shipped for the json report format."""
    text = resources.files("dialsql").joinpath("schemas/report.schema.json").read_text()
    return json.loads(text)
