"""Edit distance and WER/CER, normalised by reference length."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import InvalidArgumentError


def edit_distance(a, b) -> int:
    """Levenshtein distance between two sequences (strings or token lists)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _check(refs, hyps):
    if len(refs) != len(hyps):
        raise InvalidArgumentError(f"{len(refs)} references but {len(hyps)} hypotheses")


def _fold(items, fold_case: bool):
    return [s.casefold() for s in items] if fold_case else list(items)


def cer(refs, hyps, fold_case: bool = False) -> float:
    _check(refs, hyps)
    refs, hyps = _fold(refs, fold_case), _fold(hyps, fold_case)
    total = sum(len(r) for r in refs)
    if total == 0:
        raise InvalidArgumentError("reference corpus has no characters")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / total


def wer(refs, hyps, fold_case: bool = False) -> float:
    _check(refs, hyps)
    refs, hyps = _fold(refs, fold_case), _fold(hyps, fold_case)
    total = sum(len(r.split()) for r in refs)
    if total == 0:
        raise InvalidArgumentError("reference corpus has no words")
    return sum(edit_distance(r.split(), h.split()) for r, h in zip(refs, hyps)) / total


@dataclass
class SampleRecord:
    sample_id: str
    reference: str
    hypothesis: str
    char_distance: int
    word_distance: int


@dataclass
class EvalReport:
    cer: float
    wer: float
    samples: int
    exact_match: float
    records: list = field(default_factory=list)

    @property
    def word_accuracy(self) -> float:
        return 1.0 - self.wer

    def summary(self) -> dict:
        return {
            "cer": self.cer,
            "wer": self.wer,
            "word_accuracy": self.word_accuracy,
            "exact_match": self.exact_match,
            "samples": self.samples,
        }

    def write(self, report_path, rows_path) -> None:
        Path(report_path).write_text(json.dumps(self.summary(), indent=2) + "\n", encoding="utf-8")
        with open(rows_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
            w.writerow(["sample_id", "reference", "hypothesis", "char_distance", "word_distance"])
            for r in self.records:
                w.writerow(list(asdict(r).values()))


def evaluate(refs, hyps, ids=None, fold_case: bool = False) -> EvalReport:
    _check(refs, hyps)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(refs))]
    fr, fh = _fold(refs, fold_case), _fold(hyps, fold_case)
    records = [
        SampleRecord(i, r, h, edit_distance(a, b), edit_distance(a.split(), b.split()))
        for i, r, h, a, b in zip(ids, refs, hyps, fr, fh)
    ]
    exact = sum(a == b for a, b in zip(fr, fh)) / len(refs) if refs else 0.0
    return EvalReport(cer(refs, hyps, fold_case), wer(refs, hyps, fold_case), len(refs), exact, records)
