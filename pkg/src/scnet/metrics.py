"""Soft-voting accuracy, ANLS, edit distance and the answer-source split."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

from .data import N_REFERENCES, normalize_answer

SOURCES = ("ocr", "vocab", "mixed")


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance, two-row dynamic programme."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls_score(pred: str, gt, threshold: float | None = None) -> float:
    """1 - d(pred, gt) / max(|pred|, |gt|) on normalized strings.

    ``gt`` may be a list of references, in which case the best one counts.
    Two empty strings score 1. With ``threshold`` set, scores below it are 0.
    """
    if not isinstance(gt, str):
        return max((anls_score(pred, g, threshold) for g in gt), default=0.0)
    p, g = normalize_answer(pred), normalize_answer(gt)
    longest = max(len(p), len(g))
    if longest == 0:
        return 1.0
    score = 1.0 - levenshtein(p, g) / longest
    if threshold is not None and score < threshold:
        return 0.0
    return score


@dataclass
class EvalRecord:
    instance_id: str
    prediction: str
    references: list
    source: str  # ocr, vocab or mixed
    padded: bool = False

    def __post_init__(self):
        if len(self.references) != N_REFERENCES:
            raise ValueError(f"{self.instance_id}: expected {N_REFERENCES} references, "
                             f"got {len(self.references)}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown answer source {self.source!r}")
        self.prediction = normalize_answer(self.prediction)
        self.references = [normalize_answer(r) for r in self.references]


def vqa_accuracy(record: EvalRecord) -> float:
    matches = sum(r == record.prediction for r in record.references)
    return min(matches / 3.0, 1.0)


def source_of(per_step_source: list[str]) -> str:
    """Collapse per-word sources to one record tag; empty answers count as vocab."""
    kinds = set(per_step_source)
    if kinds == {"ocr"}:
        return "ocr"
    if len(kinds) > 1:
        return "mixed"
    return "vocab"


def answer_source_split(records) -> dict:
    """Accuracy contributed by vocab-sourced and OCR-sourced (incl. mixed) answers."""
    n = len(records)
    if n == 0:
        return {"vocab_acc": None, "ocr_acc": None, "total_acc": None}
    vocab = ocr = 0.0
    for r in records:
        acc = vqa_accuracy(r)
        if r.source == "vocab":
            vocab += acc
        else:
            ocr += acc
    # total is the sum of the parts so the split is exact in floating point
    return {"vocab_acc": vocab / n, "ocr_acc": ocr / n, "total_acc": vocab / n + ocr / n}


def metrics_report(records, config_hash: str, anls_threshold: float | None = None) -> dict:
    n = len(records)
    split = answer_source_split(records)
    if n == 0:
        acc = anls = None
    else:
        acc = split["total_acc"]
        anls = sum(anls_score(r.prediction, r.references, anls_threshold) for r in records) / n
    return {"accuracy": acc, "anls": anls, "vocab_acc": split["vocab_acc"],
            "ocr_acc": split["ocr_acc"], "n_instances": n, "config_hash": config_hash}


REPORT_FIELDS = ("accuracy", "anls", "vocab_acc", "ocr_acc", "n_instances", "config_hash")


def report_json(report: dict) -> str:
    return json.dumps({k: report[k] for k in REPORT_FIELDS}, sort_keys=True)


def csv_row(report: dict, header: bool = False, extra: dict | None = None) -> str:
    """One CSV line (optionally preceded by the header) for plotting scripts."""
    row = dict(extra or {})
    row.update({k: report[k] for k in REPORT_FIELDS})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
    if header:
        w.writeheader()
    w.writerow({k: "" if v is None else v for k, v in row.items()})
    return buf.getvalue()
