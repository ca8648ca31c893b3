"""Edit-distance metrics and report writers for word recognition."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


@dataclass(frozen=True)
class EditCounts:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def levenshtein(a: str, b: str) -> EditCounts:
    """Unit-cost edit distance turning ``a`` into ``b``, with one backtraced alignment.

    Insertions add characters of ``b``, deletions remove characters of ``a``.
    On the backtrace a free match is taken first; among edits, deletion is
    preferred over substitution, substitution over insertion.
    """
    n, m = len(a), len(b)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        here = d[i][j]
        if i > 0 and j > 0 and a[i - 1] == b[j - 1] and d[i - 1][j - 1] == here:
            i, j = i - 1, j - 1
        elif i > 0 and d[i - 1][j] + 1 == here:
            dels += 1
            i -= 1
        elif i > 0 and j > 0 and d[i - 1][j - 1] + 1 == here:
            subs += 1
            i, j = i - 1, j - 1
        else:
            ins += 1
            j -= 1
    return EditCounts(d[n][m], subs, ins, dels)


Pair = tuple[str, str]  # (prediction, reference)


def _check_refs(pairs: Sequence[Pair]) -> None:
    for k, (_, ref) in enumerate(pairs):
        if not ref:
            raise ValueError(f"pair {k} has an empty reference")


def cer(pairs: Sequence[Pair]) -> float:
    """Character error rate: total edit distance over total reference length."""
    _check_refs(pairs)
    if not pairs:
        return 0.0
    edits = sum(levenshtein(pred, ref).distance for pred, ref in pairs)
    return edits / sum(len(ref) for _, ref in pairs)


def crr(pairs: Sequence[Pair]) -> float:
    return 1.0 - cer(pairs)


def wer(pairs: Sequence[Pair]) -> float:
    """Fraction of single-word samples whose prediction is not an exact match."""
    if not pairs:
        return 0.0
    return sum(pred != ref for pred, ref in pairs) / len(pairs)


def per_length_report(pairs: Iterable[Pair]) -> dict[int, float]:
    """Mean edit distance grouped by reference length."""
    groups: dict[int, list[int]] = defaultdict(list)
    for pred, ref in pairs:
        groups[len(ref)].append(levenshtein(pred, ref).distance)
    return {n: sum(v) / len(v) for n, v in sorted(groups.items())}


CATEGORIES = ("deletion", "substitution", "insertion")


def categorize(prediction: str, reference: str) -> str | None:
    """Error category of one word, or None if it is correct.

    Edits are counted from the reference's point of view: a character the
    recognizer dropped is a deletion, an extra one an insertion.
    """
    if prediction == reference:
        return None
    e = levenshtein(reference, prediction)
    if e.deletions:
        return "deletion"
    if e.substitutions:
        return "substitution"
    return "insertion"


def edit_breakdown(pairs: Iterable[Pair]) -> dict[str, float]:
    counts = dict.fromkeys(CATEGORIES, 0)
    for pred, ref in pairs:
        cat = categorize(pred, ref)
        if cat is not None:
            counts[cat] += 1
    wrong = sum(counts.values())
    if wrong == 0:
        return dict.fromkeys(CATEGORIES, 0.0)
    return {k: v / wrong for k, v in counts.items()}


@dataclass
class MetricsReport:
    cer: float
    wer: float
    crr: float
    n_samples: int
    per_length: dict[int, float] = field(default_factory=dict)
    edit_breakdown: dict[str, float] = field(default_factory=dict)


def evaluate_pairs(pairs: Sequence[Pair]) -> MetricsReport:
    c = cer(pairs)
    return MetricsReport(
        cer=c,
        wer=wer(pairs),
        crr=1.0 - c,
        n_samples=len(pairs),
        per_length=per_length_report(pairs),
        edit_breakdown=edit_breakdown(pairs),
    )


def write_report(report: MetricsReport, out_dir: str | Path, pairs: Sequence[Pair] | None = None) -> None:
    """Write summary.csv, per_length.csv, breakdown.csv and report.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_samples", "cer", "wer", "crr"])
        w.writerow([report.n_samples, repr(report.cer), repr(report.wer), repr(report.crr)])
    with open(out / "per_length.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label_length", "mean_edit_distance"])
        for n, v in report.per_length.items():
            w.writerow([n, repr(v)])
    with open(out / "breakdown.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "fraction"])
        for k in CATEGORIES:
            w.writerow([k, repr(report.edit_breakdown.get(k, 0.0))])
    blob = asdict(report)
    blob["per_length"] = {str(k): v for k, v in report.per_length.items()}
    if pairs is not None:
        blob["pairs"] = [{"prediction": p, "reference": r} for p, r in pairs]
    with open(out / "report.json", "w") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True)
