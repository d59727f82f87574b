"""Held-out evaluation: logical accuracy (LA) and language consistency (LC) per language."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .core import LANGUAGES, BenchInstance, Language
from .format_parser import parse_output
from .judge import Judge, VerifierBackend
from .langid import DEFAULT_THRESHOLD, Scope, detect_language

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalRecord:
    instance_id: str
    language: Language
    la: bool
    lc: bool
    judge_raw: str = ""
    detector_confidence: float = 0.0
    note: str = ""

    def to_json(self) -> dict:
        d = asdict(self)
        d["language"] = self.language.value
        return d


def _lc_detector(text: str, target: Language, threshold: float) -> tuple[bool, float]:
    if not text or not text.strip():
        return False, 0.0
    det = detect_language(text, threshold, Scope.ANSWER_ONLY)
    return det.language is target and det.confidence >= threshold, det.confidence


def evaluate_one(instance: BenchInstance, output: str | None, judge: Judge,
                 threshold: float = DEFAULT_THRESHOLD, remote_lc: Judge | None = None) -> EvalRecord:
    if output is None:
        log.warning("no output for %s; scored as incorrect", instance.id)
        return EvalRecord(instance.id, instance.language, False, False, "", 0.0, "missing")
    parsed = parse_output(output)
    text = parsed.answer if parsed.well_formed else output
    notes = []
    if not parsed.well_formed:
        notes.append("malformed")

    if remote_lc is not None:
        try:
            v = remote_lc.score_language(instance.language.value, text)
            lc, conf = v.score >= 0.5, v.score
        except Exception as exc:
            lc, conf = False, 0.0
            notes.append(f"language verifier error: {exc}")
    else:
        lc, conf = _lc_detector(text, instance.language, threshold)

    la, raw = False, ""
    if text.strip():
        try:
            verdict = judge.verdict_correct(instance.question, instance.gold_answer, text)
            la, raw = verdict.score == 1.0, verdict.raw_reply
        except Exception as exc:
            notes.append(f"judge error: {type(exc).__name__}: {exc}")
    return EvalRecord(instance.id, instance.language, la, lc, raw, conf, "; ".join(notes))


def evaluate(outputs: Mapping[str, str], testset: Sequence[BenchInstance], judge: Judge | None = None,
             threshold: float = DEFAULT_THRESHOLD, remote_lc: Judge | None = None) -> list[EvalRecord]:
    judge = judge or Judge(VerifierBackend())
    return [evaluate_one(inst, outputs.get(inst.id), judge, threshold, remote_lc) for inst in testset]


@dataclass(frozen=True)
class LanguageRow:
    language: str
    n: int
    la_pct: float
    lc_pct: float


@dataclass(frozen=True)
class Summary:
    rows: tuple[LanguageRow, ...]
    macro: LanguageRow | None


def summarize(records: Sequence[EvalRecord]) -> Summary:
    if not records:
        raise ValueError("cannot summarize an empty record list")
    rows = []
    for lang in LANGUAGES:
        rs = [r for r in records if r.language is lang]
        if not rs:
            continue
        n = len(rs)
        rows.append(LanguageRow(lang.value, n, 100.0 * sum(r.la for r in rs) / n,
                                100.0 * sum(r.lc for r in rs) / n))
    macro = LanguageRow("Macro", sum(r.n for r in rows),
                        sum(r.la_pct for r in rows) / len(rows),
                        sum(r.lc_pct for r in rows) / len(rows))
    return Summary(tuple(rows), macro)


COLUMNS = ("language", "n", "la_pct", "lc_pct")


def _cells(row: LanguageRow) -> list[str]:
    return [row.language, str(row.n), f"{row.la_pct:.2f}", f"{row.lc_pct:.2f}"]


def render(summary: Summary, fmt: str = "markdown") -> str:
    rows = list(summary.rows) + ([summary.macro] if summary.macro and summary.rows else [])
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow(_cells(r))
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| Language | N | Logic (LA %) | Lang (LC %) |", "|---|---:|---:|---:|"]
        for r in rows:
            cells = _cells(r)
            if r is summary.macro:
                cells[0] = "**Macro**"
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def load_outputs(path: str | Path) -> dict[str, str]:
    """Outputs as a JSON object {id: text} or JSON lines {"id"|"instance_id", "output"}."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{") and "\n{" not in stripped.rstrip():
        obj = json.loads(text)
        if "output" not in obj:
            return {str(k): v for k, v in obj.items()}
    out = {}
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec.get("instance_id", rec.get("id"))] = rec["output"]
    return out
