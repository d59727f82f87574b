"""Offline identification of the 13 target languages.

Two stages: a script histogram decides every language that owns a unique
script; the seven Latin-script languages are then told apart by voting over
signature characters and closed function-word lists shipped in ``data/``.

Each piece of evidence (a listed word or signature character) may belong to
several lists and carries weight 1/len(owners). The winner is the language
with the most weight; its confidence is the share of total weight that is
consistent with it, so shared words like ``la`` support French without
diluting it, while one stray ``da`` barely dents a Vietnamese sentence.
All-caps abbreviations (CT, ECG) are treated like digits and ignored.
"""

from __future__ import annotations

import enum
import re
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .core import LANGUAGES, Language, ScriptClass
from .format_parser import ParsedOutput, strip_tags

DEFAULT_THRESHOLD = 0.90
LATIN_LANGUAGES = tuple(l for l in LANGUAGES if l.script_class is ScriptClass.LATIN_EXTENDED)
DISTRACTORS = ("english",)

_SCRIPT_LANGUAGE = {
    l.script_class: l for l in LANGUAGES if l.script_class is not ScriptClass.LATIN_EXTENDED
}

_ACRONYM = re.compile(r"\b[A-Z][A-Z0-9]*[A-Z][A-Z0-9-]*\b")
_TOKEN_SPLIT = re.compile(r"[\s.,;:!?¿¡\"'’‘()\[\]{}«»“”…—–\-/*%+=<>|0-9]+")


class Scope(str, enum.Enum):
    FULL_OUTPUT = "FullOutput"
    ANSWER_ONLY = "AnswerOnly"


@dataclass(frozen=True)
class LangDetection:
    language: Language | None
    confidence: float
    script_histogram: dict[ScriptClass, float] = field(default_factory=dict)
    scope: Scope = Scope.FULL_OUTPUT
    votes: dict[str, float] = field(default_factory=dict, compare=False)


def _script_of(ch: str) -> ScriptClass | None:
    cp = ord(ch)
    if 0x1200 <= cp <= 0x139F or 0x2D80 <= cp <= 0x2DDF or 0xAB00 <= cp <= 0xAB2F:
        return ScriptClass.ETHIOPIC
    if 0x0980 <= cp <= 0x09FF:
        return ScriptClass.BENGALI
    if 0x0900 <= cp <= 0x097F or 0xA8E0 <= cp <= 0xA8FF:
        return ScriptClass.DEVANAGARI
    if 0x0E00 <= cp <= 0x0E7F:
        return ScriptClass.THAI
    if (0xAC00 <= cp <= 0xD7FF or 0x1100 <= cp <= 0x11FF or 0x3130 <= cp <= 0x318F
            or 0xA960 <= cp <= 0xA97F):
        return ScriptClass.HANGUL
    if 0x3040 <= cp <= 0x30FF or 0x31F0 <= cp <= 0x31FF or 0xFF66 <= cp <= 0xFF9F or cp == 0x3005:
        return ScriptClass.JAPANESE_MIXED
    if 0x4E00 <= cp <= 0x9FFF or 0x3400 <= cp <= 0x4DBF or 0xF900 <= cp <= 0xFAFF:
        return None  # Han: resolved against the rest of the text
    if cp <= 0x024F or 0x0250 <= cp <= 0x02FF or 0x1E00 <= cp <= 0x1EFF:
        return ScriptClass.LATIN_EXTENDED
    return ScriptClass.OTHER


def script_histogram(text: str) -> dict[ScriptClass, float]:
    """Fraction of letter characters per script class (digits, marks, punctuation excluded)."""
    counts: dict[ScriptClass, int] = {}
    han = 0
    for ch in text:
        if not unicodedata.category(ch).startswith("L"):
            continue
        script = _script_of(ch)
        if script is None:
            han += 1
        else:
            counts[script] = counts.get(script, 0) + 1
    if han:
        # Han joins Hangul only when Hangul is present, otherwise it is Japanese
        target = ScriptClass.HANGUL if counts.get(ScriptClass.HANGUL) else ScriptClass.JAPANESE_MIXED
        counts[target] = counts.get(target, 0) + han
    total = sum(counts.values())
    if not total:
        return {}
    return {script: n / total for script, n in counts.items()}


def _read_list(kind: str, name: str) -> list[str]:
    text = resources.files("polyglot_grpo").joinpath("data", kind, f"{name}.txt").read_text("utf-8")
    out = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(unicodedata.normalize("NFC", line).lower())
    return out


@lru_cache(maxsize=None)
def _signatures() -> tuple[dict[str, frozenset], dict[str, frozenset]]:
    """Owner sets for every listed word and signature character."""
    names = [l.value.lower() for l in LATIN_LANGUAGES] + list(DISTRACTORS)
    word_owner: dict[str, set] = {}
    char_owner: dict[str, set] = {}
    for name in names:
        for w in _read_list("stopwords", name):
            word_owner.setdefault(w, set()).add(name)
        if name in DISTRACTORS:
            continue
        for c in _read_list("diacritics", name):
            char_owner.setdefault(c, set()).add(name)
    words = {w: frozenset(o) for w, o in word_owner.items()}
    chars = {c: frozenset(o) for c, o in char_owner.items()}
    return words, chars


def _normalize(text: str) -> str:
    return unicodedata.normalize("NFC", text.replace("İ", "i")).lower()


def drop_abbreviations(text: str) -> str:
    return _ACRONYM.sub(" ", text)


def latin_evidence(text: str) -> list[frozenset]:
    """Owner set of every function word and signature character in ``text``."""
    words, chars = _signatures()
    norm = _normalize(text)
    evidence = [words[tok] for tok in _TOKEN_SPLIT.split(norm) if tok in words]
    evidence.extend(chars[ch] for ch in norm if ch in chars)
    return evidence


def latin_votes(text: str) -> dict[str, float]:
    votes: dict[str, float] = {}
    for owners in latin_evidence(text):
        for name in owners:
            votes[name] = votes.get(name, 0.0) + 1.0 / len(owners)
    return votes


def detect_language(text: str, threshold: float = DEFAULT_THRESHOLD,
                    scope: Scope = Scope.FULL_OUTPUT) -> LangDetection:
    if not text or not text.strip():
        raise ValueError("cannot detect the language of empty text")
    text = drop_abbreviations(text)
    hist = script_histogram(text)
    for script, mass in hist.items():
        if script in _SCRIPT_LANGUAGE and mass >= threshold:
            return LangDetection(_SCRIPT_LANGUAGE[script], mass, hist, scope)

    latin_mass = hist.get(ScriptClass.LATIN_EXTENDED, 0.0)
    evidence = latin_evidence(text) if latin_mass > 0 else []
    votes = latin_votes(text) if evidence else {}
    best_lang, confidence = None, 0.0
    ranked = sorted(((votes.get(l.value.lower(), 0.0), l) for l in LATIN_LANGUAGES),
                    key=lambda p: -p[0])
    if evidence and ranked[0][0] > 0:
        top_score, top = ranked[0]
        name = top.value.lower()
        total = sum(1.0 / len(owners) for owners in evidence)
        confidence = latin_mass * sum(
            1.0 / len(owners) for owners in evidence if name in owners) / total
        if ranked[1][0] == top_score:
            # a tie splits the support between at least two candidates
            confidence *= 0.5
        elif confidence >= threshold:
            best_lang = top
    if best_lang is None:
        # report the strongest evidence seen even though it is below threshold
        non_latin = [m for s, m in hist.items() if s in _SCRIPT_LANGUAGE]
        confidence = max([confidence, *non_latin])
    return LangDetection(best_lang, confidence, hist, scope, votes)


def scoped_text(output: str, parsed: ParsedOutput, scope: Scope) -> str | None:
    if scope is Scope.ANSWER_ONLY:
        return parsed.answer
    return strip_tags(output)


def language_reward(output: str, parsed: ParsedOutput, target: Language,
                    scope: Scope = Scope.FULL_OUTPUT,
                    threshold: float = DEFAULT_THRESHOLD) -> float:
    text = scoped_text(output, parsed, scope)
    if text is None or not text.strip():
        return 0.0
    det = detect_language(text, threshold, scope)
    return 1.0 if det.language is target and det.confidence >= threshold else 0.0
