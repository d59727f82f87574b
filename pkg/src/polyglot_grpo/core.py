"""Shared domain types, the 13-language registry and dataset containers."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ScriptClass(str, enum.Enum):
    ETHIOPIC = "Ethiopic"
    BENGALI = "Bengali"
    DEVANAGARI = "Devanagari"
    JAPANESE_MIXED = "JapaneseMixed"
    HANGUL = "Hangul"
    THAI = "Thai"
    LATIN_EXTENDED = "LatinExtended"
    # histogram-only bucket for letters outside the seven target scripts
    OTHER = "Other"


class ResourceTier(str, enum.Enum):
    HIGH = "High"
    MEDIUM = "Medium"
    LOW = "Low"


class Language(str, enum.Enum):
    AMHARIC = "Amharic"
    BENGALI = "Bengali"
    FRENCH = "French"
    HAUSA = "Hausa"
    HINDI = "Hindi"
    JAPANESE = "Japanese"
    KOREAN = "Korean"
    SPANISH = "Spanish"
    SWAHILI = "Swahili"
    THAI = "Thai"
    TURKISH = "Turkish"
    VIETNAMESE = "Vietnamese"
    YORUBA = "Yoruba"

    @property
    def script_class(self) -> ScriptClass:
        return _SCRIPT[self]

    @property
    def family(self) -> str:
        return _FAMILY[self]

    @property
    def tier(self) -> ResourceTier:
        return _TIER[self]

    @property
    def iso(self) -> str:
        return _ISO[self]


_S, _L = ScriptClass, Language
_SCRIPT = {
    _L.AMHARIC: _S.ETHIOPIC,
    _L.BENGALI: _S.BENGALI,
    _L.HINDI: _S.DEVANAGARI,
    _L.JAPANESE: _S.JAPANESE_MIXED,
    _L.KOREAN: _S.HANGUL,
    _L.THAI: _S.THAI,
    _L.FRENCH: _S.LATIN_EXTENDED,
    _L.SPANISH: _S.LATIN_EXTENDED,
    _L.HAUSA: _S.LATIN_EXTENDED,
    _L.SWAHILI: _S.LATIN_EXTENDED,
    _L.TURKISH: _S.LATIN_EXTENDED,
    _L.VIETNAMESE: _S.LATIN_EXTENDED,
    _L.YORUBA: _S.LATIN_EXTENDED,
}
_FAMILY = {
    _L.AMHARIC: "Afroasiatic",
    _L.HAUSA: "Afroasiatic",
    _L.SWAHILI: "Niger-Congo",
    _L.YORUBA: "Niger-Congo",
    _L.BENGALI: "Indo-European",
    _L.HINDI: "Indo-European",
    _L.FRENCH: "Indo-European",
    _L.SPANISH: "Indo-European",
    _L.TURKISH: "Turkic",
    _L.VIETNAMESE: "Austroasiatic",
    _L.THAI: "Tai-Kadai",
    _L.JAPANESE: "Japonic",
    _L.KOREAN: "Koreanic",
}
_TIER = {
    _L.FRENCH: ResourceTier.HIGH,
    _L.JAPANESE: ResourceTier.HIGH,
    _L.SPANISH: ResourceTier.HIGH,
    _L.VIETNAMESE: ResourceTier.HIGH,
    _L.KOREAN: ResourceTier.MEDIUM,
    _L.THAI: ResourceTier.MEDIUM,
    _L.TURKISH: ResourceTier.MEDIUM,
    _L.BENGALI: ResourceTier.MEDIUM,
    _L.AMHARIC: ResourceTier.LOW,
    _L.YORUBA: ResourceTier.LOW,
    _L.HAUSA: ResourceTier.LOW,
    _L.HINDI: ResourceTier.LOW,
    _L.SWAHILI: ResourceTier.LOW,
}
_ISO = {
    _L.AMHARIC: "am", _L.BENGALI: "bn", _L.FRENCH: "fr", _L.HAUSA: "ha",
    _L.HINDI: "hi", _L.JAPANESE: "ja", _L.KOREAN: "ko", _L.SPANISH: "es",
    _L.SWAHILI: "sw", _L.THAI: "th", _L.TURKISH: "tr", _L.VIETNAMESE: "vi",
    _L.YORUBA: "yo",
}

LANGUAGES: tuple[Language, ...] = tuple(Language)
TIER_ORDER: tuple[ResourceTier, ...] = (ResourceTier.HIGH, ResourceTier.MEDIUM, ResourceTier.LOW)


def languages_in_tier(tier: ResourceTier) -> list[Language]:
    return [lang for lang in LANGUAGES if lang.tier is tier]


def parse_language(code: str) -> Language:
    """Case-sensitive lookup by full language name."""
    try:
        return Language(code)
    except ValueError:
        raise UnknownLanguageError(f"unknown language code {code!r}") from None


class DatasetError(ValueError):
    pass


class SchemaError(DatasetError):
    pass


class DuplicateIdError(DatasetError):
    pass


class UnknownLanguageError(DatasetError):
    pass


@dataclass(frozen=True)
class ReasoningStep:
    text: str
    step_language: Language | None = None


@dataclass(frozen=True)
class BenchInstance:
    id: str
    language: Language
    question: str
    reasoning_steps: tuple[ReasoningStep, ...]
    gold_answer: str
    source_concept: str = ""

    def __post_init__(self):
        if not self.question.strip():
            raise SchemaError(f"instance {self.id!r}: question is empty")
        if not self.gold_answer.strip():
            raise SchemaError(f"instance {self.id!r}: gold_answer is empty")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "language": self.language.value,
            "question": self.question,
            "reasoning_steps": [
                {"text": s.text, "step_language": s.step_language.value if s.step_language else None}
                for s in self.reasoning_steps
            ],
            "gold_answer": self.gold_answer,
            "source_concept": self.source_concept,
        }


@dataclass(frozen=True)
class Completion:
    instance_id: str
    text: str
    logprob_under_sampler: float = 0.0
    token_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.logprob_under_sampler > 0:
            raise ValueError("logprob_under_sampler must be <= 0")


@dataclass(frozen=True)
class DatasetSplit:
    train_sft: tuple[str, ...]
    train_rft: tuple[str, ...]
    test: tuple[str, ...]
    seed: int
    per_language: dict[str, dict[str, int]] = field(default_factory=dict, compare=False)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "train_sft": list(self.train_sft),
            "train_rft": list(self.train_rft),
            "test": list(self.test),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, sort_keys=True)


_RECORD_KEYS = {"id", "language", "question", "reasoning_steps", "gold_answer", "source_concept"}


def instance_from_record(rec: dict, index: int = 0) -> BenchInstance:
    """Validate one dataset record and build a BenchInstance."""
    if not isinstance(rec, dict):
        raise SchemaError(f"record {index}: expected an object")
    keys = set(rec)
    if keys != _RECORD_KEYS:
        missing, extra = sorted(_RECORD_KEYS - keys), sorted(keys - _RECORD_KEYS)
        raise SchemaError(f"record {index}: bad keys (missing={missing}, unexpected={extra})")
    for key in ("id", "language", "question", "gold_answer", "source_concept"):
        if not isinstance(rec[key], str):
            raise SchemaError(f"record {index}: field {key!r} must be a string")
    for key in ("id", "question", "gold_answer"):
        if not rec[key].strip():
            raise SchemaError(f"record {index}: field {key!r} is empty")
    try:
        language = parse_language(rec["language"])
    except UnknownLanguageError as exc:
        raise UnknownLanguageError(f"record {index}: {exc}") from None
    steps_raw = rec["reasoning_steps"]
    if not isinstance(steps_raw, list):
        raise SchemaError(f"record {index}: field 'reasoning_steps' must be an array")
    steps = []
    for j, step in enumerate(steps_raw):
        if not isinstance(step, dict) or set(step) != {"text", "step_language"}:
            raise SchemaError(f"record {index}: field 'reasoning_steps[{j}]' must have keys text, step_language")
        if not isinstance(step["text"], str):
            raise SchemaError(f"record {index}: field 'reasoning_steps[{j}].text' must be a string")
        sl = step["step_language"]
        if sl is not None:
            try:
                sl = parse_language(sl)
            except (UnknownLanguageError, ValueError):
                raise UnknownLanguageError(
                    f"record {index}: field 'reasoning_steps[{j}].step_language' unknown language {sl!r}"
                ) from None
        steps.append(ReasoningStep(step["text"], sl))
    return BenchInstance(
        id=rec["id"],
        language=language,
        question=rec["question"],
        reasoning_steps=tuple(steps),
        gold_answer=rec["gold_answer"],
        source_concept=rec["source_concept"],
    )


def parse_dataset(records: Sequence[dict]) -> list[BenchInstance]:
    if not isinstance(records, list):
        raise SchemaError("dataset must be a JSON array")
    out, seen = [], set()
    for i, rec in enumerate(records):
        inst = instance_from_record(rec, i)
        if inst.id in seen:
            raise DuplicateIdError(f"record {i}: duplicate id {inst.id!r}")
        seen.add(inst.id)
        out.append(inst)
    return out


def load_dataset(path: str | Path) -> list[BenchInstance]:
    with open(path, encoding="utf-8") as f:
        try:
            records = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    return parse_dataset(records)


def dump_dataset(instances: Iterable[BenchInstance], path: str | Path) -> None:
    data = [inst.to_json() for inst in instances]
    Path(path).write_text(json.dumps(data, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


def _fifth(n: int) -> int:
    # round-half-up of 0.2 * n in exact integer arithmetic
    return (2 * n + 5) // 10


def split_sizes(n: int) -> tuple[int, int, int]:
    """(sft, rft, test) sizes for n instances of one language."""
    n_test = _fifth(n)
    n_rft = _fifth(n - n_test)
    return n - n_test - n_rft, n_rft, n_test


def make_splits(dataset: Sequence[BenchInstance], seed: int) -> DatasetSplit:
    """Stratified 80/20 train/test split, then 80/20 SFT/RFT within train."""
    if not dataset:
        raise DatasetError("cannot split an empty dataset")
    by_lang: dict[Language, list[int]] = {}
    for pos, inst in enumerate(dataset):
        by_lang.setdefault(inst.language, []).append(pos)
    too_small = [lang.value for lang, ids in by_lang.items() if len(ids) < 5]
    if too_small:
        raise DatasetError(f"fewer than 5 instances for {', '.join(sorted(too_small))}; cannot stratify")

    sft, rft, test = [], [], []
    per_language = {}
    for lang in LANGUAGES:
        if lang not in by_lang:
            continue
        positions = by_lang[lang]
        rng = np.random.default_rng([seed, LANGUAGES.index(lang)])
        order = rng.permutation(len(positions))
        n_sft, n_rft, n_test = split_sizes(len(positions))
        test_pos = sorted(positions[i] for i in order[:n_test])
        rft_pos = sorted(positions[i] for i in order[n_test:n_test + n_rft])
        sft_pos = sorted(positions[i] for i in order[n_test + n_rft:])
        test.extend(test_pos)
        rft.extend(rft_pos)
        sft.extend(sft_pos)
        per_language[lang.value] = {"train_sft": n_sft, "train_rft": n_rft, "test": n_test}

    def ids(ps):
        return tuple(dataset[p].id for p in sorted(ps))

    return DatasetSplit(ids(sft), ids(rft), ids(test), seed, per_language)


def select(dataset: Sequence[BenchInstance], ids: Iterable[str]) -> list[BenchInstance]:
    index = {inst.id: inst for inst in dataset}
    return [index[i] for i in ids]
