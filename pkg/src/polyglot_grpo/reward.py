"""Weighted composite of accuracy, language-consistency and format rewards."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from .core import BenchInstance, Completion
from .format_parser import format_reward, parse_output
from .judge import ItemError, Judge, VerifierBackend
from .langid import DEFAULT_THRESHOLD, Scope, language_reward

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class RewardWeights:
    acc: float = 0.65
    lang: float = 0.30
    fmt: float = 0.05

    def __post_init__(self):
        ws = (self.acc, self.lang, self.fmt)
        if any(not math.isfinite(w) or w < 0 for w in ws):
            raise ValueError(f"reward weights must be finite and >= 0, got {ws}")
        if abs(sum(ws) - 1.0) > WEIGHT_TOL:
            raise ValueError(f"reward weights must sum to 1, got {sum(ws)!r}")

    def to_json(self) -> dict:
        return {"acc": self.acc, "lang": self.lang, "fmt": self.fmt}


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: float
    r_lang: float
    r_fmt: float
    total: float
    weights: RewardWeights = field(default_factory=RewardWeights)

    def to_json(self) -> dict:
        return {"r_acc": self.r_acc, "r_lang": self.r_lang, "r_fmt": self.r_fmt,
                "total": self.total, "weights": self.weights.to_json()}


def _check_unit(name: str, x: float) -> None:
    if not (0.0 <= x <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {x!r}")


def composite_reward(r_acc: float, r_lang: float, r_fmt: float,
                     weights: RewardWeights | None = None) -> RewardBreakdown:
    w = weights or RewardWeights()
    _check_unit("r_acc", r_acc)
    _check_unit("r_lang", r_lang)
    _check_unit("r_fmt", r_fmt)
    total = w.acc * r_acc + w.lang * r_lang + w.fmt * r_fmt
    # weights summing to 1 within 1e-12 can push a perfect score a hair past 1
    total = min(1.0, max(0.0, total))
    return RewardBreakdown(r_acc, r_lang, r_fmt, total, w)


@dataclass(frozen=True)
class RewardConfig:
    weights: RewardWeights = field(default_factory=RewardWeights)
    scope: Scope = Scope.FULL_OUTPUT
    threshold: float = DEFAULT_THRESHOLD
    strict_order: bool = True
    backend: VerifierBackend = field(default_factory=VerifierBackend)
    concurrency: int = 4


class GroupScores(NamedTuple):
    breakdowns: list[RewardBreakdown | None]
    errors: list[ItemError]


def _local_parts(instance: BenchInstance, text: str, config: RewardConfig):
    parsed = parse_output(text, config.strict_order)
    r_fmt = format_reward(parsed)
    r_lang = language_reward(text, parsed, instance.language, config.scope, config.threshold)
    graded = parsed.answer if parsed.well_formed else text
    return graded, r_lang, r_fmt


def score_completion(instance: BenchInstance, completion: Completion,
                     config: RewardConfig | None = None, judge: Judge | None = None) -> RewardBreakdown:
    config = config or RewardConfig()
    judge = judge or Judge(config.backend)
    graded, r_lang, r_fmt = _local_parts(instance, completion.text, config)
    if graded.strip():
        r_acc = judge.score_accuracy(instance.question, instance.gold_answer, graded).score
    else:
        r_acc = 0.0
    return composite_reward(r_acc, r_lang, r_fmt, config.weights)


def score_group(instance: BenchInstance, completions: Sequence[Completion],
                config: RewardConfig | None = None, judge: Judge | None = None) -> GroupScores:
    if not completions:
        raise ValueError("score_group needs at least one completion")
    config = config or RewardConfig()
    judge = judge or Judge(config.backend)
    local = [_local_parts(instance, c.text, config) for c in completions]
    todo = [i for i, (graded, _, _) in enumerate(local) if graded.strip()]
    batch = judge.score_batch([(instance.question, instance.gold_answer, local[i][0]) for i in todo],
                              config.concurrency) if todo else None
    acc: dict[int, float | None] = {i: 0.0 for i in range(len(local))}
    errors: list[ItemError] = []
    if batch is not None:
        for pos, i in enumerate(todo):
            v = batch.verdicts[pos]
            acc[i] = None if v is None else v.score
        errors = [ItemError(todo[e.index], e.error) for e in batch.errors]
    out: list[RewardBreakdown | None] = []
    for i, (_, r_lang, r_fmt) in enumerate(local):
        out.append(None if acc[i] is None else composite_reward(acc[i], r_lang, r_fmt, config.weights))
    return GroupScores(out, errors)
