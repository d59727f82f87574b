"""Resource-tier curriculum: High, then High+Medium, then High+Medium+Low.

Each phase keeps a share ``alpha`` of the previous phase's sampling
distribution and gives the rest to the newly introduced tier. Phases advance
when the windowed reward stops improving or the phase's step budget runs out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .core import TIER_ORDER, BenchInstance, Language, ResourceTier

DEFAULT_ALPHA = 0.85


def tier_of(language: Language) -> ResourceTier:
    return Language(language).tier


@dataclass(frozen=True)
class CurriculumPhase:
    index: int
    new_tier: ResourceTier
    alpha: float = DEFAULT_ALPHA
    retained: CurriculumPhase | None = None
    step_budget: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.index < 1 or self.index > len(TIER_ORDER):
            raise ValueError(f"phase index must be in 1..{len(TIER_ORDER)}")
        if TIER_ORDER[self.index - 1] is not self.new_tier:
            raise ValueError(f"phase {self.index} must introduce {TIER_ORDER[self.index - 1].value}")
        if (self.index == 1) != (self.retained is None):
            raise ValueError("only phase 1 has no retained source")
        if self.retained is not None and self.retained.index != self.index - 1:
            raise ValueError("retained source must be the previous phase")


def _exact(x: float) -> Fraction:
    # decimal reading of the float, so 0.85 ** 2 comes out as exactly 0.7225
    return Fraction(repr(float(x)))


def _distribution(phase: CurriculumPhase) -> dict[ResourceTier, Fraction]:
    if phase.retained is None:
        return {phase.new_tier: Fraction(1)}
    a = _exact(phase.alpha)
    dist = {t: a * p for t, p in _distribution(phase.retained).items()}
    dist[phase.new_tier] = dist.get(phase.new_tier, Fraction(0)) + (1 - a)
    return dist


def phase_distribution(phase: CurriculumPhase) -> dict[ResourceTier, float]:
    """Tier sampling probabilities, in tier order."""
    dist = _distribution(phase)
    return {t: float(dist[t]) for t in TIER_ORDER if t in dist}


def build_phases(alpha: float = DEFAULT_ALPHA, total_steps: int = 500) -> list[CurriculumPhase]:
    """Three chained phases with an equal step cap each (the last absorbs any remainder)."""
    cap = total_steps // len(TIER_ORDER)
    phases: list[CurriculumPhase] = []
    prev = None
    for i, tier in enumerate(TIER_ORDER, start=1):
        budget = cap if i < len(TIER_ORDER) else total_steps - cap * (len(TIER_ORDER) - 1)
        prev = CurriculumPhase(i, tier, alpha, prev, budget)
        phases.append(prev)
    return phases


def sample_batch(phase: CurriculumPhase, pools: Mapping[ResourceTier, Sequence[BenchInstance]],
                 batch_size: int, rng_seed) -> list[BenchInstance]:
    """Draw a tier per slot, then an instance from that tier's pool.

    Instances of one tier are taken from a seeded permutation of its pool and
    the permutation is redrawn once exhausted, so a pool is cycled without
    replacement.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    dist = phase_distribution(phase)
    tiers = [t for t, p in dist.items() if p > 0]
    for t in tiers:
        if not pools.get(t):
            raise ValueError(f"pool for tier {t.value} is empty but has probability {dist[t]}")
    rng = np.random.default_rng(rng_seed)
    cum = np.cumsum([dist[t] for t in tiers])
    draws = rng.random(batch_size) * cum[-1]
    chosen = [tiers[int(np.searchsorted(cum, u, side="right"))] for u in draws]
    cursors: dict[ResourceTier, list] = {}
    out = []
    for t in chosen:
        pool = pools[t]
        state = cursors.get(t)
        if state is None or state[1] >= len(pool):
            state = [rng.permutation(len(pool)), 0]
            cursors[t] = state
        out.append(pool[int(state[0][state[1]])])
        state[1] += 1
    return out


@dataclass(frozen=True)
class PlateauDetector:
    window: int = 20
    min_delta: float = 0.005
    patience: int = 3

    def __post_init__(self):
        if self.window < 1 or self.patience < 1 or self.min_delta < 0:
            raise ValueError("plateau detector needs window >= 1, patience >= 1, min_delta >= 0")


def window_means(history: Sequence[float], window: int) -> list[float]:
    """Means of consecutive full windows, aligned to the end of the history."""
    n = len(history) // window
    start = len(history) - n * window
    return [float(np.mean(history[start + k * window:start + (k + 1) * window])) for k in range(n)]


def plateau(history: Sequence[float], detector: PlateauDetector) -> bool:
    w, p = detector.window, detector.patience
    if len(history) < w * (p + 1):
        return False
    means = window_means(history[-w * (p + 1):], w)
    return all(means[k + 1] - means[k] < detector.min_delta for k in range(p))


class CurriculumError(RuntimeError):
    pass


@dataclass
class ScheduleState:
    phases: list[CurriculumPhase]
    detector: PlateauDetector = field(default_factory=PlateauDetector)
    current: int = 0
    history: list[float] = field(default_factory=list)
    steps_in_phase: int = 0

    @property
    def phase(self) -> CurriculumPhase:
        return self.phases[self.current]

    @property
    def is_last(self) -> bool:
        return self.current == len(self.phases) - 1

    def record(self, reward: float) -> None:
        self.history.append(float(reward))
        self.steps_in_phase += 1

    def budget_exhausted(self) -> bool:
        return self.steps_in_phase >= self.phase.step_budget

    def should_advance(self) -> bool:
        return plateau(self.history, self.detector) or self.budget_exhausted()

    def to_json(self) -> dict:
        return {
            "phases": [{"index": ph.index, "new_tier": ph.new_tier.value, "alpha": ph.alpha,
                        "step_budget": ph.step_budget} for ph in self.phases],
            "detector": {"W": self.detector.window, "delta": self.detector.min_delta,
                         "patience": self.detector.patience},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> ScheduleState:
        phases: list[CurriculumPhase] = []
        prev = None
        for rec in sorted(obj["phases"], key=lambda r: r["index"]):
            prev = CurriculumPhase(rec["index"], ResourceTier(rec["new_tier"]), rec["alpha"],
                                   prev, rec["step_budget"])
            phases.append(prev)
        d = obj.get("detector", {})
        det = PlateauDetector(d.get("W", 20), d.get("delta", 0.005), d.get("patience", 3))
        return cls(phases, det)


def advance(state: ScheduleState) -> ScheduleState:
    if state.is_last:
        raise CurriculumError("already in the final phase; no further tier to introduce")
    return ScheduleState(state.phases, state.detector, state.current + 1, [], 0)
