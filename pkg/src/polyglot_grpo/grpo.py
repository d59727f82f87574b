"""Group Relative Policy Optimization on the toy policy, driven by the resource-tier curriculum."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .core import TIER_ORDER, BenchInstance, Completion, ResourceTier
from .curriculum import PlateauDetector, ScheduleState, advance, build_phases, sample_batch
from .format_parser import parse_output
from .judge import Judge
from .langid import Scope, language_reward
from .optim import AdamW, cosine_lr
from .policy import (PolicyParams, ToyPrompt, ToyTask, TrainingReport, logprob_and_grad,
                     sample_sequences, sequence_logprobs, to_completion)
from .reward import RewardBreakdown, RewardConfig, score_group

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 16
    lr: float = 1e-6
    warmup_ratio: float = 0.1
    weight_decay: float = 0.1
    batch_prompts: int = 16
    max_steps: int = 500
    clip_eps: float = 0.2
    kl_coeff: float = 0.04
    std_floor: float = 1e-8
    max_prompt_len: int = 1024
    max_completion_len: int = 1024
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2 for non-degenerate advantages")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_coeff < 0 or self.lr < 0 or self.weight_decay < 0:
            raise ValueError("kl_coeff, lr and weight_decay must be >= 0")
        if self.batch_prompts < 1 or self.max_steps < 1:
            raise ValueError("batch_prompts and max_steps must be >= 1")


def toy_profile(**overrides) -> GrpoConfig:
    """Hyperparameters for the desk-scale policy (the full-scale lr is far too small here)."""
    base = GrpoConfig(lr=1e-2, max_completion_len=24, max_prompt_len=8)
    return replace(base, **overrides)


def compute_advantages(rewards: Sequence[float], std_floor: float = 1e-8) -> np.ndarray:
    """Group-normalized rewards: (r - mean) / max(population std, std_floor)."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("advantages need a group of at least 2 rewards")
    # an exactly constant group carries no signal; its float mean can still be off by an ulp
    if r.max() == r.min():
        return np.zeros_like(r)
    centered = r - r.mean()
    std = math.sqrt(float(np.mean(centered * centered)))
    return centered / max(std, std_floor)


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite input to the GRPO objective")


def grpo_objective(new_logprobs, old_logprobs, ref_logprobs, advantages, clip_eps: float = 0.2,
                   kl_coeff: float = 0.04) -> tuple[float, dict]:
    """Clipped surrogate plus KL penalty; diagnostics include d loss / d new_logprobs."""
    new = np.asarray(new_logprobs, dtype=float)
    old = np.asarray(old_logprobs, dtype=float)
    ref = np.asarray(ref_logprobs, dtype=float)
    adv = np.asarray(advantages, dtype=float)
    if not (new.shape == old.shape == ref.shape == adv.shape) or new.ndim != 1 or new.size == 0:
        raise ValueError("GRPO objective inputs must be equal-length non-empty vectors")
    _check_finite(new, old, ref, adv)
    n = new.size
    ratio = np.exp(new - old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv
    surrogate = np.minimum(unclipped, clipped)
    log_r = ref - new
    kl = np.exp(log_r) - log_r - 1
    loss = -surrogate.mean() + kl_coeff * kl.mean()
    # the clipped branch is flat in the ratio, so it passes no gradient
    takes_clip = clipped < unclipped
    d_surr = np.where(takes_clip, 0.0, unclipped)
    grad_new = -d_surr / n + kl_coeff * (1 - np.exp(log_r)) / n
    diag = {
        "mean_ratio": float(ratio.mean()),
        "clip_frac": float(takes_clip.mean()),
        "mean_kl": float(kl.mean()),
        "surrogate": surrogate,
        "kl": kl,
        "grad_new": grad_new,
    }
    return float(loss), diag


@dataclass
class GrpoGroup:
    instance: BenchInstance
    prompt: ToyPrompt
    completions: list[Completion]
    rewards: np.ndarray
    advantages: np.ndarray
    old_logprobs: np.ndarray
    ref_logprobs: np.ndarray
    breakdowns: list[RewardBreakdown] = field(default_factory=list)

    def __post_init__(self):
        g = len(self.completions)
        if not all(len(x) == g for x in (self.rewards, self.advantages, self.old_logprobs, self.ref_logprobs)):
            raise ValueError("GrpoGroup lists must all have the group size")


@dataclass
class StepReport:
    loss: float
    mean_reward: float
    clip_frac: float
    mean_kl: float
    lr: float
    grad_norm: float = 0.0


def flatten(groups: Sequence[GrpoGroup]):
    prompts = [g.prompt for g in groups for _ in g.completions]
    seqs = [c.token_ids for g in groups for c in g.completions]
    old = np.concatenate([g.old_logprobs for g in groups])
    ref = np.concatenate([g.ref_logprobs for g in groups])
    adv = np.concatenate([g.advantages for g in groups])
    return prompts, seqs, old, ref, adv


def objective_and_grad(params: PolicyParams, groups: Sequence[GrpoGroup], config: GrpoConfig):
    """Batch GRPO loss, diagnostics and gradient with respect to the policy weights."""
    prompts, seqs, old, ref, adv = flatten(groups)
    new = sequence_logprobs(params, prompts, seqs)
    loss, diag = grpo_objective(new, old, ref, adv, config.clip_eps, config.kl_coeff)
    _, grad = logprob_and_grad(params, prompts, seqs, diag["grad_new"])
    return loss, diag, grad


def grpo_step(params: PolicyParams, groups: Sequence[GrpoGroup], config: GrpoConfig,
              optimizer: AdamW | None = None, lr: float | None = None) -> tuple[PolicyParams, StepReport]:
    """One optimizer update on all completions of the batch; returns new parameters."""
    lr = config.lr if lr is None else lr
    optimizer = optimizer or AdamW(params.weights.shape, config.beta1, config.beta2,
                                   weight_decay=config.weight_decay)
    loss, diag, grad = objective_and_grad(params, groups, config)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite GRPO gradient")
    new_params = params.copy()
    optimizer.step(new_params.weights, grad, lr)
    rewards = np.concatenate([g.rewards for g in groups])
    return new_params, StepReport(loss, float(rewards.mean()), diag["clip_frac"], diag["mean_kl"], lr,
                                  float(np.linalg.norm(grad)))


# --- training loop ---------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleConfig:
    alpha: float = 0.85
    window: int = 20
    min_delta: float = 0.005
    patience: int = 3
    plateau_metric: str = "composite"  # or "accuracy"


class _Scorer:
    """Reward cache keyed by (instance id, token ids); the policy repeats itself a lot."""

    def __init__(self, reward_config: RewardConfig, judge: Judge):
        self.config = reward_config
        self.judge = judge
        self.cache: dict[tuple[str, tuple[int, ...]], tuple[RewardBreakdown, float]] = {}

    def score(self, instance: BenchInstance, completions: Sequence[Completion]):
        todo, seen = [], set()
        for c in completions:
            k = (instance.id, c.token_ids)
            if k not in self.cache and k not in seen:
                seen.add(k)
                todo.append(c)
        if todo:
            res = score_group(instance, todo, self.config, self.judge)
            if res.errors:
                raise RuntimeError(f"judge errors while scoring {instance.id}: {res.errors[0].error}")
            for c, b in zip(todo, res.breakdowns):
                ans = language_reward(c.text, parse_output(c.text, self.config.strict_order),
                                      instance.language, Scope.ANSWER_ONLY, self.config.threshold)
                self.cache[(instance.id, c.token_ids)] = (b, ans)
        return [self.cache[(instance.id, c.token_ids)] for c in completions]


def _tier_means(values: Sequence[float], tiers: Sequence[ResourceTier]) -> dict[str, float | None]:
    out = {}
    for t in TIER_ORDER:
        vs = [v for v, tt in zip(values, tiers) if tt is t]
        out[t.value] = float(np.mean(vs)) if vs else None
    return out


def _round(x):
    # keeps the report text stable across platforms' last-ulp differences
    return None if x is None else round(float(x), 10)


def train(params: PolicyParams, task: ToyTask, pools: Mapping[ResourceTier, Sequence[BenchInstance]],
          schedule: ScheduleConfig | None = None, reward_config: RewardConfig | None = None,
          config: GrpoConfig | None = None, seed: int = 0, judge: Judge | None = None,
          checkpoint_every: int = 0, checkpoint_fn=None) -> tuple[PolicyParams, TrainingReport]:
    """Curriculum GRPO: sample, score, normalize per group, update, maybe advance phase."""
    schedule = schedule or ScheduleConfig()
    reward_config = reward_config or RewardConfig()
    config = config or toy_profile()
    judge = judge or Judge(reward_config.backend)
    for t in TIER_ORDER:
        if not pools.get(t):
            raise ValueError(f"no training instances for tier {t.value}")

    phases = build_phases(schedule.alpha, config.max_steps)
    state = ScheduleState(phases, PlateauDetector(schedule.window, schedule.min_delta, schedule.patience))
    params = params.copy()
    ref = params.copy()
    opt = AdamW(params.weights.shape, config.beta1, config.beta2, weight_decay=config.weight_decay)
    scorer = _Scorer(reward_config, judge)
    report = TrainingReport()
    vocab = task.vocab
    g = config.group_size

    for step in range(config.max_steps):
        batch = sample_batch(state.phase, pools, config.batch_prompts, [seed, step, 0])
        prompts = [task.prompt(inst) for inst in batch]
        flat_prompts = [p for p in prompts for _ in range(g)]
        draws = sample_sequences(params, flat_prompts, [seed, step, 1], config.max_completion_len, vocab.eos)
        groups: list[GrpoGroup] = []
        tiers, acc, lang, fmt, ans_lang, totals = [], [], [], [], [], []
        for b, (inst, prompt) in enumerate(zip(batch, prompts)):
            comps = [to_completion(vocab, prompt, s, lp) for s, lp in draws[b * g:(b + 1) * g]]
            scored = scorer.score(inst, comps)
            rewards = np.array([br.total for br, _ in scored])
            ref_lp = sequence_logprobs(ref, [prompt] * g, [c.token_ids for c in comps])
            old_lp = np.array([c.logprob_under_sampler for c in comps])
            groups.append(GrpoGroup(inst, prompt, comps, rewards,
                                    compute_advantages(rewards, config.std_floor), old_lp, ref_lp,
                                    [br for br, _ in scored]))
            for br, a in scored:
                tiers.append(inst.language.tier)
                acc.append(br.r_acc)
                lang.append(br.r_lang)
                fmt.append(br.r_fmt)
                ans_lang.append(a)
                totals.append(br.total)

        lr = cosine_lr(step, config.max_steps, config.lr, config.warmup_ratio)
        params, rep = grpo_step(params, groups, config, opt, lr)
        mean_reward = float(np.mean(totals))
        report.add(
            step=step,
            phase=state.phase.index,
            tier=state.phase.new_tier.value,
            loss=_round(rep.loss),
            mean_reward=_round(mean_reward),
            mean_r_acc=_round(np.mean(acc)),
            mean_r_lang=_round(np.mean(lang)),
            mean_r_fmt=_round(np.mean(fmt)),
            clip_frac=_round(rep.clip_frac),
            mean_kl=_round(rep.mean_kl),
            lr=_round(lr),
            tier_reward={k: _round(v) for k, v in _tier_means(totals, tiers).items()},
            tier_answer_lang={k: _round(v) for k, v in _tier_means(ans_lang, tiers).items()},
        )
        if checkpoint_every and checkpoint_fn and (step + 1) % checkpoint_every == 0:
            checkpoint_fn(params, step + 1)

        state.record(np.mean(acc) if schedule.plateau_metric == "accuracy" else mean_reward)
        if not state.is_last and state.should_advance():
            log.info("step %d: entering phase %d", step, state.current + 2)
            state = advance(state)
            ref = params.copy()
    return params, report


def tier_pools(instances: Sequence[BenchInstance]) -> dict[ResourceTier, list[BenchInstance]]:
    pools: dict[ResourceTier, list[BenchInstance]] = {t: [] for t in TIER_ORDER}
    for inst in instances:
        pools[inst.language.tier].append(inst)
    return pools
