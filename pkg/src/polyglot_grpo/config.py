"""Run configuration: one YAML/JSON file, namespaced by module, unknown keys rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .curriculum import DEFAULT_ALPHA
from .grpo import GrpoConfig, ScheduleConfig, toy_profile
from .judge import BackendKind, VerifierBackend
from .langid import DEFAULT_THRESHOLD, Scope
from .policy import SftConfig
from .reward import RewardConfig, RewardWeights


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WeightsSection(_Section):
    acc: float = 0.65
    lang: float = 0.30
    fmt: float = 0.05


class RewardSection(_Section):
    weights: WeightsSection = WeightsSection()
    scope: Scope = Scope.FULL_OUTPUT
    strict_order: bool = True
    concurrency: int = Field(4, ge=1)


class LangidSection(_Section):
    threshold: float = Field(DEFAULT_THRESHOLD, gt=0, le=1)


class JudgeSection(_Section):
    kind: BackendKind = BackendKind.EXACT_MATCH
    endpoint: str | None = None
    model_name: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 10
    max_retries: int = Field(3, ge=0)
    cache_path: str | None = None
    backoff_base: float = 0.5
    timeout: float = 30.0


class CurriculumSection(_Section):
    alpha: float = Field(DEFAULT_ALPHA, ge=0, le=1)
    window: int = Field(20, ge=1)
    min_delta: float = Field(0.005, ge=0)
    patience: int = Field(3, ge=1)
    plateau_metric: Literal["composite", "accuracy"] = "composite"


class SftSection(_Section):
    lr: float = Field(1e-5, ge=0)
    epochs: int = Field(3, ge=0)
    batch_size: int = Field(32, ge=1)
    warmup_ratio: float = 0.1
    weight_decay: float = 0.0


class GrpoSection(_Section):
    group_size: int = Field(16, ge=2)
    lr: float = Field(1e-6, ge=0)
    warmup_ratio: float = 0.1
    weight_decay: float = 0.1
    batch_prompts: int = Field(16, ge=1)
    max_steps: int = Field(500, ge=1)
    clip_eps: float = 0.2
    kl_coeff: float = 0.04
    std_floor: float = 1e-8
    max_prompt_len: int = 1024
    max_completion_len: int = 1024


class PolicySection(_Section):
    n_features: int = Field(8192, ge=16)
    temperature: float = Field(1.0, gt=0)
    prior_strength: float = 2.0


class ToySection(_Section):
    keys_high: int = Field(30, ge=5)
    keys_medium: int = Field(25, ge=5)
    keys_low: int = Field(20, ge=5)
    pivot_prob: float = Field(0.5, ge=0, le=1)
    seed: int = 0


class TrainSection(_Section):
    profile: Literal["toy", "full"] = "toy"
    seed: int = 0
    split_seed: int = 0
    checkpoint_every: int = Field(0, ge=0)


class EndpointSection(_Section):
    endpoint: str | None = None
    model_name: str = "model"
    temperature: float = 0.0
    max_tokens: int = 4096
    max_retries: int = Field(3, ge=0)


class PipelineSection(_Section):
    generator: EndpointSection = EndpointSection()
    probes: dict[str, EndpointSection] = {}
    reviewer: EndpointSection = EndpointSection(max_tokens=10)
    converter: EndpointSection = EndpointSection()
    cache_path: str | None = None
    offline: bool = False
    n_questions: int = Field(10, ge=1)
    topics: list[str] = []
    concurrency: int = Field(4, ge=1)
    split_seed: int = 0


class ServiceSection(_Section):
    concurrency: int = Field(8, ge=1)
    host: str = "127.0.0.1"


class EvalSection(_Section):
    lc_verifier: Literal["detector", "remote"] = "detector"


class RunConfig(_Section):
    reward: RewardSection = RewardSection()
    langid: LangidSection = LangidSection()
    judge: JudgeSection = JudgeSection()
    curriculum: CurriculumSection = CurriculumSection()
    sft: SftSection = SftSection()
    grpo: GrpoSection = GrpoSection()
    policy: PolicySection = PolicySection()
    toy: ToySection = ToySection()
    train: TrainSection = TrainSection()
    pipeline: PipelineSection = PipelineSection()
    service: ServiceSection = ServiceSection()
    eval: EvalSection = EvalSection()

    @field_validator("reward")
    @classmethod
    def _weights_sum(cls, v: RewardSection):
        try:
            RewardWeights(v.weights.acc, v.weights.lang, v.weights.fmt)
        except ValueError as exc:
            raise ValueError(str(exc)) from None
        return v

    # --- conversions into module objects -----------------------------------------

    def backend(self) -> VerifierBackend:
        return VerifierBackend(**self.judge.model_dump())

    def reward_config(self) -> RewardConfig:
        w = self.reward.weights
        return RewardConfig(RewardWeights(w.acc, w.lang, w.fmt), self.reward.scope, self.langid.threshold,
                            self.reward.strict_order, self.backend(), self.reward.concurrency)

    def schedule_config(self) -> ScheduleConfig:
        return ScheduleConfig(**self.curriculum.model_dump())

    def sft_config(self) -> SftConfig:
        values = self.sft.model_dump()
        if self.train.profile == "toy" and "lr" not in self.sft.model_fields_set:
            values["lr"] = TOY_SFT_LR
        return SftConfig(**values, seed=self.train.seed)

    def grpo_config(self) -> GrpoConfig:
        values = {k: v for k, v in self.grpo.model_dump().items()}
        if self.train.profile == "toy":
            toy = toy_profile()
            for key in ("lr", "max_completion_len", "max_prompt_len"):
                if key not in self.grpo.model_fields_set:
                    values[key] = getattr(toy, key)
        return GrpoConfig(**values)


TOY_SFT_LR = 0.3


def _set_dotted(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted}: {k} is not a section")
    node[keys[-1]] = value


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            text = p.read_text(encoding="utf-8")
            data = (json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)) or {}
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    for item in overrides or []:
        _set_dotted(data, *parse_override(item))
    try:
        cfg = RunConfig.model_validate(data)
        cfg.backend()
        cfg.grpo_config()
    except (ValidationError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True, allow_unicode=True)
