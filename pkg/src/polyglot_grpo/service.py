"""Reward-scoring service for external trainers: HTTP (FastAPI) or line-delimited JSON on stdio."""

from __future__ import annotations

import json
import sys
from dataclasses import replace
from typing import IO

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .core import BenchInstance, Completion, UnknownLanguageError, parse_language
from .format_parser import parse_output
from .judge import Judge, JudgeError
from .langid import Scope
from .reward import RewardConfig, RewardWeights, score_completion


class WeightsModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    acc: float
    lang: float
    fmt: float


class ScoreRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    id: str | None = None
    question: str = Field(min_length=1)
    gold: str = Field(min_length=1)
    output: str
    language: str
    scope: Scope | None = None
    weights: WeightsModel | None = None


class ScoreReply(BaseModel):
    id: str | None = None
    r_acc: float
    r_lang: float
    r_fmt: float
    total: float
    weights: WeightsModel
    diagnostics: dict


class RequestError(ValueError):
    pass


def score_request(req: ScoreRequest, base: RewardConfig, judge: Judge) -> ScoreReply:
    """Score one request; depends only on the payload, the base config and the judge cache."""
    try:
        language = parse_language(req.language)
    except UnknownLanguageError as exc:
        raise RequestError(str(exc)) from None
    config = base
    if req.scope is not None:
        config = replace(config, scope=req.scope)
    if req.weights is not None:
        try:
            config = replace(config, weights=RewardWeights(req.weights.acc, req.weights.lang, req.weights.fmt))
        except ValueError as exc:
            raise RequestError(str(exc)) from None
    inst = BenchInstance("request", language, req.question, (), req.gold)
    b = score_completion(inst, Completion("request", req.output), config, judge)
    diag = parse_output(req.output, config.strict_order).diagnostics()
    diag["scope"] = config.scope.value
    return ScoreReply(id=req.id, r_acc=b.r_acc, r_lang=b.r_lang, r_fmt=b.r_fmt, total=b.total,
                      weights=WeightsModel(**b.weights.to_json()), diagnostics=diag)


def create_app(config: RewardConfig | None = None, judge: Judge | None = None) -> FastAPI:
    config = config or RewardConfig()
    judge = judge or Judge(config.backend)
    app = FastAPI(title="polyglot-grpo reward service")

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/score", response_model=ScoreReply)
    def score(req: ScoreRequest) -> ScoreReply:
        try:
            return score_request(req, config, judge)
        except RequestError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        except JudgeError as exc:
            raise HTTPException(status_code=502, detail=str(exc)) from None

    return app


def serve_stdio(config: RewardConfig, judge: Judge, stdin: IO[str] | None = None,
                stdout: IO[str] | None = None) -> int:
    """One JSON request per input line, one JSON reply per output line; errors reply with {"error": ...}."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        if not line.strip():
            continue
        try:
            req = ScoreRequest.model_validate_json(line)
            reply = score_request(req, config, judge).model_dump(mode="json", exclude_none=True)
        except ValidationError as exc:
            detail = "; ".join(f"{'.'.join(map(str, e['loc'])) or 'request'}: {e['msg']}" for e in exc.errors())
            reply = {"error": "ValidationError", "detail": detail}
        except (ValueError, JudgeError) as exc:
            reply = {"error": type(exc).__name__, "detail": str(exc).splitlines()[0]}
        stdout.write(json.dumps(reply, ensure_ascii=False, sort_keys=True) + "\n")
        stdout.flush()
    return 0
