"""Accuracy verification backends: exact match, lexical overlap and a remote LLM verifier.

Remote calls go through a chat-completion style transport and a content-hash
reply cache (append-only JSONL), so any run can be replayed offline.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import random
import re
import threading
import time
import unicodedata
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .core import ScriptClass

log = logging.getLogger(__name__)

ACCURACY_PROMPT = (
    "You are an expert multilingual medical evaluator. Score the generated response for "
    "correctness and medical validity on a continuous scale from 0.0 to 1.0. Give 1.0 if the "
    "reasoning is clinically sound and semantically correct, even if phrased differently from "
    "the reference. Focus on factual and clinical accuracy rather than wording.\n\n"
    "Question: {question}\n\n"
    "Ground truth answer: {ground_truth}\n\n\n"
    "Generated response: {generated}\n\n"
    "Output only a float between 0.0 and 1.0."
)

LANGUAGE_PROMPT = (
    "You are an expert multilingual medical evaluator. Determine whether the model response is "
    "written entirely in the same language as the question.\n\n"
    "Question language: {language}\n\n"
    "Generated response: {generated}\n\n"
    "Output 1.0 if the language matches exactly; otherwise output 0.0."
)

JUDGE_PROMPT = (
    "<Model Response>\n{response}\n</Model Response>\n\n"
    "<Reference Answer>\n{reference}\n</Reference Answer>\n\n"
    "You are given a model-generated response and a reference answer. \n"
    "Determine whether the model response is correct with respect to the reference.\n"
    'Output "True" if the response is correct and "False" otherwise.'
)

# bumped whenever a template's text changes; part of every cache key
TEMPLATE_VERSIONS = {"accuracy": "acc-v1", "language": "lang-v1", "judge": "judge-v1"}

_FLOAT_RE = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?")


class BackendKind(str, enum.Enum):
    EXACT_MATCH = "ExactMatch"
    LEXICAL_OVERLAP = "LexicalOverlap"
    REMOTE_LLM = "RemoteLLM"


class JudgeError(RuntimeError):
    pass


class RemoteBackendError(JudgeError):
    """Transport failed after all retries."""


class UnparseableReplyError(JudgeError):
    pass


@dataclass(frozen=True)
class VerifierBackend:
    kind: BackendKind = BackendKind.EXACT_MATCH
    endpoint: str | None = None
    model_name: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 10
    max_retries: int = 3
    cache_path: str | None = None
    backoff_base: float = 0.5
    timeout: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "kind", BackendKind(self.kind))
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.kind is BackendKind.REMOTE_LLM:
            if not self.endpoint or not self.model_name:
                raise ValueError("RemoteLLM backend needs endpoint and model_name")
            if self.temperature != 0.0 or self.max_output_tokens != 10:
                raise ValueError("RemoteLLM backend is pinned to temperature=0.0, max_output_tokens=10")

    @property
    def is_remote(self) -> bool:
        return self.kind is BackendKind.REMOTE_LLM


@dataclass(frozen=True)
class JudgeVerdict:
    score: float
    raw_reply: str
    backend: BackendKind
    cached: bool = False


@dataclass
class ItemError:
    index: int
    error: str


@dataclass
class BatchResult:
    verdicts: list[JudgeVerdict | None]
    errors: list[ItemError] = field(default_factory=list)
    remote_calls: int = 0


# --- text normalization and local backends ---------------------------------

def normalize_answer(text: str) -> str:
    text = unicodedata.normalize("NFC", text)
    return " ".join(text.split()).casefold()


_EDGE_PUNCT = ".,;:!?¿¡\"'()[]{}«»“”‘’…。、！？「」（）"


def _dominant_script(text: str) -> ScriptClass | None:
    from .langid import script_histogram

    hist = script_histogram(text)
    return max(hist, key=hist.get) if hist else None


def overlap_tokens(text: str) -> list[str]:
    norm = normalize_answer(text)
    if _dominant_script(norm) in (ScriptClass.JAPANESE_MIXED, ScriptClass.THAI):
        chars = [c for c in norm if not c.isspace() and c not in _EDGE_PUNCT]
        if len(chars) < 2:
            return chars
        return [a + b for a, b in zip(chars, chars[1:])]
    toks = (t.strip(_EDGE_PUNCT) for t in norm.split())
    return [t for t in toks if t]


def exact_match(generated: str, gold: str) -> float:
    return 1.0 if normalize_answer(generated) == normalize_answer(gold) else 0.0


def lexical_overlap(generated: str, gold: str) -> float:
    """Token-level F1 (character bigrams for unsegmented scripts)."""
    pred, ref = overlap_tokens(generated), overlap_tokens(gold)
    if not pred or not ref:
        return 0.0
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(pred), common / len(ref)
    return min(1.0, max(0.0, 2 * precision * recall / (precision + recall)))


def parse_score(reply: str) -> float | None:
    """First float on the first line of ``reply``, or None."""
    first_line = reply.strip().splitlines()[0] if reply.strip() else ""
    m = _FLOAT_RE.search(first_line)
    return float(m.group(0)) if m else None


def clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def parse_bool(reply: str) -> bool | None:
    word = reply.strip().strip('."\'').strip().lower()
    if word == "true":
        return True
    if word == "false":
        return False
    return None


# --- transport and cache -----------------------------------------------------

Transport = Callable[[dict], dict]


def build_request(prompt: str, model: str, temperature: float = 0.0, max_tokens: int = 10) -> dict:
    return {
        "model": model,
        "temperature": temperature,
        "max_tokens": max_tokens,
        "messages": [{"role": "user", "content": prompt}],
    }


def reply_content(response: dict) -> str:
    """First message content of a chat-completion style response."""
    try:
        if "choices" in response:
            return response["choices"][0]["message"]["content"]
        if "message" in response:
            return response["message"]["content"]
        return response["content"]
    except (KeyError, IndexError, TypeError):
        raise JudgeError(f"response has no message content: {str(response)[:200]}") from None


class HttpTransport:
    def __init__(self, endpoint: str, timeout: float = 30.0, headers: dict | None = None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.headers = headers or {}

    def __call__(self, request: dict) -> dict:
        resp = httpx.post(self.endpoint, json=request, timeout=self.timeout, headers=self.headers)
        resp.raise_for_status()
        return resp.json()


class ScriptedTransport:
    """In-process endpoint: ``handler(prompt, request)`` returns the reply text.

    Used for offline tests and for recording replayable transcripts.
    """

    def __init__(self, handler: Callable[[str, dict], str]):
        self.handler = handler
        self.requests: list[dict] = []
        self._lock = threading.Lock()

    def __call__(self, request: dict) -> dict:
        with self._lock:
            self.requests.append(request)
        reply = self.handler(request["messages"][-1]["content"], request)
        return {"choices": [{"message": {"role": "assistant", "content": reply}}]}


def cache_key(*parts: str) -> str:
    blob = json.dumps(list(parts), ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ReplyCache:
    """Append-only JSONL cache of remote replies; one writer at a time."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._entries: dict[str, dict] = {}
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        rec = json.loads(line)
                        self._entries[rec["key"]] = rec

    def get(self, key: str) -> dict | None:
        return self._entries.get(key)

    def put(self, key: str, raw: str, score: float | None = None) -> dict:
        rec = {"key": key, "score": score, "raw": raw,
               "ts": datetime.now(timezone.utc).isoformat(timespec="seconds")}
        with self._lock:
            self._entries[key] = rec
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(rec, ensure_ascii=False) + "\n")
        return rec

    def __len__(self):
        return len(self._entries)


def offline_transport(request: dict) -> dict:
    raise RemoteBackendError("network disabled: reply not found in cache")


# --- remote client ----------------------------------------------------------

class ChatClient:
    """Cached, retrying chat-completion client shared by verifiers, probes and generators."""

    def __init__(self, model_name: str, transport: Transport | None, cache: ReplyCache | None = None,
                 max_retries: int = 3, temperature: float = 0.0, max_tokens: int = 10,
                 backoff_base: float = 0.5, sleep: Callable[[float], None] = time.sleep):
        self.model_name = model_name
        self.transport = transport
        self.cache = cache if cache is not None else ReplyCache()
        self.max_retries = max_retries
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.backoff_base = backoff_base
        self.sleep = sleep
        self._calls_lock = threading.Lock()
        self.remote_calls = 0

    def _call(self, request: dict) -> str:
        last, made = None, 0
        for attempt in range(self.max_retries + 1):
            made = attempt + 1
            try:
                with self._calls_lock:
                    self.remote_calls += 1
                return reply_content(self.transport(request))
            except RemoteBackendError as exc:
                last = exc
                break
            except Exception as exc:  # transport errors of any flavour
                last = exc
                log.warning("remote call failed (attempt %d): %s", attempt + 1, exc)
                if attempt < self.max_retries:
                    self.sleep(self.backoff_base * (2 ** attempt) * (1 + random.random()))
        raise RemoteBackendError(f"remote backend failed after {made} attempt(s): {last}")

    def complete(self, prompt: str, version: str, parse: Callable[[str], object] | None = None,
                 extra: dict | None = None) -> tuple[str, bool]:
        """Cached completion of ``prompt``; re-asks while ``parse`` returns None.

        Returns (raw reply, served from cache).
        """
        key = cache_key(version, self.model_name, prompt, json.dumps(extra or {}, sort_keys=True))
        hit = self.cache.get(key)
        if hit is not None:
            return hit["raw"], True
        if self.transport is None:
            raise RemoteBackendError("no transport configured")
        request = build_request(prompt, self.model_name, self.temperature, self.max_tokens)
        request.update(extra or {})
        attempts = self.max_retries + 1
        raw = ""
        for attempt in range(attempts):
            raw = self._call(request)
            value = parse(raw) if parse is not None else raw
            if value is not None:
                score = float(value) if isinstance(value, (int, float)) and not isinstance(value, bool) else None
                self.cache.put(key, raw, score)
                return raw, False
            log.warning("unparseable reply %r (attempt %d)", raw[:80], attempt + 1)
        raise UnparseableReplyError(f"reply not parseable after {attempts} attempts: {raw[:80]!r}")


# --- the judge ---------------------------------------------------------------

class Judge:
    """Scores answers with one backend. Safe to share across threads."""

    def __init__(self, backend: VerifierBackend, transport: Transport | None = None,
                 cache: ReplyCache | None = None, sleep: Callable[[float], None] = time.sleep):
        self.backend = backend
        if transport is None and backend.is_remote:
            transport = HttpTransport(backend.endpoint, backend.timeout)
        self.client = ChatClient(backend.model_name or "", transport,
                                 cache if cache is not None else ReplyCache(backend.cache_path),
                                 backend.max_retries, backend.temperature, backend.max_output_tokens,
                                 backend.backoff_base, sleep)

    @property
    def cache(self) -> ReplyCache:
        return self.client.cache

    @property
    def remote_calls(self) -> int:
        return self.client.remote_calls

    def complete(self, prompt: str, version: str, parse: Callable[[str], object] | None = None):
        return self.client.complete(prompt, version, parse)

    def _remote_score(self, prompt: str, version: str) -> JudgeVerdict:
        raw, cached = self.complete(prompt, version, parse_score)
        value = parse_score(raw)
        score = clamp01(value)
        if score != value:
            log.warning("verifier score %s outside [0, 1]; clamped to %s", value, score)
        return JudgeVerdict(score, raw, self.backend.kind, cached)

    def score_accuracy(self, question: str, gold: str, generated: str) -> JudgeVerdict:
        for name, text in (("question", question), ("gold", gold), ("generated", generated)):
            if not text or not text.strip():
                raise ValueError(f"{name} text is empty")
        kind = self.backend.kind
        if kind is BackendKind.EXACT_MATCH:
            s = exact_match(generated, gold)
            return JudgeVerdict(s, str(s), kind)
        if kind is BackendKind.LEXICAL_OVERLAP:
            s = lexical_overlap(generated, gold)
            return JudgeVerdict(s, str(s), kind)
        prompt = ACCURACY_PROMPT.format(question=question, ground_truth=gold, generated=generated)
        return self._remote_score(prompt, TEMPLATE_VERSIONS["accuracy"])

    def score_language(self, language: str, generated: str) -> JudgeVerdict:
        """Remote language-consistency verifier (binary score)."""
        if not self.backend.is_remote:
            raise ValueError("the language verifier prompt needs a RemoteLLM backend")
        prompt = LANGUAGE_PROMPT.format(language=language, generated=generated)
        return self._remote_score(prompt, TEMPLATE_VERSIONS["language"])

    def judge_correct(self, question: str, gold: str, generated: str) -> bool:
        kind = self.backend.kind
        if kind is BackendKind.EXACT_MATCH:
            return exact_match(generated, gold) == 1.0
        if kind is not BackendKind.REMOTE_LLM:
            raise ValueError("judge_correct supports RemoteLLM or ExactMatch backends")
        prompt = JUDGE_PROMPT.format(response=generated, reference=gold)
        raw, _ = self.complete(prompt, TEMPLATE_VERSIONS["judge"], parse_bool)
        return bool(parse_bool(raw))

    def verdict_correct(self, question: str, gold: str, generated: str) -> JudgeVerdict:
        """``judge_correct`` wrapped as a verdict (score 1.0 / 0.0) with the raw reply kept."""
        kind = self.backend.kind
        if kind is BackendKind.EXACT_MATCH:
            s = exact_match(generated, gold)
            return JudgeVerdict(s, "True" if s else "False", kind)
        if kind is not BackendKind.REMOTE_LLM:
            raise ValueError("judge_correct supports RemoteLLM or ExactMatch backends")
        prompt = JUDGE_PROMPT.format(response=generated, reference=gold)
        raw, cached = self.complete(prompt, TEMPLATE_VERSIONS["judge"], parse_bool)
        return JudgeVerdict(1.0 if parse_bool(raw) else 0.0, raw, kind, cached)

    def _item_key(self, item: tuple[str, str, str]) -> str:
        q, gold, gen = item
        return cache_key(TEMPLATE_VERSIONS["accuracy"], self.backend.model_name or "", q, gold, gen)

    def score_batch(self, items: Sequence[tuple[str, str, str]],
                    concurrency_limit: int = 4) -> BatchResult:
        """Score (question, gold, generated) triples, preserving input order.

        Identical triples are scored once; per-item failures are collected
        instead of aborting the batch.
        """
        if concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")
        calls_before = self.remote_calls
        first_index: dict[str, int] = {}
        keys = []
        for i, item in enumerate(items):
            k = self._item_key(item)
            keys.append(k)
            first_index.setdefault(k, i)

        results: dict[str, JudgeVerdict | Exception] = {}
        unique = list(first_index.items())

        def run(k_i):
            k, i = k_i
            try:
                return k, self.score_accuracy(*items[i])
            except Exception as exc:
                return k, exc

        if self.backend.is_remote and concurrency_limit > 1 and len(unique) > 1:
            with ThreadPoolExecutor(max_workers=concurrency_limit) as pool:
                for k, res in pool.map(run, unique):
                    results[k] = res
        else:
            for k, res in map(run, unique):
                results[k] = res

        out = BatchResult(verdicts=[], errors=[])
        for i, k in enumerate(keys):
            res = results[k]
            if isinstance(res, Exception):
                out.verdicts.append(None)
                out.errors.append(ItemError(i, f"{type(res).__name__}: {res}"))
                continue
            dup = first_index[k] != i
            if dup and self.backend.is_remote and not res.cached:
                res = JudgeVerdict(res.score, res.raw_reply, res.backend, True)
            out.verdicts.append(res)
        out.remote_calls = self.remote_calls - calls_before
        return out


def score_accuracy(question: str, gold: str, generated: str, backend: VerifierBackend,
                   transport: Transport | None = None) -> JudgeVerdict:
    return Judge(backend, transport).score_accuracy(question, gold, generated)


def judge_correct(question: str, gold: str, generated: str, backend: VerifierBackend,
                  transport: Transport | None = None) -> bool:
    return Judge(backend, transport).judge_correct(question, gold, generated)


def score_batch(items: Sequence[tuple[str, str, str]], backend: VerifierBackend,
                concurrency_limit: int = 4, transport: Transport | None = None) -> BatchResult:
    return Judge(backend, transport).score_batch(items, concurrency_limit)
