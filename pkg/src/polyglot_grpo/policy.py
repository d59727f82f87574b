"""Desk-scale generative policy: a hashed-feature log-linear model over a small vocabulary.

The next-token distribution at position t is softmax(W^T phi_t / T), where
phi_t is a sparse 0/1 vector of hashed features of (language, question key,
previous token, position). Log-probabilities and their gradients are exact,
which makes every optimizer in this package finite-difference checkable.

The toy task mirrors the code-switched cold-start data: each gold output has
two reasoning steps, each written either in the target language or in an
English pivot, followed by an answer that is always in the target language.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .core import LANGUAGES, BenchInstance, Completion, Language, ReasoningStep, ResourceTier
from .optim import AdamW, cosine_lr

EOS = "<eos>"
PIVOT = "English"
MAX_STEPS = 4
STRUCTURAL = (
    ["<thinking>", "</thinking>", "<answer>", "</answer>"]
    + [tag for i in range(1, MAX_STEPS + 1) for tag in (f"<step {i}>", f"</step {i}>")]
    + [EOS]
)
CHECKPOINT_VERSION = 1
N_FEATURES = 5


# --- vocabulary --------------------------------------------------------------

@lru_cache(maxsize=None)
def load_lexicon() -> dict:
    text = resources.files("polyglot_grpo").joinpath("data", "toy_lexicon.json").read_text("utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class Lexeme:
    language: str  # a target language name or the pivot
    role: str  # "frame", "concept" or "filler"
    index: int


class ToyVocab:
    """Dense token ids: structural tags first, then lexemes grouped by language."""

    def __init__(self, lexicon: dict | None = None):
        lexicon = lexicon or load_lexicon()
        self.tokens: list[str] = list(STRUCTURAL)
        self.lexemes: dict[int, Lexeme] = {}
        self.concept_names: list[str] = list(lexicon["concepts"])
        self._by_role: dict[tuple[str, str, int], int] = {}
        for lang in [PIVOT] + [l.value for l in LANGUAGES]:
            entry = lexicon["languages"][lang]
            items = [("frame", 0, entry["frame"])]
            items += [("concept", i, c) for i, c in enumerate(entry["concepts"])]
            items += [("filler", i, f) for i, f in enumerate(entry["fillers"])]
            for role, i, text in items:
                tid = len(self.tokens)
                self.tokens.append(text)
                self.lexemes[tid] = Lexeme(lang, role, i)
                self._by_role[(lang, role, i)] = tid
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token strings in the lexicon")
        self.eos = self.index[EOS]
        self.n_fillers = len(lexicon["languages"][PIVOT]["fillers"])

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.tokens, ensure_ascii=False).encode()).hexdigest()

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise KeyError(f"unknown token {token!r}") from None

    def lexeme(self, language: str, role: str, index: int = 0) -> int:
        return self._by_role[(language, role, index)]

    def is_structural(self, tid: int) -> bool:
        return tid < len(STRUCTURAL)

    def detokenize(self, ids: Sequence[int]) -> str:
        """Scaffold text; tags are glued, adjacent lexemes separated by one space."""
        out = ""
        for tid in ids:
            tid = int(tid)
            if tid == self.eos:
                break
            tok = self.tokens[tid]
            if not self.is_structural(tid) and out and not out.endswith(">"):
                out += " "
            out += tok
        return out


# --- toy task ------------------------------------------------------------------

DEFAULT_KEYS = {ResourceTier.HIGH: 30, ResourceTier.MEDIUM: 25, ResourceTier.LOW: 20}


@dataclass(frozen=True)
class ToyPrompt:
    lang: int  # index into LANGUAGES
    key: int
    instance_id: str = ""


class ToyTask:
    """Template bank of (language, question key) prompts with code-switched gold outputs."""

    def __init__(self, vocab: ToyVocab | None = None, keys_per_tier: dict | None = None,
                 pivot_prob: float = 0.5, n_steps: int = 2, seed: int = 0):
        if not 1 <= n_steps <= min(MAX_STEPS, 2):
            raise ValueError("n_steps must be 1 or 2 (one filler lexeme per step)")
        self.vocab = vocab or ToyVocab()
        self.keys_per_tier = {ResourceTier(k): v for k, v in (keys_per_tier or DEFAULT_KEYS).items()}
        self.pivot_prob = pivot_prob
        self.n_steps = n_steps
        self.seed = seed
        self._gold: dict[str, tuple[int, ...]] = {}
        self._prompts: dict[str, ToyPrompt] = {}
        self._instances: list[BenchInstance] = []
        self._build()

    @staticmethod
    def instance_id(language: Language, key: int) -> str:
        return f"toy-{language.iso}-{key:03d}"

    def _build(self) -> None:
        v = self.vocab
        n_concepts = len(v.concept_names)
        for li, lang in enumerate(LANGUAGES):
            rng = np.random.default_rng([self.seed, li])
            n_keys = self.keys_per_tier[lang.tier]
            concepts = rng.integers(0, n_concepts, size=n_keys)
            pivots = rng.random((n_keys, self.n_steps)) < self.pivot_prob
            for key in range(n_keys):
                iid = self.instance_id(lang, key)
                ids = [v.id("<thinking>")]
                steps = []
                for s in range(self.n_steps):
                    step_lang = PIVOT if pivots[key, s] else lang.value
                    filler = v.lexeme(step_lang, "filler", s)
                    ids += [v.id(f"<step {s + 1}>"), filler, v.id(f"</step {s + 1}>")]
                    steps.append(ReasoningStep(v.tokens[filler], None if step_lang == PIVOT else lang))
                answer = [v.lexeme(lang.value, "frame"), v.lexeme(lang.value, "concept", int(concepts[key]))]
                ids += [v.id("</thinking>"), v.id("<answer>"), *answer, v.id("</answer>"), v.eos]
                self._gold[iid] = tuple(ids)
                self._prompts[iid] = ToyPrompt(li, key, iid)
                self._instances.append(BenchInstance(
                    id=iid,
                    language=lang,
                    question=f"{lang.value} case {key}",
                    reasoning_steps=tuple(steps),
                    gold_answer=v.detokenize(answer),
                    source_concept=v.concept_names[int(concepts[key])],
                ))

    def instances(self) -> list[BenchInstance]:
        return list(self._instances)

    def prompt(self, instance: BenchInstance | str) -> ToyPrompt:
        iid = instance if isinstance(instance, str) else instance.id
        try:
            return self._prompts[iid]
        except KeyError:
            raise KeyError(f"{iid!r} is not a toy-task instance") from None

    def gold_tokens(self, instance: BenchInstance | str) -> tuple[int, ...]:
        iid = instance if isinstance(instance, str) else instance.id
        return self._gold[iid]

    def gold_text(self, instance: BenchInstance | str) -> str:
        return self.vocab.detokenize(self.gold_tokens(instance))


# --- parameters and features -------------------------------------------------------

@dataclass
class PolicyParams:
    weights: np.ndarray  # F x V
    temperature: float = 1.0
    vocab_digest: str = ""

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("policy temperature must be > 0")

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> PolicyParams:
        return PolicyParams(self.weights.copy(), self.temperature, self.vocab_digest)


def init_params(vocab: ToyVocab, n_features: int = 8192, temperature: float = 1.0) -> PolicyParams:
    return PolicyParams(np.zeros((n_features, len(vocab))), temperature, vocab.digest)


_U = np.uint64


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + _U(0x9E3779B97F4A7C15)
        x = (x ^ (x >> _U(30))) * _U(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> _U(27))) * _U(0x94D049BB133111EB)
    return x ^ (x >> _U(31))


def feature_ids(lang, key, prev, pos, n_features: int) -> np.ndarray:
    """(N, 5) hashed feature indices: bias, prev, (lang, prev), (lang, key, prev), position."""
    lang = np.asarray(lang, dtype=np.uint64) + _U(1)
    key = np.asarray(key, dtype=np.uint64) + _U(1)
    prev = np.asarray(prev, dtype=np.uint64) + _U(1)
    pos = np.asarray(pos, dtype=np.uint64)
    zero = np.zeros_like(prev)
    codes = np.stack([
        zero,
        (_U(1) << _U(56)) | (prev << _U(12)),
        (_U(2) << _U(56)) | (lang << _U(48)) | (prev << _U(12)),
        (_U(3) << _U(56)) | (lang << _U(48)) | (key << _U(28)) | (prev << _U(12)),
        (_U(4) << _U(56)) | pos,
    ], axis=1)
    return (_splitmix(codes) % _U(n_features)).astype(np.int64)


@dataclass
class Positions:
    """Every scored position of a batch of (prompt, token sequence) pairs."""

    feats: np.ndarray  # (R, 5)
    targets: np.ndarray  # (R,)
    seq: np.ndarray  # (R,) owning sequence
    n_seqs: int

    def design(self, n_features: int) -> sp.csr_matrix:
        r = len(self.targets)
        rows = np.repeat(np.arange(r), self.feats.shape[1])
        return sp.csr_matrix((np.ones(rows.size), (rows, self.feats.ravel())), shape=(r, n_features))


def positions(prompts: Sequence[ToyPrompt], seqs: Sequence[Sequence[int]], n_features: int,
              bos: int) -> Positions:
    lang, key, prev, pos, tgt, owner = [], [], [], [], [], []
    for j, (p, s) in enumerate(zip(prompts, seqs)):
        s = list(s)
        if not s:
            continue
        lang += [p.lang] * len(s)
        key += [p.key] * len(s)
        prev += [bos] + s[:-1]
        pos += range(len(s))
        tgt += s
        owner += [j] * len(s)
    feats = (feature_ids(lang, key, prev, pos, n_features) if tgt
             else np.zeros((0, N_FEATURES), dtype=np.int64))
    return Positions(feats, np.asarray(tgt, dtype=np.int64), np.asarray(owner, dtype=np.int64), len(seqs))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(params: PolicyParams, feats: np.ndarray) -> np.ndarray:
    return params.weights[feats].sum(axis=1) / params.temperature


def _check_tokens(params: PolicyParams, seqs) -> None:
    v = params.vocab_size
    for s in seqs:
        for t in s:
            if not 0 <= int(t) < v:
                raise KeyError(f"unknown token id {t}")


def sequence_logprobs(params: PolicyParams, prompts: Sequence[ToyPrompt],
                      seqs: Sequence[Sequence[int]]) -> np.ndarray:
    _check_tokens(params, seqs)
    pos = positions(prompts, seqs, params.n_features, params.vocab_size)
    out = np.zeros(len(seqs))
    if len(pos.targets):
        lp = _log_softmax(logits(params, pos.feats))
        np.add.at(out, pos.seq, lp[np.arange(len(pos.targets)), pos.targets])
    return out


def logprob(params: PolicyParams, prompt: ToyPrompt, tokens: Sequence[int]) -> float:
    """Exact log-probability (nats) of ``tokens`` as a continuation of ``prompt``."""
    return float(sequence_logprobs(params, [prompt], [tokens])[0])


def logprob_and_grad(params: PolicyParams, prompts: Sequence[ToyPrompt], seqs: Sequence[Sequence[int]],
                     coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sequence log-probs and the gradient of sum_j coeffs[j] * logp_j w.r.t. the weights."""
    _check_tokens(params, seqs)
    pos = positions(prompts, seqs, params.n_features, params.vocab_size)
    values = np.zeros(len(seqs))
    grad = np.zeros_like(params.weights)
    r = len(pos.targets)
    if not r:
        return values, grad
    lp = _log_softmax(logits(params, pos.feats))
    rows = np.arange(r)
    np.add.at(values, pos.seq, lp[rows, pos.targets])
    c = np.asarray(coeffs, dtype=float)[pos.seq]
    delta = -np.exp(lp)
    delta[rows, pos.targets] += 1.0
    delta *= (c / params.temperature)[:, None]
    grad += pos.design(params.n_features).T @ delta
    return values, grad


def next_token_probs(params: PolicyParams, prompt: ToyPrompt, prefix: Sequence[int]) -> np.ndarray:
    prev = prefix[-1] if prefix else params.vocab_size
    f = feature_ids([prompt.lang], [prompt.key], [prev], [len(prefix)], params.n_features)
    return np.exp(_log_softmax(logits(params, f)))[0]


# --- sampling ------------------------------------------------------------------

def sample_sequences(params: PolicyParams, prompts: Sequence[ToyPrompt], rng_seed, max_len: int,
                     eos: int, temperature: float | None = None) -> list[tuple[tuple[int, ...], float]]:
    """Ancestral sampling for a batch of prompts, one sequence each.

    Returns (token ids including the end token when reached, sampler log-prob).
    ``temperature=0`` decodes greedily and reports log-prob 0.
    """
    temp = params.temperature if temperature is None else temperature
    n = len(prompts)
    rng = np.random.default_rng(rng_seed)
    lang = np.array([p.lang for p in prompts])
    key = np.array([p.key for p in prompts])
    prev = np.full(n, params.vocab_size)
    alive = np.ones(n, dtype=bool)
    seqs: list[list[int]] = [[] for _ in range(n)]
    lps = np.zeros(n)
    for t in range(max_len):
        idx = np.flatnonzero(alive)
        if not idx.size:
            break
        f = feature_ids(lang[idx], key[idx], prev[idx], np.full(idx.size, t), params.n_features)
        z = params.weights[f].sum(axis=1)
        if temp == 0:
            tok = z.argmax(axis=1)
        else:
            lp = _log_softmax(z / temp)
            cdf = np.cumsum(np.exp(lp), axis=1)
            u = rng.random(idx.size) * cdf[:, -1]
            tok = np.minimum((cdf < u[:, None]).sum(axis=1), z.shape[1] - 1)
            lps[idx] += lp[np.arange(idx.size), tok]
        for i, tk in zip(idx, tok):
            seqs[i].append(int(tk))
        prev[idx] = tok
        alive[idx[tok == eos]] = False
    return [(tuple(s), float(l)) for s, l in zip(seqs, lps)]


def to_completion(vocab: ToyVocab, prompt: ToyPrompt, seq: Sequence[int], lp: float) -> Completion:
    return Completion(prompt.instance_id, vocab.detokenize(seq), min(0.0, lp), tuple(seq))


def sample_k(params: PolicyParams, vocab: ToyVocab, prompt: ToyPrompt, group_size: int, rng_seed,
             max_len: int = 24, temperature: float | None = None) -> list[Completion]:
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    draws = sample_sequences(params, [prompt] * group_size, rng_seed, max_len, vocab.eos, temperature)
    return [to_completion(vocab, prompt, s, lp) for s, lp in draws]


def greedy_decode(params: PolicyParams, vocab: ToyVocab, prompts: Sequence[ToyPrompt],
                  max_len: int = 24) -> list[str]:
    draws = sample_sequences(params, prompts, 0, max_len, vocab.eos, temperature=0.0)
    return [vocab.detokenize(s) for s, _ in draws]


# --- checkpoints -------------------------------------------------------------------

def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    with open(path, "wb") as f:
        np.savez(f, weights=params.weights, temperature=params.temperature,
                 vocab_digest=params.vocab_digest, version=CHECKPOINT_VERSION)


def load_checkpoint(path: str | Path, vocab: ToyVocab) -> PolicyParams:
    with np.load(path) as data:
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(data['version'])}")
        digest = str(data["vocab_digest"])
        if digest != vocab.digest:
            raise ValueError("checkpoint vocabulary does not match the current vocabulary")
        weights = data["weights"]
        if weights.shape[1] != len(vocab):
            raise ValueError("checkpoint vocabulary size mismatch")
        return PolicyParams(weights.copy(), float(data["temperature"]), digest)


# --- English-centric starting point ------------------------------------------------

def english_centric_init(vocab: ToyVocab, n_features: int = 8192, strength: float = 2.0,
                         temperature: float = 1.0) -> PolicyParams:
    """Stand-in for an English-dominant pretrained model.

    The language-independent (previous-token) features prefer the English
    pivot lexemes, so before fine-tuning every language drifts into English
    reasoning and English answers.
    """
    params = init_params(vocab, n_features, temperature)
    w = params.weights

    def bump(prev_token: int, target: int, amount: float):
        f = feature_ids([0], [0], [prev_token], [0], n_features)[0, 1]
        w[f, target] += amount

    for s in range(vocab.n_fillers):
        bump(vocab.id(f"<step {s + 1}>"), vocab.lexeme(PIVOT, "filler", s), strength)
    bump(vocab.id("<answer>"), vocab.lexeme(PIVOT, "frame"), strength)
    for c in range(len(vocab.concept_names)):
        bump(vocab.lexeme(PIVOT, "frame"), vocab.lexeme(PIVOT, "concept", c), strength)
    return params


# --- supervised fine-tuning ------------------------------------------------------

@dataclass
class TrainingReport:
    records: list[dict] = field(default_factory=list)

    def add(self, **rec) -> None:
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SftConfig:
    lr: float = 0.1  # the toy profile; large models use 1e-5
    epochs: int = 3
    batch_size: int = 32
    warmup_ratio: float = 0.1
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    full_batch: bool = False


def mean_nll(params: PolicyParams, prompts, seqs) -> tuple[float, float]:
    """(mean NLL per sequence, mean NLL per token)."""
    lp = sequence_logprobs(params, prompts, seqs)
    n_tokens = sum(len(s) for s in seqs)
    return float(-lp.mean()), float(-lp.sum() / max(1, n_tokens))


def sft_fit(params: PolicyParams, task: ToyTask, instances: Sequence[BenchInstance],
            config: SftConfig | None = None) -> tuple[PolicyParams, TrainingReport]:
    """Maximize the likelihood of the gold code-switched trajectories."""
    config = config or SftConfig()
    if not instances:
        raise ValueError("sft_fit needs at least one instance")
    if config.epochs < 0 or config.batch_size < 1:
        raise ValueError("invalid SFT configuration")
    params = params.copy()
    prompts = [task.prompt(i) for i in instances]
    seqs = [task.gold_tokens(i) for i in instances]
    n = len(instances)
    bs = n if config.full_batch else min(config.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total = per_epoch * config.epochs
    opt = AdamW(params.weights.shape, config.beta1, config.beta2, weight_decay=config.weight_decay)
    report = TrainingReport()
    nll, nll_tok = mean_nll(params, prompts, seqs)
    report.add(epoch=0, step=0, nll=nll, nll_per_token=nll_tok, lr=0.0)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        for b in range(per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            coeffs = np.full(len(idx), -1.0 / len(idx))
            _, grad = logprob_and_grad(params, [prompts[i] for i in idx], [seqs[i] for i in idx], coeffs)
            lr = cosine_lr(step, total, config.lr, config.warmup_ratio)
            opt.step(params.weights, grad, lr)
            step += 1
        nll, nll_tok = mean_nll(params, prompts, seqs)
        if not math.isfinite(nll):
            raise FloatingPointError(f"SFT diverged at epoch {epoch}")
        report.add(epoch=epoch, step=step, nll=nll, nll_per_token=nll_tok, lr=lr)
    return params, report
