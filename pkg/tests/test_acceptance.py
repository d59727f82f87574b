"""Acceptance suite: one test per criterion, each with its tolerance and runtime limit.

Run ``pytest tests/test_acceptance.py`` to get one PASS/FAIL line per criterion in the
"acceptance criteria" section of the terminal summary.
"""

from __future__ import annotations

import csv
import filecmp
import hashlib
import io
import json
import math
import time
from collections import Counter
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest

import eval_fixture as ef
import replay_fixture as rf
from conftest import load_fixture
from gradcheck import REL_TOL, active_coordinates, finite_difference, random_instance, relative_error
from polyglot_grpo import cli, grpo, policy
from polyglot_grpo.config import TOY_SFT_LR
from polyglot_grpo.core import (
    LANGUAGES,
    BenchInstance,
    Completion,
    Language,
    ResourceTier,
    ScriptClass,
    make_splits,
    select,
)
from polyglot_grpo.curriculum import (
    PlateauDetector,
    build_phases,
    phase_distribution,
    plateau,
    sample_batch,
)
from polyglot_grpo.evalrep import render, summarize
from polyglot_grpo.format_parser import format_reward, parse_output
from polyglot_grpo.grpo import GrpoConfig, GrpoGroup, compute_advantages, objective_and_grad
from polyglot_grpo.langid import Scope, detect_language, language_reward
from polyglot_grpo.policy import logprob_and_grad, sequence_logprobs
from polyglot_grpo.reward import RewardWeights, composite_reward

H, M, L = ResourceTier.HIGH, ResourceTier.MEDIUM, ResourceTier.LOW


class Timer:
    def __init__(self, limit: float):
        self.limit = limit

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start

    def check(self, request):
        request.node.user_properties.append(("detail", f"{self.elapsed:.2f}s of {self.limit:g}s"))
        assert self.elapsed < self.limit, f"took {self.elapsed:.2f}s, limit {self.limit}s"


def detail(request, text: str) -> None:
    request.node.user_properties.append(("detail", text))


# --- 1 -----------------------------------------------------------------------------------

@pytest.mark.criterion(1, "composite reward exactness")
def test_criterion_01_composite_reward(request):
    rng = np.random.default_rng(1)
    with Timer(1.0) as t:
        triples = rng.random((1000, 3))
        triples[::10] = np.round(triples[::10])
        worst = 0.0
        for a, l, f in triples:
            ref = math.fsum([0.65 * a, 0.30 * l, 0.05 * f])
            worst = max(worst, abs(composite_reward(a, l, f).total - ref))
        for a, l, f in triples[:200]:
            assert composite_reward(a, l, f, RewardWeights(1, 0, 0)).total == a
            assert composite_reward(a, l, f, RewardWeights(0, 1, 0)).total == l
            assert composite_reward(a, l, f, RewardWeights(0, 0, 1)).total == f
    detail(request, f"max |error| {worst:.1e}")
    assert worst <= 1e-12
    t.check(request)


# --- 2 -----------------------------------------------------------------------------------

MODULE_EXAMPLES = [
    ("<thinking>a</thinking><answer>b</answer>", True, {"thinking_count": 1, "steps": []}),
    ("<answer>b</answer>", False, {"thinking_count": 0}),
    ("<thinking>x</thinking><thinking>y</thinking><answer>z</answer>", False, {"thinking_count": 2}),
    ("<thinking>line1\nline2</thinking><answer>ok</answer>", True, {"thinking": "line1\nline2"}),
]


@pytest.mark.criterion(2, "format parser fixture suite")
def test_criterion_02_format_parser(request):
    cases = load_fixture("format_cases.json")
    with Timer(1.0) as t:
        wrong = [c["name"] for c in cases if format_reward(parse_output(c["text"], c["strict_order"])) != c["reward"]]
        for text, ok, fields in MODULE_EXAMPLES:
            parsed = parse_output(text)
            assert parsed.well_formed is ok and format_reward(parsed) == float(ok)
            for key, value in fields.items():
                got = parsed.steps if key == "steps" else getattr(parsed, key)
                assert (list(got) if key == "steps" else got) == value
    detail(request, f"{len(cases) - len(wrong)}/{len(cases)} cases + {len(MODULE_EXAMPLES)} module examples")
    assert len(cases) >= 30 and not wrong, wrong
    t.check(request)


# --- 3 -----------------------------------------------------------------------------------

@pytest.mark.criterion(3, "language ID fixture accuracy")
def test_criterion_03_langid(request):
    corpus = load_fixture("langid_corpus.jsonl")
    french = load_fixture("codeswitch_french.json")
    with Timer(5.0) as t:
        hits = {True: [0, 0], False: [0, 0]}
        per_language = Counter()
        for row in corpus:
            lang = Language(row["language"])
            got = detect_language(row["text"]).language
            latin = lang.script_class is ScriptClass.LATIN_EXTENDED
            hits[latin][0] += got is lang
            hits[latin][1] += 1
            per_language[lang.value] += got is not lang
        parsed = parse_output(french["output"])
        full = language_reward(french["output"], parsed, Language.FRENCH, Scope.FULL_OUTPUT)
        answer = language_reward(french["output"], parsed, Language.FRENCH, Scope.ANSWER_ONLY)
    non_latin = hits[False][0] / hits[False][1]
    latin = hits[True][0] / hits[True][1]
    misses = ", ".join(f"{k} {v}" for k, v in sorted(per_language.items()) if v) or "none"
    detail(request, f"non-Latin {100 * non_latin:.1f}%, Latin {100 * latin:.1f}% (misses: {misses})")
    assert all(sum(r["language"] == lang.value for r in corpus) >= 20 for lang in LANGUAGES)
    assert non_latin >= 0.99 and latin >= 0.95
    assert (full, answer) == (0.0, 1.0)
    t.check(request)


# --- 4 -----------------------------------------------------------------------------------

@pytest.mark.criterion(4, "advantage normalization")
def test_criterion_04_advantages(request):
    rng = np.random.default_rng(4)
    levels = np.array([0.0, 0.05, 0.35, 0.65, 0.7, 1.0])
    with Timer(5.0) as t:
        worst_mean = worst_std = worst_affine = 0.0
        constant = 0
        for k in range(10_000):
            g = int(rng.integers(2, 65))
            r = rng.random(g) if k % 2 else rng.choice(levels, g)
            a = compute_advantages(r)
            if np.ptp(r) == 0:
                constant += 1
                assert not a.any()
                continue
            worst_mean = max(worst_mean, abs(a.mean()))
            worst_std = max(worst_std, abs(a.std() - 1))
            scale, shift = rng.uniform(0.1, 10), rng.uniform(-5, 5)
            worst_affine = max(worst_affine, np.abs(compute_advantages(scale * r + shift) - a).max())
        for g in (2, 16, 64):
            for v in (0.0, 0.37, 1.0):
                assert not compute_advantages(np.full(g, v)).any()
    detail(request, f"|mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}, affine {worst_affine:.1e}, "
                    f"{constant} constant groups")
    assert worst_mean <= 1e-9 and worst_std <= 1e-9 and worst_affine <= 1e-9
    t.check(request)


# --- 5 -----------------------------------------------------------------------------------

def _grpo_groups(task, params, rng):
    insts = task.instances()
    groups = []
    for _ in range(2):
        inst = insts[int(rng.integers(len(insts)))]
        prompt = task.prompt(inst)
        seqs = [tuple(int(x) for x in rng.integers(0, len(task.vocab), size=int(rng.integers(1, 6))))
                for _ in range(4)]
        new = sequence_logprobs(params, [prompt] * 4, seqs)
        old = new + rng.normal(0, 0.3, 4)
        ref = new + rng.normal(0, 0.3, 4)
        rewards = rng.random(4)
        comps = [Completion(inst.id, "", min(0.0, float(o)), s) for o, s in zip(old, seqs)]
        groups.append(GrpoGroup(inst, prompt, comps, rewards, compute_advantages(rewards), old, ref))
    return groups


@pytest.mark.criterion(5, "gradient correctness")
def test_criterion_05_gradients(request, toy_task):
    rng = np.random.default_rng(5)
    cfg = GrpoConfig(kl_coeff=0.04, clip_eps=0.2)
    coords = {"logprob": 0, "objective": 0}
    worst = {"logprob": 0.0, "objective": 0.0}
    with Timer(30.0) as t:
        for _ in range(10):
            params, prompts, seqs = random_instance(toy_task.vocab, rng)
            coeffs = rng.normal(size=len(seqs))
            _, grad = logprob_and_grad(params, prompts, seqs, coeffs)
            f = lambda p: float(coeffs @ sequence_logprobs(p, prompts, seqs))  # noqa: E731
            for c in active_coordinates(params, prompts, seqs, rng, 12):
                worst["logprob"] = max(worst["logprob"], relative_error(grad[c], finite_difference(f, params, c)))
                coords["logprob"] += 1

            params, _, _ = random_instance(toy_task.vocab, rng)
            groups = _grpo_groups(toy_task, params, rng)
            _, _, grad = objective_and_grad(params, groups, cfg)
            flat_prompts, flat_seqs, *_ = grpo.flatten(groups)
            f = lambda p: objective_and_grad(p, groups, cfg)[0]  # noqa: E731
            for c in active_coordinates(params, flat_prompts, flat_seqs, rng, 12):
                worst["objective"] = max(worst["objective"],
                                         relative_error(grad[c], finite_difference(f, params, c)))
                coords["objective"] += 1
    detail(request, ", ".join(f"{k}: {coords[k]} coords, max rel err {worst[k]:.1e}" for k in worst))
    assert min(coords.values()) >= 100
    assert max(worst.values()) < REL_TOL
    t.check(request)


# --- 6 -----------------------------------------------------------------------------------

def _pools(n: int = 40):
    lang = {H: Language.FRENCH, M: Language.KOREAN, L: Language.YORUBA}
    return {tier: [BenchInstance(f"{tier.value}-{k}", lang[tier], "q", (), "a") for k in range(n)]
            for tier in (H, M, L)}


@pytest.mark.criterion(6, "curriculum distribution")
def test_criterion_06_curriculum(request):
    with Timer(10.0) as t:
        p1, p2, p3 = build_phases(0.85, 500)
        assert phase_distribution(p1) == {H: 1.0}
        assert phase_distribution(p2) == {H: 0.85, M: 0.15}
        assert phase_distribution(p3) == {H: 0.7225, M: 0.1275, L: 0.15}

        pools = _pools()
        tier_of = {Language.FRENCH: H, Language.KOREAN: M, Language.YORUBA: L}
        worst_z = 0.0
        for phase in (p2, p3):
            counts = Counter()
            for s in range(1000):
                counts.update(tier_of[b.language] for b in sample_batch(phase, pools, 100, s))
            n = sum(counts.values())
            assert n == 100_000
            for tier, p in phase_distribution(phase).items():
                z = abs(counts[tier] / n - p) / math.sqrt(p * (1 - p) / n) if 0 < p < 1 else 0.0
                worst_z = max(worst_z, z)

        det = PlateauDetector(20, 0.005, 2)
        examples = [
            ([0.01 * k for k in range(200)], False),
            ([0.4] * 60, True),
            ([0.2] * 20 + [0.21] * 20 + [0.212] * 20 + [0.213] * 20, True),
        ]
        got = [plateau(h, det) for h, _ in examples]
    detail(request, f"max tier deviation {worst_z:.2f} sigma over 2x10^5 draws")
    assert worst_z <= 3.0
    assert got == [e for _, e in examples]
    t.check(request)


# --- 7 -----------------------------------------------------------------------------------

@pytest.mark.criterion(7, "SFT behavior")
def test_criterion_07_sft(request, toy_task):
    with Timer(120.0) as t:
        instances = toy_task.instances()
        sft_set = select(instances, make_splits(instances, 0).train_sft)
        init = policy.english_centric_init(toy_task.vocab)
        params, report = policy.sft_fit(init, toy_task, sft_set, policy.SftConfig(lr=TOY_SFT_LR, epochs=3))
        _, full = policy.sft_fit(init, toy_task, sft_set,
                                 policy.SftConfig(lr=TOY_SFT_LR, epochs=3, full_batch=True))
        outs = policy.greedy_decode(params, toy_task.vocab, [toy_task.prompt(i) for i in sft_set])
        rate = float(np.mean([format_reward(parse_output(o)) for o in outs]))
    nll = [r["nll"] for r in report.records]
    nll_full = [r["nll"] for r in full.records]
    detail(request, f"NLL {nll[0]:.2f}->{nll[-1]:.2f} (full batch {nll_full[0]:.2f}->{nll_full[-1]:.2f}), "
                    f"greedy format {100 * rate:.1f}% on {len(sft_set)} prompts")
    assert len(nll) == 4 and len(nll_full) == 4
    assert all(b <= a for a, b in zip(nll, nll[1:]))
    assert all(b <= a + 1e-6 for a, b in zip(nll_full, nll_full[1:]))
    assert rate >= 0.95
    t.check(request)


# --- 8 -----------------------------------------------------------------------------------

def _window_mean(values) -> float:
    return float(np.mean(values)) if values else float("nan")


@pytest.mark.criterion(8, "end-to-end GRPO improvement")
def test_criterion_08_grpo(request, tmp_path):
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        start = time.perf_counter()
        assert cli.main(["train", "grpo", "--profile", "toy", "--seed", "7", "--out", str(out)]) == 0
        elapsed = time.perf_counter() - start
        records = [json.loads(l) for l in (out / "grpo_report.jsonl").read_text(encoding="utf-8").splitlines()]
        runs.append((records, (out / "grpo_report.jsonl").read_bytes(), elapsed))

    records = runs[0][0]
    rewards = [r["mean_reward"] for r in records]
    first, last = _window_mean(rewards[:20]), _window_mean(rewards[-20:])
    order = [r["phase"] for r in records]
    entered = [p for i, p in enumerate(order) if i == 0 or p != order[i - 1]]
    # steps whose batch drew at least one Low-tier prompt
    low = [r["tier_answer_lang"]["Low"] for r in records if r["tier_answer_lang"]["Low"] is not None]
    low_intro, low_end = _window_mean(low[:20]), _window_mean(low[-20:])
    digests = [hashlib.sha256(b).hexdigest()[:12] for _, b, _ in runs]
    detail(request, f"{len(records)} steps, reward {first:.3f}->{last:.3f}, phases {entered}, "
                    f"Low answer-language {low_intro:.3f}->{low_end:.3f}, "
                    f"runs {runs[0][2]:.0f}s/{runs[1][2]:.0f}s")
    assert len(records) == 500
    assert last - first >= 0.2
    assert entered == [1, 2, 3]
    assert [r["tier"] for r in records if r["phase"] == 3][0] == "Low"
    assert low and low_end > low_intro
    assert runs[0][1] == runs[1][1] and digests[0] == digests[1]
    assert all(r[2] < 300 for r in runs)


# --- 9 -----------------------------------------------------------------------------------

# survivors per language from the fixture rules, and their (sft, rft, test) sizes
SPLIT_ORACLE = {
    "Amharic": (10, 6, 2, 2), "Bengali": (10, 6, 2, 2), "French": (11, 7, 2, 2), "Hausa": (12, 8, 2, 2),
    "Hindi": (11, 7, 2, 2), "Japanese": (10, 6, 2, 2), "Korean": (12, 8, 2, 2), "Spanish": (12, 8, 2, 2),
    "Swahili": (10, 6, 2, 2), "Thai": (10, 6, 2, 2), "Turkish": (12, 8, 2, 2), "Vietnamese": (11, 7, 2, 2),
    "Yoruba": (10, 6, 2, 2),
}
DIFFICULTY_ABSTAIN_KEPT = [10, 45, 80, 115, 150, 185]


def _half_up(x: Decimal) -> int:
    return int(x.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _run_stages(cfg, out):
    out.mkdir()
    steps = [
        ["pipeline", "generate", "--n", str(rf.N_ITEMS), "--out", str(out / "mcq.json"), "--log", str(out / "gen.jsonl")],
        ["pipeline", "filter", "--in", str(out / "mcq.json"), "--out", str(out / "kept.json"),
         "--log", str(out / "filter.jsonl")],
        ["pipeline", "convert", "--in", str(out / "kept.json"), "--out", str(out / "dataset.json"),
         "--log", str(out / "convert.jsonl")],
        ["pipeline", "split", "--in", str(out / "dataset.json"), "--out", str(out / "split.json")],
    ]
    for argv in steps:
        assert cli.main(argv + ["--config", str(cfg)]) == 0, argv


@pytest.mark.criterion(9, "pipeline replay determinism")
def test_criterion_09_pipeline(request, tmp_path):
    with Timer(30.0) as t:
        cache = tmp_path / "replies.jsonl"
        rf.record_cache(cache)
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps(rf.config(cache)), encoding="utf-8")
        _run_stages(cfg, tmp_path / "a")
        _run_stages(cfg, tmp_path / "b")
    files = ["mcq.json", "gen.jsonl", "kept.json", "filter.jsonl", "dataset.json", "convert.jsonl", "split.json"]
    same = [f for f in files if filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)]
    assert same == files

    out = tmp_path / "a"
    gen = [json.loads(l) for l in (out / "gen.jsonl").read_text(encoding="utf-8").splitlines()]
    rejected = [g for g in gen if g["decision"] == "reject"]
    assert len(gen) == rf.N_ITEMS + 1 and [g["question_id"] for g in rejected] == ["q-bad"]
    assert "option count" in rejected[0]["evidence"]["reason"]

    log = [json.loads(l) for l in (out / "filter.jsonl").read_text(encoding="utf-8").splitlines()]
    difficulty = [r for r in log if r["stage"] == "difficulty"]
    dropped = sorted(int(r["question_id"][1:]) for r in difficulty if r["decision"] == "drop")
    abstain_kept = sorted(int(r["question_id"][1:]) for r in difficulty
                          if r["decision"] == "keep" and r["evidence"].get("errors") and int(r["question_id"][1:]) % 5 == 0)
    assert len(dropped) == 34 and dropped == rf.expected_difficulty_drops()
    assert abstain_kept == DIFFICULTY_ABSTAIN_KEPT
    for r in difficulty:
        ev = r["evidence"]
        assert (r["decision"] == "drop") == all(c == ev["gold"] for c in ev["probes"].values())

    dataset = json.loads((out / "dataset.json").read_text(encoding="utf-8"))
    split = json.loads((out / "split.json").read_text(encoding="utf-8"))
    assert len(dataset) == 141 == sum(v[0] for v in SPLIT_ORACLE.values())
    lang_of = {d["id"]: d["language"] for d in dataset}
    sizes = {name: Counter(lang_of[i] for i in split[name]) for name in ("train_sft", "train_rft", "test")}
    for lang, (n, n_sft, n_rft, n_test) in SPLIT_ORACLE.items():
        test_size = _half_up(Decimal(n) * Decimal("0.2"))
        rft_size = _half_up(Decimal(n - test_size) * Decimal("0.2"))
        assert (n_test, n_rft, n_sft) == (test_size, rft_size, n - test_size - rft_size)
        assert (sizes["train_sft"][lang], sizes["train_rft"][lang], sizes["test"][lang]) == (n_sft, n_rft, n_test)
    ids = split["train_sft"] + split["train_rft"] + split["test"]
    assert sorted(ids) == sorted(lang_of)
    detail(request, f"{len(files)} artefacts byte-identical, {len(dropped)} all-probes-correct drops, "
                    f"{len(dataset)} instances split {len(split['train_sft'])}/{len(split['train_rft'])}/"
                    f"{len(split['test'])}")
    t.check(request)


# --- 10 ----------------------------------------------------------------------------------

@pytest.mark.criterion(10, "evaluation oracle")
def test_criterion_10_eval(request):
    with Timer(1.0) as t:
        s = summarize(ef.records())
        got = [(r.language, r.n, f"{r.la_pct:.2f}", f"{r.lc_pct:.2f}") for r in s.rows]
        md = [[c.strip().strip("*") for c in line.strip("|").split("|")]
              for line in render(s, "markdown").strip().splitlines()[2:]]
        rows = list(csv.reader(io.StringIO(render(s, "csv"))))[1:]
    detail(request, f"{len(got)} languages + macro LA {s.macro.la_pct:.4f} / LC {s.macro.lc_pct:.4f}")
    assert got == ef.TABLE
    assert s.macro.la_pct == ef.MACRO_LA and s.macro.lc_pct == ef.MACRO_LC
    assert md == rows and md[-1] == list(map(str, ef.MACRO)) and len(md) == 14
    t.check(request)
