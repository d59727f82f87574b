from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import load_fixture
from polyglot_grpo.core import BenchInstance, Completion, Language
from polyglot_grpo.judge import BackendKind, Judge, ScriptedTransport, VerifierBackend
from polyglot_grpo.langid import Scope
from polyglot_grpo.reward import (
    RewardConfig,
    RewardWeights,
    composite_reward,
    score_completion,
    score_group,
)

FRENCH = load_fixture("codeswitch_french.json")
unit = st.floats(0.0, 1.0, allow_nan=False)


def french_instance() -> BenchInstance:
    return BenchInstance("fr-1", Language.FRENCH, FRENCH["question"], (), FRENCH["gold_answer"])


def korean_instance() -> BenchInstance:
    # English gold variant: the content check passes for an English answer
    return BenchInstance("ko-1", Language.KOREAN, "환자의 가장 가능성 높은 진단은 무엇인가?", (),
                         "The most likely diagnosis is acute cholecystitis")


def test_weights_validated():
    assert RewardWeights() == RewardWeights(0.65, 0.30, 0.05)
    with pytest.raises(ValueError):
        RewardWeights(0.5, 0.3, 0.1)
    with pytest.raises(ValueError):
        RewardWeights(1.2, -0.2, 0.0)


@pytest.mark.parametrize("parts,total", [((1, 1, 1), 1.0), ((1, 0, 1), 0.70), ((0.5, 1, 0), 0.625)])
def test_composite_examples(parts, total):
    assert composite_reward(*parts).total == pytest.approx(total, abs=1e-12)


def test_component_out_of_range():
    with pytest.raises(ValueError):
        composite_reward(1.1, 0, 0)
    with pytest.raises(ValueError):
        composite_reward(0, -0.1, 0)


def test_codeswitched_sample_answer_only_scores_one():
    cfg = RewardConfig(scope=Scope.ANSWER_ONLY)
    b = score_completion(french_instance(), Completion("fr-1", FRENCH["output"]), cfg)
    assert (b.r_acc, b.r_lang, b.r_fmt, b.total) == (1.0, 1.0, 1.0, 1.0)


def test_codeswitched_sample_full_output_loses_language():
    b = score_completion(french_instance(), Completion("fr-1", FRENCH["output"]), RewardConfig())
    assert (b.r_acc, b.r_lang, b.r_fmt) == (1.0, 0.0, 1.0)


def test_no_answer_tag_wrong_content():
    b = score_completion(french_instance(), Completion("fr-1", "I do not know"), RewardConfig())
    assert (b.r_acc, b.r_lang, b.r_fmt, b.total) == (0.0, 0.0, 0.0, 0.0)


def english_answer() -> str:
    return ("<thinking>환자는 우상복부 통증이 있다</thinking>"
            "<answer>The most likely diagnosis is acute cholecystitis</answer>")


def test_english_answer_to_korean_item():
    b = score_completion(korean_instance(), Completion("ko-1", english_answer()),
                         RewardConfig(scope=Scope.ANSWER_ONLY))
    assert (b.r_acc, b.r_lang, b.r_fmt) == (1.0, 0.0, 1.0)
    assert b.total == pytest.approx(0.70, abs=1e-12)


def test_malformed_output_graded_on_full_text():
    inst = BenchInstance("x", Language.SPANISH, "¿Diagnóstico?", (), "neumonía")
    b = score_completion(inst, Completion("x", "neumonía"), RewardConfig())
    assert b.r_fmt == 0.0 and b.r_acc == 1.0


def test_group_of_sixteen_identical():
    comps = [Completion("fr-1", FRENCH["output"])] * 16
    scores = score_group(french_instance(), comps, RewardConfig(scope=Scope.ANSWER_ONLY))
    assert len(set(scores.breakdowns)) == 1 and len(scores.breakdowns) == 16 and not scores.errors


def test_group_order_preserved():
    backend = VerifierBackend(BackendKind.REMOTE_LLM, endpoint="http://v.invalid", model_name="v")
    def verifier(prompt, request):
        # accepts the diagnosis in either language
        generated = prompt.split("Generated response:")[1]
        return "1.0" if "cholécystite" in generated or "cholecystitis" in generated else "0.0"

    judge = Judge(backend, ScriptedTransport(verifier))
    english = ("<thinking>Douleur de l'hypochondre droit</thinking>"
               "<answer>The most likely diagnosis is acute cholecystitis</answer>")
    texts = [FRENCH["output"], english, "garbage", FRENCH["output"]]
    cfg = RewardConfig(backend=backend, scope=Scope.ANSWER_ONLY)
    out = score_group(french_instance(), [Completion("fr-1", t) for t in texts], cfg, judge)
    assert [b.total for b in out.breakdowns] == pytest.approx([1.0, 0.70, 0.0, 1.0], abs=1e-12)


def test_empty_group_rejected():
    with pytest.raises(ValueError):
        score_group(french_instance(), [], RewardConfig())


def test_group_uses_batched_remote_judge():
    backend = VerifierBackend(BackendKind.REMOTE_LLM, endpoint="http://v.invalid", model_name="v")
    transport = ScriptedTransport(lambda p, r: "0.5")
    judge = Judge(backend, transport, sleep=lambda s: None)
    cfg = RewardConfig(backend=backend, scope=Scope.ANSWER_ONLY)
    out = score_group(french_instance(), [Completion("fr-1", FRENCH["output"])] * 16, cfg, judge)
    assert len(transport.requests) == 1
    assert out.breakdowns[0].total == pytest.approx(0.65 * 0.5 + 0.35)


def test_group_surfaces_judge_errors():
    backend = VerifierBackend(BackendKind.REMOTE_LLM, endpoint="http://v.invalid", model_name="v", max_retries=0)

    def handler(prompt, req):
        if "bad" in prompt:
            raise ConnectionError("down")
        return "1.0"

    judge = Judge(backend, ScriptedTransport(handler), sleep=lambda s: None)
    comps = [Completion("fr-1", "<thinking>t</thinking><answer>good</answer>"),
             Completion("fr-1", "<thinking>t</thinking><answer>bad</answer>")]
    out = score_group(french_instance(), comps, RewardConfig(backend=backend), judge)
    assert out.breakdowns[0] is not None and out.breakdowns[1] is None
    assert [e.index for e in out.errors] == [1]


@given(unit, unit, unit)
def test_total_is_exact_weighted_sum(a, l, f):
    b = composite_reward(a, l, f)
    ref = np.longdouble(0.65) * a + np.longdouble(0.30) * l + np.longdouble(0.05) * f
    assert abs(b.total - float(ref)) <= 1e-12
    assert 0.0 <= b.total <= 1.0
    assert (b.r_acc, b.r_lang, b.r_fmt) == (a, l, f)


@given(unit, unit, unit, st.sampled_from([0, 1, 2]), unit)
def test_component_monotonicity(a, l, f, which, bump):
    parts = [a, l, f]
    raised = list(parts)
    raised[which] = max(parts[which], bump)
    assert composite_reward(*raised).total >= composite_reward(*parts).total


@given(unit, unit, unit)
def test_degenerate_weights(a, l, f):
    assert composite_reward(a, l, f, RewardWeights(1, 0, 0)).total == a
    assert composite_reward(a, l, f, RewardWeights(0, 1, 0)).total == l
    assert composite_reward(a, l, f, RewardWeights(0, 0, 1)).total == f


def test_config_replace_keeps_validation():
    cfg = replace(RewardConfig(), weights=RewardWeights(0.5, 0.5, 0.0))
    assert score_completion(french_instance(), Completion("fr-1", FRENCH["output"]), cfg).total == 0.5
