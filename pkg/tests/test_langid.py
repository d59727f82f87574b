from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import load_fixture
from polyglot_grpo.core import LANGUAGES, Language, ScriptClass
from polyglot_grpo.format_parser import parse_output
from polyglot_grpo.langid import (
    DEFAULT_THRESHOLD,
    Scope,
    detect_language,
    language_reward,
    script_histogram,
)

CORPUS = load_fixture("langid_corpus.jsonl")
FRENCH = load_fixture("codeswitch_french.json")


def detected(text: str) -> str | None:
    lang = detect_language(text).language
    return lang.value if lang else None


def test_corpus_covers_13_languages_with_20_each():
    for lang in LANGUAGES:
        rows = [r for r in CORPUS if r["language"] == lang.value]
        assert len(rows) >= 20, lang
    assert {r["kind"] for r in CORPUS} == {"pure", "diacritic", "codeswitch"}


@pytest.mark.parametrize("row", CORPUS, ids=[f"{r['language']}-{k}" for k, r in enumerate(CORPUS)])
def test_corpus_matches_frozen_detection(row):
    assert detected(row["text"]) == row["detected"]


def test_hangul_is_korean():
    d = detect_language("환자는 사흘 동안 고열과 두통을 호소했다")
    assert d.language is Language.KOREAN and d.confidence >= 0.99


def test_ethiopic_is_amharic():
    assert detect_language("ታካሚው ለሦስት ቀናት ትኩሳት አለበት").language is Language.AMHARIC


def test_french_answer_sentence():
    assert detect_language("Le diagnostic le plus probable est la cholécystite aiguë").language is Language.FRENCH


def test_vietnamese_with_ascii_drug_names():
    text = "Bệnh nhân được điều trị bằng paracetamol và amoxicillin trong năm ngày"
    letters = [c for c in text if c.isalpha()]
    assert sum(c.isascii() for c in letters) / len(letters) > 0.4
    d = detect_language(text)
    assert d.language is Language.VIETNAMESE and d.confidence >= DEFAULT_THRESHOLD


def test_english_is_not_a_target_language():
    d = detect_language("The most likely diagnosis is acute cholecystitis")
    assert d.language is None and d.confidence < DEFAULT_THRESHOLD


def test_acronyms_do_not_vote():
    assert detect_language("የ CT ECG MRI ስካን ውጤት").language is Language.AMHARIC


def test_empty_text_is_an_error():
    with pytest.raises(ValueError):
        detect_language("   ")


def test_codeswitched_example_scopes():
    parsed = parse_output(FRENCH["output"])
    assert language_reward(FRENCH["output"], parsed, Language.FRENCH, Scope.FULL_OUTPUT) == 0.0
    assert language_reward(FRENCH["output"], parsed, Language.FRENCH, Scope.ANSWER_ONLY) == 1.0
    # full-output reward follows the detector's verdict on the full text
    assert detect_language(FRENCH["output"]).language is not Language.FRENCH


def test_language_reward_examples():
    out = "<thinking>El paciente tiene fiebre y tos.</thinking><answer>La neumonía es el diagnóstico más probable</answer>"
    assert language_reward(out, parse_output(out), Language.SPANISH) == 1.0
    en = "<thinking>ታካሚው ትኩሳት አለበት</thinking><answer>The patient has malaria</answer>"
    assert language_reward(en, parse_output(en), Language.AMHARIC, Scope.ANSWER_ONLY) == 0.0


def test_answer_only_without_answer_scores_zero():
    out = "<thinking>El paciente tiene fiebre</thinking>"
    assert language_reward(out, parse_output(out), Language.SPANISH, Scope.ANSWER_ONLY) == 0.0


def test_histogram_excludes_digits_and_punctuation():
    hist = script_histogram("한국어 123 !!! abc")
    assert hist[ScriptClass.HANGUL] == pytest.approx(3 / 6)
    assert sum(hist.values()) == pytest.approx(1.0, abs=1e-9)


def test_japanese_mixed_scripts_count_as_one_class():
    d = detect_language("患者は三日間発熱と頭痛を訴えている")
    assert d.language is Language.JAPANESE
    assert set(d.script_histogram) == {ScriptClass.JAPANESE_MIXED}


SCRIPTS = {
    Language.KOREAN: (0xAC00, 0xD7A3),
    Language.AMHARIC: (0x1200, 0x135A),
    Language.BENGALI: (0x0985, 0x09B9),
    Language.HINDI: (0x0905, 0x0939),
    Language.THAI: (0x0E01, 0x0E2E),
    Language.JAPANESE: (0x3041, 0x3096),
}


@given(st.sampled_from(sorted(SCRIPTS)), st.data())
def test_script_exclusivity(lang, data):
    lo, hi = SCRIPTS[lang]
    native = data.draw(st.text(alphabet=st.characters(min_codepoint=lo, max_codepoint=hi), min_size=10, max_size=40))
    native = "".join(c for c in native if c.isalpha())
    if len(native) < 10:
        return
    noise = data.draw(st.text(alphabet="abcdefghij", max_size=len(native) // 10))
    d = detect_language(native + " " + noise)
    assert d.language is lang


@given(st.text(min_size=1, max_size=60).filter(lambda s: s.strip()))
def test_detection_deterministic_and_histogram_normalized(text):
    a, b = detect_language(text), detect_language(text)
    assert a == b
    if a.script_histogram:
        assert sum(a.script_histogram.values()) == pytest.approx(1.0, abs=1e-9)
    assert (a.language is None) == (a.confidence < DEFAULT_THRESHOLD)


@given(st.text(max_size=60), st.sampled_from(LANGUAGES), st.sampled_from(list(Scope)))
def test_language_reward_binary(text, lang, scope):
    assert language_reward(text, parse_output(text), lang, scope) in (0.0, 1.0)
