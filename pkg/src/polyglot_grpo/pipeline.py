"""Benchmark curation: multilingual MCQ generation, probe-based difficulty filtering,
ambiguity filtering, open-ended conversion and deduplication.

Every remote exchange goes through ``judge.ChatClient`` so a run recorded once
can be replayed byte-for-byte from its reply cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .core import LANGUAGES, BenchInstance, DatasetError, Language, ReasoningStep, SchemaError
from .judge import ChatClient, JudgeError, RemoteBackendError, UnparseableReplyError, normalize_answer

log = logging.getLogger(__name__)

MCQ_PROMPT = (
    "Task: You are an expert medical content generator. Generate {num_questions} high-quality, "
    "medically accurate multiple-choice questions (MCQs) based strictly on content from MedlinePlus "
    "by searching and curating from the website.\n\n"
    "You must independently compose each question in ALL of the following languages: Amharic, "
    "Bengali, French, Hausa, Hindi, Japanese, Korean, Spanish, Swahili, Thai, Turkish, Vietnamese, "
    "Yoruba.\n\n"
    "Requirements:\n"
    "1. Medical Grounding: All information must be sourced from MedlinePlus, covering symptoms, "
    "causes, risk factors, diagnostics, treatments, or prevention strategies.\n"
    "2. Independent Composition: Each language version must be originally written (not translated) "
    "using natural phrasing and medically appropriate terminology for that language.\n"
    "3. Clinical Reasoning Depth: Questions must require genuine clinical reasoning beyond trivial "
    "fact recall. Each question should have exactly one unambiguous correct answer.\n"
    "4. Format: 4-option MCQ (A/B/C/D) with one correct answer.\n\n"
    "Output Format: Return valid JSON array:\n"
    "[\n"
    '  {{"question_id": "<id>", "source_concept": "<MedlinePlus_topic>",\n'
    '   "mcq_items": [{{"language_code": "<lang>", "question": "<text>",\n'
    '     "option_A": "<text>", "option_B": "<text>", "option_C": "<text>", "option_D": "<text>",\n'
    '     "correct_answer": "<A|B|C|D>"}}, ...]}}\n'
    "]\n\n"
    "IMPORTANT: Return ONLY valid JSON without explanations, formatting, or additional text. "
    "Ensure all special characters are properly escaped."
)

# The three prompts below are this package's own wording; they are versioned
# through the cache keys so that edits never replay stale replies.
PROBE_PROMPT = (
    "Answer the following multiple-choice medical question. Reply with a single letter "
    "(A, B, C or D) and nothing else.\n\n"
    "Question: {question}\n"
    "A) {option_A}\nB) {option_B}\nC) {option_C}\nD) {option_D}"
)

AMBIGUITY_PROMPT = (
    "You review multilingual medical multiple-choice questions. Below are versions of one "
    "question in several languages, each with its options and keyed answer.\n\n"
    "{versions}\n\n"
    "Reply with exactly one word:\n"
    "MULTIPLE if more than one option could reasonably be correct in any version,\n"
    "INCONSISTENT if the versions disagree with each other in meaning or keyed answer,\n"
    "CLEAN otherwise."
)

CONVERT_PROMPT = (
    "Rewrite this multiple-choice medical question as an open-ended question in {language}. "
    "Do not mention options, letters or choices.\n\n"
    "Question: {question}\n"
    "Correct answer: {answer}\n\n"
    "Return ONLY a JSON object with keys \"question\" (the open-ended question), "
    "\"reasoning_steps\" (a list of short reasoning steps leading to the answer) and "
    "\"answer\" (the free-form correct answer), all written in {language}."
)

CONVERT_RETRY_NOTE = "\n\nYour previous reply was rejected ({reason}). Try again."

VERSIONS = {"mcq": "mcq-v1", "probe": "probe-v1", "ambiguity": "ambiguity-v1", "convert": "convert-v1"}
OPTION_LETTERS = ("A", "B", "C", "D")
ABSTAIN = "Abstain"

_ISO = {lang.iso: lang for lang in LANGUAGES}


class PipelineError(RuntimeError):
    pass


# --- data types ------------------------------------------------------------------

@dataclass(frozen=True)
class McqEntry:
    language: Language
    question: str
    options: tuple[str, str, str, str]
    correct_answer: str

    @property
    def answer_text(self) -> str:
        return self.options[OPTION_LETTERS.index(self.correct_answer)]

    def to_json(self) -> dict:
        rec = {"language_code": self.language.value, "question": self.question}
        for letter, text in zip(OPTION_LETTERS, self.options):
            rec[f"option_{letter}"] = text
        rec["correct_answer"] = self.correct_answer
        return rec


@dataclass(frozen=True)
class McqItem:
    question_id: str
    source_concept: str
    entries: tuple[McqEntry, ...]

    def to_json(self) -> dict:
        return {"question_id": self.question_id, "source_concept": self.source_concept,
                "mcq_items": [e.to_json() for e in self.entries]}


@dataclass(frozen=True)
class ProbeVerdict:
    question_id: str
    language: Language
    probe_name: str
    chosen_option: str
    gold: str

    @property
    def correct(self) -> bool:
        return self.chosen_option == self.gold


def parse_language_code(code: str) -> Language:
    if not isinstance(code, str):
        raise SchemaError("language code must be text")
    if code in _ISO:
        return _ISO[code]
    try:
        return Language(code)
    except ValueError:
        raise SchemaError(f"unknown language code {code!r}") from None


def parse_mcq_record(rec) -> McqItem:
    """Validate one generated record; raises SchemaError naming the reason."""
    if not isinstance(rec, dict):
        raise SchemaError("record is not an object")
    for key in ("question_id", "source_concept", "mcq_items"):
        if key not in rec:
            raise SchemaError(f"missing field {key}")
    if not isinstance(rec["question_id"], str) or not rec["question_id"].strip():
        raise SchemaError("empty question_id")
    if not isinstance(rec["mcq_items"], list) or not rec["mcq_items"]:
        raise SchemaError("mcq_items must be a non-empty list")
    entries, seen = [], set()
    for e in rec["mcq_items"]:
        if not isinstance(e, dict):
            raise SchemaError("mcq entry is not an object")
        lang = parse_language_code(e.get("language_code"))
        if lang in seen:
            raise SchemaError(f"duplicate language {lang.value}")
        seen.add(lang)
        present = [k for k in e if k.startswith("option_")]
        if sorted(present) != [f"option_{l}" for l in OPTION_LETTERS]:
            raise SchemaError(f"option count ({len(present)} options for {lang.value})")
        options = tuple(e[f"option_{l}"] for l in OPTION_LETTERS)
        if not all(isinstance(o, str) and o.strip() for o in options):
            raise SchemaError(f"option count (empty option for {lang.value})")
        answer = e.get("correct_answer")
        if answer not in OPTION_LETTERS:
            raise SchemaError(f"correct_answer must be one of A-D, got {answer!r}")
        question = e.get("question")
        if not isinstance(question, str) or not question.strip():
            raise SchemaError(f"empty question for {lang.value}")
        entries.append(McqEntry(lang, question, options, answer))
    return McqItem(rec["question_id"], str(rec["source_concept"]), tuple(entries))


def load_mcqs(path: str | Path) -> list[McqItem]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise SchemaError(f"{path}: expected a JSON array")
    return [parse_mcq_record(r) for r in data]


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


def dump_mcqs(items: Iterable[McqItem], path: str | Path) -> None:
    dump_json([i.to_json() for i in items], path)


# --- verdict log ---------------------------------------------------------------------

@dataclass
class VerdictLog:
    records: list[dict] = field(default_factory=list)

    def add(self, question_id: str, stage: str, decision: str, evidence: dict) -> None:
        self.records.append({"question_id": question_id, "stage": stage,
                             "decision": decision, "evidence": evidence})

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def _map(fn, items, concurrency: int):
    if concurrency > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# --- generation ----------------------------------------------------------------------

def render_mcq_prompt(n: int) -> str:
    return MCQ_PROMPT.format(num_questions=n)


def parse_payload(raw: str):
    """JSON array from a reply; a prose-wrapped payload is cut to its outer brackets once."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    start, end = raw.find("["), raw.rfind("]")
    if start == -1 or end <= start:
        return None
    try:
        return json.loads(raw[start:end + 1])
    except json.JSONDecodeError:
        return None


def generate_mcqs(client: ChatClient, n: int, topics: Sequence[str] = (), max_attempts: int = 3,
                  verdicts: VerdictLog | None = None) -> list[McqItem]:
    """Ask the generator for ``n`` questions and keep the records that validate.

    ``topics`` (optional) are appended after the fixed prompt as a focus list.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    prompt = render_mcq_prompt(n)
    if topics:
        prompt += "\n\nFocus topics: " + ", ".join(topics)
    for attempt in range(max_attempts):
        extra = {"seed": attempt} if attempt else None
        raw, _ = client.complete(prompt, VERSIONS["mcq"], extra=extra)
        payload = parse_payload(raw)
        if not isinstance(payload, list):
            log.warning("generator payload is not a JSON array (attempt %d)", attempt + 1)
            continue
        items, ids = [], set()
        for k, rec in enumerate(payload):
            qid = rec.get("question_id", f"#{k}") if isinstance(rec, dict) else f"#{k}"
            try:
                item = parse_mcq_record(rec)
                if item.question_id in ids:
                    raise SchemaError("duplicate question_id")
            except SchemaError as exc:
                log.info("dropping generated record %s: %s", qid, exc)
                if verdicts is not None:
                    verdicts.add(str(qid), "generate", "reject", {"reason": str(exc)})
                continue
            ids.add(item.question_id)
            items.append(item)
            if verdicts is not None:
                verdicts.add(item.question_id, "generate", "accept",
                             {"languages": [e.language.value for e in item.entries]})
        if items:
            return items
    raise PipelineError(f"no valid MCQ records after {max_attempts} attempts")


# --- difficulty filter --------------------------------------------------------------

_LETTER_RE = re.compile(r"^\s*\(?\s*([ABCD])\s*\)?\s*[.:]?\s*$", re.IGNORECASE)


def parse_letter(reply: str) -> str | None:
    first = reply.strip().splitlines()[0] if reply.strip() else ""
    m = _LETTER_RE.match(first)
    return m.group(1).upper() if m else None


def ask_probe(name: str, client: ChatClient, entry: McqEntry) -> tuple[str, str | None]:
    """(chosen option or Abstain, error note)."""
    prompt = PROBE_PROMPT.format(question=entry.question, **{f"option_{l}": o for l, o in
                                                             zip(OPTION_LETTERS, entry.options)})
    try:
        raw, _ = client.complete(prompt, VERSIONS["probe"], parse_letter)
    except (JudgeError, OSError) as exc:
        log.warning("probe %s failed; counting as abstain: %s", name, exc)
        return ABSTAIN, f"{type(exc).__name__}: {exc}"
    return parse_letter(raw), None


def difficulty_filter(items: Sequence[McqItem], probes: dict[str, ChatClient], concurrency: int = 4,
                      verdicts: VerdictLog | None = None):
    """Drop a language entry iff every probe answers it correctly; items with no entries left go too.

    Returns (kept items, dropped (question_id, language) pairs, probe verdicts).
    """
    if not probes:
        raise ValueError("difficulty_filter needs at least one probe")
    units = [(item, entry) for item in items for entry in item.entries]
    jobs = [(u, name) for u in units for name in sorted(probes)]

    def run(job):
        (item, entry), name = job
        return ask_probe(name, probes[name], entry)

    answers = _map(run, jobs, concurrency)
    all_verdicts: list[ProbeVerdict] = []
    dropped: list[tuple[str, Language]] = []
    keep_entries: dict[str, list[McqEntry]] = {}
    pos = 0
    for item, entry in units:
        chosen = {}
        notes = {}
        for name in sorted(probes):
            opt, note = answers[pos]
            pos += 1
            chosen[name] = opt
            if note:
                notes[name] = note
            all_verdicts.append(ProbeVerdict(item.question_id, entry.language, name, opt, entry.correct_answer))
        drop = all(c == entry.correct_answer for c in chosen.values())
        evidence = {"language": entry.language.value, "gold": entry.correct_answer, "probes": chosen}
        if notes:
            evidence["errors"] = notes
        if verdicts is not None:
            verdicts.add(item.question_id, "difficulty", "drop" if drop else "keep", evidence)
        if drop:
            dropped.append((item.question_id, entry.language))
        else:
            keep_entries.setdefault(item.question_id, []).append(entry)
    kept = [McqItem(i.question_id, i.source_concept, tuple(keep_entries[i.question_id]))
            for i in items if i.question_id in keep_entries]
    return kept, dropped, all_verdicts


# --- ambiguity filter ------------------------------------------------------------------

def parse_ambiguity(reply: str) -> str | None:
    word = reply.strip().split()[0].strip(".:,").upper() if reply.strip() else ""
    return word if word in ("CLEAN", "MULTIPLE", "INCONSISTENT") else None


def render_ambiguity_prompt(item: McqItem) -> str:
    blocks = []
    for e in item.entries:
        opts = "\n".join(f"{l}) {o}" for l, o in zip(OPTION_LETTERS, e.options))
        blocks.append(f"[{e.language.value}]\n{e.question}\n{opts}\nKeyed answer: {e.correct_answer}")
    return AMBIGUITY_PROMPT.format(versions="\n\n".join(blocks))


def ambiguity_filter(items: Sequence[McqItem], client: ChatClient, concurrency: int = 4,
                     verdicts: VerdictLog | None = None):
    """Drop items the reviewer flags as multi-answer or cross-lingually inconsistent.

    A reviewer failure keeps the item and records a warning.
    """
    def run(item):
        try:
            raw, _ = client.complete(render_ambiguity_prompt(item), VERSIONS["ambiguity"], parse_ambiguity)
            return parse_ambiguity(raw), raw, None
        except (JudgeError, OSError) as exc:
            return None, None, f"{type(exc).__name__}: {exc}"

    kept, dropped = [], []
    for item, (label, raw, err) in zip(items, _map(run, list(items), concurrency)):
        if err is not None:
            log.warning("ambiguity review failed for %s; keeping it: %s", item.question_id, err)
            kept.append(item)
            if verdicts is not None:
                verdicts.add(item.question_id, "ambiguity", "keep-with-warning", {"error": err})
            continue
        drop = label != "CLEAN"
        (dropped if drop else kept).append(item)
        if verdicts is not None:
            verdicts.add(item.question_id, "ambiguity", "drop" if drop else "keep",
                         {"label": label, "raw": raw})
    return kept, dropped


# --- open-ended conversion ---------------------------------------------------------

@lru_cache(maxsize=None)
def cue_patterns() -> tuple[re.Pattern, ...]:
    text = resources.files("polyglot_grpo").joinpath("data", "cue_patterns.txt").read_text("utf-8")
    return tuple(re.compile(line.strip()) for line in text.splitlines()
                 if line.strip() and not line.lstrip().startswith("#"))


def find_cue(text: str) -> str | None:
    for pat in cue_patterns():
        m = pat.search(text)
        if m:
            return m.group(0)
    return None


def _parse_conversion(raw: str):
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError:
        start, end = raw.find("{"), raw.rfind("}")
        if start == -1 or end <= start:
            return None
        try:
            obj = json.loads(raw[start:end + 1])
        except json.JSONDecodeError:
            return None
    return obj if isinstance(obj, dict) else None


def _instance_from_conversion(obj: dict, iid: str, item: McqItem, entry: McqEntry) -> BenchInstance:
    question, answer, steps_raw = obj.get("question"), obj.get("answer"), obj.get("reasoning_steps")
    if not isinstance(question, str) or not isinstance(answer, str):
        raise SchemaError("question and answer must be text")
    if not isinstance(steps_raw, list) or not steps_raw:
        raise SchemaError("empty reasoning chain")
    steps = []
    for s in steps_raw:
        if isinstance(s, str):
            text, lang = s, None
        elif isinstance(s, dict) and isinstance(s.get("text"), str):
            text = s["text"]
            lang = parse_language_code(s["step_language"]) if s.get("step_language") else None
        else:
            raise SchemaError("reasoning step must be text")
        if not text.strip():
            raise SchemaError("empty reasoning step")
        steps.append(ReasoningStep(text, lang))
    for name, text in (("question", question), ("answer", answer)):
        cue = find_cue(text)
        if cue is not None:
            raise SchemaError(f"option cue {cue!r} in {name}")
    return BenchInstance(iid, entry.language, question, tuple(steps), answer, item.source_concept)


def to_open_ended(client: ChatClient, item: McqItem, max_attempts: int = 3,
                  verdicts: VerdictLog | None = None) -> list[BenchInstance]:
    """One open-ended instance per language entry; entries that never convert cleanly are skipped."""
    out = []
    for entry in item.entries:
        iid = f"{item.question_id}-{entry.language.iso}"
        base = CONVERT_PROMPT.format(language=entry.language.value, question=entry.question,
                                     answer=entry.answer_text)
        prompt, reason = base, None
        inst = None
        for attempt in range(max_attempts):
            try:
                raw, _ = client.complete(prompt, VERSIONS["convert"])
            except RemoteBackendError:
                raise
            except UnparseableReplyError as exc:
                reason = str(exc)
                prompt = base + CONVERT_RETRY_NOTE.format(reason="unreadable reply")
                continue
            obj = _parse_conversion(raw)
            try:
                if obj is None:
                    raise SchemaError("reply is not a JSON object")
                inst = _instance_from_conversion(obj, iid, item, entry)
                break
            except (SchemaError, DatasetError) as exc:
                reason = str(exc)
                log.info("conversion of %s rejected (attempt %d): %s", iid, attempt + 1, reason)
                prompt = base + CONVERT_RETRY_NOTE.format(reason=reason)
        if verdicts is not None:
            verdicts.add(item.question_id, "convert", "emit" if inst else "reject",
                         {"language": entry.language.value, "reason": None if inst else reason})
        if inst is not None:
            out.append(inst)
    return out


def convert_all(client: ChatClient, items: Sequence[McqItem], concurrency: int = 4,
                verdicts: VerdictLog | None = None) -> list[BenchInstance]:
    local_logs = [VerdictLog() for _ in items]
    results = _map(lambda pair: to_open_ended(client, pair[0], verdicts=pair[1]),
                   list(zip(items, local_logs)), concurrency)
    if verdicts is not None:
        for lg in local_logs:
            verdicts.records.extend(lg.records)
    return [inst for batch in results for inst in batch]


# --- deduplication -----------------------------------------------------------------------

def dedup_key(instance: BenchInstance) -> str:
    blob = f"{instance.language.value}\x00{normalize_answer(instance.question)}"
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def dedup(instances: Sequence[BenchInstance], verdicts: VerdictLog | None = None) -> list[BenchInstance]:
    seen: dict[str, str] = {}
    out = []
    for inst in instances:
        k = dedup_key(inst)
        if k in seen:
            if verdicts is not None:
                verdicts.add(inst.id, "dedup", "drop", {"duplicate_of": seen[k]})
            continue
        seen[k] = inst.id
        out.append(inst)
    return out


def make_client(model_name: str, transport: Callable[[dict], dict] | None, cache=None,
                max_tokens: int = 4096, temperature: float = 0.0, max_retries: int = 3,
                sleep=None) -> ChatClient:
    kwargs = {} if sleep is None else {"sleep": sleep}
    return ChatClient(model_name, transport, cache, max_retries, temperature, max_tokens, **kwargs)
