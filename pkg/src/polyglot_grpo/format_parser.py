"""Parser for the ``<thinking>`` / ``<step n>`` / ``<answer>`` output scaffold."""

from __future__ import annotations

import re
from dataclasses import dataclass

THINKING_RE = re.compile(r"<thinking>(.*?)</thinking>", re.DOTALL)
ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
STEP_RE = re.compile(r"<step\s*([1-9][0-9]*)>(.*?)</step\s*\1>", re.DOTALL)
# any scaffold tag, opened or closed; used to strip markup before language detection
TAG_RE = re.compile(r"</?(?:thinking|answer|step\s*[0-9]+)>")


@dataclass(frozen=True)
class Step:
    index: int
    text: str


@dataclass(frozen=True)
class ParsedOutput:
    thinking: str | None
    steps: tuple[Step, ...]
    answer: str | None
    thinking_count: int
    answer_count: int
    well_formed: bool
    in_order: bool = True

    def diagnostics(self) -> dict:
        return {
            "thinking_count": self.thinking_count,
            "answer_count": self.answer_count,
            "step_indices": [s.index for s in self.steps],
            "in_order": self.in_order,
            "well_formed": self.well_formed,
        }


def parse_output(text: str, strict_order: bool = True) -> ParsedOutput:
    """Extract scaffold blocks from ``text``.

    Never raises: malformed text just yields ``well_formed=False``. With
    ``strict_order`` the thinking block must close before the answer block
    opens and both must be non-blank; without it only the block counts matter.
    """
    thinking_matches = list(THINKING_RE.finditer(text))
    answer_matches = list(ANSWER_RE.finditer(text))
    steps = tuple(Step(int(m.group(1)), m.group(2)) for m in STEP_RE.finditer(text))

    thinking = thinking_matches[0].group(1) if thinking_matches else None
    answer = answer_matches[0].group(1) if answer_matches else None

    counts_ok = len(thinking_matches) == 1 and len(answer_matches) == 1
    in_order = True
    if counts_ok:
        in_order = thinking_matches[0].end() <= answer_matches[0].start()
    well_formed = counts_ok
    if strict_order and counts_ok:
        well_formed = in_order and bool(thinking.strip()) and bool(answer.strip())

    return ParsedOutput(
        thinking=thinking,
        steps=steps,
        answer=answer,
        thinking_count=len(thinking_matches),
        answer_count=len(answer_matches),
        well_formed=well_formed,
        in_order=in_order,
    )


def format_reward(parsed: ParsedOutput) -> float:
    return 1.0 if parsed.well_formed else 0.0


def render_output(parsed: ParsedOutput) -> str:
    """Serialize the thinking and answer blocks back to scaffold text."""
    parts = []
    if parsed.thinking is not None:
        parts.append(f"<thinking>{parsed.thinking}</thinking>")
    if parsed.answer is not None:
        parts.append(f"<answer>{parsed.answer}</answer>")
    return "".join(parts)


def strip_tags(text: str) -> str:
    return TAG_RE.sub(" ", text)
