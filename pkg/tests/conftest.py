from __future__ import annotations

import json
from pathlib import Path

import pytest

from polyglot_grpo import policy
from polyglot_grpo.config import TOY_SFT_LR
from polyglot_grpo.core import make_splits, select

FIXTURES = Path(__file__).parent / "fixtures"

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def load_fixture(name: str):
    path = FIXTURES / name
    if path.suffix == ".jsonl":
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    return json.loads(path.read_text(encoding="utf-8"))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))


@pytest.fixture(scope="session")
def toy_task():
    return policy.ToyTask()


@pytest.fixture(scope="session")
def toy_sft(toy_task):
    """(SFT parameters, SFT report, SFT instances) for the toy task with the toy profile."""
    instances = toy_task.instances()
    split = make_splits(instances, 0)
    sft_set = select(instances, split.train_sft)
    init = policy.english_centric_init(toy_task.vocab)
    params, report = policy.sft_fit(init, toy_task, sft_set, policy.SftConfig(lr=TOY_SFT_LR))
    return params, report, sft_set
