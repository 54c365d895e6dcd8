from pathlib import Path

import pytest

from skillgate.envsim import resolve_scenario
from skillgate.skills import SkillDoc

FIXTURES = Path(__file__).parent / "fixtures"
SKILL_FIXTURES = sorted((FIXTURES / "skills").glob("*.md"))


@pytest.fixture
def tiny():
    return resolve_scenario("tiny")


def make_doc(name: str, tags=(), description: str = "does a thing", **kw) -> SkillDoc:
    sections = kw.pop("sections", (("Trigger", "When it applies."), ("Rule", "Do the thing.")))
    return SkillDoc(name=name, description=description, tags=tuple(tags), sections=sections, **kw)


# Pass/fail lines for the acceptance criteria, printed at the end of the run.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_TOTAL = 9


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    ran = [i.nodeid for i in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
           if "test_acceptance" in i.nodeid]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_TOTAL + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
