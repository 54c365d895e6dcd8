"""Types shared by every episode runner, synthetic or LLM-backed."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Protocol

from .ledger import Outcome, Split


class RunnerError(RuntimeError):
    """A single episode could not be executed; the episode counts as errored."""


class BackendUnavailable(RuntimeError):
    """A backend is down; the run halts and can be resumed."""


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    task_type: str
    split: Split
    params: dict[str, Any] = field(default_factory=dict, compare=False, hash=False)


@dataclass(frozen=True)
class TrajectoryTrace:
    steps: tuple[tuple[str, str], ...]
    final_answer: str = ""
    expected_answer: str | None = None
    rejected_action: str | None = None

    def to_dict(self) -> dict:
        return {
            "steps": [list(s) for s in self.steps],
            "final_answer": self.final_answer,
            "expected_answer": self.expected_answer,
            "rejected_action": self.rejected_action,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrajectoryTrace":
        return cls(
            steps=tuple(tuple(s) for s in data["steps"]),
            final_answer=data.get("final_answer", ""),
            expected_answer=data.get("expected_answer"),
            rejected_action=data.get("rejected_action"),
        )


class Injectable(Protocol):
    """Learned state that can be placed in an agent prompt."""

    @property
    def fingerprint(self) -> str: ...

    def active_tags(self) -> frozenset[str]: ...

    def injection_text(self) -> str: ...


class EpisodeRunner(Protocol):
    def run(self, state: Injectable, task: TaskSpec) -> tuple[Outcome, TrajectoryTrace]:
        """Run one episode. Must not mutate ``state``; raises ``RunnerError`` on failure."""
        ...
