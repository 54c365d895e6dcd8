"""Learned-state types for the ungated comparison methods.

``MemoryBlock`` backs sequential and batch memory: a flat, unbounded list of
correction notes. ``RuleBook`` backs the ExpeL-style method: a bounded rule
list whose entries carry vote counters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

RULE_CAP = 20


@dataclass(frozen=True)
class Note:
    text: str
    tags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"text": self.text, "tags": list(self.tags)}

    @classmethod
    def from_dict(cls, data: dict) -> "Note":
        return cls(data["text"], tuple(data.get("tags", ())))


def _digest(payload: object) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class MemoryBlock:
    notes: tuple[Note, ...] = ()

    @property
    def fingerprint(self) -> str:
        return _digest([n.to_dict() for n in self.notes])

    def __len__(self) -> int:
        return len(self.notes)

    def active_tags(self) -> frozenset[str]:
        return frozenset(t for n in self.notes for t in n.tags)

    def injection_text(self) -> str:
        return "\n".join(f"- {n.text}" for n in self.notes)

    def append(self, *notes: Note) -> "MemoryBlock":
        return MemoryBlock(self.notes + tuple(notes))

    def to_dict(self) -> dict:
        return {"notes": [n.to_dict() for n in self.notes]}

    @classmethod
    def from_dict(cls, data: dict) -> "MemoryBlock":
        return cls(tuple(Note.from_dict(n) for n in data.get("notes", ())))

    def save(self, directory: Path) -> None:
        (directory / "memory.json").write_text(json.dumps(self.to_dict(), indent=2))


class RuleOp(str, Enum):
    AGREE = "AGREE"
    EDIT = "EDIT"
    REMOVE = "REMOVE"
    ADD = "ADD"


@dataclass(frozen=True)
class Rule:
    text: str
    tags: tuple[str, ...] = ()
    count: int = 2

    def to_dict(self) -> dict:
        return {"text": self.text, "tags": list(self.tags), "count": self.count}

    @classmethod
    def from_dict(cls, data: dict) -> "Rule":
        return cls(data["text"], tuple(data.get("tags", ())), int(data.get("count", 2)))


@dataclass(frozen=True)
class RuleEdit:
    op: RuleOp
    index: int | None = None
    rule: Rule | None = None


@dataclass(frozen=True)
class RuleBook:
    rules: tuple[Rule, ...] = ()
    cap: int = RULE_CAP

    @property
    def fingerprint(self) -> str:
        return _digest([r.to_dict() for r in self.rules])

    def __len__(self) -> int:
        return len(self.rules)

    def active_tags(self) -> frozenset[str]:
        return frozenset(t for r in self.rules for t in r.tags)

    def injection_text(self) -> str:
        return "\n".join(f"{i + 1}. {r.text}" for i, r in enumerate(self.rules))

    def apply(self, ops: list[RuleEdit]) -> "RuleBook":
        """Apply one extraction step's operations.

        AGREE and EDIT add a vote, REMOVE takes one away and drops the rule at
        zero, ADD enters with two votes. At the cap an ADD is only admitted if a
        REMOVE in the same step freed a slot.
        """
        rules: list[Rule | None] = list(self.rules)
        freed = 0
        for op in ops:
            if op.op is RuleOp.ADD:
                continue
            if op.index is None or not 0 <= op.index < len(rules) or rules[op.index] is None:
                continue
            rule = rules[op.index]
            if op.op is RuleOp.AGREE:
                rules[op.index] = replace(rule, count=rule.count + 1)
            elif op.op is RuleOp.EDIT and op.rule is not None:
                rules[op.index] = replace(op.rule, count=rule.count + 1)
            elif op.op is RuleOp.REMOVE:
                if rule.count <= 1:
                    rules[op.index] = None
                    freed += 1
                else:
                    rules[op.index] = replace(rule, count=rule.count - 1)
        kept = [r for r in rules if r is not None]
        for op in ops:
            if op.op is not RuleOp.ADD or op.rule is None:
                continue
            if len(kept) >= self.cap:
                continue
            if len(self.rules) >= self.cap and freed == 0:
                continue
            kept.append(replace(op.rule, count=2))
            freed = max(freed - 1, 0)
        return RuleBook(tuple(kept), self.cap)

    def to_dict(self) -> dict:
        return {"cap": self.cap, "rules": [r.to_dict() for r in self.rules]}

    @classmethod
    def from_dict(cls, data: dict) -> "RuleBook":
        return cls(tuple(Rule.from_dict(r) for r in data.get("rules", ())), int(data.get("cap", RULE_CAP)))

    def save(self, directory: Path) -> None:
        (directory / "rules.json").write_text(json.dumps(self.to_dict(), indent=2))
