"""Failure classification, label grouping, and candidate-edit generation.

Failing trajectories are labeled against an append-only vocabulary, grouped
by label, and the largest groups are handed to a skill-writer one call at a
time. Everything returned by a writer is checked against the capacity and
naming invariants before it can reach the gate.
"""

from __future__ import annotations

import hashlib
import random
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Protocol, Sequence

from .baselines import Note, Rule, RuleBook, RuleEdit, RuleOp
from .ledger import Outcome
from .runtime import BackendUnavailable, TaskSpec, TrajectoryTrace
from .skills import Edit, EditKind, SkillDoc, SkillLibrary

UNCLASSIFIED = "unclassified"
MERGED_LABEL = "all_failures"
PASSING_SAMPLE = 4

_LABEL_RE = re.compile(r"^[a-z][a-z0-9_]*$")
_SUFFIXES = ("_overreach", "_invalid_call")


def is_valid_label(label: object) -> bool:
    return isinstance(label, str) and bool(_LABEL_RE.match(label))


def to_label(text: str) -> str:
    """Coerce free text to a snake_case label."""
    label = re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_")
    if not label or not label[0].isalpha():
        label = f"l_{label}" if label else UNCLASSIFIED
    return label


@dataclass(frozen=True)
class ScoredTrace:
    """A batch episode as the proposer sees it."""

    task: TaskSpec
    outcome: Outcome
    trace: TrajectoryTrace

    @property
    def episode_id(self) -> str:
        return self.task.task_id


@dataclass(frozen=True)
class FailureLabel:
    label: str
    first_seen: tuple[int, int]


class Vocabulary:
    """Append-only label vocabulary; remembers where each label first appeared."""

    def __init__(self, entries: Sequence[FailureLabel] = ()):
        self._entries: dict[str, FailureLabel] = {}
        for entry in entries:
            self._entries.setdefault(entry.label, entry)

    def __contains__(self, label: object) -> bool:
        return label in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def labels(self) -> list[str]:
        return list(self._entries)

    def get(self, label: str) -> FailureLabel | None:
        return self._entries.get(label)

    def add(self, label: str, where: tuple[int, int]) -> FailureLabel:
        if label not in self._entries:
            self._entries[label] = FailureLabel(label, where)
        return self._entries[label]

    def to_list(self) -> list[dict]:
        return [{"label": e.label, "first_seen": list(e.first_seen)} for e in self._entries.values()]

    @classmethod
    def from_list(cls, data: Sequence[dict]) -> "Vocabulary":
        return cls([FailureLabel(d["label"], tuple(d["first_seen"])) for d in data])


@dataclass(frozen=True)
class LabeledTrace:
    item: ScoredTrace
    label: str
    new: bool = False


@dataclass(frozen=True)
class FailureGroup:
    label: str
    members: tuple[LabeledTrace, ...]

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class Refusal:
    reason: str


@dataclass(frozen=True)
class Rejection:
    reason: str
    detail: str = ""


@dataclass(frozen=True)
class ProposalContext:
    group: FailureGroup
    library: SkillLibrary
    passing: tuple[ScoredTrace, ...] = ()
    other_labels: tuple[str, ...] = ()
    attempt: int = 0
    allowed_kinds: frozenset[EditKind] | None = None

    def skill_summaries(self) -> list[dict]:
        stats = self.library.effectiveness()
        out = []
        for doc in self.library.skills:
            prov = doc.provenance.to_dict() if doc.provenance else {}
            out.append({"name": doc.name, "description": doc.description, "provenance": prov, **stats[doc.name]})
        return out


class Classifier(Protocol):
    def classify(self, items: Sequence[ScoredTrace], vocabulary: Sequence[str]) -> list[str | None]:
        """One label per item; ``None`` or garbage means unclassified."""
        ...


class SkillWriter(Protocol):
    def propose(self, ctx: ProposalContext) -> Edit | Refusal: ...

    def revise(self, edit: Edit, regressing: Sequence, traces: Sequence | None) -> Edit | Refusal: ...


def classify(
    failing: Sequence[ScoredTrace],
    vocabulary: Vocabulary,
    backend: Classifier,
    where: tuple[int, int] = (0, 0),
) -> list[LabeledTrace]:
    """Label every failing trace and grow the vocabulary with new labels.

    A backend that raises anything other than ``BackendUnavailable`` leaves
    the whole batch unclassified rather than aborting the update.
    """
    if not failing:
        return []
    try:
        raw = list(backend.classify(list(failing), vocabulary.labels))
    except BackendUnavailable:
        raise
    except Exception:
        raw = []
    raw += [None] * (len(failing) - len(raw))
    out = []
    for item, label in zip(failing, raw):
        if not is_valid_label(label):
            label = UNCLASSIFIED
        new = label not in vocabulary
        vocabulary.add(label, where)
        out.append(LabeledTrace(item, label, new))
    return out


def group_and_order(labeled: Sequence[LabeledTrace]) -> list[FailureGroup]:
    """Groups by label, largest first, ties broken by label."""
    by_label: dict[str, list[LabeledTrace]] = defaultdict(list)
    for lt in labeled:
        by_label[lt.label].append(lt)
    groups = [FailureGroup(label, tuple(members)) for label, members in by_label.items()]
    return sorted(groups, key=lambda g: (-g.size, g.label))


def merge_groups(labeled: Sequence[LabeledTrace]) -> list[FailureGroup]:
    """Single group holding every failure, for the no-grouping ablation."""
    return [FailureGroup(MERGED_LABEL, tuple(labeled))] if labeled else []


def sample_passing(passing: Sequence[ScoredTrace], k: int, seed: int) -> tuple[ScoredTrace, ...]:
    """Up to ``k`` passing traces, round-robin across task types."""
    rng = random.Random(seed)
    by_type: dict[str, list[ScoredTrace]] = defaultdict(list)
    for item in sorted(passing, key=lambda p: p.episode_id):
        by_type[item.task.task_type].append(item)
    queues = []
    for task_type in sorted(by_type):
        bucket = by_type[task_type]
        rng.shuffle(bucket)
        queues.append(bucket)
    chosen: list[ScoredTrace] = []
    while len(chosen) < k and any(queues):
        for bucket in queues:
            if bucket and len(chosen) < k:
                chosen.append(bucket.pop(0))
    return tuple(chosen)


def validate_capacity(
    edit: object, lib: SkillLibrary, allowed_kinds: frozenset[EditKind] | None = None
) -> Edit | Rejection:
    """Reject edits that could not be applied to ``lib``, before any probe cost."""
    if not isinstance(edit, Edit):
        return Rejection("malformed", repr(edit))
    if edit.kind is EditKind.REVERT:
        return Rejection("forbidden_kind", "REVERT is not a writer operation")
    if allowed_kinds is not None and edit.kind not in allowed_kinds:
        return Rejection("forbidden_kind", edit.kind.value)
    if edit.kind in (EditKind.ADD, EditKind.ADD_WITH_REMOVE, EditKind.MODIFY) and edit.doc is None:
        return Rejection("malformed", f"{edit.kind.value} without a document")
    if edit.kind is EditKind.ADD:
        if edit.doc.name in lib:
            return Rejection("duplicate_name", edit.doc.name)
        if len(lib) >= lib.capacity:
            return Rejection("capacity", f"ADD at capacity {lib.capacity} needs a paired REMOVE")
    elif edit.kind is EditKind.ADD_WITH_REMOVE:
        if edit.target not in lib:
            return Rejection("unknown_target", str(edit.target))
        if edit.doc.name in lib and edit.doc.name != edit.target:
            return Rejection("duplicate_name", edit.doc.name)
    elif edit.target not in lib:
        return Rejection("unknown_target", str(edit.target))
    return edit


@dataclass
class CandidateSet:
    edits: list[Edit] = field(default_factory=list)
    calls: int = 0
    refusals: list[str] = field(default_factory=list)
    rejections: list[Rejection] = field(default_factory=list)


def generate_candidates(
    groups: Sequence[FailureGroup],
    lib: SkillLibrary,
    K: int,
    writer: SkillWriter,
    passing: Sequence[ScoredTrace] = (),
    seed: int = 0,
    allowed_kinds: frozenset[EditKind] | None = None,
    max_workers: int = 1,
) -> CandidateSet:
    """Make exactly ``K`` writer calls, cycling over the ordered groups.

    With fewer groups than ``K`` the largest groups are asked again with a
    higher ``attempt`` number. Refused and invalid proposals are dropped, so
    fewer than ``K`` candidates may come back.
    """
    out = CandidateSet()
    if not groups or K <= 0:
        return out
    sample = sample_passing(passing, PASSING_SAMPLE, seed)
    labels = tuple(g.label for g in groups)
    contexts = [
        ProposalContext(
            group=groups[i % len(groups)],
            library=lib,
            passing=sample,
            other_labels=tuple(l for l in labels if l != groups[i % len(groups)].label),
            attempt=i // len(groups),
            allowed_kinds=allowed_kinds,
        )
        for i in range(K)
    ]
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(writer.propose, contexts))
    else:
        results = [writer.propose(ctx) for ctx in contexts]
    out.calls = len(contexts)
    for result in results:
        if isinstance(result, Refusal):
            out.refusals.append(result.reason)
            continue
        checked = validate_capacity(result, lib, allowed_kinds)
        if isinstance(checked, Rejection):
            out.rejections.append(checked)
        else:
            out.edits.append(checked)
    return out


# ---------------------------------------------------------------------------
# Scripted backends over scenario pools
# ---------------------------------------------------------------------------


def _hash_int(*parts: object) -> int:
    return int.from_bytes(hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest(), "big")


def _tag_skill(name: str, label: str, tags: Sequence[str], description: str | None = None) -> SkillDoc:
    tag_text = ", ".join(f"`{t}`" for t in tags) or "no specific procedure"
    return SkillDoc(
        name=name,
        description=description or f"Prevents the {label.replace('_', ' ')} failure pattern.",
        tags=tuple(tags),
        sections=(
            ("Trigger", f"Tasks that previously ended with `{label}`."),
            ("Rule", f"You must apply {tag_text} before submitting a final answer."),
            ("Verification", "Re-read the task constraints and confirm each one holds before finishing."),
            ("Example", f"Failing: the agent skipped {tag_text}.\nCorrected: the agent applied it and then answered."),
        ),
    )


class ScriptedClassifier:
    """Labels a failure by its outcome detail, optionally renamed by a label map."""

    def __init__(self, labels: Mapping[str, str] | None = None):
        self.labels = dict(labels or {})

    def label_of(self, outcome: Outcome) -> str | None:
        if outcome.detail is None:
            return None
        return self.labels.get(outcome.detail, to_label(outcome.detail))

    def classify(self, items: Sequence[ScoredTrace], vocabulary: Sequence[str]) -> list[str | None]:
        return [self.label_of(item.outcome) for item in items]


class ScriptedWriter:
    """Deterministic skill-writer that draws edits from per-label pools.

    A pool entry is a mapping with ``name`` and ``tags`` (an ADD), or
    ``kind: MODIFY`` / ``kind: REMOVE`` with a ``target``. An optional
    ``revision`` tag list is what ``revise`` returns for that entry. Which
    entry is drawn depends on the seed, the library fingerprint, the label,
    the attempt number and the group's episode ids, so the writer is
    stateless and replayable.
    """

    def __init__(
        self,
        pools: Mapping[str, Sequence[dict]],
        seed: int = 0,
        labels: Mapping[str, str] | None = None,
        pair_remove_at_capacity: bool = True,
    ):
        self.pools = {k: tuple(v) for k, v in pools.items()}
        self.seed = seed
        self.classifier = ScriptedClassifier(labels)
        self.pair_remove_at_capacity = pair_remove_at_capacity

    @classmethod
    def from_scenario(cls, scenario, seed: int = 0) -> "ScriptedWriter":
        return cls(scenario.pools, seed, scenario.labels, scenario.pair_remove_at_capacity)

    def _pick(self, fingerprint: str, label: str, attempt: int, evidence: str = "") -> tuple[int, dict] | None:
        pool = self.pools.get(label)
        if not pool:
            return None
        idx = _hash_int(self.seed, fingerprint, label, attempt, evidence) % len(pool)
        return idx, pool[idx]

    def _label_for(self, ctx: ProposalContext) -> str:
        if ctx.group.label != MERGED_LABEL or not ctx.group.members:
            return ctx.group.label
        members = ctx.group.members
        i = _hash_int(self.seed, ctx.library.fingerprint, MERGED_LABEL, ctx.attempt) % len(members)
        return self.classifier.label_of(members[i].item.outcome) or UNCLASSIFIED

    def propose(self, ctx: ProposalContext) -> Edit | Refusal:
        label = self._label_for(ctx)
        lib = ctx.library
        evidence = ",".join(sorted(m.item.episode_id for m in ctx.group.members))
        picked = self._pick(lib.fingerprint, label, ctx.attempt, evidence)
        if picked is None:
            return self._repair(label, lib, ctx.allowed_kinds)
        idx, entry = picked
        rationale = f"pool:{label}:{idx}"
        kind = str(entry.get("kind", "ADD")).upper()
        add_only = ctx.allowed_kinds is not None and EditKind.MODIFY not in ctx.allowed_kinds
        if kind == "REMOVE":
            if add_only:
                return Refusal("kind_not_allowed")
            return Edit.remove(str(entry["target"]), rationale)
        if kind == "MODIFY":
            if add_only:
                return Refusal("kind_not_allowed")
            target = str(entry["target"])
            return Edit.modify(target, _tag_skill(target, label, entry.get("tags", ())), rationale)
        name = str(entry["name"])
        if name in lib:
            if add_only:
                name = self._fresh_name(name, lib)
            else:
                return Edit.modify(name, _tag_skill(name, label, entry.get("tags", ())), rationale)
        doc = _tag_skill(name, label, entry.get("tags", ()), entry.get("description"))
        if len(lib) >= lib.capacity and self.pair_remove_at_capacity and not add_only:
            return Edit.add_with_remove(doc, lib.skills[0].name, rationale)
        return Edit.add(doc, rationale)

    @staticmethod
    def _fresh_name(name: str, lib: SkillLibrary) -> str:
        n = 2
        while f"{name}_{n}" in lib:
            n += 1
        return f"{name}_{n}"

    def _repair(self, label: str, lib: SkillLibrary, allowed: frozenset[EditKind] | None) -> Edit | Refusal:
        """Without a pool, answer an overreach or invalid-call label by pruning the culprit tag."""
        tag = next((label[: -len(s)] for s in _SUFFIXES if label.endswith(s)), None)
        if tag is None:
            return Refusal("no_pool")
        culprit = next((d for d in lib.skills if tag in d.tags), None)
        if culprit is None:
            return Refusal("no_culprit")
        kept = tuple(t for t in culprit.tags if t != tag)
        rationale = f"repair:{label}"
        if kept:
            edit = Edit.modify(culprit.name, replace(culprit, tags=kept, provenance=None), rationale)
        else:
            edit = Edit.remove(culprit.name, rationale)
        if allowed is not None and edit.kind not in allowed:
            return Refusal("kind_not_allowed")
        return edit

    def _entry_of(self, edit: Edit) -> dict | None:
        parts = edit.rationale.split(":")
        if len(parts) != 3 or parts[0] != "pool":
            return None
        pool = self.pools.get(parts[1], ())
        idx = int(parts[2])
        return pool[idx] if idx < len(pool) else None

    def revise(self, edit: Edit, regressing: Sequence, traces: Sequence | None = None) -> Edit | Refusal:
        entry = self._entry_of(edit)
        if entry is None or "revision" not in entry or edit.doc is None:
            return Refusal("no_revision")
        doc = replace(edit.doc, tags=tuple(entry["revision"]), provenance=None)
        return replace(edit, doc=doc, rationale=edit.rationale + ":revised")

    def prefer(self, candidates: Sequence[Edit]) -> int:
        """The scripted writer always prefers its first proposal."""
        return 0

    # Helpers for the ungated memory baselines.

    def _tags_for(self, item: ScoredTrace, fingerprint: str) -> tuple[str, tuple[str, ...]]:
        label = self.classifier.label_of(item.outcome) or UNCLASSIFIED
        picked = self._pick(fingerprint, label, 0, item.episode_id)
        if picked is None or str(picked[1].get("kind", "ADD")).upper() == "REMOVE":
            return label, ()
        return label, tuple(picked[1].get("tags", ()))

    def note(self, failed: ScoredTrace, fingerprint: str) -> Note:
        label, tags = self._tags_for(failed, fingerprint)
        return Note(f"On {failed.task.task_type} tasks, avoid {label.replace('_', ' ')}.", tags)

    def consolidate(self, failed: Sequence[ScoredTrace], fingerprint: str) -> Note:
        labels, tags = [], []
        for item in failed:
            label, item_tags = self._tags_for(item, fingerprint)
            if label not in labels:
                labels.append(label)
            tags += [t for t in item_tags if t not in tags]
        return Note("Batch lessons: avoid " + ", ".join(l.replace("_", " ") for l in labels) + ".", tuple(tags))

    def expel_ops(self, failed: ScoredTrace, book: RuleBook) -> list[RuleEdit]:
        label, tags = self._tags_for(failed, book.fingerprint)
        rule = Rule(f"Avoid {label.replace('_', ' ')}.", tags)
        ops = []
        culprit = next((label[: -len(s)] for s in _SUFFIXES if label.endswith(s)), None)
        if culprit is not None:
            ops += [RuleEdit(RuleOp.REMOVE, i) for i, r in enumerate(book.rules) if culprit in r.tags]
            return ops
        same = next((i for i, r in enumerate(book.rules) if r.tags == tags), None)
        if same is not None:
            return [RuleEdit(RuleOp.AGREE, same)]
        overlap = next((i for i, r in enumerate(book.rules) if set(r.tags) & set(tags)), None)
        if overlap is not None:
            return [RuleEdit(RuleOp.EDIT, overlap, rule)]
        if len(book) >= book.cap:
            weakest = min(range(len(book.rules)), key=lambda i: (book.rules[i].count, i))
            ops.append(RuleEdit(RuleOp.REMOVE, weakest))
        ops.append(RuleEdit(RuleOp.ADD, rule=rule))
        return ops
