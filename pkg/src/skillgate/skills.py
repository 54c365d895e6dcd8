"""Skill documents and the capacity-bounded skill library.

A skill is a Markdown document with a YAML frontmatter block::

    ---
    name: skill_name
    description: one-line description
    tags: [tag1, tag2]
    version: 1
    provenance:
      epoch: 0
      update_cycle: 2
      action: ADD
      probe_score: 4
    ---

    ## Trigger
    ...

The library is an immutable value. ``apply_edit`` returns a new library and
never touches its input, so forks for candidate scoring are free.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import yaml

FRONTMATTER_KEYS = ("name", "description", "tags", "version", "provenance")
PROVENANCE_KEYS = ("epoch", "update_cycle", "action", "probe_score")
REQUIRED_KEYS = ("name", "description", "version")
DEFAULT_CAPACITY = 10

ARCHIVE_DIR = "_archive"
EDIT_LOG = "edit_log.jsonl"

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.\-]*$")
_KEY_RE = re.compile(r"^([A-Za-z_][\w\-]*)\s*:")


class SkillError(Exception):
    """Base class for skill and library errors."""


class SkillParseError(SkillError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class CapacityError(SkillError):
    pass


class TargetError(SkillError):
    pass


class Action(str, Enum):
    ADD = "ADD"
    MODIFY = "MODIFY"
    REMOVE = "REMOVE"


class EditKind(str, Enum):
    ADD = "ADD"
    MODIFY = "MODIFY"
    REMOVE = "REMOVE"
    ADD_WITH_REMOVE = "ADD_WITH_REMOVE"
    # Log-only: restores a snapshot; never produced by a writer.
    REVERT = "REVERT"


@dataclass(frozen=True)
class Provenance:
    epoch: int | None = None
    update_cycle: int | None = None
    action: Action | None = None
    probe_score: int | None = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "update_cycle": self.update_cycle,
            "action": self.action.value if self.action else None,
            "probe_score": self.probe_score,
        }


@dataclass(frozen=True)
class SkillDoc:
    """One versioned behavioral instruction.

    ``sections`` is an ordered sequence of ``(heading, text)`` pairs taken
    from the ``## `` headings of the body. ``extra`` holds unknown
    frontmatter blocks as raw lines so they survive a round trip.
    """

    name: str
    description: str
    tags: tuple[str, ...] = ()
    version: int = 1
    provenance: Provenance | None = None
    sections: tuple[tuple[str, str], ...] = ()
    extra: tuple[str, ...] = ()
    preamble: str = ""

    def __post_init__(self):
        if not self.name or not _NAME_RE.match(self.name):
            raise SkillError(f"invalid skill name {self.name!r}")
        if isinstance(self.version, bool) or not isinstance(self.version, int) or self.version < 1:
            raise SkillError(f"version must be a positive integer, got {self.version!r}")
        object.__setattr__(self, "tags", tuple(self.tags))
        object.__setattr__(self, "sections", tuple((str(k), str(v)) for k, v in self.sections))

    @property
    def body_sections(self) -> dict[str, str]:
        return dict(self.sections)

    def section(self, heading: str) -> str | None:
        return self.body_sections.get(heading)


# ---------------------------------------------------------------------------
# Parsing and rendering
# ---------------------------------------------------------------------------


def _split_blocks(lines: list[str], first_lineno: int) -> list[tuple[str, int, list[str]]]:
    blocks: list[tuple[str, int, list[str]]] = []
    for offset, line in enumerate(lines):
        lineno = first_lineno + offset
        match = _KEY_RE.match(line)
        if match:
            blocks.append((match.group(1), lineno, [line]))
        elif not line.strip() or line.lstrip().startswith("#"):
            if blocks:
                blocks[-1][2].append(line)
        elif not blocks or not line[:1].isspace():
            raise SkillParseError(f"expected 'key: value' in frontmatter, got {line!r}", lineno)
        else:
            blocks[-1][2].append(line)
    return blocks


def _load_block(key: str, lineno: int, raw: list[str]):
    try:
        loaded = yaml.safe_load("\n".join(raw))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = lineno + (mark.line if mark is not None else 0)
        raise SkillParseError(f"malformed value for {key!r}: {exc}", line) from None
    if not isinstance(loaded, dict) or key not in loaded:
        raise SkillParseError(f"malformed value for {key!r}", lineno)
    return loaded[key]


def _as_int(value, key: str, lineno: int, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SkillParseError(f"malformed {key}: expected an integer, got {value!r}", lineno)
    if minimum is not None and value < minimum:
        raise SkillParseError(f"malformed {key}: must be >= {minimum}, got {value}", lineno)
    return value


def _parse_provenance(value, lineno: int) -> Provenance:
    if value is None:
        return Provenance()
    if not isinstance(value, dict):
        raise SkillParseError("provenance must be a mapping", lineno)
    unknown = set(value) - set(PROVENANCE_KEYS)
    if unknown:
        raise SkillParseError(f"unknown provenance keys: {sorted(unknown)}", lineno)
    fields = {}
    for key in ("epoch", "update_cycle"):
        if value.get(key) is not None:
            fields[key] = _as_int(value[key], f"provenance.{key}", lineno, minimum=0)
    if value.get("probe_score") is not None:
        fields["probe_score"] = _as_int(value["probe_score"], "provenance.probe_score", lineno)
    if value.get("action") is not None:
        try:
            fields["action"] = Action(str(value["action"]))
        except ValueError:
            raise SkillParseError(f"unknown provenance.action {value['action']!r}", lineno) from None
    return Provenance(**fields)


def _split_sections(body: list[str], first_lineno: int) -> tuple[str, tuple[tuple[str, str], ...]]:
    preamble: list[str] = []
    sections: list[tuple[str, list[str]]] = []
    seen: set[str] = set()
    in_fence = False
    for offset, line in enumerate(body):
        if line.lstrip().startswith("```"):
            in_fence = not in_fence
        if not in_fence and line.startswith("## "):
            heading = line[3:].strip()
            if heading in seen:
                raise SkillParseError(f"duplicate section {heading!r}", first_lineno + offset)
            seen.add(heading)
            sections.append((heading, []))
        elif sections:
            sections[-1][1].append(line)
        else:
            preamble.append(line)
    return _trim(preamble), tuple((h, _trim(text)) for h, text in sections)


def _trim(lines: list[str]) -> str:
    start, end = 0, len(lines)
    while start < end and not lines[start].strip():
        start += 1
    while end > start and not lines[end - 1].strip():
        end -= 1
    return "\n".join(lines[start:end])


def parse_skill(text: str) -> SkillDoc:
    """Parse a skill document. Raises ``SkillParseError`` naming the line."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != "---":
        raise SkillParseError("missing opening '---' frontmatter delimiter", 1)
    end = next((i for i in range(1, len(lines)) if lines[i].strip() == "---"), None)
    if end is None:
        raise SkillParseError("missing closing '---' frontmatter delimiter", len(lines))

    values: dict[str, tuple[object, int]] = {}
    extra: list[str] = []
    for key, lineno, raw in _split_blocks(lines[1:end], first_lineno=2):
        if key in values or (key not in FRONTMATTER_KEYS and any(e.startswith(f"{key}:") for e in extra)):
            raise SkillParseError(f"duplicate frontmatter key {key!r}", lineno)
        if key in FRONTMATTER_KEYS:
            values[key] = (_load_block(key, lineno, raw), lineno)
        else:
            extra.extend(_trim(raw).splitlines())

    for key in REQUIRED_KEYS:
        if key not in values:
            raise SkillParseError(f"missing required key {key!r}", end + 1)

    name, name_line = values["name"]
    if not isinstance(name, str) or not _NAME_RE.match(name):
        raise SkillParseError(f"invalid name {name!r}", name_line)
    description, _ = values["description"]
    description = "" if description is None else str(description)
    raw_version, version_line = values["version"]
    version = _as_int(raw_version, "version", version_line, minimum=1)

    tags: tuple[str, ...] = ()
    if "tags" in values:
        raw_tags, tags_line = values["tags"]
        if raw_tags is None:
            raw_tags = []
        if not isinstance(raw_tags, list):
            raise SkillParseError("tags must be a list", tags_line)
        tags = tuple(str(t) for t in raw_tags)

    provenance = None
    if "provenance" in values:
        provenance = _parse_provenance(*values["provenance"])

    preamble, sections = _split_sections(lines[end + 1 :], first_lineno=end + 2)
    return SkillDoc(
        name=name,
        description=description,
        tags=tags,
        version=version,
        provenance=provenance,
        sections=sections,
        extra=tuple(extra),
        preamble=preamble,
    )


def _plain_ok(value: str, wrap: str) -> bool:
    if not value or value != value.strip():
        return False
    try:
        return yaml.safe_load(wrap.format(value)) == (
            [value] if wrap.startswith("[") else {"k": value}
        )
    except yaml.YAMLError:
        return False


def _scalar(value: str, in_flow: bool = False) -> str:
    if _plain_ok(value, "[{}]" if in_flow else "k: {}"):
        return value
    return json.dumps(value, ensure_ascii=False)


def render_skill(doc: SkillDoc) -> str:
    """Render the canonical form of a skill document."""
    head = [
        "---",
        f"name: {doc.name}",
        f"description: {_scalar(doc.description) if doc.description else ''}".rstrip(),
        "tags: [" + ", ".join(_scalar(t, in_flow=True) for t in doc.tags) + "]",
        f"version: {doc.version}",
    ]
    if doc.provenance is not None:
        head.append("provenance:")
        for key in PROVENANCE_KEYS:
            value = getattr(doc.provenance, key)
            if value is not None:
                head.append(f"  {key}: {value.value if isinstance(value, Enum) else value}")
    head.extend(doc.extra)
    head.append("---")

    blocks = [doc.preamble] if doc.preamble else []
    for heading, text in doc.sections:
        blocks.append(f"## {heading}")
        if text:
            blocks.append(text)
    text = "\n".join(head) + "\n"
    if blocks:
        text += "\n" + "\n\n".join(blocks) + "\n"
    return text


def canonicalize(text: str) -> str:
    return render_skill(parse_skill(text))


# ---------------------------------------------------------------------------
# Edits and the library
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Edit:
    kind: EditKind
    doc: SkillDoc | None = None
    # MODIFY/REMOVE target, or the removed name of ADD_WITH_REMOVE.
    target: str | None = None
    rationale: str = ""
    snapshot: tuple[SkillDoc, ...] = ()

    @classmethod
    def add(cls, doc: SkillDoc, rationale: str = "") -> "Edit":
        return cls(EditKind.ADD, doc=doc, rationale=rationale)

    @classmethod
    def modify(cls, target: str, doc: SkillDoc, rationale: str = "") -> "Edit":
        return cls(EditKind.MODIFY, doc=doc, target=target, rationale=rationale)

    @classmethod
    def remove(cls, target: str, rationale: str = "") -> "Edit":
        return cls(EditKind.REMOVE, target=target, rationale=rationale)

    @classmethod
    def add_with_remove(cls, doc: SkillDoc, removed: str, rationale: str = "") -> "Edit":
        return cls(EditKind.ADD_WITH_REMOVE, doc=doc, target=removed, rationale=rationale)

    @property
    def subject(self) -> str | None:
        """Name of the skill the edit writes (or removes, for REMOVE)."""
        if self.kind is EditKind.MODIFY or self.kind is EditKind.REMOVE:
            return self.target
        return self.doc.name if self.doc else None

    def describe(self) -> str:
        if self.kind is EditKind.ADD_WITH_REMOVE:
            return f"ADD {self.doc.name} / REMOVE {self.target}"
        if self.kind is EditKind.REVERT:
            return f"REVERT to {self.target}"
        return f"{self.kind.value} {self.subject}"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "target": self.target,
            "doc": render_skill(self.doc) if self.doc else None,
            "rationale": self.rationale,
            "snapshot": [render_skill(d) for d in self.snapshot],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Edit":
        return cls(
            kind=EditKind(data["kind"]),
            doc=parse_skill(data["doc"]) if data.get("doc") else None,
            target=data.get("target"),
            rationale=data.get("rationale", ""),
            snapshot=tuple(parse_skill(t) for t in data.get("snapshot", ())),
        )


@dataclass(frozen=True)
class EditRecord:
    """One applied edit, as kept in the library's append-only log."""

    edit: Edit
    fingerprint_after: str
    epoch: int = 0
    update_cycle: int = 0
    probe_score: int | None = None
    report_ref: str | None = None
    timestamp: str = ""

    def to_dict(self) -> dict:
        data = self.edit.to_dict()
        data.update(
            timestamp=self.timestamp,
            probe_score=self.probe_score,
            fingerprint_after=self.fingerprint_after,
            epoch=self.epoch,
            update_cycle=self.update_cycle,
            report_ref=self.report_ref,
        )
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "EditRecord":
        return cls(
            edit=Edit.from_dict(data),
            fingerprint_after=data["fingerprint_after"],
            epoch=data.get("epoch", 0),
            update_cycle=data.get("update_cycle", 0),
            probe_score=data.get("probe_score"),
            report_ref=data.get("report_ref"),
            timestamp=data.get("timestamp", ""),
        )


def fingerprint_of(skills: Iterable[SkillDoc]) -> str:
    digest = hashlib.sha256()
    for doc in skills:
        digest.update(render_skill(doc).encode("utf-8"))
    return digest.hexdigest()


EMPTY_FINGERPRINT = fingerprint_of(())


@dataclass(frozen=True)
class SkillLibrary:
    skills: tuple[SkillDoc, ...] = ()
    capacity: int = DEFAULT_CAPACITY
    edit_log: tuple[EditRecord, ...] = ()
    archive: tuple[SkillDoc, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        names = [d.name for d in self.skills]
        if len(set(names)) != len(names):
            raise SkillError(f"duplicate skill names in library: {names}")
        if len(self.skills) > self.capacity:
            raise CapacityError(f"{len(self.skills)} skills exceed capacity {self.capacity}")

    @cached_property
    def fingerprint(self) -> str:
        return fingerprint_of(self.skills)

    def __len__(self) -> int:
        return len(self.skills)

    def __contains__(self, name: object) -> bool:
        return any(d.name == name for d in self.skills)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.skills]

    def get(self, name: str) -> SkillDoc | None:
        return next((d for d in self.skills if d.name == name), None)

    def active_tags(self) -> frozenset[str]:
        return frozenset(t for d in self.skills for t in d.tags)

    def injection_text(self) -> str:
        return render_injection(self)

    def effectiveness(self) -> dict[str, dict]:
        """Per active skill: accepted-library states it was present in, and its probe score.

        Informational only; the proposer is free to ignore it.
        """
        members: set[str] = set()
        present: dict[str, int] = {}
        for rec in self.edit_log:
            edit = rec.edit
            if edit.kind is EditKind.REVERT:
                members = {d.name for d in edit.snapshot}
            elif edit.kind is EditKind.REMOVE:
                members.discard(edit.target)
            elif edit.kind is EditKind.ADD_WITH_REMOVE:
                members.discard(edit.target)
                members.add(edit.doc.name)
            else:
                members.add(edit.subject)
            for name in members:
                present[name] = present.get(name, 0) + 1
        stats = {}
        for doc in self.skills:
            stats[doc.name] = {
                "present_in_accepted": present.get(doc.name, 0),
                "probe_score": doc.provenance.probe_score if doc.provenance else None,
            }
        return stats


def _stamp(doc: SkillDoc, version: int, action: Action, epoch, cycle, score) -> SkillDoc:
    return replace(
        doc,
        version=version,
        provenance=Provenance(epoch=epoch, update_cycle=cycle, action=action, probe_score=score),
    )


def apply_edit(
    lib: SkillLibrary,
    edit: Edit,
    *,
    epoch: int = 0,
    update_cycle: int = 0,
    probe_score: int | None = None,
    report_ref: str | None = None,
) -> SkillLibrary:
    """Apply ``edit`` to a fork of ``lib`` and return the fork."""
    skills = list(lib.skills)
    archive = list(lib.archive)

    def index_of(name: str | None) -> int:
        for i, doc in enumerate(skills):
            if doc.name == name:
                return i
        raise TargetError(f"no skill named {name!r} in library")

    kind = edit.kind
    if kind in (EditKind.ADD, EditKind.ADD_WITH_REMOVE, EditKind.MODIFY) and edit.doc is None:
        raise TargetError(f"{kind.value} edit carries no document")
    if kind is EditKind.ADD:
        if edit.doc.name in lib:
            raise TargetError(f"skill {edit.doc.name!r} already exists")
        if len(skills) >= lib.capacity:
            raise CapacityError(f"library at capacity {lib.capacity}; ADD needs a paired REMOVE")
        skills.append(_stamp(edit.doc, 1, Action.ADD, epoch, update_cycle, probe_score))
    elif kind is EditKind.ADD_WITH_REMOVE:
        removed = skills.pop(index_of(edit.target))
        archive.append(removed)
        if any(d.name == edit.doc.name for d in skills):
            raise TargetError(f"skill {edit.doc.name!r} already exists")
        if len(skills) >= lib.capacity:
            raise CapacityError(f"library over capacity {lib.capacity}")
        skills.append(_stamp(edit.doc, 1, Action.ADD, epoch, update_cycle, probe_score))
    elif kind is EditKind.MODIFY:
        i = index_of(edit.target)
        old = skills[i]
        archive.append(old)
        new = replace(edit.doc, name=old.name)
        skills[i] = _stamp(new, old.version + 1, Action.MODIFY, epoch, update_cycle, probe_score)
    elif kind is EditKind.REMOVE:
        archive.append(skills.pop(index_of(edit.target)))
    elif kind is EditKind.REVERT:
        if len(edit.snapshot) > lib.capacity:
            raise CapacityError("snapshot exceeds capacity")
        archive.extend(d for d in skills if d not in edit.snapshot)
        skills = list(edit.snapshot)
    else:  # pragma: no cover
        raise ValueError(f"unknown edit kind {kind}")

    fingerprint = fingerprint_of(skills)
    record = EditRecord(
        edit=edit,
        fingerprint_after=fingerprint,
        epoch=epoch,
        update_cycle=update_cycle,
        probe_score=probe_score,
        report_ref=report_ref,
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    return SkillLibrary(
        skills=tuple(skills),
        capacity=lib.capacity,
        edit_log=lib.edit_log + (record,),
        archive=tuple(archive),
    )


def replay(records: Sequence[EditRecord], capacity: int = DEFAULT_CAPACITY) -> SkillLibrary:
    """Rebuild a library by replaying an edit log from the empty library."""
    lib = SkillLibrary(capacity=capacity)
    for rec in records:
        lib = apply_edit(
            lib,
            rec.edit,
            epoch=rec.epoch,
            update_cycle=rec.update_cycle,
            probe_score=rec.probe_score,
            report_ref=rec.report_ref,
        )
        if lib.fingerprint != rec.fingerprint_after:
            raise SkillError(
                f"edit log diverged at {rec.edit.describe()}: "
                f"{lib.fingerprint[:12]} != {rec.fingerprint_after[:12]}"
            )
    return lib


def logged_fingerprints(lib: SkillLibrary) -> list[str]:
    return [EMPTY_FINGERPRINT] + [rec.fingerprint_after for rec in lib.edit_log]


def state_at(lib: SkillLibrary, fingerprint: str) -> SkillLibrary:
    """Library state after the last logged edit producing ``fingerprint``."""
    fps = logged_fingerprints(lib)
    if fingerprint not in fps:
        matches = [fp for fp in fps if fp.startswith(fingerprint)]
        if len(set(matches)) != 1:
            raise TargetError(f"unknown fingerprint {fingerprint!r}")
        fingerprint = matches[0]
    cut = max(i for i, fp in enumerate(fps) if fp == fingerprint)
    return replay(lib.edit_log[:cut], lib.capacity)


def revert(lib: SkillLibrary, fingerprint: str) -> SkillLibrary:
    """Restore a prior logged state; the revert is itself appended to the log."""
    target = state_at(lib, fingerprint)
    edit = Edit(EditKind.REVERT, target=target.fingerprint, snapshot=target.skills)
    return apply_edit(lib, edit)


def render_injection(lib: SkillLibrary) -> str:
    """Text placed in the agent prompt's behavioral-skills field."""
    return "\n".join(render_skill(doc) for doc in lib.skills)


def token_proxy(text: str) -> int:
    return round(len(text.split()) * 1.3)


# ---------------------------------------------------------------------------
# Diffs
# ---------------------------------------------------------------------------


def diff_libraries(old: SkillLibrary, new: SkillLibrary) -> list[str]:
    """Section-level differences between two library states."""
    lines: list[str] = []
    old_by, new_by = {d.name: d for d in old.skills}, {d.name: d for d in new.skills}
    for name in old_by.keys() - new_by.keys():
        lines.append(f"REMOVE {name} (v{old_by[name].version})")
    for name in new.names:
        if name not in old_by:
            lines.append(f"ADD {name} (v{new_by[name].version})")
            continue
        a, b = old_by[name], new_by[name]
        if a == b:
            continue
        lines.append(f"MODIFY {name} (v{a.version} -> v{b.version})")
        if a.tags != b.tags:
            lines.append(f"  tags: {list(a.tags)} -> {list(b.tags)}")
        if a.description != b.description:
            lines.append(f"  description: {a.description!r} -> {b.description!r}")
        sa, sb = a.body_sections, b.body_sections
        for heading in list(sa) + [h for h in sb if h not in sa]:
            if heading not in sb:
                lines.append(f"  - section {heading}")
            elif heading not in sa:
                lines.append(f"  + section {heading}")
            elif sa[heading] != sb[heading]:
                lines.append(f"  ~ section {heading}")
                for d in difflib.unified_diff(
                    sa[heading].splitlines(), sb[heading].splitlines(), lineterm="", n=0
                ):
                    if not d.startswith(("---", "+++", "@@")):
                        lines.append(f"      {d}")
    return lines


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------


def save_library(lib: SkillLibrary, directory: str | Path) -> Path:
    """Write ``<dir>/<name>.md`` per skill, the archive, and extend ``edit_log.jsonl``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    archive_dir = directory / ARCHIVE_DIR
    archive_dir.mkdir(exist_ok=True)

    for stale in directory.glob("*.md"):
        if stale.stem not in lib:
            stale.unlink()
    for doc in lib.skills:
        (directory / f"{doc.name}.md").write_text(render_skill(doc), encoding="utf-8")
    for doc in lib.archive:
        (archive_dir / f"{doc.name}.v{doc.version}.md").write_text(render_skill(doc), encoding="utf-8")

    log_path = directory / EDIT_LOG
    existing = log_path.read_text(encoding="utf-8").splitlines() if log_path.exists() else []
    if len(existing) > len(lib.edit_log):
        raise SkillError(f"{log_path} has more records than the library being saved")
    for line, rec in zip(existing, lib.edit_log):
        if json.loads(line)["fingerprint_after"] != rec.fingerprint_after:
            raise SkillError(f"{log_path} diverges from the library being saved")
    with log_path.open("a", encoding="utf-8") as fh:
        for rec in lib.edit_log[len(existing) :]:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    return directory


def read_edit_log(path: str | Path) -> list[EditRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [
        EditRecord.from_dict(json.loads(line))
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


def load_library(directory: str | Path, capacity: int = DEFAULT_CAPACITY) -> SkillLibrary:
    """Load a library directory.

    With an edit log, the library is rebuilt by replay and checked against the
    skill files on disk. Without one, skill files are loaded in name order.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise SkillError(f"not a library directory: {directory}")
    on_disk = {p.stem: parse_skill(p.read_text(encoding="utf-8")) for p in sorted(directory.glob("*.md"))}
    records = read_edit_log(directory / EDIT_LOG)
    if not records:
        return SkillLibrary(skills=tuple(on_disk.values()), capacity=capacity)
    lib = replay(records, capacity)
    if {d.name: d for d in lib.skills} != on_disk:
        raise SkillError(f"skill files in {directory} do not match the replayed edit log")
    return lib
