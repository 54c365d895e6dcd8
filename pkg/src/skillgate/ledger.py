"""Append-only episode ledger and best-validation checkpointing.

Records are one JSON object per line. The ledger is the history that probes
are drawn from: ``query_prior`` only ever returns training-phase dev records
from batches that precede the one asking.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable


class Split(str, Enum):
    DEV = "dev"
    VAL = "val"
    TEST = "test"
    OOD = "ood"


class Phase(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    FINAL = "final"


class OutcomeKind(str, Enum):
    PASS = "Pass"
    FAIL = "Fail"
    INVALID = "InvalidAction"


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    detail: str | None = None

    @property
    def passed(self) -> bool:
        return self.kind is OutcomeKind.PASS

    @property
    def invalid(self) -> bool:
        return self.kind is OutcomeKind.INVALID

    @classmethod
    def passing(cls) -> "Outcome":
        return cls(OutcomeKind.PASS)

    @classmethod
    def fail(cls, detail: str | None = None) -> "Outcome":
        return cls(OutcomeKind.FAIL, detail)

    @classmethod
    def invalid_action(cls, detail: str | None = None) -> "Outcome":
        return cls(OutcomeKind.INVALID, detail)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "detail": self.detail}

    @classmethod
    def from_dict(cls, data: dict) -> "Outcome":
        return cls(OutcomeKind(data["kind"]), data.get("detail"))


class DuplicateError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeRecord:
    episode_id: str
    task_type: str
    split: Split
    epoch: int
    batch_index: int
    library_fingerprint: str
    outcome: Outcome
    trace_ref: str | None = None
    phase: Phase = Phase.TRAIN

    @property
    def key(self) -> tuple:
        return (self.episode_id, self.epoch, self.batch_index, self.library_fingerprint, self.phase.value)

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "task_type": self.task_type,
            "split": self.split.value,
            "epoch": self.epoch,
            "batch_index": self.batch_index,
            "library_fingerprint": self.library_fingerprint,
            "outcome": self.outcome.to_dict(),
            "trace_ref": self.trace_ref,
            "phase": self.phase.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EpisodeRecord":
        return cls(
            episode_id=data["episode_id"],
            task_type=data["task_type"],
            split=Split(data["split"]),
            epoch=data["epoch"],
            batch_index=data["batch_index"],
            library_fingerprint=data["library_fingerprint"],
            outcome=Outcome.from_dict(data["outcome"]),
            trace_ref=data.get("trace_ref"),
            phase=Phase(data.get("phase", "train")),
        )


def accuracy(records: Iterable[EpisodeRecord]) -> float:
    records = list(records)
    if not records:
        return 0.0
    return sum(r.outcome.passed for r in records) / len(records)


def append_jsonl(path: Path | None, obj: Any) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True) + "\n")
        fh.flush()


def read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


class Ledger:
    """Episode history, optionally backed by a JSONL file.

    Opening an existing file loads its records, which is how a resumed run
    picks up its history.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._records: list[EpisodeRecord] = []
        self._keys: dict[tuple, EpisodeRecord] = {}
        # (epoch, batch_index, splits returned), one entry per query_prior call
        self.reads: list[tuple[int, int, frozenset[str]]] = []
        if self.path is not None and self.path.exists():
            for data in read_jsonl(self.path):
                rec = EpisodeRecord.from_dict(data)
                self._records.append(rec)
                self._keys[rec.key] = rec

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> list[EpisodeRecord]:
        return list(self._records)

    def record(self, rec: EpisodeRecord, *, replay_ok: bool = False) -> int:
        """Append ``rec``; returns the history size.

        With ``replay_ok`` an identical existing record is accepted silently,
        which lets a resumed run re-execute its interrupted batch.
        """
        existing = self._keys.get(rec.key)
        if existing is not None:
            if replay_ok and existing == rec:
                return len(self._records)
            raise DuplicateError(f"episode already recorded: {rec.key}")
        self._records.append(rec)
        self._keys[rec.key] = rec
        append_jsonl(self.path, rec.to_dict())
        return len(self._records)

    def batch(self, epoch: int, batch_index: int) -> list[EpisodeRecord]:
        return [
            r
            for r in self._records
            if r.phase is Phase.TRAIN and r.epoch == epoch and r.batch_index == batch_index
        ]

    def query_prior(self, epoch: int, batch_index: int, split: Split = Split.DEV) -> list[EpisodeRecord]:
        """Training records from earlier batches of ``epoch``.

        For the first batch of an epoch the previous epoch's records are
        returned instead. The asking batch itself is never included.
        """
        train = [r for r in self._records if r.phase is Phase.TRAIN and r.split is split]
        prior = [r for r in train if r.epoch == epoch and r.batch_index < batch_index]
        if batch_index == 0 and epoch > 0:
            prior = [r for r in train if r.epoch == epoch - 1]
        self.reads.append((epoch, batch_index, frozenset(r.split.value for r in prior)))
        return prior


@dataclass(frozen=True)
class Checkpoint:
    epoch: int
    state: Any
    validation_accuracy: float
    fingerprint: str


class Checkpointer:
    """Keeps the learned state with the strictly best validation accuracy.

    ``saver(state, directory)`` persists a state; when a directory is given,
    the checkpoint is written as ``<directory>/`` plus ``meta.json``.
    """

    def __init__(
        self,
        directory: str | Path | None = None,
        saver: Callable[[Any, Path], None] | None = None,
    ):
        self.directory = Path(directory) if directory is not None else None
        self.saver = saver
        self.best: Checkpoint | None = None

    def checkpoint_if_improved(self, epoch: int, state: Any, val_acc: float) -> bool:
        if not 0.0 <= val_acc <= 1.0:
            raise ValueError(f"validation accuracy must be in [0, 1], got {val_acc}")
        if self.best is not None and val_acc <= self.best.validation_accuracy:
            return False
        self.best = Checkpoint(epoch, state, val_acc, state.fingerprint)
        if self.directory is not None:
            if self.directory.exists():
                shutil.rmtree(self.directory)
            self.directory.mkdir(parents=True)
            if self.saver is not None:
                self.saver(state, self.directory)
            meta = {"epoch": epoch, "val_acc": val_acc, "fingerprint": state.fingerprint}
            (self.directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return True

    def restore(self) -> Any:
        if self.best is None:
            raise LookupError("no checkpoint stored")
        return self.best.state
