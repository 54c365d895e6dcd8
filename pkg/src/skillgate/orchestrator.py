"""Training protocol, update policies, transfer, and one-at-a-time sweeps.

Each epoch shuffles the dev split into batches of ``B``. Every batch is run
under the current learned state, recorded, and handed to the policy's update
step. After an epoch the state is scored on val and checkpointed if it beat
every earlier epoch; after the last epoch the best state is restored and
evaluated once on test (and OOD when the world has it).
"""

from __future__ import annotations

import hashlib
import json
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import yaml

from .baselines import MemoryBlock, RuleBook
from .gate import CandidateScore, Decision, build_probe, run_gate
from .ledger import Checkpointer, EpisodeRecord, Ledger, Outcome, Phase, Split, accuracy, append_jsonl, read_jsonl
from .proposer import (
    Classifier,
    LabeledTrace,
    ScoredTrace,
    ScriptedClassifier,
    ScriptedWriter,
    SkillWriter,
    Vocabulary,
    classify,
    generate_candidates,
    group_and_order,
    merge_groups,
)
from .runtime import (
    BackendUnavailable,
    ConfigurationError,
    EpisodeRunner,
    Injectable,
    RunnerError,
    TaskSpec,
    TrajectoryTrace,
)
from .skills import (
    Edit,
    EditKind,
    EditRecord,
    SkillError,
    SkillLibrary,
    apply_edit,
    replay,
    save_library,
)

RUNNER_ERROR = "runner_error"
STATE_FILE = "state.json"
RESUME_MARKER = "RESUME"
RESULT_FILE = "result.json"
LEDGER_FILE = "ledger.jsonl"
REPORTS_FILE = "gate_reports.jsonl"
TRACES_FILE = "traces.jsonl"


class UnsupportedPolicy(NotImplementedError):
    pass


class RunHalted(RuntimeError):
    """A backend went away mid-run; the run directory can be resumed."""

    def __init__(self, message: str, epoch: int, batch_index: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index


def derive_seed(*parts: object) -> int:
    return int.from_bytes(hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest(), "big")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingConfig:
    B: int = 48
    N: int = 36
    K: int = 4
    lam: float = 2.0
    epochs: int = 5
    capacity: int = 10
    seed: int = 0
    policy: str = "grasp"
    backend: str = "synthetic"
    scenario: str | None = None
    adapter: str | None = None
    endpoints: Mapping[str, Any] = field(default_factory=dict)
    max_workers: int = 1
    run_id: str | None = None

    def __post_init__(self):
        for name in ("B", "N", "K", "epochs", "capacity", "max_workers"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.N % 2:
            raise ConfigurationError(f"N must be even, got {self.N}")
        if not self.lam > 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lam}")
        if self.backend not in ("synthetic", "llm"):
            raise ConfigurationError(f"unknown backend {self.backend!r}")

    def with_(self, **changes) -> "TrainingConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["endpoints"] = dict(self.endpoints)
        return data


_ALIASES = {"lambda": "lam", "λ": "lam", "batch_size": "B", "probe_size": "N"}
_FIELD_NAMES = {f.name for f in fields(TrainingConfig)}


def _interpolate(text: str, source: str) -> str:
    out = []
    for lineno, line in enumerate(text.splitlines(keepends=True), 1):
        pos = 0
        while (start := line.find("${", pos)) != -1:
            end = line.find("}", start)
            if end == -1:
                raise ConfigurationError(f"{source}:{lineno}: unterminated ${{...}}")
            ref = line[start + 2 : end]
            name, _, default = ref.partition(":-")
            value = os.environ.get(name, default if ":-" in ref else None)
            if value is None:
                raise ConfigurationError(f"{source}:{lineno}: environment variable {name} is not set")
            line = line[:start] + value + line[end + 1 :]
            pos = start + len(value)
        out.append(line)
    return "".join(out)


def config_from_mapping(data: Mapping[str, Any], lines: Mapping[str, int] | None = None,
                        source: str = "<config>") -> TrainingConfig:
    lines = lines or {}
    kwargs = {}
    for key, value in data.items():
        name = _ALIASES.get(key, key)
        where = f"{source}:{lines[key]}" if key in lines else source
        if name not in _FIELD_NAMES:
            raise ConfigurationError(f"{where}: unknown config key {key!r}")
        if name == "lam":
            value = float(value)
        kwargs[name] = value
    try:
        return TrainingConfig(**kwargs)
    except ConfigurationError as exc:
        bad = next((k for k in data if _ALIASES.get(k, k) in str(exc)), None)
        where = f"{source}:{lines[bad]}" if bad in lines else source
        raise ConfigurationError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{source}: {exc}") from None


def load_config(path: str | Path) -> TrainingConfig:
    """Read a YAML run config, expanding ``${VAR}`` and ``${VAR:-default}``."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"{path}: {exc.strerror}") from None
    text = _interpolate(raw, str(path))
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigurationError(f"{where}: {getattr(exc, 'problem', None) or exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}:1: config must be a mapping")
    lines = {}
    if node is not None and isinstance(node, yaml.MappingNode):
        lines = {k.value: k.start_mark.line + 1 for k, _ in node.value}
    cfg = config_from_mapping(data, lines, str(path))
    if cfg.scenario and not Path(cfg.scenario).is_absolute():
        local = path.parent / cfg.scenario
        if local.exists():
            cfg = cfg.with_(scenario=str(local))
    return cfg


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


@dataclass
class Backends:
    runner: EpisodeRunner
    classifier: Classifier
    writer: SkillWriter
    tasks: Mapping[Split, Sequence[TaskSpec]]
    world: Any = None

    def split(self, split: Split) -> list[TaskSpec]:
        return list(self.tasks.get(split, ()))


def synthetic_backends(scenario, seed: int) -> Backends:
    from .envsim import SynthRunner

    world = scenario.world
    return Backends(
        runner=SynthRunner(world, seed),
        classifier=ScriptedClassifier(scenario.labels),
        writer=ScriptedWriter.from_scenario(scenario, seed),
        tasks={sp: world.tasks(sp) for sp in Split},
        world=world,
    )


def build_backends(cfg: TrainingConfig) -> Backends:
    if cfg.backend == "synthetic":
        from .envsim import resolve_scenario

        return synthetic_backends(resolve_scenario(cfg.scenario or "tiny"), cfg.seed)
    from .llm import llm_backends

    return llm_backends(cfg)


# ---------------------------------------------------------------------------
# Call accounting
# ---------------------------------------------------------------------------


@dataclass
class CallTally:
    classify_calls: int = 0
    propose_calls: int = 0
    revise_calls: int = 0
    memory_calls: int = 0
    prefer_calls: int = 0
    probe_calls: int = 0
    revision_probe_calls: int = 0
    episode_calls: int = 0

    @property
    def update_calls(self) -> int:
        return self.classify_calls + self.propose_calls + self.revise_calls + self.memory_calls + self.prefer_calls

    def to_dict(self) -> dict:
        return {**asdict(self), "update_calls": self.update_calls}

    @classmethod
    def from_dict(cls, data: Mapping) -> "CallTally":
        return cls(**{f.name: int(data.get(f.name, 0)) for f in fields(cls)})

    def minus(self, other: "CallTally") -> "CallTally":
        return CallTally(**{f.name: getattr(self, f.name) - getattr(other, f.name) for f in fields(self)})


# ---------------------------------------------------------------------------
# Update policies
# ---------------------------------------------------------------------------


@dataclass
class UpdateContext:
    cfg: TrainingConfig
    epoch: int
    batch_index: int
    update_cycle: int
    items: list[ScoredTrace]
    ledger: Ledger
    backends: Backends
    vocabulary: Vocabulary
    tally: CallTally
    tasks_by_id: Mapping[str, TaskSpec]
    observer: Callable[[dict], None] | None = None
    report_ref: str | None = None

    @property
    def failing(self) -> list[ScoredTrace]:
        return [i for i in self.items if not i.outcome.passed]

    @property
    def passing(self) -> list[ScoredTrace]:
        return [i for i in self.items if i.outcome.passed]

    def seed(self, purpose: str) -> int:
        return derive_seed(self.cfg.seed, purpose, self.epoch, self.batch_index)

    def classify(self) -> list[LabeledTrace]:
        failing = self.failing
        if not failing:
            return []
        self.tally.classify_calls += 1
        return classify(failing, self.vocabulary, self.backends.classifier, (self.epoch, self.batch_index))


class UpdatePolicy:
    """Base class; subclasses define the per-batch update step."""

    name = "base"

    def initial_state(self, cfg: TrainingConfig) -> Injectable:
        return SkillLibrary(capacity=cfg.capacity)

    def update(self, state, ctx: UpdateContext) -> tuple[Any, dict]:
        raise NotImplementedError

    def dump_state(self, state) -> dict:
        return {"capacity": state.capacity, "edit_log": [r.to_dict() for r in state.edit_log]}

    def load_state(self, data: Mapping) -> Any:
        lib = replay([EditRecord.from_dict(r) for r in data["edit_log"]], capacity=data["capacity"])
        return lib

    def save_state(self, state, directory: Path) -> None:
        save_library(state, directory)


def _labels_field(labeled: Sequence[LabeledTrace]) -> list[list[str]]:
    return [[lt.item.episode_id, lt.label] for lt in labeled]


class NoSkills(UpdatePolicy):
    name = "noskills"

    def update(self, state, ctx):
        return state, {"decision": {"decision": "Skipped"}, "reason": "no_updates"}


class Grasp(UpdatePolicy):
    """Grouped proposals scored on a held-out probe under a regression budget.

    The flags reproduce the gated ablations: ``grouping=False`` merges all
    failures into one group, ``enforce_budget=False`` admits on score alone,
    ``fixes_only`` drops the pass side of the probe, ``add_only`` limits the
    writer to ADD, and ``select`` replaces score-based selection with writer
    preference or a uniform draw.
    """

    name = "grasp"

    def __init__(
        self,
        *,
        grouping: bool = True,
        enforce_budget: bool = True,
        fixes_only: bool = False,
        add_only: bool = False,
        select: str | None = None,
        revise: bool = True,
        name: str | None = None,
    ):
        if select not in (None, "proposer", "random"):
            raise ConfigurationError(f"unknown selection mode {select!r}")
        self.grouping = grouping
        self.enforce_budget = enforce_budget
        self.fixes_only = fixes_only
        self.allowed_kinds = frozenset({EditKind.ADD}) if add_only else None
        self.select = select
        self.revise = revise
        if name:
            self.name = name

    def _selector(self, ctx: UpdateContext, candidates: Sequence[Edit]):
        if self.select is None:
            return None
        if self.select == "random":
            rng = random.Random(ctx.seed("select"))

            def pick(scores: Sequence[CandidateScore]) -> int | None:
                valid = [s.index for s in scores if s.rejected_reason is None]
                return rng.choice(valid) if valid else None

            return pick

        def prefer(scores: Sequence[CandidateScore]) -> int | None:
            valid = [s.index for s in scores if s.rejected_reason is None]
            if not valid:
                return None
            ctx.tally.prefer_calls += 1
            choice = ctx.backends.writer.prefer([candidates[i] for i in valid])
            return valid[choice] if isinstance(choice, int) and 0 <= choice < len(valid) else valid[0]

        return prefer

    def update(self, state: SkillLibrary, ctx: UpdateContext):
        labeled = ctx.classify()
        report: dict = {"labels": _labels_field(labeled)}
        batch_ids = {i.episode_id for i in ctx.items}
        prior = ctx.ledger.query_prior(ctx.epoch, ctx.batch_index, Split.DEV)
        probe = build_probe(prior, ctx.cfg.N, ctx.seed("probe"), exclude_ids=batch_ids)
        if self.fixes_only:
            probe = probe.without_pass_side()
        report["probe"] = probe.to_dict()
        if len(probe) == 0:
            report.update(decision=Decision.skip().to_dict(), reason="empty_probe")
            return state, report
        if not labeled:
            report.update(decision=Decision.skip().to_dict(), reason="no_failures")
            return state, report
        groups = group_and_order(labeled) if self.grouping else merge_groups(labeled)
        cands = generate_candidates(
            groups, state, ctx.cfg.K, ctx.backends.writer, ctx.passing,
            seed=ctx.seed("passing"), allowed_kinds=self.allowed_kinds, max_workers=ctx.cfg.max_workers,
        )
        ctx.tally.propose_calls += cands.calls
        result = run_gate(
            state, cands.edits, probe, ctx.backends.runner, ctx.tasks_by_id, ctx.backends.writer,
            lam=ctx.cfg.lam, enforce_budget=self.enforce_budget, revise=self.revise,
            selector=self._selector(ctx, cands.edits), epoch=ctx.epoch, update_cycle=ctx.update_cycle,
            report_ref=ctx.report_ref, max_workers=ctx.cfg.max_workers,
        )
        ctx.tally.probe_calls += result.probe_calls
        ctx.tally.revision_probe_calls += result.revision_probe_calls
        ctx.tally.revise_calls += result.revise_calls
        if ctx.observer is not None:
            ctx.observer({
                "policy": self.name, "epoch": ctx.epoch, "batch_index": ctx.batch_index,
                "library": state, "candidates": list(cands.edits), "probe": probe,
                "result": result, "lam": ctx.cfg.lam, "enforce_budget": self.enforce_budget,
                "revise": self.revise, "writer": ctx.backends.writer,
            })
        report.update(result.report_fields())
        report["groups"] = [[g.label, g.size] for g in groups]
        report["refusals"] = cands.refusals
        report["rejections"] = [[r.reason, r.detail] for r in cands.rejections]
        report["k_valid"] = len(cands.edits)
        return result.library, report


def fifo_apply(lib: SkillLibrary, edit: Edit, **stamp) -> SkillLibrary | None:
    """Apply ``edit`` unconditionally, evicting the oldest skill when full.

    Edits made stale by an earlier edit in the same batch are adapted where
    the intent is clear (ADD of an existing name becomes MODIFY) and
    otherwise skipped.
    """
    if edit.kind in (EditKind.ADD, EditKind.ADD_WITH_REMOVE) and edit.doc is not None:
        if edit.doc.name in lib:
            edit = Edit.modify(edit.doc.name, edit.doc, edit.rationale)
        elif edit.kind is EditKind.ADD_WITH_REMOVE and edit.target in lib:
            pass
        elif len(lib) >= lib.capacity:
            edit = Edit.add_with_remove(edit.doc, lib.skills[0].name, edit.rationale)
        else:
            edit = Edit.add(edit.doc, edit.rationale)
    try:
        return apply_edit(lib, edit, **stamp)
    except SkillError:
        return None


class NoGateK(UpdatePolicy):
    """Applies every proposed edit without any probe; ``k`` writer calls per batch."""

    def __init__(self, k: int):
        if k < 1:
            raise ConfigurationError("NoGateK needs k >= 1")
        self.k = k
        self.name = f"nogate_k{k}"

    def update(self, state: SkillLibrary, ctx: UpdateContext):
        labeled = ctx.classify()
        report: dict = {"labels": _labels_field(labeled)}
        if not labeled:
            report.update(decision=Decision.skip().to_dict(), reason="no_failures")
            return state, report
        cands = generate_candidates(
            group_and_order(labeled), state, self.k, ctx.backends.writer, ctx.passing,
            seed=ctx.seed("passing"), max_workers=ctx.cfg.max_workers,
        )
        ctx.tally.propose_calls += cands.calls
        applied = []
        for edit in cands.edits:
            new = fifo_apply(state, edit, epoch=ctx.epoch, update_cycle=ctx.update_cycle, report_ref=ctx.report_ref)
            if new is not None:
                state = new
                applied.append(edit.describe())
        label = "Applied" if applied else "Rejected"
        report.update(decision={"decision": label, "edits": applied}, k_valid=len(cands.edits))
        return state, report


class _MemoryPolicy(UpdatePolicy):
    def initial_state(self, cfg):
        return MemoryBlock()

    def dump_state(self, state: MemoryBlock) -> dict:
        return state.to_dict()

    def load_state(self, data):
        return MemoryBlock.from_dict(data)

    def save_state(self, state: MemoryBlock, directory: Path) -> None:
        state.save(directory)


class SeqMemory(_MemoryPolicy):
    """One correction note per failing episode, never pruned."""

    name = "seq_memory"

    def update(self, state: MemoryBlock, ctx):
        failing = ctx.failing
        notes = [ctx.backends.writer.note(item, state.fingerprint) for item in failing]
        ctx.tally.memory_calls += len(failing)
        return state.append(*notes), {"decision": {"decision": "Applied" if notes else "Skipped"}, "notes": len(notes)}


class BatchMemory(_MemoryPolicy):
    """One consolidated note per batch."""

    name = "batch_memory"

    def update(self, state: MemoryBlock, ctx):
        failing = ctx.failing
        if not failing:
            return state, {"decision": {"decision": "Skipped"}, "notes": 0}
        ctx.tally.memory_calls += 1
        note = ctx.backends.writer.consolidate(failing, state.fingerprint)
        return state.append(note), {"decision": {"decision": "Applied"}, "notes": 1}


class ExpeLLite(UpdatePolicy):
    """Bounded rule list maintained with AGREE/EDIT/REMOVE/ADD votes."""

    name = "expel"

    def initial_state(self, cfg):
        return RuleBook()

    def update(self, state: RuleBook, ctx):
        ops_applied = 0
        for item in ctx.failing:
            ops = ctx.backends.writer.expel_ops(item, state)
            ctx.tally.memory_calls += 1
            state = state.apply(ops)
            ops_applied += len(ops)
        return state, {"decision": {"decision": "Applied" if ops_applied else "Skipped"}, "ops": ops_applied}

    def dump_state(self, state: RuleBook) -> dict:
        return state.to_dict()

    def load_state(self, data):
        return RuleBook.from_dict(data)

    def save_state(self, state: RuleBook, directory: Path) -> None:
        state.save(directory)


class _Stub(UpdatePolicy):
    def __init__(self, name: str):
        self.name = name

    def initial_state(self, cfg):
        raise UnsupportedPolicy(f"{self.name} needs a retrieval store and is not implemented")


POLICIES: dict[str, Callable[[TrainingConfig], UpdatePolicy]] = {
    "noskills": lambda cfg: NoSkills(),
    "grasp": lambda cfg: Grasp(),
    "seq_memory": lambda cfg: SeqMemory(),
    "batch_memory": lambda cfg: BatchMemory(),
    "expel": lambda cfg: ExpeLLite(),
    "nogate": lambda cfg: NoGateK(cfg.K),
    "nogate_k1": lambda cfg: NoGateK(1),
    "nogate_k4": lambda cfg: NoGateK(4),
    "nogrouping": lambda cfg: Grasp(grouping=False, name="nogrouping"),
    "nobudget": lambda cfg: Grasp(enforce_budget=False, name="nobudget"),
    "fixes_only": lambda cfg: Grasp(fixes_only=True, name="fixes_only"),
    "append_only": lambda cfg: Grasp(add_only=True, name="append_only"),
    "matched_proposer": lambda cfg: Grasp(select="proposer", name="matched_proposer"),
    "matched_random": lambda cfg: Grasp(select="random", name="matched_random"),
    "evo_medagent": lambda cfg: _Stub("evo_medagent"),
    "skillx": lambda cfg: _Stub("skillx"),
}

ABLATION_PRESET = (
    "grasp", "nogrouping", "nobudget", "fixes_only", "append_only",
    "nogate_k4", "nogate_k1", "matched_proposer", "matched_random", "noskills",
)


def make_policy(cfg: TrainingConfig) -> UpdatePolicy:
    name = cfg.policy.lower()
    if name.startswith("nogate_k") and name[8:].isdigit():
        return NoGateK(int(name[8:]))
    if name not in POLICIES:
        raise ConfigurationError(f"unknown policy {cfg.policy!r}; choose from {', '.join(POLICIES)}")
    policy = POLICIES[name](cfg)
    if isinstance(policy, _Stub):
        policy.initial_state(cfg)
    return policy


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


def run_episodes(
    state: Injectable, tasks: Sequence[TaskSpec], runner: EpisodeRunner, max_workers: int = 1
) -> list[ScoredTrace]:
    """Run each task once; a runner error becomes a failed episode."""

    def one(task: TaskSpec) -> ScoredTrace:
        try:
            outcome, trace = runner.run(state, task)
        except RunnerError as exc:
            outcome, trace = Outcome.fail(f"{RUNNER_ERROR}: {exc}"), TrajectoryTrace(())
        return ScoredTrace(task, outcome, trace)

    if max_workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(one, tasks))
    return [one(t) for t in tasks]


def batches_for_epoch(dev: Sequence[TaskSpec], B: int, seed: int, epoch: int) -> list[list[TaskSpec]]:
    order = sorted(dev, key=lambda t: t.task_id)
    random.Random(derive_seed(seed, "shuffle", epoch)).shuffle(order)
    return [order[i : i + B] for i in range(0, len(order), B)]


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    run_id: str
    policy: str
    config: dict
    val_accuracy: list[float]
    best_epoch: int
    best_val_accuracy: float
    best_fingerprint: str
    test_accuracy: float
    ood_accuracy: float | None
    calls: dict
    n_batches: int
    applied_batches: int
    vocabulary_size: int
    final_state: Any = field(default=None, repr=False, compare=False)
    reports: list[dict] = field(default_factory=list, repr=False, compare=False)

    def to_dict(self) -> dict:
        data = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("final_state", "reports")}
        return data

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunResult":
        run_dir = Path(run_dir)
        data = json.loads((run_dir / RESULT_FILE).read_text(encoding="utf-8"))
        result = cls(**data)
        result.reports = read_jsonl(run_dir / REPORTS_FILE)
        return result


def _report_summary(report: dict) -> str:
    return (report.get("decision") or {}).get("decision", "Skipped")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _record_split(ledger: Ledger, items: Sequence[ScoredTrace], epoch: int, fingerprint: str, phase: Phase) -> None:
    for item in items:
        ledger.record(EpisodeRecord(
            item.episode_id, item.task.task_type, item.task.split, epoch, 0, fingerprint, item.outcome, None, phase,
        ))


def _truncate_jsonl(path: Path, keep: int) -> None:
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    path.write_text("".join(lines[:keep]), encoding="utf-8")


def _evaluate(state, tasks: Sequence[TaskSpec], backends: Backends, cfg: TrainingConfig, tally: CallTally):
    items = run_episodes(state, tasks, backends.runner, cfg.max_workers)
    tally.episode_calls += len(items)
    return items


def train(
    cfg: TrainingConfig,
    backends: Backends | None = None,
    out_dir: str | Path | None = None,
    *,
    resume: bool = False,
    observer: Callable[[dict], None] | None = None,
    policy: UpdatePolicy | None = None,
) -> RunResult:
    """Run the full protocol and return its result.

    With ``out_dir`` the run writes its ledger, gate reports, traces, a
    per-batch ``state.json`` and finally ``result.json``. ``resume`` picks up
    after the last completed batch recorded in ``state.json``.
    """
    backends = backends or build_backends(cfg)
    policy = policy or make_policy(cfg)
    dev, val = backends.split(Split.DEV), backends.split(Split.VAL)
    if not dev or not val:
        raise ConfigurationError("dev and val splits must be non-empty")
    tasks_by_id = {t.task_id: t for t in dev}
    run_id = cfg.run_id or f"{policy.name}-seed{cfg.seed}"

    run_dir = Path(out_dir) if out_dir is not None else None
    saved: dict | None = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        state_path = run_dir / STATE_FILE
        if resume:
            if not state_path.exists():
                raise ConfigurationError(f"{run_dir}: nothing to resume")
            saved = json.loads(state_path.read_text(encoding="utf-8"))
            if saved.get("config") != cfg.to_dict():
                raise ConfigurationError(f"{run_dir}: config differs from the interrupted run")
            _truncate_jsonl(run_dir / LEDGER_FILE, saved["ledger_len"])
            _truncate_jsonl(run_dir / REPORTS_FILE, saved["reports_len"])
        else:
            for name in (LEDGER_FILE, REPORTS_FILE, TRACES_FILE, STATE_FILE, RESULT_FILE, RESUME_MARKER):
                (run_dir / name).unlink(missing_ok=True)
    ledger = Ledger(run_dir / LEDGER_FILE if run_dir else None)
    checkpointer = Checkpointer(run_dir / "checkpoint" if run_dir else None, policy.save_state)

    state = policy.initial_state(cfg)
    vocab, tally = Vocabulary(), CallTally()
    reports: list[dict] = []
    val_history: list[float] = []
    start_epoch, start_batch, update_cycle = 0, 0, 0
    if saved is not None:
        state = policy.load_state(saved["state"])
        if state.fingerprint != saved["fingerprint"]:
            raise ConfigurationError(f"{run_dir}: saved state does not match its fingerprint")
        vocab = Vocabulary.from_list(saved["vocabulary"])
        tally = CallTally.from_dict(saved["tally"])
        reports = read_jsonl(run_dir / REPORTS_FILE)
        val_history = list(saved["val_history"])
        start_epoch, start_batch, update_cycle = saved["epoch"], saved["batch_index"], saved["update_cycle"]
        if saved.get("best"):
            best = saved["best"]
            checkpointer.checkpoint_if_improved(best["epoch"], policy.load_state(best["state"]), best["val"])

    def persist(epoch: int, batch_index: int) -> None:
        if run_dir is None:
            return
        best = checkpointer.best
        payload = {
            "config": cfg.to_dict(), "epoch": epoch, "batch_index": batch_index, "update_cycle": update_cycle,
            "state": policy.dump_state(state), "fingerprint": state.fingerprint,
            "vocabulary": vocab.to_list(), "tally": tally.to_dict(), "val_history": val_history,
            "ledger_len": len(ledger), "reports_len": len(reports),
            "best": {"epoch": best.epoch, "val": best.validation_accuracy, "state": policy.dump_state(best.state)}
            if best else None,
        }
        tmp = run_dir / (STATE_FILE + ".tmp")
        tmp.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
        tmp.replace(run_dir / STATE_FILE)

    def halt(exc: BackendUnavailable, epoch: int, batch_index: int):
        if run_dir is not None:
            (run_dir / RESUME_MARKER).write_text(
                json.dumps({"epoch": epoch, "batch_index": batch_index, "reason": str(exc)}) + "\n",
                encoding="utf-8",
            )
        raise RunHalted(str(exc), epoch, batch_index) from exc

    for epoch in range(start_epoch, cfg.epochs):
        batches = batches_for_epoch(dev, cfg.B, cfg.seed, epoch)
        first = start_batch if epoch == start_epoch else 0
        for b in range(first, len(batches)):
            try:
                fingerprint = state.fingerprint
                items = run_episodes(state, batches[b], backends.runner, cfg.max_workers)
                tally.episode_calls += len(items)
                for item in items:
                    trace_ref = None
                    if run_dir is not None:
                        trace_ref = f"{TRACES_FILE}#{item.episode_id}@{epoch}.{b}"
                        append_jsonl(run_dir / TRACES_FILE, {"ref": trace_ref, **item.trace.to_dict()})
                    ledger.record(EpisodeRecord(
                        item.episode_id, item.task.task_type, Split.DEV, epoch, b, fingerprint,
                        item.outcome, trace_ref, Phase.TRAIN,
                    ))
                before = replace(tally)
                ctx = UpdateContext(
                    cfg, epoch, b, update_cycle, items, ledger, backends, vocab, tally, tasks_by_id,
                    observer, report_ref=f"{REPORTS_FILE}#{len(reports)}",
                )
                if epoch == 0 and b == 0 and not isinstance(policy, Grasp):
                    # No history exists yet, so no policy updates on the opening batch.
                    report = {"decision": {"decision": "Skipped"}, "reason": "first_batch"}
                else:
                    state, report = policy.update(state, ctx)
            except BackendUnavailable as exc:
                halt(exc, epoch, b)
            update_cycle += 1
            report = {
                "epoch": epoch, "batch_index": b, "policy": policy.name,
                "library_fingerprint_before": fingerprint, "library_fingerprint_after": state.fingerprint,
                "batch_accuracy": accuracy_of(items),
                "calls": tally.minus(before).to_dict(),
                **report,
            }
            reports.append(report)
            if run_dir is not None:
                append_jsonl(run_dir / REPORTS_FILE, report)
            persist(epoch, b + 1)

        try:
            val_items = _evaluate(state, val, backends, cfg, tally)
        except BackendUnavailable as exc:
            halt(exc, epoch, len(batches))
        _record_split(ledger, val_items, epoch, state.fingerprint, Phase.VALIDATION)
        val_acc = accuracy_of(val_items)
        val_history.append(val_acc)
        checkpointer.checkpoint_if_improved(epoch, state, val_acc)
        persist(epoch + 1, 0)

    best = checkpointer.best
    final_state = checkpointer.restore()
    ood_tasks = backends.split(Split.OOD)
    try:
        test_items = _evaluate(final_state, backends.split(Split.TEST), backends, cfg, tally)
        ood_items = _evaluate(final_state, ood_tasks, backends, cfg, tally) if ood_tasks else []
    except BackendUnavailable as exc:
        halt(exc, cfg.epochs, 0)
    _record_split(ledger, test_items, cfg.epochs, final_state.fingerprint, Phase.FINAL)
    _record_split(ledger, ood_items, cfg.epochs, final_state.fingerprint, Phase.FINAL)

    result = RunResult(
        run_id=run_id,
        policy=policy.name,
        config=cfg.to_dict(),
        val_accuracy=val_history,
        best_epoch=best.epoch,
        best_val_accuracy=best.validation_accuracy,
        best_fingerprint=best.fingerprint,
        test_accuracy=accuracy_of(test_items),
        ood_accuracy=accuracy_of(ood_items) if ood_items else None,
        calls=tally.to_dict(),
        n_batches=len(reports),
        applied_batches=sum(_report_summary(r) == "Applied" for r in reports),
        vocabulary_size=len(vocab),
        final_state=final_state,
        reports=reports,
    )
    if run_dir is not None:
        result.write(run_dir / RESULT_FILE)
        (run_dir / RESUME_MARKER).unlink(missing_ok=True)
    return result


def accuracy_of(items: Sequence[ScoredTrace]) -> float:
    return sum(i.outcome.passed for i in items) / len(items) if items else 0.0


def ledger_accuracies(ledger: Ledger, fingerprint: str | None = None) -> dict[str, float]:
    """Recompute final test/ood accuracy from the ledger's final-phase records."""
    out = {}
    final = [r for r in ledger.records if r.phase is Phase.FINAL]
    for split in (Split.TEST, Split.OOD):
        recs = [r for r in final if r.split is split and (fingerprint is None or r.library_fingerprint == fingerprint)]
        if recs:
            out[split.value] = accuracy(recs)
    return out


# ---------------------------------------------------------------------------
# Transfer and sweeps
# ---------------------------------------------------------------------------


def transfer(state: Injectable, backends: Backends, splits: Sequence[Split] = (Split.TEST, Split.OOD),
             max_workers: int = 1) -> dict[str, float]:
    """Evaluate a frozen learned state on another runner; no updates of any kind."""
    out = {}
    for split in splits:
        tasks = backends.split(split)
        if tasks:
            out[split.value] = accuracy_of(run_episodes(state, tasks, backends.runner, max_workers))
    return out


SWEEP_KEYS = ("B", "N", "K", "lam")


def sweep_configs(base: TrainingConfig, grid: Mapping[str, Sequence]) -> list[tuple[str, Any, TrainingConfig]]:
    """One-at-a-time variations around ``base``."""
    cells = []
    for key, values in grid.items():
        name = _ALIASES.get(key, key)
        if name not in SWEEP_KEYS:
            raise ConfigurationError(f"cannot sweep {key!r}; choose from B, N, K, lambda")
        for value in values:
            value = float(value) if name == "lam" else int(value)
            cells.append((name, value, base.with_(**{name: value})))
    return cells


def _mean_sd(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    sd = (sum((v - mean) ** 2 for v in values) / (n - 1)) ** 0.5 if n > 1 else 0.0
    return mean, sd


def sweep(
    base: TrainingConfig,
    grid: Mapping[str, Sequence],
    seeds: Sequence[int] = (0,),
    backend_factory: Callable[[TrainingConfig], Backends] = build_backends,
) -> list[dict]:
    """Train every one-at-a-time cell over ``seeds``; one row per cell."""
    rows = []
    for name, value, cfg in sweep_configs(base, grid):
        results = []
        for seed in seeds:
            run_cfg = cfg.with_(seed=seed)
            results.append(train(run_cfg, backend_factory(run_cfg)))
        test = [r.test_accuracy for r in results]
        mean, sd = _mean_sd(test)
        budget_ok = [
            [c.get("budget_ok") for c in rep.get("candidates", [])] for r in results for rep in r.reports
        ]
        rows.append({
            "param": "lambda" if name == "lam" else name,
            "value": value,
            "seeds": list(seeds),
            "test_mean": mean,
            "test_sd": sd,
            "apply_rate": sum(r.applied_batches for r in results) / max(sum(r.n_batches for r in results), 1),
            "probe_calls": sum(r.calls["probe_calls"] for r in results),
            "budget_ok": budget_ok,
        })
    return rows


def ablate(
    base: TrainingConfig,
    policies: Sequence[str] = ABLATION_PRESET,
    seeds: Sequence[int] = (0, 1, 2),
    backend_factory: Callable[[TrainingConfig], Backends] = build_backends,
) -> list[dict]:
    rows = []
    for name in policies:
        test = []
        for seed in seeds:
            cfg = base.with_(policy=name, seed=seed)
            test.append(train(cfg, backend_factory(cfg)).test_accuracy)
        mean, sd = _mean_sd(test)
        rows.append({"policy": name, "seeds": list(seeds), "test": test, "test_mean": mean, "test_sd": sd})
    return rows


def format_table(rows: Sequence[Mapping], columns: Sequence[str], sep: str = "\t") -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    lines = [sep.join(columns)]
    lines += [sep.join(cell(row.get(c, "")) for c in columns) for row in rows]
    return "\n".join(lines) + "\n"
