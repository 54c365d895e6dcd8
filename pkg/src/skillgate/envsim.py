"""Deterministic synthetic worlds, the simulated agent, and the exhaustive oracle.

A synthetic world assigns each task type an optional *defect*: the simulated
agent fails tasks of that type unless some active skill carries the curing
tag. Tags may also carry side effects that break or invalidate other task
types, which is what makes a world regression-prone. Everything is a pure
function of ``(world, seed, active tags, task)``.

Scenario files bundle a world with the scripted skill-writer's candidate
pools, keyed by failure label.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .gate import Decision, Probe
from .ledger import Outcome, OutcomeKind, Split
from .runtime import ConfigurationError, Injectable, RunnerError, TaskSpec, TrajectoryTrace
from .skills import Edit, SkillError, SkillLibrary, apply_edit

BREAK = "break"
INVALIDATE = "invalidate"
NOISE_DETAIL = "stochastic_miss"


def defect_detail(tag: str) -> str:
    return f"{tag}_omitted"


def break_detail(tag: str) -> str:
    return f"{tag}_overreach"


def invalid_detail(tag: str) -> str:
    return f"{tag}_invalid_call"


def _unit(*parts: object) -> float:
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2**64


@dataclass(frozen=True)
class TaskType:
    name: str
    defect: str | None = None
    noise: float = 0.0
    dev: int = 12
    val: int = 10
    test: int = 8
    ood: int = 0

    def count(self, split: Split) -> int:
        return getattr(self, split.value)


@dataclass(frozen=True)
class SideEffect:
    task_type: str
    effect: str


@dataclass(frozen=True)
class SynthWorld:
    task_types: Mapping[str, TaskType]
    side_effects: Mapping[str, tuple[SideEffect, ...]] = field(default_factory=dict)
    error_rate: float = 0.0
    name: str = ""

    def __post_init__(self):
        for tag, effects in self.side_effects.items():
            for se in effects:
                if se.task_type not in self.task_types:
                    raise ConfigurationError(f"side effect of {tag!r} names unknown task type {se.task_type!r}")
                if se.effect not in (BREAK, INVALIDATE):
                    raise ConfigurationError(f"unknown side effect {se.effect!r} on tag {tag!r}")
        for tt in self.task_types.values():
            if tt.ood and (tt.dev or tt.val or tt.test):
                raise ConfigurationError(f"task type {tt.name!r} mixes OOD and in-domain splits")
            if not 0.0 <= tt.noise < 1.0:
                raise ConfigurationError(f"noise of {tt.name!r} must be in [0, 1)")

    @property
    def defect_map(self) -> dict[str, str]:
        return {name: tt.defect for name, tt in self.task_types.items() if tt.defect}

    def tasks(self, split: Split | None = None) -> list[TaskSpec]:
        splits = [split] if split is not None else list(Split)
        out = []
        for sp in splits:
            for name in sorted(self.task_types):
                for i in range(self.task_types[name].count(sp)):
                    out.append(TaskSpec(task_id=f"{name}-{sp.value}-{i:03d}", task_type=name, split=sp))
        return out

    def is_noisy(self, seed: int, task: TaskSpec) -> bool:
        return _unit(seed, "noise", task.task_id) < self.task_types[task.task_type].noise

    def errors(self, seed: int, task: TaskSpec) -> bool:
        return self.error_rate > 0 and _unit(seed, "error", task.task_id) < self.error_rate


def synth_run(world: SynthWorld, seed: int, state: Injectable, task: TaskSpec) -> tuple[Outcome, TrajectoryTrace]:
    """Run the simulated agent on ``task`` under the learned ``state``."""
    if task.task_type not in world.task_types:
        raise ConfigurationError(f"unknown task type {task.task_type!r}")
    if world.errors(seed, task):
        raise RunnerError(f"environment error on {task.task_id}")
    tags = sorted(state.active_tags())
    tt = world.task_types[task.task_type]
    steps = [
        (f"open_task {task.task_id}", f"task_type={task.task_type}"),
        ("consult_skills", "active_tags=" + ",".join(tags)),
    ]
    expected = f"answer:{task.task_id}"

    invalidating = [t for t in tags for se in world.side_effects.get(t, ()) if se == SideEffect(tt.name, INVALIDATE)]
    breaking = [t for t in tags for se in world.side_effects.get(t, ()) if se == SideEffect(tt.name, BREAK)]
    if invalidating:
        action = f"call {invalidating[0]}_tool(task={task.task_id!r}"
        steps.append((action, "ERROR: malformed call rejected"))
        trace = TrajectoryTrace(tuple(steps), "", expected, rejected_action=action)
        return Outcome.invalid_action(invalid_detail(invalidating[0])), trace
    if breaking:
        outcome = Outcome.fail(break_detail(breaking[0]))
    elif tt.defect and tt.defect not in tags:
        outcome = Outcome.fail(defect_detail(tt.defect))
    elif world.is_noisy(seed, task):
        outcome = Outcome.fail(NOISE_DETAIL)
    else:
        outcome = Outcome.passing()
    answer = expected if outcome.passed else f"wrong:{task.task_id}"
    steps.append((f"finish {answer}", "episode complete"))
    return outcome, TrajectoryTrace(tuple(steps), answer, expected)


class SynthRunner:
    """Episode runner over a synthetic world; counts every episode it runs."""

    def __init__(self, world: SynthWorld, seed: int):
        self.world = world
        self.seed = seed
        self.calls = 0

    def run(self, state: Injectable, task: TaskSpec) -> tuple[Outcome, TrajectoryTrace]:
        self.calls += 1
        return synth_run(self.world, self.seed, state, task)


# ---------------------------------------------------------------------------
# Analytic oracle
# ---------------------------------------------------------------------------


def type_verdicts(world: SynthWorld, tags: Iterable[str]) -> dict[str, OutcomeKind]:
    """Outcome kind of each task type under ``tags``, ignoring per-task noise."""
    tags = set(tags)
    invalid = {se.task_type for t in tags for se in world.side_effects.get(t, ()) if se.effect == INVALIDATE}
    broken = {se.task_type for t in tags for se in world.side_effects.get(t, ()) if se.effect == BREAK}
    uncured = {name for name, tag in world.defect_map.items() if tag not in tags}
    verdicts = {}
    for name in world.task_types:
        if name in invalid:
            verdicts[name] = OutcomeKind.INVALID
        elif name in broken | uncured:
            verdicts[name] = OutcomeKind.FAIL
        else:
            verdicts[name] = OutcomeKind.PASS
    return verdicts


def _oracle_decision(
    world: SynthWorld,
    seed: int,
    lib: SkillLibrary,
    candidates: Sequence[Edit],
    probe: Probe,
    lam: float,
    reviser=None,
    enforce_budget: bool = True,
) -> tuple[Decision, list[tuple[int, int, float, bool] | None]]:
    lam = int(lam) if float(lam).is_integer() else float(lam)
    by_id = {e.episode_id: e for e in probe.entries}
    tasks = {eid: TaskSpec(eid, e.task_type, Split.DEV) for eid, e in by_id.items()}
    errored = {eid for eid, t in tasks.items() if world.errors(seed, t)}
    noisy = {eid for eid, t in tasks.items() if world.is_noisy(seed, t)}

    def kind(tags, eid) -> OutcomeKind:
        verdict = type_verdicts(world, tags)[by_id[eid].task_type]
        if verdict is OutcomeKind.PASS and eid in noisy:
            return OutcomeKind.FAIL
        return verdict

    base_tags = lib.active_tags()
    F0 = sum(1 for e in probe.fail_side if e.episode_id not in errored and kind(base_tags, e.episode_id) is OutcomeKind.PASS)
    R0 = sum(1 for e in probe.pass_side if e.episode_id in errored or kind(base_tags, e.episode_id) is not OutcomeKind.PASS)

    def counts(edit: Edit):
        try:
            fork = apply_edit(lib, edit)
        except SkillError:
            return None
        tags = fork.active_tags()
        fail_ids = [e.episode_id for e in probe.fail_side if e.episode_id not in errored]
        pass_ids = [e.episode_id for e in probe.pass_side if e.episode_id not in errored]
        F = sum(kind(tags, i) is OutcomeKind.PASS for i in fail_ids)
        regress = [kind(tags, i) for i in pass_ids if kind(tags, i) is not OutcomeKind.PASS]
        R = len(regress)
        n_invalid = sum(k is OutcomeKind.INVALID for k in regress)
        score = (F - F0) - ((R - n_invalid) + lam * n_invalid - R0)
        return F, R, score, R <= R0

    table = [counts(c) for c in candidates]
    admissible = [
        (i, row) for i, row in enumerate(table)
        if row is not None and row[2] > 0 and (row[3] or not enforce_budget)
    ]
    if not admissible:
        return Decision.rejected(), table
    # highest score, then fewest unweighted regressions, then earliest index
    i, (F, R, score, _) = sorted(admissible, key=lambda item: (-item[1][2], item[1][1], item[0]))[0]
    edit, revised = candidates[i], False
    if R > 0 and reviser is not None:
        regressing = [
            e for e in probe.pass_side
            if e.episode_id not in errored and kind(apply_edit(lib, edit).active_tags(), e.episode_id) is not OutcomeKind.PASS
        ]
        revision = reviser.revise(edit, regressing, None)
        if isinstance(revision, Edit):
            row = counts(revision)
            if row is not None and row[2] > score and (row[1] <= R0 or not enforce_budget):
                edit, score, revised = revision, row[2], True
    return Decision.accept(edit, score, i, revised), table


def oracle_best_edit(
    world: SynthWorld,
    seed: int,
    lib: SkillLibrary,
    candidates: Sequence[Edit],
    probe: Probe,
    lam: float = 2,
    *,
    reviser=None,
    enforce_budget: bool = True,
) -> Decision:
    """Acceptance decision computed analytically from the world definition.

    No runner is involved: each probe entry's outcome under every candidate
    fork is derived from the defect and side-effect maps directly.
    """
    decision, _ = _oracle_decision(world, seed, lib, candidates, probe, lam, reviser, enforce_budget)
    return decision


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    name: str
    world: SynthWorld
    pools: Mapping[str, tuple[dict, ...]] = field(default_factory=dict)
    labels: Mapping[str, str] = field(default_factory=dict)
    pair_remove_at_capacity: bool = True
    description: str = ""


def world_from_dict(data: dict) -> SynthWorld:
    types = {}
    for entry in data.get("task_types", []):
        tt = TaskType(
            name=str(entry["name"]),
            defect=entry.get("defect"),
            noise=float(entry.get("noise", 0.0)),
            dev=int(entry.get("dev", 0 if entry.get("ood") else 12)),
            val=int(entry.get("val", 0 if entry.get("ood") else 10)),
            test=int(entry.get("test", 0 if entry.get("ood") else 8)),
            ood=int(entry.get("ood", 0)),
        )
        if tt.name in types:
            raise ConfigurationError(f"duplicate task type {tt.name!r}")
        types[tt.name] = tt
    if not types:
        raise ConfigurationError("scenario declares no task types")
    effects = {
        str(tag): tuple(SideEffect(str(e["task_type"]), str(e["effect"])) for e in entries)
        for tag, entries in (data.get("side_effects") or {}).items()
    }
    return SynthWorld(types, effects, float(data.get("error_rate", 0.0)), str(data.get("name", "")))


def scenario_from_dict(data: dict) -> Scenario:
    writer = data.get("writer") or {}
    pools = {
        str(label): tuple(dict(e) for e in entries)
        for label, entries in (writer.get("pools") or {}).items()
    }
    return Scenario(
        name=str(data.get("name", "")),
        world=world_from_dict(data),
        pools=pools,
        labels={str(k): str(v) for k, v in (data.get("labels") or {}).items()},
        pair_remove_at_capacity=bool(writer.get("pair_remove_at_capacity", True)),
        description=str(data.get("description", "")),
    )


def scenario_to_dict(scenario: Scenario) -> dict:
    world = scenario.world
    types = []
    for tt in world.task_types.values():
        entry = {"name": tt.name, "defect": tt.defect, "noise": tt.noise}
        if tt.ood:
            entry["ood"] = tt.ood
        else:
            entry.update(dev=tt.dev, val=tt.val, test=tt.test)
        types.append(entry)
    return {
        "name": scenario.name,
        "description": scenario.description,
        "error_rate": world.error_rate,
        "task_types": types,
        "side_effects": {
            tag: [{"task_type": se.task_type, "effect": se.effect} for se in effects]
            for tag, effects in world.side_effects.items()
        },
        "labels": dict(scenario.labels),
        "writer": {
            "pair_remove_at_capacity": scenario.pair_remove_at_capacity,
            "pools": {label: [dict(e) for e in entries] for label, entries in scenario.pools.items()},
        },
    }


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: scenario must be a mapping")
    scenario = scenario_from_dict(data)
    return scenario if scenario.name else Scenario(path.stem, scenario.world, scenario.pools, scenario.labels,
                                                   scenario.pair_remove_at_capacity, scenario.description)


def save_scenario(scenario: Scenario, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(scenario_to_dict(scenario), sort_keys=False), encoding="utf-8")
    return path


def builtin_scenario_path(name: str) -> Path:
    path = Path(str(resources.files("skillgate") / "scenarios" / f"{name}.yaml"))
    if not path.exists():
        raise ConfigurationError(f"no built-in scenario named {name!r}")
    return path


def resolve_scenario(ref: str | Path) -> Scenario:
    """Load a scenario from a path, or by built-in name."""
    path = Path(ref)
    if path.exists():
        return load_scenario(path)
    return load_scenario(builtin_scenario_path(str(ref)))


def generate_scenario(seed: int, name: str | None = None) -> Scenario:
    """Random regression-prone scenario, used for fuzzing the gate."""
    rng = random.Random(seed)
    n_types = rng.randint(3, 7)
    type_names = [f"type{chr(97 + i)}" for i in range(n_types)]
    defect_tags = {}
    types = {}
    for tname in type_names:
        defect = f"{tname}_fix" if rng.random() < 0.7 else None
        if defect:
            defect_tags[tname] = defect
        types[tname] = TaskType(
            tname, defect, noise=rng.choice([0.0, 0.05, 0.1, 0.2]),
            dev=rng.randint(4, 14), val=rng.randint(2, 6), test=rng.randint(2, 6),
        )
    if not defect_tags:
        first = type_names[0]
        defect_tags[first] = f"{first}_fix"
        types[first] = TaskType(first, f"{first}_fix", types[first].noise, types[first].dev,
                                types[first].val, types[first].test)

    effects: dict[str, tuple[SideEffect, ...]] = {}
    pools: dict[str, tuple[dict, ...]] = {}
    for tname, tag in defect_tags.items():
        others = [t for t in type_names if t != tname] or [tname]
        broad, hasty = f"{tag}_broad", f"{tag}_hasty"
        effects[broad] = (SideEffect(rng.choice(others), BREAK),)
        effects[hasty] = (SideEffect(rng.choice(others), INVALIDATE),)
        second = rng.choice(list(defect_tags.values()))
        pool = [
            {"name": f"fix_{tname}", "tags": [tag]},
            {"name": f"broad_{tname}", "tags": [tag, broad], "revision": [tag]},
            {"name": f"trap_{tname}", "tags": sorted({tag, second, hasty})},
            {"name": f"note_{tname}", "tags": [f"{tag}_note"]},
            {"kind": "MODIFY", "target": f"fix_{tname}", "tags": [tag, f"{tag}_v2"]},
            {"kind": "REMOVE", "target": f"broad_{tname}"},
        ]
        rng.shuffle(pool)
        pools[defect_detail(tag)] = tuple(pool[: rng.randint(2, len(pool))])
    pools[NOISE_DETAIL] = (
        {"name": "double_check", "tags": ["generic_caution"]},
        {"name": "always_verify", "tags": ["generic_verify"], "revision": []},
    )
    effects["generic_verify"] = (SideEffect(rng.choice(type_names), BREAK),)
    world = SynthWorld(types, effects, error_rate=rng.choice([0.0, 0.0, 0.05]), name=name or f"fuzz{seed}")
    return Scenario(name or f"fuzz{seed}", world, pools)
