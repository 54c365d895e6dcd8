import pytest

from skillgate.envsim import (
    BREAK,
    INVALIDATE,
    SideEffect,
    SynthRunner,
    SynthWorld,
    TaskType,
    generate_scenario,
    load_scenario,
    oracle_best_edit,
    resolve_scenario,
    save_scenario,
    scenario_to_dict,
    synth_run,
    type_verdicts,
)
from skillgate.gate import Probe, ProbeEntry, run_gate
from skillgate.ledger import Outcome, OutcomeKind, Split
from skillgate.runtime import ConfigurationError, RunnerError, TaskSpec
from skillgate.skills import Edit, SkillLibrary, apply_edit

from conftest import make_doc


def world():
    types = {
        "a": TaskType("a", defect="fix_a"),
        "b": TaskType("b"),
        "c": TaskType("c"),
    }
    effects = {"loud": (SideEffect("b", BREAK),), "hasty": (SideEffect("c", INVALIDATE),)}
    return SynthWorld(types, effects)


def lib_with(*tags):
    return SkillLibrary(skills=(make_doc("s", tags),)) if tags else SkillLibrary()


def test_verdicts_follow_tags():
    w = world()
    assert type_verdicts(w, []) == {"a": OutcomeKind.FAIL, "b": OutcomeKind.PASS, "c": OutcomeKind.PASS}
    v = type_verdicts(w, ["fix_a", "loud", "hasty"])
    assert v == {"a": OutcomeKind.PASS, "b": OutcomeKind.FAIL, "c": OutcomeKind.INVALID}


def test_synth_run_matches_verdicts_and_is_deterministic():
    w = world()
    task = TaskSpec("c-dev-000", "c", Split.DEV)
    outcome, trace = synth_run(w, 0, lib_with("hasty"), task)
    assert outcome.invalid and trace.rejected_action
    assert synth_run(w, 0, lib_with("hasty"), task) == (outcome, trace)
    outcome, trace = synth_run(w, 0, lib_with("fix_a"), TaskSpec("a-dev-000", "a", Split.DEV))
    assert outcome.passed and trace.final_answer == trace.expected_answer


def test_errors_raise_runner_error():
    w = SynthWorld({"a": TaskType("a")}, error_rate=0.999)
    with pytest.raises(RunnerError):
        SynthRunner(w, 0).run(lib_with(), w.tasks(Split.DEV)[0])


def test_world_validation():
    with pytest.raises(ConfigurationError):
        SynthWorld({"a": TaskType("a")}, {"t": (SideEffect("zzz", BREAK),)})
    with pytest.raises(ConfigurationError):
        SynthWorld({"a": TaskType("a", ood=3)})
    with pytest.raises(ConfigurationError):
        resolve_scenario("no_such_scenario")


def test_task_listing_per_split():
    s = resolve_scenario("tiny")
    assert len(s.world.tasks(Split.DEV)) == 36
    assert {t.task_type for t in s.world.tasks(Split.OOD)} == {"transfer_probe"}
    ids = [t.task_id for t in s.world.tasks()]
    assert len(ids) == len(set(ids))


@pytest.mark.parametrize("name", ["tiny", "regression_prone", "trap"])
def test_builtin_scenarios_round_trip(tmp_path, name):
    s = resolve_scenario(name)
    back = load_scenario(save_scenario(s, tmp_path / f"{name}.yaml"))
    assert scenario_to_dict(back) == scenario_to_dict(s)


def test_generated_scenarios_are_reproducible(tmp_path):
    a, b = generate_scenario(7), generate_scenario(7)
    assert scenario_to_dict(a) == scenario_to_dict(b)
    assert scenario_to_dict(load_scenario(save_scenario(a, tmp_path / "g.yaml"))) == scenario_to_dict(a)
    assert scenario_to_dict(generate_scenario(8)) != scenario_to_dict(a)


def test_oracle_agrees_with_gate_on_a_hand_built_probe():
    w = world()
    dev = {t.task_id: t for t in w.tasks(Split.DEV)}
    fail_ids = [i for i in dev if i.startswith("a-")][:4]
    pass_ids = [i for i in dev if i.startswith(("b-", "c-"))][:4]
    probe = Probe(
        tuple(ProbeEntry(i, "a", Outcome.fail()) for i in fail_ids),
        tuple(ProbeEntry(i, dev[i].task_type, Outcome.passing()) for i in pass_ids),
    )
    cands = [
        Edit.add(make_doc("loud_fix", ["fix_a", "loud"])),
        Edit.add(make_doc("clean_fix", ["fix_a"])),
        Edit.add(make_doc("hasty_fix", ["fix_a", "hasty"])),
    ]
    got = run_gate(SkillLibrary(), cands, probe, SynthRunner(w, 0), dev, lam=2).decision
    want = oracle_best_edit(w, 0, SkillLibrary(), cands, probe, 2)
    assert (got.applied, got.index, got.edit, got.score) == (want.applied, want.index, want.edit, want.score)
    assert want.index == 1 and want.score == 4
