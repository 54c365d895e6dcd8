import json

import httpx
import pytest

from skillgate.baselines import RuleBook, RuleOp
from skillgate.ledger import Outcome, Split
from skillgate.llm import (
    ChatClient,
    Endpoint,
    LLMClassifier,
    LLMRunner,
    LLMWriter,
    StepResult,
    llm_backends,
    load_prompt,
    parse_json_reply,
)
from skillgate.orchestrator import TrainingConfig
from skillgate.proposer import FailureGroup, LabeledTrace, ProposalContext, Refusal, ScoredTrace
from skillgate.runtime import BackendUnavailable, ConfigurationError, RunnerError, TaskSpec, TrajectoryTrace
from skillgate.skills import EditKind, SkillLibrary, render_skill

from conftest import make_doc


def scripted(replies, log=None):
    replies = iter(replies)

    def handler(request):
        if log is not None:
            log.append(json.loads(request.content))
        reply = next(replies)
        if isinstance(reply, httpx.Response):
            return reply
        return httpx.Response(200, json={"choices": [{"message": {"content": reply}}]})

    return httpx.MockTransport(handler)


def client(replies, log=None, **kw):
    return ChatClient(Endpoint("http://model/v1", "m", **kw), transport=scripted(replies, log), sleep=lambda s: None)


class Adapter:
    def tasks(self, split):
        return [TaskSpec(f"{split.value}-1", "qa", split)]

    def tool_descriptions(self):
        return "- lookup(key): fetch a record"

    def initial_observation(self, task):
        return {"task_id": task.task_id, "instruction": "answer"}

    def step(self, task, action, args):
        if action != "lookup":
            return StepResult("unknown tool", outcome=Outcome.invalid_action("unknown_tool"))
        return StepResult(f"record {args.get('key')} = 42")

    def grade(self, task, answer):
        return Outcome.passing() if answer == "42" else Outcome.fail("wrong")


TASK = TaskSpec("dev-1", "qa", Split.DEV)


def test_prompts_load():
    for name in ("agent_system", "classifier", "writer_propose", "writer_revise", "writer_prefer",
                 "memory_note", "memory_consolidate", "rules_update"):
        assert load_prompt(name).template


def test_parse_json_reply_variants():
    assert parse_json_reply('{"a": 1}') == {"a": 1}
    assert parse_json_reply('```json\n{"a": 2}\n```') == {"a": 2}
    assert parse_json_reply('Sure! {"a": 3} done') == {"a": 3}
    with pytest.raises(ValueError):
        parse_json_reply("no json here")


def test_retry_then_success_and_auth_header(monkeypatch):
    monkeypatch.setenv("TEST_KEY", "sk-1")
    seen = []

    def handler(request):
        seen.append(request.headers.get("authorization"))
        if len(seen) < 3:
            return httpx.Response(429)
        return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

    sleeps = []
    c = ChatClient(Endpoint("http://m/v1", "m", api_key_env="TEST_KEY"), httpx.MockTransport(handler), sleeps.append)
    assert c.complete([{"role": "user", "content": "hi"}]) == "ok"
    assert seen == ["Bearer sk-1"] * 3 and sleeps == [0.5, 1.0]


def test_exhausted_retries_and_auth_errors():
    c = client([httpx.Response(503)] * 3, max_retries=2)
    with pytest.raises(BackendUnavailable, match="3 attempts"):
        c.complete([])
    with pytest.raises(BackendUnavailable, match="401"):
        client([httpx.Response(401, text="bad key")]).complete([])


def test_missing_api_key_is_configuration_error(monkeypatch):
    monkeypatch.delenv("ABSENT_KEY", raising=False)
    c = ChatClient(Endpoint("http://m/v1", "m", api_key_env="ABSENT_KEY"), scripted([]))
    with pytest.raises(ConfigurationError):
        c.complete([])


def test_episode_injects_state_in_first_turn_only():
    log = []
    c = client(['{"action": "lookup", "args": {"key": "k"}}', '{"final_answer": "42"}'], log)
    lib = SkillLibrary(skills=(make_doc("cite", ["c"]),))
    outcome, trace = LLMRunner(c, Adapter()).run(lib, TASK)
    assert outcome.passed and trace.final_answer == "42"
    first = json.loads(log[0]["messages"][1]["content"])
    assert first["behavioral_skills"] == lib.injection_text()
    assert "behavioral_skills" not in log[1]["messages"][-1]["content"]
    assert log[0]["temperature"] == 0.0


def test_episode_failure_modes():
    outcome, _ = LLMRunner(client(["not json"]), Adapter()).run(SkillLibrary(), TASK)
    assert outcome.invalid
    outcome, _ = LLMRunner(client(['{"action": "drop_table", "args": {}}']), Adapter()).run(SkillLibrary(), TASK)
    assert outcome.invalid and outcome.detail == "unknown_tool"
    loop = ['{"action": "lookup", "args": {}}'] * 3
    outcome, trace = LLMRunner(client(loop), Adapter(), max_actions=3).run(SkillLibrary(), TASK)
    assert outcome.detail == "action_budget" and len(trace.steps) == 3


def test_runner_escalates_consecutive_outages():
    runner = LLMRunner(client([httpx.Response(500)] * 20, max_retries=0), Adapter(), outage_after=3)
    for _ in range(2):
        with pytest.raises(RunnerError):
            runner.run(SkillLibrary(), TASK)
    with pytest.raises(BackendUnavailable):
        runner.run(SkillLibrary(), TASK)


def scored(eid="dev-1", passed=False):
    outcome = Outcome.passing() if passed else Outcome.fail("wrong")
    return ScoredTrace(TaskSpec(eid, "qa", Split.DEV), outcome, TrajectoryTrace((("lookup", "42"),), "41"))


def test_classifier_parses_labels():
    log = []
    labels = LLMClassifier(client(['{"labels": ["wrong_field", 7]}'], log)).classify([scored(), scored("dev-2")], ["a"])
    assert labels == ["wrong_field", None]
    assert "- a" in log[0]["messages"][0]["content"]


def ctx(lib=None):
    group = FailureGroup("wrong_field", (LabeledTrace(scored(), "wrong_field", True),))
    return ProposalContext(group, lib or SkillLibrary(), (scored("dev-9", True),), (), 0, None)


def test_writer_proposals():
    doc = render_skill(make_doc("read_the_right_field", ["fields"]))
    reply = json.dumps({"kind": "ADD", "skill": doc})
    edit = LLMWriter(client([reply])).propose(ctx())
    assert edit.kind is EditKind.ADD and edit.doc.name == "read_the_right_field"
    assert isinstance(LLMWriter(client(['{"refuse": "nothing to add"}'])).propose(ctx()), Refusal)
    assert LLMWriter(client(["garbage"])).propose(ctx()).reason == "malformed_output"
    bad_doc = json.dumps({"kind": "ADD", "skill": "---\nname: x\n"})
    assert LLMWriter(client([bad_doc])).propose(ctx()).reason == "malformed_output"
    removal = LLMWriter(client(['{"kind": "remove", "target": "old"}'])).propose(ctx())
    assert removal.kind is EditKind.REMOVE and removal.target == "old"


def test_writer_revise_prefer_and_memory():
    doc = render_skill(make_doc("narrow", ["fields"]))
    w = LLMWriter(client([json.dumps({"kind": "ADD", "skill": doc}), '{"choice": 2}', '{"note": "check"}',
                          '{"ops": [{"op": "ADD", "text": "Cite sources."}, {"op": "bogus"}]}']))
    original = LLMWriter(client([json.dumps({"kind": "ADD", "skill": doc})])).propose(ctx())
    revised = w.revise(original, [], None)
    assert revised.rationale.endswith(":revised")
    assert w.prefer([original, revised]) == 1
    assert w.note(scored(), "fp").text == "check"
    ops = w.expel_ops(scored(), RuleBook())
    assert [o.op for o in ops] == [RuleOp.ADD]


def test_llm_backends_wiring(monkeypatch, tmp_path):
    (tmp_path / "fake_adapter_mod.py").write_text(
        "from skillgate.ledger import Split\nfrom skillgate.runtime import TaskSpec\n"
        "class A:\n    def tasks(self, split):\n        return [TaskSpec(f'{split.value}-0', 'qa', split)]\n"
        "def make():\n    return A()\n"
    )
    monkeypatch.syspath_prepend(str(tmp_path))
    endpoints = {"agent": {"base_url": "http://a/v1", "model": "a"}, "writer": {"base_url": "http://w/v1", "model": "w"}}
    cfg = TrainingConfig(backend="llm", adapter="fake_adapter_mod:make", endpoints=endpoints)
    backends = llm_backends(cfg, transport=scripted([]))
    assert [t.task_id for t in backends.split(Split.DEV)] == ["dev-0"]
    assert backends.runner.client.endpoint.temperature == 0.0
    assert backends.writer.client.endpoint.temperature == 0.7
    with pytest.raises(ConfigurationError):
        llm_backends(TrainingConfig(backend="llm", adapter="nowhere:thing", endpoints=endpoints))
    with pytest.raises(ConfigurationError):
        llm_backends(TrainingConfig(backend="llm", adapter="fake_adapter_mod:make"))
