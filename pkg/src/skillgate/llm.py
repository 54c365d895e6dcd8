"""LLM-backed agent, classifier and skill-writer over an OpenAI-compatible API.

The environment side is supplied by a ``TaskAdapter``: it lists tasks,
renders the first observation, and executes tool calls. The learned state is
injected into the first user turn only, as the ``behavioral_skills`` field of
the task JSON.
"""

from __future__ import annotations

import importlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from importlib import resources
from string import Template
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx

from .baselines import Note, Rule, RuleBook, RuleEdit, RuleOp
from .ledger import Outcome, Split
from .proposer import ProposalContext, Refusal, ScoredTrace
from .runtime import BackendUnavailable, ConfigurationError, Injectable, RunnerError, TaskSpec, TrajectoryTrace
from .skills import Edit, EditKind, SkillError, parse_skill, render_skill

PROMPT_VERSION = "v1"
AGENT_TEMPERATURE = 0.0
WRITER_TEMPERATURE = 0.7
MAX_ACTIONS = 8
RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


def load_prompt(name: str, version: str = PROMPT_VERSION) -> Template:
    path = resources.files("skillgate") / "prompts" / f"{name}.{version}.md"
    return Template(path.read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Endpoint:
    base_url: str
    model: str
    api_key_env: str | None = None
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 120.0
    max_retries: int = 4
    max_in_flight: int = 8

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], default_temperature: float) -> "Endpoint":
        if "base_url" not in data or "model" not in data:
            raise ConfigurationError("an endpoint needs base_url and model")
        return cls(
            base_url=str(data["base_url"]).rstrip("/"),
            model=str(data["model"]),
            api_key_env=data.get("api_key_env"),
            temperature=float(data.get("temperature", default_temperature)),
            max_tokens=int(data.get("max_tokens", 1024)),
            timeout=float(data.get("timeout", 120.0)),
            max_retries=int(data.get("max_retries", 4)),
            max_in_flight=int(data.get("max_in_flight", 8)),
        )


class ChatClient:
    """Chat-completions client with bounded concurrency and retry with backoff.

    Transport errors and retryable statuses are retried; once retries run out
    the client raises ``BackendUnavailable``.
    """

    def __init__(
        self,
        endpoint: Endpoint,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self._http = httpx.Client(timeout=endpoint.timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(endpoint.max_in_flight)
        self._sleep = sleep
        self._lock = threading.Lock()
        self.calls = 0

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        env = self.endpoint.api_key_env
        if env:
            key = os.environ.get(env)
            if not key:
                raise ConfigurationError(f"environment variable {env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, messages: Sequence[Mapping[str, str]], temperature: float | None = None) -> str:
        ep = self.endpoint
        payload = {
            "model": ep.model,
            "messages": list(messages),
            "temperature": ep.temperature if temperature is None else temperature,
            "max_tokens": ep.max_tokens,
        }
        with self._lock:
            self.calls += 1
        last = "no attempt made"
        with self._slots:
            for attempt in range(ep.max_retries + 1):
                try:
                    resp = self._http.post(f"{ep.base_url}/chat/completions", json=payload, headers=self._headers())
                except httpx.TransportError as exc:
                    last = f"{type(exc).__name__}: {exc}"
                else:
                    if resp.status_code == 200:
                        try:
                            return resp.json()["choices"][0]["message"]["content"] or ""
                        except (ValueError, KeyError, IndexError, TypeError):
                            last = "malformed response body"
                    elif resp.status_code not in RETRYABLE_STATUS:
                        raise BackendUnavailable(f"HTTP {resp.status_code}: {resp.text[:300]}")
                    else:
                        last = f"HTTP {resp.status_code}"
                if attempt < ep.max_retries:
                    self._sleep(min(0.5 * 2**attempt, 8.0))
        raise BackendUnavailable(f"{ep.base_url} failed after {ep.max_retries + 1} attempts: {last}")

    def close(self) -> None:
        self._http.close()


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def parse_json_reply(text: str) -> Any:
    """Decode a JSON reply, tolerating a Markdown fence or surrounding prose."""
    fenced = _FENCE_RE.search(text)
    if fenced:
        text = fenced.group(1)
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        start, end = text.find("{"), text.rfind("}")
        if start == -1 or end <= start:
            raise
        return json.loads(text[start : end + 1])


# ---------------------------------------------------------------------------
# Agent
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepResult:
    observation: str
    done: bool = False
    outcome: Outcome | None = None


class TaskAdapter(Protocol):
    """Environment side of an LLM-run episode."""

    def tasks(self, split: Split) -> list[TaskSpec]: ...

    def tool_descriptions(self) -> str: ...

    def initial_observation(self, task: TaskSpec) -> dict: ...

    def step(self, task: TaskSpec, action: str, args: dict) -> StepResult:
        """Execute a tool call; an invalid call returns an InvalidAction outcome."""
        ...

    def grade(self, task: TaskSpec, answer: str) -> Outcome: ...


def llm_run(
    client: ChatClient,
    adapter: TaskAdapter,
    state: Injectable,
    task: TaskSpec,
    max_actions: int = MAX_ACTIONS,
) -> tuple[Outcome, TrajectoryTrace]:
    system = load_prompt("agent_system").substitute(tools=adapter.tool_descriptions())
    first = dict(adapter.initial_observation(task))
    first["behavioral_skills"] = state.injection_text()
    messages = [{"role": "system", "content": system}, {"role": "user", "content": json.dumps(first)}]
    steps: list[tuple[str, str]] = []
    for _ in range(max_actions):
        try:
            reply = client.complete(messages, temperature=AGENT_TEMPERATURE)
        except BackendUnavailable as exc:
            raise RunnerError(str(exc)) from exc
        messages.append({"role": "assistant", "content": reply})
        try:
            action = parse_json_reply(reply)
            if not isinstance(action, dict):
                raise ValueError("reply is not a JSON object")
        except ValueError:
            steps.append((reply, "ERROR: could not parse action"))
            return Outcome.invalid_action("parse_failure"), TrajectoryTrace(tuple(steps), rejected_action=reply)
        if "final_answer" in action:
            answer = str(action["final_answer"])
            steps.append((reply, "final"))
            return adapter.grade(task, answer), TrajectoryTrace(tuple(steps), answer)
        name, args = action.get("action"), action.get("args", {})
        if not isinstance(name, str) or not isinstance(args, dict):
            steps.append((reply, "ERROR: malformed tool call"))
            return Outcome.invalid_action("malformed_call"), TrajectoryTrace(tuple(steps), rejected_action=reply)
        result = adapter.step(task, name, args)
        steps.append((reply, result.observation))
        if result.outcome is not None and result.outcome.invalid:
            return result.outcome, TrajectoryTrace(tuple(steps), rejected_action=reply)
        if result.done:
            return result.outcome or Outcome.fail("ended_without_grade"), TrajectoryTrace(tuple(steps))
        messages.append({"role": "user", "content": result.observation})
    return Outcome.fail("action_budget"), TrajectoryTrace(tuple(steps))


class LLMRunner:
    """Episode runner backed by a chat model.

    A failed request marks the episode errored. After ``outage_after``
    consecutive errored episodes the endpoint is treated as down.
    """

    def __init__(self, client: ChatClient, adapter: TaskAdapter, max_actions: int = MAX_ACTIONS,
                 outage_after: int = 3):
        self.client = client
        self.adapter = adapter
        self.max_actions = max_actions
        self.outage_after = outage_after
        self._consecutive = 0
        self._lock = threading.Lock()

    def run(self, state: Injectable, task: TaskSpec) -> tuple[Outcome, TrajectoryTrace]:
        try:
            result = llm_run(self.client, self.adapter, state, task, self.max_actions)
        except RunnerError:
            with self._lock:
                self._consecutive += 1
                down = self._consecutive >= self.outage_after
            if down:
                raise BackendUnavailable(f"{self._consecutive} consecutive episodes failed to reach the agent model")
            raise
        with self._lock:
            self._consecutive = 0
        return result


# ---------------------------------------------------------------------------
# Classifier and writer
# ---------------------------------------------------------------------------


def _trace_text(item: ScoredTrace, limit: int = 1500) -> str:
    steps = "\n".join(f"  > {a}\n    {o}" for a, o in item.trace.steps)
    text = f"task {item.episode_id} ({item.task.task_type}): {item.outcome.kind.value}"
    if item.outcome.detail:
        text += f" [{item.outcome.detail}]"
    text = f"{text}\n{steps}"
    return text if len(text) <= limit else text[:limit] + "\n  ..."


class LLMClassifier:
    def __init__(self, client: ChatClient):
        self.client = client

    def classify(self, items: Sequence[ScoredTrace], vocabulary: Sequence[str]) -> list[str | None]:
        prompt = load_prompt("classifier").substitute(
            vocabulary="\n".join(f"- {v}" for v in vocabulary) or "(none yet)",
            episodes="\n\n".join(f"{i + 1}. {_trace_text(it)}" for i, it in enumerate(items)),
            count=len(items),
        )
        reply = parse_json_reply(self.client.complete([{"role": "user", "content": prompt}], temperature=0.0))
        labels = reply.get("labels") if isinstance(reply, dict) else None
        if not isinstance(labels, list):
            raise ValueError("classifier reply has no label list")
        return [l if isinstance(l, str) else None for l in labels[: len(items)]]


class LLMWriter:
    def __init__(self, client: ChatClient, temperature: float = WRITER_TEMPERATURE):
        self.client = client
        self.temperature = temperature

    def _ask(self, prompt: str) -> Any:
        return parse_json_reply(self.client.complete([{"role": "user", "content": prompt}], self.temperature))

    @staticmethod
    def _to_edit(reply: Any, rationale: str) -> Edit | Refusal:
        if not isinstance(reply, dict):
            return Refusal("malformed_output")
        if "refuse" in reply:
            return Refusal(str(reply["refuse"]) or "refused")
        try:
            kind = EditKind(str(reply.get("kind", "")).upper())
            target = reply.get("target")
            doc = parse_skill(reply["skill"]) if reply.get("skill") else None
        except (ValueError, KeyError, SkillError):
            return Refusal("malformed_output")
        if kind is EditKind.ADD and doc:
            return Edit.add(doc, rationale)
        if kind is EditKind.MODIFY and doc and target:
            return Edit.modify(str(target), doc, rationale)
        if kind is EditKind.REMOVE and target:
            return Edit.remove(str(target), rationale)
        if kind is EditKind.ADD_WITH_REMOVE and doc and target:
            return Edit.add_with_remove(doc, str(target), rationale)
        return Refusal("malformed_output")

    def propose(self, ctx: ProposalContext) -> Edit | Refusal:
        lib = ctx.library
        skills = "\n".join(
            f"- {s['name']}: {s['description']} | provenance={s['provenance']} | "
            f"accepted_states={s['present_in_accepted']} probe_score={s['probe_score']}"
            for s in ctx.skill_summaries()
        ) or "(library is empty)"
        allowed = sorted(k.value for k in (ctx.allowed_kinds or set(EditKind) - {EditKind.REVERT}))
        prompt = load_prompt("writer_propose").substitute(
            capacity=lib.capacity, size=len(lib), skills=skills, label=ctx.group.label,
            failures="\n\n".join(_trace_text(m.item) for m in ctx.group.members[:6]),
            passing="\n\n".join(_trace_text(p, 600) for p in ctx.passing) or "(none)",
            other_labels=", ".join(ctx.other_labels) or "(none)",
            allowed=", ".join(allowed),
        )
        try:
            reply = self._ask(prompt)
        except ValueError:
            return Refusal("malformed_output")
        return self._to_edit(reply, f"group:{ctx.group.label}:attempt{ctx.attempt}")

    def revise(self, edit: Edit, regressing: Sequence, traces: Sequence | None = None) -> Edit | Refusal:
        shown = []
        for i, entry in enumerate(regressing):
            trace = traces[i] if traces and i < len(traces) else None
            line = f"- {entry.episode_id} ({entry.task_type})"
            if trace is not None:
                line += "\n" + "\n".join(f"    > {a} -> {o}" for a, o in trace.steps[-3:])
            shown.append(line)
        prompt = load_prompt("writer_revise").substitute(
            regressions="\n".join(shown) or "(none)", kind=edit.kind.value, target=edit.target or "",
            skill=render_skill(edit.doc) if edit.doc else "",
        )
        try:
            reply = self._ask(prompt)
        except ValueError:
            return Refusal("malformed_output")
        return self._to_edit(reply, edit.rationale + ":revised")

    def prefer(self, candidates: Sequence[Edit]) -> int:
        listing = "\n\n".join(
            f"{i + 1}. {c.describe()}\n{render_skill(c.doc) if c.doc else ''}" for i, c in enumerate(candidates)
        )
        try:
            reply = self._ask(load_prompt("writer_prefer").substitute(candidates=listing))
            return int(reply["choice"]) - 1
        except (ValueError, KeyError, TypeError):
            return 0

    def note(self, failed: ScoredTrace, fingerprint: str) -> Note:
        try:
            reply = self._ask(load_prompt("memory_note").substitute(episode=_trace_text(failed)))
            return Note(str(reply["note"]))
        except (ValueError, KeyError, TypeError):
            return Note(f"Re-check {failed.task.task_type} tasks before answering.")

    def consolidate(self, failed: Sequence[ScoredTrace], fingerprint: str) -> Note:
        episodes = "\n\n".join(_trace_text(f, 600) for f in failed[:12])
        try:
            reply = self._ask(load_prompt("memory_consolidate").substitute(episodes=episodes))
            return Note(str(reply["note"]))
        except (ValueError, KeyError, TypeError):
            return Note("Re-check each task's constraints before answering.")

    def expel_ops(self, failed: ScoredTrace, book: RuleBook) -> list[RuleEdit]:
        rules = "\n".join(f"{i + 1}. {r.text} (votes {r.count})" for i, r in enumerate(book.rules)) or "(none)"
        try:
            reply = self._ask(load_prompt("rules_update").substitute(cap=book.cap, rules=rules,
                                                                      episode=_trace_text(failed)))
            raw_ops = reply["ops"]
        except (ValueError, KeyError, TypeError):
            return []
        ops = []
        for op in raw_ops if isinstance(raw_ops, list) else []:
            try:
                kind = RuleOp(str(op["op"]).upper())
            except (KeyError, ValueError, TypeError):
                continue
            index = int(op["index"]) - 1 if "index" in op else None
            rule = Rule(str(op["text"])) if op.get("text") else None
            ops.append(RuleEdit(kind, index, rule))
        return ops


# ---------------------------------------------------------------------------
# Wiring
# ---------------------------------------------------------------------------


def load_adapter(ref: str) -> TaskAdapter:
    """Instantiate ``package.module:Factory``."""
    module_name, _, attr = ref.partition(":")
    if not attr:
        raise ConfigurationError(f"adapter must look like 'module:Factory', got {ref!r}")
    try:
        factory = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigurationError(f"cannot load adapter {ref!r}: {exc}") from None
    return factory()


def llm_backends(cfg, transport: httpx.BaseTransport | None = None):
    from .orchestrator import Backends

    if not cfg.adapter:
        raise ConfigurationError("the llm backend needs an adapter")
    endpoints = dict(cfg.endpoints)
    if "agent" not in endpoints or "writer" not in endpoints:
        raise ConfigurationError("the llm backend needs 'agent' and 'writer' endpoints")
    agent = ChatClient(Endpoint.from_mapping(endpoints["agent"], AGENT_TEMPERATURE), transport)
    writer_client = ChatClient(Endpoint.from_mapping(endpoints["writer"], WRITER_TEMPERATURE), transport)
    classifier_client = (
        ChatClient(Endpoint.from_mapping(endpoints["classifier"], 0.0), transport)
        if "classifier" in endpoints else writer_client
    )
    adapter = load_adapter(cfg.adapter)
    return Backends(
        runner=LLMRunner(agent, adapter),
        classifier=LLMClassifier(classifier_client),
        writer=LLMWriter(writer_client),
        tasks={sp: adapter.tasks(sp) for sp in Split},
    )
