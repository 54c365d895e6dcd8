"""Held-out probe construction and the regression-budgeted acceptance gate.

For a current library S and candidate edit c the gate computes

    score(c) = (F(c) - F0) - (R_w(c) - R0)      admissible iff score > 0 and R(c) <= R0

where F counts previously-failing probe entries that now pass, R counts
previously-passing entries that now fail, and R_w weights invalid-action
failures by lambda. F0 and R0 come from re-running S on the full probe;
F(c) and R(c) skip entries that errored during that baseline run.
"""

from __future__ import annotations

import random
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .ledger import EpisodeRecord, Outcome
from .runtime import EpisodeRunner, RunnerError, TaskSpec, TrajectoryTrace
from .skills import Edit, SkillError, SkillLibrary, apply_edit


@dataclass(frozen=True)
class ProbeEntry:
    episode_id: str
    task_type: str
    prior_outcome: Outcome

    def to_dict(self) -> dict:
        return {"episode_id": self.episode_id, "task_type": self.task_type, "prior": self.prior_outcome.kind.value}


@dataclass(frozen=True)
class Probe:
    fail_side: tuple[ProbeEntry, ...] = ()
    pass_side: tuple[ProbeEntry, ...] = ()

    @property
    def entries(self) -> tuple[ProbeEntry, ...]:
        return self.fail_side + self.pass_side

    @property
    def ids(self) -> list[str]:
        return [e.episode_id for e in self.entries]

    def __len__(self) -> int:
        return len(self.fail_side) + len(self.pass_side)

    def without_pass_side(self) -> "Probe":
        return Probe(self.fail_side, ())

    def to_dict(self) -> dict:
        return {
            "fail_side": [e.episode_id for e in self.fail_side],
            "pass_side": [e.episode_id for e in self.pass_side],
        }


def _stratified(records: list[EpisodeRecord], k: int, rng: random.Random) -> list[EpisodeRecord]:
    by_type: dict[str, list[EpisodeRecord]] = defaultdict(list)
    for rec in records:
        by_type[rec.task_type].append(rec)
    queues = []
    for task_type in sorted(by_type):
        bucket = sorted(by_type[task_type], key=lambda r: r.episode_id)
        rng.shuffle(bucket)
        queues.append(bucket)
    chosen: list[EpisodeRecord] = []
    while len(chosen) < k and any(queues):
        for bucket in queues:
            if bucket and len(chosen) < k:
                chosen.append(bucket.pop(0))
    return chosen


def build_probe(
    history_prior: Sequence[EpisodeRecord],
    N: int,
    seed: int,
    exclude_ids: frozenset[str] | set[str] = frozenset(),
) -> Probe:
    """Sample up to N/2 previously-failing and N/2 previously-passing entries.

    Each side is filled round-robin across task types. A short side is not
    compensated by the other.
    """
    if N < 2 or N % 2:
        raise ValueError(f"probe size must be even and >= 2, got {N}")
    latest: dict[str, EpisodeRecord] = {}
    for rec in history_prior:
        if rec.episode_id in exclude_ids:
            continue
        prev = latest.get(rec.episode_id)
        if prev is None or (rec.epoch, rec.batch_index) >= (prev.epoch, prev.batch_index):
            latest[rec.episode_id] = rec
    pool = sorted(latest.values(), key=lambda r: r.episode_id)
    rng = random.Random(seed)
    failing = _stratified([r for r in pool if not r.outcome.passed], N // 2, rng)
    passing = _stratified([r for r in pool if r.outcome.passed], N // 2, rng)

    def entry(r: EpisodeRecord) -> ProbeEntry:
        return ProbeEntry(r.episode_id, r.task_type, r.outcome)

    return Probe(tuple(map(entry, failing)), tuple(map(entry, passing)))


@dataclass
class ProbeRun:
    outcomes: dict[str, Outcome] = field(default_factory=dict)
    traces: dict[str, TrajectoryTrace] = field(default_factory=dict)
    errored: frozenset[str] = frozenset()

    @property
    def calls(self) -> int:
        return len(self.outcomes) + len(self.errored)

    def passed(self, episode_id: str) -> bool:
        outcome = self.outcomes.get(episode_id)
        return outcome is not None and outcome.passed


def evaluate_on_probe(
    state,
    probe: Probe,
    runner: EpisodeRunner,
    tasks: Mapping[str, TaskSpec],
    max_workers: int = 1,
) -> ProbeRun:
    """Re-execute every probe entry under ``state``."""
    fingerprint = state.fingerprint
    ids = probe.ids

    def one(eid: str):
        try:
            return eid, runner.run(state, tasks[eid])
        except RunnerError:
            return eid, None

    if max_workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(one, ids))
    else:
        results = [one(eid) for eid in ids]

    run = ProbeRun()
    errored = set()
    for eid, result in results:
        if result is None:
            errored.add(eid)
        else:
            run.outcomes[eid], run.traces[eid] = result
    run.errored = frozenset(errored)
    if state.fingerprint != fingerprint:
        raise RuntimeError("learned state changed during probe evaluation")
    return run


@dataclass(frozen=True)
class GateBaseline:
    F0: int
    R0: int
    E0: frozenset[str]

    def to_dict(self) -> dict:
        return {"F0": self.F0, "R0": self.R0, "E0": sorted(self.E0)}


def baseline_from(probe: Probe, run: ProbeRun) -> GateBaseline:
    F0 = sum(run.passed(e.episode_id) for e in probe.fail_side)
    # An errored pass-side entry did not pass under S, so it counts toward R0.
    R0 = sum(not run.passed(e.episode_id) for e in probe.pass_side)
    return GateBaseline(F0, R0, run.errored)


def _weight(lam: float):
    return int(lam) if float(lam).is_integer() else float(lam)


@dataclass(frozen=True)
class CandidateScore:
    index: int
    candidate: Edit
    F: int = 0
    R_unweighted: int = 0
    R_weighted: float = 0
    invalid_regressions: int = 0
    score: float = 0
    budget_ok: bool = False
    rejected_reason: str | None = None
    regressing: tuple[str, ...] = ()

    def admissible(self, enforce_budget: bool = True) -> bool:
        if self.rejected_reason is not None:
            return False
        return self.score > 0 and (self.budget_ok or not enforce_budget)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "edit": self.candidate.describe(),
            "F": self.F,
            "R": self.R_unweighted,
            "R_weighted": self.R_weighted,
            "invalid_regressions": self.invalid_regressions,
            "score": self.score,
            "budget_ok": self.budget_ok,
            "rejected_reason": self.rejected_reason,
        }


def count_candidate(
    baseline: GateBaseline, probe: Probe, run: ProbeRun, lam: float, candidate: Edit, index: int = 0
) -> CandidateScore:
    """Score a candidate from its probe run (pure arithmetic, no execution)."""
    lam = _weight(lam)
    F = sum(run.passed(e.episode_id) for e in probe.fail_side if e.episode_id not in baseline.E0)
    regressing = [
        e.episode_id for e in probe.pass_side
        if e.episode_id not in baseline.E0 and not run.passed(e.episode_id)
    ]
    n_invalid = sum(1 for eid in regressing if eid in run.outcomes and run.outcomes[eid].invalid)
    R = len(regressing)
    R_weighted = (R - n_invalid) + lam * n_invalid
    score = (F - baseline.F0) - (R_weighted - baseline.R0)
    return CandidateScore(
        index=index,
        candidate=candidate,
        F=F,
        R_unweighted=R,
        R_weighted=R_weighted,
        invalid_regressions=n_invalid,
        score=score,
        budget_ok=R <= baseline.R0,
        regressing=tuple(regressing),
    )


def score_candidate(
    baseline: GateBaseline,
    lib: SkillLibrary,
    candidate: Edit,
    probe: Probe,
    runner: EpisodeRunner,
    tasks: Mapping[str, TaskSpec],
    lam: float = 2,
    index: int = 0,
    max_workers: int = 1,
) -> tuple[CandidateScore, ProbeRun | None]:
    try:
        fork = apply_edit(lib, candidate)
    except SkillError as exc:
        return CandidateScore(index, candidate, rejected_reason=f"fork_failed: {exc}"), None
    run = evaluate_on_probe(fork, probe, runner, tasks, max_workers)
    return count_candidate(baseline, probe, run, lam, candidate, index), run


def tie_break_key(score: float, R: int, index: int) -> tuple:
    """Sort key: highest score, then fewest regressions, then earliest proposal."""
    return (-score, R, index)


@dataclass(frozen=True)
class Decision:
    applied: bool
    edit: Edit | None = None
    score: float | None = None
    index: int | None = None
    revised: bool = False
    skipped: bool = False

    @classmethod
    def rejected(cls) -> "Decision":
        return cls(False)

    @classmethod
    def skip(cls) -> "Decision":
        return cls(False, skipped=True)

    @classmethod
    def accept(cls, edit: Edit, score: float, index: int, revised: bool = False) -> "Decision":
        return cls(True, edit, score, index, revised)

    @property
    def label(self) -> str:
        if self.skipped:
            return "Skipped"
        return "Applied" if self.applied else "Rejected"

    def to_dict(self) -> dict:
        return {
            "decision": self.label,
            "edit": self.edit.to_dict() if self.edit else None,
            "score": self.score,
            "index": self.index,
            "revised": self.revised,
        }



@dataclass(frozen=True)
class RevisionRecord:
    original: CandidateScore
    revised: CandidateScore | None
    adopted: bool
    reason: str

    def to_dict(self) -> dict:
        return {
            "original": self.original.to_dict(),
            "revised": self.revised.to_dict() if self.revised else None,
            "revised_doc": self.revised.candidate.to_dict() if self.revised else None,
            "adopted": self.adopted,
            "reason": self.reason,
        }


def contrastive_revision(
    winner: CandidateScore,
    winner_run: ProbeRun | None,
    writer,
    lib: SkillLibrary,
    probe: Probe,
    baseline: GateBaseline,
    runner: EpisodeRunner,
    tasks: Mapping[str, TaskSpec],
    lam: float = 2,
    enforce_budget: bool = True,
    max_workers: int = 1,
) -> tuple[CandidateScore, RevisionRecord, int]:
    """Ask the writer once for a narrower edit; keep it only on strict improvement.

    Returns the final score, the revision record, and the number of probe
    episodes spent scoring the revision.
    """
    by_id = {e.episode_id: e for e in probe.pass_side}
    regressing = [by_id[eid] for eid in winner.regressing]
    traces = [winner_run.traces.get(eid) for eid in winner.regressing] if winner_run else None
    revision = writer.revise(winner.candidate, regressing, traces)
    if not isinstance(revision, Edit):
        return winner, RevisionRecord(winner, None, False, "writer_refused"), 0
    revised, run = score_candidate(
        baseline, lib, revision, probe, runner, tasks, lam, winner.index, max_workers
    )
    calls = run.calls if run is not None else 0
    if revised.rejected_reason is not None:
        return winner, RevisionRecord(winner, revised, False, "revision_invalid"), calls
    if revised.score <= winner.score:
        return winner, RevisionRecord(winner, revised, False, "score_not_higher"), calls
    if enforce_budget and not revised.budget_ok:
        return winner, RevisionRecord(winner, revised, False, "budget_violated"), calls
    return revised, RevisionRecord(winner, revised, True, "adopted"), calls


@dataclass
class GateResult:
    """Everything one pass of the gate produced for a batch."""

    probe: Probe
    baseline: GateBaseline | None
    scores: list[CandidateScore]
    decision: Decision
    library: SkillLibrary
    revision: RevisionRecord | None = None
    probe_calls: int = 0
    revision_probe_calls: int = 0
    revise_calls: int = 0

    def report_fields(self) -> dict:
        return {
            "probe": self.probe.to_dict(),
            "baseline": self.baseline.to_dict() if self.baseline else None,
            "candidates": [s.to_dict() for s in self.scores],
            "decision": self.decision.to_dict(),
            "revision": self.revision.to_dict() if self.revision else None,
            "probe_calls": self.probe_calls,
            "revision_probe_calls": self.revision_probe_calls,
        }


def _as_probe_score(score: float) -> int:
    return int(score) if float(score).is_integer() else round(score)


def select_and_apply(
    scores: Sequence[CandidateScore],
    lib: SkillLibrary,
    writer,
    probe: Probe,
    runner: EpisodeRunner,
    tasks: Mapping[str, TaskSpec],
    baseline: GateBaseline,
    runs: Mapping[int, ProbeRun] | None = None,
    lam: float = 2,
    enforce_budget: bool = True,
    revise: bool = True,
    epoch: int = 0,
    update_cycle: int = 0,
    report_ref: str | None = None,
    max_workers: int = 1,
) -> GateResult:
    """Apply the best admissible candidate, revising it first if it regresses."""
    admissible = [s for s in scores if s.admissible(enforce_budget)]
    if not admissible:
        return GateResult(probe, baseline, list(scores), Decision.rejected(), lib)
    winner = min(admissible, key=lambda s: tie_break_key(s.score, s.R_unweighted, s.index))
    final, record, rev_calls, revise_calls = winner, None, 0, 0
    if revise and writer is not None and winner.R_unweighted > 0:
        revise_calls = 1
        final, record, rev_calls = contrastive_revision(
            winner, (runs or {}).get(winner.index), writer, lib, probe, baseline,
            runner, tasks, lam, enforce_budget, max_workers,
        )
    new_lib = apply_edit(
        lib, final.candidate, epoch=epoch, update_cycle=update_cycle,
        probe_score=_as_probe_score(final.score), report_ref=report_ref,
    )
    decision = Decision.accept(final.candidate, final.score, winner.index, record is not None and record.adopted)
    return GateResult(
        probe, baseline, list(scores), decision, new_lib, record,
        revision_probe_calls=rev_calls, revise_calls=revise_calls,
    )


def run_gate(
    lib: SkillLibrary,
    candidates: Sequence[Edit],
    probe: Probe,
    runner: EpisodeRunner,
    tasks: Mapping[str, TaskSpec],
    writer=None,
    lam: float = 2,
    enforce_budget: bool = True,
    revise: bool = True,
    selector: Callable[[Sequence[CandidateScore]], int | None] | None = None,
    epoch: int = 0,
    update_cycle: int = 0,
    report_ref: str | None = None,
    max_workers: int = 1,
) -> GateResult:
    """Baseline, score every candidate on the same probe, then select.

    ``selector`` replaces score-based selection (the chosen candidate is
    applied whatever its score); it still sees the full probe evaluation.
    """
    base_run = evaluate_on_probe(lib, probe, runner, tasks, max_workers)
    baseline = baseline_from(probe, base_run)
    probe_calls = base_run.calls
    scores, runs = [], {}
    for i, cand in enumerate(candidates):
        score, run = score_candidate(baseline, lib, cand, probe, runner, tasks, lam, i, max_workers)
        scores.append(score)
        if run is not None:
            runs[i] = run
            probe_calls += run.calls
    if selector is not None:
        choice = selector(scores)
        if choice is None or scores[choice].rejected_reason is not None:
            result = GateResult(probe, baseline, scores, Decision.rejected(), lib)
        else:
            chosen = scores[choice]
            new_lib = apply_edit(
                lib, chosen.candidate, epoch=epoch, update_cycle=update_cycle,
                probe_score=_as_probe_score(chosen.score), report_ref=report_ref,
            )
            result = GateResult(probe, baseline, scores, Decision.accept(chosen.candidate, chosen.score, choice), new_lib)
    else:
        result = select_and_apply(
            scores, lib, writer, probe, runner, tasks, baseline, runs, lam, enforce_budget, revise,
            epoch, update_cycle, report_ref, max_workers,
        )
    result.probe_calls = probe_calls
    return result
