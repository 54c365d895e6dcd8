"""Command-line entry point.

Exit status is 0 on success, 2 for user errors (bad config, unknown
fingerprint, incomplete run directory) and 3 for environment errors (a model
endpoint went down; the run directory is left resumable).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Sequence

from . import stats
from .baselines import MemoryBlock, RuleBook
from .ledger import Split
from .orchestrator import (
    ABLATION_PRESET,
    RESULT_FILE,
    RunHalted,
    RunResult,
    TrainingConfig,
    UnsupportedPolicy,
    ablate,
    build_backends,
    format_table,
    load_config,
    sweep,
    train,
    transfer,
)
from .runtime import BackendUnavailable, ConfigurationError
from .skills import (
    SkillError,
    diff_libraries,
    load_library,
    logged_fingerprints,
    revert,
    save_library,
    state_at,
)

EXIT_OK, EXIT_USER, EXIT_ENV = 0, 2, 3
LOCK_FILE = "LOCK"

log = logging.getLogger("skillgate")


class UserError(Exception):
    """Reported on stderr with exit status 2."""


@contextmanager
def run_lock(run_dir: Path) -> Iterator[None]:
    """Hold a marker file in ``run_dir`` for the duration of a command."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_FILE
    try:
        with lock.open("x") as fh:
            fh.write("locked\n")
    except FileExistsError:
        raise UserError(f"{run_dir} is locked by another command (remove {lock} if that command died)") from None
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _config(args) -> TrainingConfig:
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "policy", None):
        changes["policy"] = args.policy
    return cfg.with_(**changes) if changes else cfg


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else Path("runs") / (cfg.run_id or f"{cfg.policy}-seed{cfg.seed}")
    with run_lock(out):
        result = train(cfg, out_dir=out, resume=args.resume)
    print(f"run {result.run_id}: test {result.test_accuracy:.4f}"
          + (f", ood {result.ood_accuracy:.4f}" if result.ood_accuracy is not None else "")
          + f", {result.applied_batches}/{result.n_batches} batches applied")
    print(out)
    return EXIT_OK


def _library(path: str, capacity: int):
    try:
        return load_library(path, capacity)
    except (SkillError, ValueError) as exc:
        raise UserError(str(exc)) from None


def cmd_skills(args) -> int:
    lib = _library(args.library, args.capacity)
    if args.action == "inspect":
        rows = []
        for name, info in lib.effectiveness().items():
            doc = lib.get(name)
            prov = doc.provenance
            rows.append({
                "name": name, "version": doc.version,
                "action": prov.action.value if prov and prov.action else "",
                "epoch": prov.epoch if prov and prov.epoch is not None else "",
                "update_cycle": prov.update_cycle if prov and prov.update_cycle is not None else "",
                "probe_score": info["probe_score"] if info["probe_score"] is not None else "",
                "accepted_states": info["present_in_accepted"],
                "description": doc.description,
            })
        print(f"fingerprint {lib.fingerprint}  ({len(lib)}/{lib.capacity} skills, {len(lib.edit_log)} edits)")
        sys.stdout.write(format_table(rows, ["name", "version", "action", "epoch", "update_cycle",
                                             "probe_score", "accepted_states", "description"]))
        return EXIT_OK
    if args.action == "log":
        for i, fp in enumerate(logged_fingerprints(lib)):
            what = "initial" if i == 0 else lib.edit_log[i - 1].edit.describe()
            print(f"{i}\t{fp}\t{what}")
        return EXIT_OK
    try:
        if args.action == "diff":
            old, new = state_at(lib, args.old), state_at(lib, args.new)
            lines = diff_libraries(old, new)
            print("\n".join(lines) if lines else "no differences")
            return EXIT_OK
        restored = revert(lib, args.fingerprint)
    except SkillError as exc:
        raise UserError(str(exc)) from None
    save_library(restored, args.library)
    print(f"reverted to {restored.fingerprint} ({len(restored)} skills); edit log now {len(restored.edit_log)} records")
    return EXIT_OK


def _load_run(run_dir: str) -> RunResult:
    path = Path(run_dir)
    if not (path / RESULT_FILE).exists():
        raise UserError(f"{run_dir}: no {RESULT_FILE}; the run is incomplete")
    return RunResult.load(path)


def cmd_stats(args) -> int:
    runs = [_load_run(d) for d in args.runs]
    if args.vs:
        others = [_load_run(d) for d in args.vs]
        label_a, label_b = runs[0].policy, others[0].policy
        try:
            report = stats.compare(
                stats.SampleSet([r.test_accuracy for r in runs], label_a),
                stats.SampleSet([r.test_accuracy for r in others], label_b),
                resamples=args.resamples, seed=args.seed,
            )
        except ValueError as exc:
            raise UserError(str(exc)) from None
        print("# comparison (test accuracy)")
        sys.stdout.write(stats.comparison_table([report]))
        return EXIT_OK
    for run in runs:
        enforce = run.policy != "nobudget"
        print(f"# {run.run_id}: gate selectivity")
        sys.stdout.write(stats.selectivity_table(stats.gate_selectivity(run.reports, enforce)))
        print(f"# {run.run_id}: classifier dynamics")
        sys.stdout.write(stats.dynamics_table(stats.classifier_dynamics(run.reports)))
    return EXIT_OK


def _load_state(state_dir: Path, capacity: int):
    if (state_dir / "memory.json").exists():
        return MemoryBlock.from_dict(json.loads((state_dir / "memory.json").read_text()))
    if (state_dir / "rules.json").exists():
        return RuleBook.from_dict(json.loads((state_dir / "rules.json").read_text()))
    return _library(str(state_dir), capacity)


def cmd_transfer(args) -> int:
    cfg = _config(args)
    source = Path(args.source)
    state_dir = source / "checkpoint" if (source / "checkpoint").is_dir() else source
    if not state_dir.is_dir():
        raise UserError(f"{source}: no learned state found")
    state = _load_state(state_dir, cfg.capacity)
    splits = [Split(s) for s in args.splits]
    scores = transfer(state, build_backends(cfg), splits, cfg.max_workers)
    sys.stdout.write(format_table([{"split": k, "accuracy": v} for k, v in scores.items()], ["split", "accuracy"]))
    return EXIT_OK


def _parse_grid(items: Sequence[str]) -> dict[str, list[float]]:
    grid = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise UserError(f"--param expects name=v1,v2,..., got {item!r}")
        try:
            grid[key] = [float(v) for v in values.split(",")]
        except ValueError:
            raise UserError(f"--param {key}: values must be numbers") from None
    return grid


def _write_rows(rows: list[dict], out: str | None) -> None:
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rows = sweep(cfg, _parse_grid(args.param), args.seeds)
    _write_rows(rows, args.out)
    sys.stdout.write(format_table(rows, ["param", "value", "test_mean", "test_sd", "apply_rate", "probe_calls"]))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rows = ablate(cfg, args.policies or ABLATION_PRESET, args.seeds)
    _write_rows(rows, args.out)
    sys.stdout.write(format_table(rows, ["policy", "test_mean", "test_sd"]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skillgate", description="Gated skill-library training for tool-using agents.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, policy=True):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        if policy:
            p.add_argument("--policy", help="override the configured policy")

    p = sub.add_parser("train", help="train one policy and write a run directory")
    with_config(p)
    p.add_argument("--out", help="run directory (default runs/<policy>-seed<seed>)")
    p.add_argument("--resume", action="store_true", help="continue an interrupted run in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("skills", help="inspect, diff or revert a skill library directory")
    p.add_argument("--capacity", type=int, default=10)
    actions = p.add_subparsers(dest="action", required=True)
    a = actions.add_parser("inspect", help="list skills with provenance")
    a.add_argument("library")
    a = actions.add_parser("log", help="list logged fingerprints")
    a.add_argument("library")
    a = actions.add_parser("diff", help="section-level changes between two logged states")
    a.add_argument("library")
    a.add_argument("old")
    a.add_argument("new")
    a = actions.add_parser("revert", help="restore a logged state, appending a REVERT record")
    a.add_argument("library")
    a.add_argument("fingerprint")
    p.set_defaults(func=cmd_skills)

    p = sub.add_parser("stats", help="diagnostics for runs, or a comparison of two groups of runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--vs", nargs="+", help="second group of run directories to compare against")
    p.add_argument("--resamples", type=int, default=stats.DEFAULT_RESAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("transfer", help="evaluate a frozen learned state on another backend")
    with_config(p, policy=False)
    p.add_argument("--from", dest="source", required=True, help="run directory or state directory")
    p.add_argument("--splits", nargs="+", default=["test", "ood"], choices=[s.value for s in Split])
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("sweep", help="one-at-a-time sensitivity sweep over B, N, K or lambda")
    with_config(p)
    p.add_argument("--param", action="append", required=True, metavar="NAME=V1,V2", help="repeatable")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--out", help="write rows as JSON here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="train the ablation policy grid")
    with_config(p, policy=False)
    p.add_argument("--policies", nargs="+", help=f"default: {' '.join(ABLATION_PRESET)}")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--out", help="write rows as JSON here")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, UserError, UnsupportedPolicy) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (RunHalted, BackendUnavailable) as exc:
        print(f"backend unavailable: {exc}", file=sys.stderr)
        if isinstance(exc, RunHalted):
            print(f"halted at epoch {exc.epoch}, batch {exc.batch_index}; rerun with --resume", file=sys.stderr)
        return EXIT_ENV


if __name__ == "__main__":
    sys.exit(main())
