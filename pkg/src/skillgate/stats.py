"""Two-sample comparisons and run diagnostics.

``compare`` reports the mean difference with a percentile bootstrap
interval, a two-sided permutation p-value on the difference of means, and
Cohen's d. The diagnostics read gate reports: how selective the gate was,
and how the failure-label vocabulary grew.
"""

from __future__ import annotations

import itertools
import math
import statistics
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

EXACT_LIMIT = 50_000
MONTE_CARLO_PERMUTATIONS = 100_000
DEFAULT_RESAMPLES = 10_000
_TOL = 1e-9


@dataclass(frozen=True)
class SampleSet:
    values: tuple[float, ...]
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        for v in self.values:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"sample values must be accuracies in [0, 1], got {v}")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ComparisonReport:
    delta: float
    ci_low: float
    ci_high: float
    resamples: int
    p_value: float
    p_exact: Fraction | None
    p_mode: str
    cohens_d: float | None
    n_a: int
    n_b: int
    label_a: str = ""
    label_b: str = ""

    def to_dict(self) -> dict:
        return {
            "a": self.label_a,
            "b": self.label_b,
            "n_a": self.n_a,
            "n_b": self.n_b,
            "delta": self.delta,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "resamples": self.resamples,
            "p": self.p_value,
            "p_exact": str(self.p_exact) if self.p_exact is not None else None,
            "p_mode": self.p_mode,
            "d": self.cohens_d,
        }


def _as_array(sample: SampleSet | Sequence[float]) -> np.ndarray:
    values = sample.values if isinstance(sample, SampleSet) else tuple(float(v) for v in sample)
    return np.asarray(values, dtype=float)


def bootstrap_ci(a: np.ndarray, b: np.ndarray, resamples: int, seed: int, level: float = 0.95) -> tuple[float, float]:
    """Percentile interval for mean(a) - mean(b), resampling each group on its own."""
    rng = np.random.default_rng(seed)
    means_a = a[rng.integers(0, len(a), size=(resamples, len(a)))].mean(axis=1)
    means_b = b[rng.integers(0, len(b), size=(resamples, len(b)))].mean(axis=1)
    diffs = means_a - means_b
    tail = (1.0 - level) / 2 * 100
    low, high = np.percentile(diffs, [tail, 100 - tail])
    return float(low), float(high)


def permutation_p(a: np.ndarray, b: np.ndarray, seed: int = 0,
                  permutations: int = MONTE_CARLO_PERMUTATIONS) -> tuple[float, Fraction | None, str]:
    """Two-sided p for the difference of means.

    Exact enumeration of all group assignments when there are at most
    ``EXACT_LIMIT`` of them. Otherwise a Monte Carlo estimate in which the
    observed assignment counts as one member of the null set.
    """
    pooled = np.concatenate([a, b])
    n, n_a = len(pooled), len(a)
    total = pooled.sum()
    observed = abs(a.mean() - b.mean())
    scale = max(1.0, float(np.abs(pooled).max()))
    count = math.comb(n, n_a)
    if count <= EXACT_LIMIT:
        combos = np.fromiter(
            itertools.chain.from_iterable(itertools.combinations(range(n), n_a)), dtype=np.int64, count=count * n_a
        ).reshape(count, n_a)
        sums = pooled[combos].sum(axis=1)
        stats = np.abs(sums / n_a - (total - sums) / (n - n_a))
        hits = int(np.count_nonzero(stats >= observed - _TOL * scale))
        exact = Fraction(hits, count)
        return float(exact), exact, "exact"
    rng = np.random.default_rng(seed)
    hits = 1
    chunk = 10_000
    done = 0
    while done < permutations:
        m = min(chunk, permutations - done)
        keys = rng.random((m, n))
        idx = np.argsort(keys, axis=1)[:, :n_a]
        sums = pooled[idx].sum(axis=1)
        stats = np.abs(sums / n_a - (total - sums) / (n - n_a))
        hits += int(np.count_nonzero(stats >= observed - _TOL * scale))
        done += m
    return hits / (permutations + 1), None, "monte_carlo"


def cohens_d(a: np.ndarray, b: np.ndarray) -> float | None:
    """Standardized mean difference with pooled SD; ``None`` when the pooled SD is zero."""
    n_a, n_b = len(a), len(b)
    pooled_var = ((n_a - 1) * a.var(ddof=1) + (n_b - 1) * b.var(ddof=1)) / (n_a + n_b - 2)
    if pooled_var <= 0:
        return None
    return float((a.mean() - b.mean()) / math.sqrt(pooled_var))


def compare(
    a: SampleSet | Sequence[float],
    b: SampleSet | Sequence[float],
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> ComparisonReport:
    xa, xb = _as_array(a), _as_array(b)
    if len(xa) < 2 or len(xb) < 2:
        raise ValueError("each sample needs at least two values")
    if resamples < 1:
        raise ValueError("resamples must be positive")
    delta = float(xa.mean() - xb.mean())
    low, high = bootstrap_ci(xa, xb, resamples, seed)
    p, exact, mode = permutation_p(xa, xb, seed)
    return ComparisonReport(
        delta=delta,
        ci_low=low,
        ci_high=high,
        resamples=resamples,
        p_value=p,
        p_exact=exact,
        p_mode=mode,
        cohens_d=cohens_d(xa, xb),
        n_a=len(xa),
        n_b=len(xb),
        label_a=getattr(a, "label", ""),
        label_b=getattr(b, "label", ""),
    )


# ---------------------------------------------------------------------------
# Gate diagnostics
# ---------------------------------------------------------------------------


def _decision(report: Mapping) -> str:
    return (report.get("decision") or {}).get("decision", "Skipped")


def _admissible(cand: Mapping, enforce_budget: bool) -> bool:
    if cand.get("rejected_reason"):
        return False
    return cand["score"] > 0 and (cand["budget_ok"] or not enforce_budget)


def gate_selectivity(reports: Sequence[Mapping], enforce_budget: bool = True) -> dict:
    """How often the gate applied an edit and how far accepted edits cleared it.

    Only batches that reached the gate (had candidates scored) are counted.
    The margin of an applied edit is its score above the acceptance
    threshold of zero.
    """
    gated = [r for r in reports if r.get("candidates") is not None and _decision(r) != "Skipped"]
    if not gated:
        return {"batches": 0, "apply_rate": 0.0, "admit_rate": 0.0, "per_batch_admissible_mean": 0.0,
                "per_batch_budget_ok_mean": 0.0, "margins": [], "margin_median": None,
                "margin_mean": None, "margin_max": None}
    candidates = [c for r in gated for c in r["candidates"]]
    admissible = sum(_admissible(c, enforce_budget) for c in candidates)
    applied = [r for r in gated if _decision(r) == "Applied"]
    margins = [r["decision"]["score"] for r in applied if r["decision"].get("score") is not None]
    return {
        "batches": len(gated),
        "apply_rate": len(applied) / len(gated),
        "admit_rate": admissible / len(candidates) if candidates else 0.0,
        "per_batch_admissible_mean": admissible / len(gated),
        "per_batch_budget_ok_mean": sum(bool(c.get("budget_ok")) and not c.get("rejected_reason")
                                        for c in candidates) / len(gated),
        "margins": margins,
        "margin_median": statistics.median(margins) if margins else None,
        "margin_mean": statistics.fmean(margins) if margins else None,
        "margin_max": max(margins) if margins else None,
    }


def classifier_dynamics(reports: Sequence[Mapping]) -> list[dict]:
    """Cumulative label vocabulary and trace-level reuse, per batch in run order.

    Reuse at a batch is the share of its failing traces whose label was seen in
    an earlier batch; a batch with no failures reports a reuse of 0.
    """
    seen: set[str] = set()
    rows = []
    for i, report in enumerate(reports):
        labels = [label for _, label in report.get("labels", [])]
        reused = sum(label in seen for label in labels)
        seen.update(labels)
        rows.append({
            "batch": i,
            "epoch": report.get("epoch"),
            "batch_index": report.get("batch_index"),
            "failing": len(labels),
            "vocabulary": len(seen),
            "reuse_rate": reused / len(labels) if labels else 0.0,
        })
    return rows


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def _fmt(value, digits: int = 3) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def comparison_table(reports: Sequence[ComparisonReport], sep: str = "\t") -> str:
    header = ["a", "b", "n_a", "n_b", "delta", "ci_low", "ci_high", "p", "d"]
    lines = [sep.join(header)]
    for r in reports:
        lines.append(sep.join([
            r.label_a, r.label_b, str(r.n_a), str(r.n_b), _fmt(r.delta), _fmt(r.ci_low), _fmt(r.ci_high),
            _fmt(r.p_value), _fmt(r.cohens_d, 2),
        ]))
    return "\n".join(lines) + "\n"


def selectivity_table(summary: Mapping, sep: str = "\t") -> str:
    keys = ["batches", "apply_rate", "admit_rate", "per_batch_admissible_mean", "per_batch_budget_ok_mean",
            "margin_median", "margin_mean", "margin_max"]
    return sep.join(keys) + "\n" + sep.join(_fmt(summary.get(k)) for k in keys) + "\n"


def dynamics_table(rows: Sequence[Mapping], sep: str = "\t") -> str:
    keys = ["batch", "epoch", "batch_index", "failing", "vocabulary", "reuse_rate"]
    lines = [sep.join(keys)]
    lines += [sep.join(_fmt(row.get(k)) for k in keys) for row in rows]
    return "\n".join(lines) + "\n"
