"""Ranking metrics, popularity slicing, and the system-comparison harness.

Evaluation is offline: held-out interaction groups become EvalCases; each
candidate system maps a UserContext to a ranked query list; hit rate and
reciprocal rank are averaged overall and per popularity slice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .artifacts import canonical_json, config_hash
from .corpus import POSITIVE_LEVELS, InteractionRecord, UserContext

TOP, MIDDLE, LONG_TAIL = "top", "middle", "long-tail"
SLICE_NAMES = (TOP, MIDDLE, LONG_TAIL)


@dataclass(frozen=True)
class EvalCase:
    """One suggestion request plus the queries that count as hits."""

    context: UserContext
    relevant: frozenset[str]
    popularity_class: str = ""

    def __post_init__(self):
        if not self.relevant:
            raise ValueError("relevant set must be non-empty")
        if self.popularity_class not in ("",) + SLICE_NAMES:
            raise ValueError(f"unknown slice {self.popularity_class!r}")


def hit_rate_at_k(ranked: list[str], relevant, k: int) -> float:
    """1 if any of the first k ranked queries is relevant, else 0."""
    if k < 1:
        raise ValueError("k must be at least 1")
    rel = set(relevant)
    return 1.0 if any(q in rel for q in ranked[:k]) else 0.0


def mrr(ranked: list[str], relevant) -> float:
    """Reciprocal rank of the first relevant query; 0 when absent."""
    rel = set(relevant)
    for i, q in enumerate(ranked):
        if q in rel:
            return 1.0 / (i + 1)
    return 0.0


def prefix_pv_counts(records: list[InteractionRecord]) -> dict[str, int]:
    """Number of distinct presentation groups (ts, user, prefix) per prefix."""
    seen = set()
    counts: dict[str, int] = {}
    for r in records:
        key = (r.ts, r.user_id, r.prefix)
        if key not in seen:
            seen.add(key)
            counts[r.prefix] = counts.get(r.prefix, 0) + 1
    return counts


def slice_by_popularity(cases: list[EvalCase], prefix_counts: dict[str, int],
                        t_top: int = 50, t_mid: int = 10) -> list[EvalCase]:
    """top: count > t_top; middle: t_mid <= count <= t_top; else long-tail."""
    if not t_top > t_mid > 0:
        raise ValueError("need t_top > t_mid > 0")
    out = []
    for case in cases:
        n = prefix_counts.get(case.context.prefix, 0)
        label = TOP if n > t_top else MIDDLE if n >= t_mid else LONG_TAIL
        out.append(replace(case, popularity_class=label))
    return out


def build_eval_cases(test_records: list[InteractionRecord],
                     train_records: list[InteractionRecord],
                     related_fn=None, profiles: dict[str, str] | None = None,
                     max_history: int = 10) -> list[EvalCase]:
    """Held-out presentation groups with positive targets become cases.

    History comes from the user's positive train-period interactions only;
    groups without positives are dropped.
    """
    history: dict[str, list[str]] = {}
    for r in sorted(train_records, key=lambda r: (r.ts, r.user_id, r.query)):
        if r.level in POSITIVE_LEVELS:
            bucket = history.setdefault(r.user_id, [])
            if not bucket or bucket[-1] != r.query:
                bucket.append(r.query)
    profiles = profiles or {}
    related_cache: dict[str, tuple[str, ...]] = {}

    def related_for(prefix: str) -> tuple[str, ...]:
        if related_fn is None:
            return ()
        if prefix not in related_cache:
            related_cache[prefix] = tuple(related_fn(prefix))
        return related_cache[prefix]

    groups: dict[tuple, set[str]] = {}
    for r in test_records:
        groups.setdefault((r.ts, r.user_id, r.prefix), set())
        if r.level in POSITIVE_LEVELS:
            groups[(r.ts, r.user_id, r.prefix)].add(r.query)
    cases = []
    for (ts, user_id, prefix), relevant in sorted(groups.items()):
        if not relevant:
            continue
        ctx = UserContext(
            prefix=prefix,
            related=related_for(prefix),
            history=tuple(history.get(user_id, [])[-max_history:]),
            profile=profiles.get(user_id, ""))
        cases.append(EvalCase(context=ctx, relevant=frozenset(relevant)))
    return cases


@dataclass(frozen=True)
class EvalReport:
    """Per-system metric rows plus the run fingerprint."""

    rows: dict[str, dict]
    k: int
    config_hash: str = ""
    seed: int = 0
    assertions: dict[str, bool] = field(default_factory=dict)


def evaluate_system(suggest_fn, cases: list[EvalCase], k: int = 16) -> dict:
    """Means of HR@k and MRR, overall and per popularity slice."""
    if not cases:
        raise ValueError("no cases to evaluate")
    per_slice: dict[str, list[tuple[float, float]]] = {}
    overall: list[tuple[float, float]] = []
    for case in cases:
        ranked = list(suggest_fn(case.context))[:k]
        pair = (hit_rate_at_k(ranked, case.relevant, k),
                mrr(ranked, case.relevant))
        overall.append(pair)
        if case.popularity_class:
            per_slice.setdefault(case.popularity_class, []).append(pair)

    def mean(pairs):
        n = len(pairs)
        return {"hr": sum(p[0] for p in pairs) / n,
                "mrr": sum(p[1] for p in pairs) / n, "n": n}

    row = mean(overall)
    row["slices"] = {name: mean(pairs)
                     for name, pairs in sorted(per_slice.items())}
    return row


def run_ablation(systems: dict[str, object], cases: list[EvalCase],
                 k: int = 16, config: dict | None = None,
                 seed: int = 0) -> EvalReport:
    """Evaluates every system on the identical case list."""
    if not systems:
        raise ValueError("need at least one system")
    rows = {name: evaluate_system(fn, cases, k)
            for name, fn in systems.items()}
    return EvalReport(rows=rows, k=k,
                      config_hash=config_hash(config) if config else "",
                      seed=seed)


def ordering_holds(report: EvalReport, chain: list[str], metric: str,
                   scope: str | None = None) -> bool:
    """True when the metric is non-increasing along the named systems."""
    def value(name: str) -> float:
        row = report.rows[name]
        return (row["slices"][scope][metric] if scope else row[metric])

    vals = [value(name) for name in chain]
    return all(a >= b for a, b in zip(vals, vals[1:]))


def with_assertions(report: EvalReport,
                    checks: dict[str, bool]) -> EvalReport:
    return replace(report, assertions=dict(checks))


def report_to_dict(report: EvalReport) -> dict:
    return {"schema": 1, "k": report.k, "seed": report.seed,
            "config_hash": report.config_hash, "rows": report.rows,
            "assertions": report.assertions}


def save_report(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(report_to_dict(report)))


def load_report(path: str) -> EvalReport:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    return EvalReport(rows=raw["rows"], k=raw["k"], seed=raw["seed"],
                      config_hash=raw["config_hash"],
                      assertions=raw.get("assertions", {}))


def format_table(report: EvalReport) -> str:
    """Plain-text aligned columns: system, HR@k, MRR, then per-slice HR."""
    slices = sorted({s for row in report.rows.values()
                     for s in row.get("slices", {})})
    header = ["system", f"hr@{report.k}", "mrr"] + [f"hr:{s}" for s in slices]
    lines = [header]
    for name in sorted(report.rows):
        row = report.rows[name]
        cells = [name, f"{row['hr']:.4f}", f"{row['mrr']:.4f}"]
        for s in slices:
            sub = row.get("slices", {}).get(s)
            cells.append(f"{sub['hr']:.4f}" if sub else "-")
        lines.append(cells)
    widths = [max(len(line[i]) for line in lines)
              for i in range(len(header))]
    rendered = ["  ".join(cell.ljust(widths[i])
                          for i, cell in enumerate(line)).rstrip()
                for line in lines]
    rendered.insert(1, "  ".join("-" * w for w in widths))
    if report.assertions:
        rendered.append("")
        for name, ok in sorted(report.assertions.items()):
            rendered.append(f"[{'PASS' if ok else 'FAIL'}] {name}")
    return "\n".join(rendered)
