"""Synthetic e-commerce search-log corpus and dataset builders.

Generates a product-query catalog with planted category structure, simulates
page views of a suggestion panel with graded user feedback, and turns the
resulting interaction log into supervised and preference training sets.  Also
hosts the most-popular-completion trie used as the retrieval baseline.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

# Feedback levels in descending strength order.  The per-level weight feeds
# the reward shaping used by preference training.
LEVEL_NAMES = ("Order", "ItemClick", "Click", "Show", "NotShow", "Rand")
LEVEL_WEIGHTS = (2.0, 1.5, 1.0, 0.5, 0.2, 0.0)
LEVEL_RANK = {name: i for i, name in enumerate(LEVEL_NAMES)}
LEVEL_WEIGHT = dict(zip(LEVEL_NAMES, LEVEL_WEIGHTS))
POSITIVE_LEVELS = frozenset({"Order", "ItemClick", "Click"})
NEGATIVE_LEVELS = frozenset({"Show", "NotShow", "Rand"})

_CATEGORY_WORDS = (
    "dress", "shoes", "phone", "laptop", "watch", "sofa", "lamp", "bottle",
    "backpack", "jacket", "camera", "keyboard", "headset", "blender",
    "curtain", "rug", "tent", "drone", "scooter", "guitar", "kettle", "desk",
    "mirror", "wallet",
)
_MODIFIER_WORDS = (
    "red", "blue", "black", "white", "green", "mini", "pro", "max", "slim",
    "retro", "cheap", "kids", "mens", "womens", "summer", "winter", "cotton",
    "travel", "gaming", "wool", "steel", "oak", "long", "soft", "zip", "eco",
    "twin", "aqua", "bold", "cozy",
)


def _fail(msg: str) -> None:
    raise ValueError(msg)


@dataclass(frozen=True)
class InteractionRecord:
    """One logged (prefix, suggested query) interaction."""

    user_id: str
    prefix: str
    query: str
    level: str
    ts: int

    def __post_init__(self):
        if self.level not in LEVEL_RANK:
            _fail(f"unknown feedback level {self.level!r}")
        if not self.prefix:
            _fail("prefix must be non-empty")


@dataclass(frozen=True)
class UserContext:
    """Everything the generator sees for one suggestion request."""

    prefix: str
    related: tuple[str, ...] = ()
    history: tuple[str, ...] = ()
    profile: str = ""


@dataclass(frozen=True)
class ScoredQuery:
    query: str
    level: str
    pi: float


@dataclass(frozen=True)
class PreferenceGroup:
    """One win query with one or more lower-reward loses for a context."""

    context: UserContext
    win: ScoredQuery
    loses: tuple[ScoredQuery, ...]
    rw: tuple[float, ...]


class Catalog:
    """Immutable query catalog with per-category popularity weights."""

    def __init__(self, queries: Sequence[str], category: dict[str, str],
                 weight: dict[str, float]):
        self.queries = list(queries)
        self.category = dict(category)
        self.weight = dict(weight)
        by_cat: dict[str, list[str]] = {}
        for q in self.queries:
            by_cat.setdefault(self.category[q], []).append(q)
        # Popularity order with lexicographic tie-break, used everywhere a
        # category's queries are ranked.
        self.by_category = {
            c: sorted(qs, key=lambda q: (-self.weight[q], q))
            for c, qs in by_cat.items()
        }
        self.categories = sorted(self.by_category)

    def popularity_rank(self, query: str) -> int:
        return self.by_category[self.category[query]].index(query)


def generate_catalog(seed: int, n_categories: int, n_queries: int,
                     exponent: float = 1.1) -> Catalog:
    """Builds `n_queries` template queries over `n_categories` categories.

    Within each category the i-th most popular query gets weight
    proportional to (i + 1) ** -exponent, normalised per category.
    """
    if n_categories < 1 or n_queries < n_categories:
        _fail("need n_queries >= n_categories >= 1")
    if n_categories > len(_CATEGORY_WORDS):
        _fail(f"at most {len(_CATEGORY_WORDS)} categories supported")
    rng = np.random.default_rng(seed)
    cats = list(_CATEGORY_WORDS[:n_categories])
    per_cat = [n_queries // n_categories] * n_categories
    for i in range(n_queries % n_categories):
        per_cat[i] += 1

    queries: list[str] = []
    category: dict[str, str] = {}
    weight: dict[str, float] = {}
    for cat, count in zip(cats, per_cat):
        seen: set[str] = set()
        made: list[str] = []
        while len(made) < count:
            mod = _MODIFIER_WORDS[rng.integers(len(_MODIFIER_WORDS))]
            style = rng.integers(3)
            if style == 0:
                q = f"{mod} {cat}"
            elif style == 1:
                q = f"{cat} {mod}"
            else:
                mod2 = _MODIFIER_WORDS[rng.integers(len(_MODIFIER_WORDS))]
                if mod2 == mod:
                    continue
                q = f"{mod} {cat} {mod2}"
            if q in seen or len(q) > 22:
                continue
            seen.add(q)
            made.append(q)
        raw = [(i + 1) ** -exponent for i in range(count)]
        total = sum(raw)
        for q, w in zip(made, raw):
            queries.append(q)
            category[q] = cat
            weight[q] = w / total
    return Catalog(queries, category, weight)


@dataclass(frozen=True)
class SimConfig:
    """Knobs for the page-view simulator."""

    panel_size: int = 6
    n_notshow: int = 2
    affinity_mix: float = 0.65
    top_frac: float = 0.25
    p_rand: float = 0.3
    # Click probability keyed by (category matches user affinity, query in
    # the top popularity tier of its category).
    p_click: tuple[float, float, float, float] = (0.45, 0.30, 0.10, 0.05)
    upgrade: tuple[float, float, float] = (0.70, 0.20, 0.10)
    ts_start: int = 1_000_000
    ts_gap_max: int = 120


def _click_prob(sim: SimConfig, match: bool, top: bool) -> float:
    mm, mt, om, ot = sim.p_click
    if match:
        return mm if top else mt
    return om if top else ot


def _is_top_tier(catalog: Catalog, query: str, top_frac: float) -> bool:
    cat_size = len(catalog.by_category[catalog.category[query]])
    cutoff = max(1, int(math.ceil(cat_size * top_frac)))
    return catalog.popularity_rank(query) < cutoff


def simulate_logs(catalog: Catalog, n_users: int, n_events: int, seed: int,
                  sim: SimConfig = SimConfig()) -> list[InteractionRecord]:
    """Simulates suggestion-panel page views until n_events records exist.

    Each page view picks a user, a source query biased toward the user's
    affinity category, and a character prefix of it.  The panel shows
    same-category queries (string matches first, popular fills after); every
    shown query is clicked independently with a probability depending on
    affinity match and popularity tier, clicks upgrade to Click / ItemClick /
    Order, unclicked panel rows log Show, the next ranked rows log NotShow,
    and occasionally a non-ranked same-category query logs Rand.
    """
    if n_users < 1 or n_events < 1:
        _fail("need n_users >= 1 and n_events >= 1")
    rng = np.random.default_rng(seed)
    users = [f"u{i:03d}" for i in range(n_users)]
    affinity = {u: catalog.categories[i % len(catalog.categories)]
                for i, u in enumerate(users)}
    cat_weights = {
        c: np.array([catalog.weight[q] for q in qs]) / sum(catalog.weight[q] for q in qs)
        for c, qs in catalog.by_category.items()
    }

    records: list[InteractionRecord] = []
    ts = sim.ts_start
    while len(records) < n_events:
        ts += int(rng.integers(5, sim.ts_gap_max))
        user = users[int(rng.integers(n_users))]
        if rng.random() < sim.affinity_mix or len(catalog.categories) == 1:
            cat = affinity[user]
        else:
            others = [c for c in catalog.categories if c != affinity[user]]
            cat = others[int(rng.integers(len(others)))]
        cat_qs = catalog.by_category[cat]
        source = cat_qs[int(rng.choice(len(cat_qs), p=cat_weights[cat]))]
        cut = int(rng.integers(1, len(source)))
        prefix = source[:cut]

        matches = [q for q in cat_qs if q.startswith(prefix)]
        fills = [q for q in cat_qs if not q.startswith(prefix)]
        ranked = matches + fills
        panel = ranked[:sim.panel_size]
        notshow = ranked[sim.panel_size:sim.panel_size + sim.n_notshow]

        for q in panel:
            p = _click_prob(sim, catalog.category[q] == affinity[user],
                            _is_top_tier(catalog, q, sim.top_frac))
            if rng.random() < p:
                r = rng.random()
                c, ic, _ = sim.upgrade
                level = "Click" if r < c else "ItemClick" if r < c + ic else "Order"
            else:
                level = "Show"
            records.append(InteractionRecord(user, prefix, q, level, ts))
        for q in notshow:
            records.append(InteractionRecord(user, prefix, q, "NotShow", ts))
        if rng.random() < sim.p_rand:
            rest = ranked[sim.panel_size + sim.n_notshow:]
            if rest:
                q = rest[int(rng.integers(len(rest)))]
                records.append(InteractionRecord(user, prefix, q, "Rand", ts))
    return records[:n_events]


def compute_level_ratio(records: Iterable[InteractionRecord], prefix: str,
                        level: str, query: str) -> float:
    """Fraction of `level` records under `prefix` that suggest `query`."""
    if level not in LEVEL_RANK:
        _fail(f"unknown feedback level {level!r}")
    total = 0
    hits = 0
    for r in records:
        if r.prefix == prefix and r.level == level:
            total += 1
            if r.query == query:
                hits += 1
    if total == 0:
        _fail(f"no records at level {level!r} for prefix {prefix!r}")
    return hits / total


class _RatioIndex:
    """Counting index so dataset builders avoid rescanning the log."""

    def __init__(self, records: Sequence[InteractionRecord]):
        self.total: dict[tuple[str, str], int] = {}
        self.hits: dict[tuple[str, str, str], int] = {}
        for r in records:
            kt = (r.prefix, r.level)
            self.total[kt] = self.total.get(kt, 0) + 1
            kh = (r.prefix, r.level, r.query)
            self.hits[kh] = self.hits.get(kh, 0) + 1

    def ratio(self, prefix: str, level: str, query: str) -> float:
        total = self.total.get((prefix, level), 0)
        if total == 0:
            return 0.0
        return self.hits.get((prefix, level, query), 0) / total


def infer_profiles(records: Sequence[InteractionRecord],
                   catalog: Catalog) -> dict[str, str]:
    """Derives a profile string per user from their positive interactions.

    The profile names the user's dominant clicked category and an activity
    bucket split at the median positive count.
    """
    cat_counts: dict[str, dict[str, int]] = {}
    pos_counts: dict[str, int] = {}
    for r in records:
        pos_counts.setdefault(r.user_id, 0)
        if r.level in POSITIVE_LEVELS:
            pos_counts[r.user_id] += 1
            cat = catalog.category.get(r.query)
            if cat is not None:
                by = cat_counts.setdefault(r.user_id, {})
                by[cat] = by.get(cat, 0) + 1
    if not pos_counts:
        return {}
    median = sorted(pos_counts.values())[len(pos_counts) // 2]
    profiles = {}
    for user in sorted(pos_counts):
        by = cat_counts.get(user, {})
        if by:
            top = sorted(by.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        else:
            top = "none"
        grp = "a" if pos_counts[user] >= median else "b"
        profiles[user] = f"cat:{top}|grp:{grp}"
    return profiles


def _ordered(records: Sequence[InteractionRecord]) -> list[InteractionRecord]:
    return sorted(records, key=lambda r: (r.ts, r.user_id, LEVEL_RANK[r.level],
                                          r.prefix, r.query))


def build_sft_dataset(
    records: Sequence[InteractionRecord],
    related_fn: Callable[[str], Sequence[str]] | None = None,
    profiles: dict[str, str] | None = None,
    history_len: int = 10,
    related_len: int = 10,
) -> list[tuple[UserContext, str]]:
    """One (context, target) example per positive-level record.

    History holds the user's most recent prior positive queries, newest
    last, excluding the current record.
    """
    related_cache: dict[str, tuple[str, ...]] = {}
    history: dict[str, list[str]] = {}
    examples: list[tuple[UserContext, str]] = []
    for r in _ordered(records):
        if r.level not in POSITIVE_LEVELS:
            continue
        if related_fn is None:
            related: tuple[str, ...] = ()
        elif r.prefix in related_cache:
            related = related_cache[r.prefix]
        else:
            related = tuple(related_fn(r.prefix))[:related_len]
            related_cache[r.prefix] = related
        past = history.setdefault(r.user_id, [])
        ctx = UserContext(
            prefix=r.prefix,
            related=related,
            history=tuple(past[-history_len:]),
            profile=(profiles or {}).get(r.user_id, ""),
        )
        examples.append((ctx, r.query))
        past.append(r.query)
    return examples


@dataclass(frozen=True)
class PairPolicy:
    """Controls how preference groups are mined from the log."""

    mode: str = "pair"
    adjacent_level_pairs: bool = False
    n_rand_negatives: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("pair", "list"):
            _fail(f"unknown pair mode {self.mode!r}")


def _context_entries(ctx_records: Sequence[InteractionRecord],
                     ratios: _RatioIndex) -> list[ScoredQuery]:
    seen: set[tuple[str, str]] = set()
    entries = []
    for r in ctx_records:
        key = (r.query, r.level)
        if key in seen:
            continue
        seen.add(key)
        entries.append(ScoredQuery(r.query, r.level,
                                   ratios.ratio(r.prefix, r.level, r.query)))
    entries.sort(key=lambda e: (LEVEL_RANK[e.level], e.query))
    return entries


def build_preference_groups(
    records: Sequence[InteractionRecord],
    policy: PairPolicy = PairPolicy(),
    related_fn: Callable[[str], Sequence[str]] | None = None,
    profiles: dict[str, str] | None = None,
    catalog: Catalog | None = None,
    history_len: int = 10,
    related_len: int = 10,
) -> list[PreferenceGroup]:
    """Mines win/lose preference groups from one interaction log.

    Contexts are (user, prefix) slices of the log.  By default wins come
    from positive levels and loses from negative levels; with
    `adjacent_level_pairs` any strictly higher level may beat a lower one.
    Pairs with a non-positive reward gap, or where win and lose are the
    same query string, are skipped.  "pair" mode emits one group per
    surviving (win, lose) pair; "list" mode emits one group per win holding
    every surviving lose of its context.
    """
    from .preference import RewardParams, reward, reward_weight

    params = RewardParams()
    ratios = _RatioIndex(records)
    ordered = _ordered(records)
    profiles = profiles or {}
    rng = np.random.default_rng(policy.seed)

    by_context: dict[tuple[str, str], list[InteractionRecord]] = {}
    history_at: dict[tuple[str, str], tuple[str, ...]] = {}
    running: dict[str, list[str]] = {}
    shown_for_prefix: dict[str, set[str]] = {}
    for r in ordered:
        key = (r.user_id, r.prefix)
        if key not in by_context:
            past = running.get(r.user_id, [])
            history_at[key] = tuple(past[-history_len:])
        by_context.setdefault(key, []).append(r)
        shown_for_prefix.setdefault(r.prefix, set()).add(r.query)
        if r.level in POSITIVE_LEVELS:
            running.setdefault(r.user_id, []).append(r.query)

    related_cache: dict[str, tuple[str, ...]] = {}

    def related_for(prefix: str) -> tuple[str, ...]:
        if related_fn is None:
            return ()
        if prefix not in related_cache:
            related_cache[prefix] = tuple(related_fn(prefix))[:related_len]
        return related_cache[prefix]

    groups: list[PreferenceGroup] = []
    for key in sorted(by_context):
        user, prefix = key
        entries = _context_entries(by_context[key], ratios)
        if policy.n_rand_negatives > 0 and catalog is not None:
            present = shown_for_prefix[prefix] | {e.query for e in entries}
            pool = sorted(q for q in catalog.queries if q not in present)
            take = min(policy.n_rand_negatives, len(pool))
            if take:
                picked = rng.choice(len(pool), size=take, replace=False)
                for i in sorted(int(j) for j in picked):
                    entries.append(ScoredQuery(pool[i], "Rand", 0.0))

        if policy.adjacent_level_pairs:
            wins = [e for e in entries if LEVEL_RANK[e.level] < LEVEL_RANK["Rand"]]
            lose_ok = lambda w, l: LEVEL_RANK[l.level] > LEVEL_RANK[w.level]
        else:
            wins = [e for e in entries if e.level in POSITIVE_LEVELS]
            lose_ok = lambda w, l: l.level in NEGATIVE_LEVELS

        ctx = UserContext(prefix=prefix, related=related_for(prefix),
                          history=history_at[key],
                          profile=profiles.get(user, ""))

        def eligible(win: ScoredQuery) -> list[tuple[ScoredQuery, float]]:
            out = []
            r_w = reward(win.level, win.pi, params)
            for l in entries:
                if l.query == win.query or not lose_ok(win, l):
                    continue
                r_l = reward(l.level, l.pi, params)
                if r_w - r_l <= 0:
                    continue
                out.append((l, reward_weight(r_w, r_l, params)))
            return out

        if policy.mode == "pair":
            for w in wins:
                for l, rw in eligible(w):
                    groups.append(PreferenceGroup(ctx, w, (l,), (rw,)))
        else:
            for w in wins:
                pairs = eligible(w)
                if pairs:
                    groups.append(PreferenceGroup(
                        ctx, w, tuple(l for l, _ in pairs),
                        tuple(rw for _, rw in pairs)))
    return groups


class _TrieNode:
    __slots__ = ("children", "count", "query")

    def __init__(self):
        self.children: dict[str, _TrieNode] = {}
        self.count = 0
        self.query: str | None = None


class MpcTrie:
    """Most-popular-completion baseline over positive interactions."""

    def __init__(self):
        self.root = _TrieNode()

    def insert(self, query: str, count: int = 1) -> None:
        node = self.root
        for ch in query:
            node = node.children.setdefault(ch, _TrieNode())
        node.count += count
        node.query = query


def mpc_build(records: Iterable[InteractionRecord]) -> MpcTrie:
    trie = MpcTrie()
    for r in records:
        if r.level in POSITIVE_LEVELS:
            trie.insert(r.query)
    return trie


def mpc_suggest(trie: MpcTrie, prefix: str, k: int) -> list[str]:
    """Up to k completions of `prefix`, most-clicked first, ties lexicographic."""
    if k < 1:
        return []
    node = trie.root
    for ch in prefix:
        node = node.children.get(ch)
        if node is None:
            return []
    found: list[tuple[int, str]] = []
    stack = [node]
    while stack:
        n = stack.pop()
        if n.query is not None and n.count > 0:
            found.append((n.count, n.query))
        stack.extend(n.children.values())
    found.sort(key=lambda cq: (-cq[0], cq[1]))
    return [q for _, q in found[:k]]


def save_records(records: Iterable[InteractionRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(dataclasses.asdict(r), sort_keys=True) + "\n")


def load_records(path: str) -> list[InteractionRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(InteractionRecord(**json.loads(line)))
    return out


def save_catalog(catalog: Catalog, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for q in catalog.queries:
            row = {"query": q, "category": catalog.category[q],
                   "weight": catalog.weight[q]}
            f.write(json.dumps(row, sort_keys=True) + "\n")


def load_catalog(path: str) -> Catalog:
    queries: list[str] = []
    category: dict[str, str] = {}
    weight: dict[str, float] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            queries.append(row["query"])
            category[row["query"]] = row["category"]
            weight[row["query"]] = row["weight"]
    return Catalog(queries, category, weight)
