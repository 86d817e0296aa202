"""Synthetic review logs with planted long-term affinity and recent category drift.

Every user has a primary category that dominates their older activity. With
probability ``recent_drift_probability`` the last few days switch to a secondary
category; the held-out next item comes from whichever category dominates those
days. Activity clusters on a handful of active days per user. Output files use
the raw Amazon review/metadata JSON-lines layout and survive the ingest
filters unchanged.
"""

import json
from dataclasses import dataclass

import numpy as np

from .ingest import MIN_ITEM_INTERACTIONS, MIN_USER_INTERACTIONS, RawReview, SECONDS_PER_DAY

BASE_DAY = 16071  # 2014-01-01
RECENT_DAYS = 5
MAX_PER_USER = 60


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 200
    n_items: int = 400
    n_categories: int = 8
    days: int = 60
    long_affinity_strength: float = 0.8
    recent_drift_probability: float = 0.5
    seed: int = 1

    def validate(self):
        if self.n_categories < 2 or self.n_items % self.n_categories:
            raise ValueError("n_items must be a multiple of n_categories (>= 2)")
        if not 10 <= self.days <= 90:
            raise ValueError("days must lie in [10, 90]")
        if not 0.0 <= self.long_affinity_strength <= 1.0 or not 0.0 <= self.recent_drift_probability <= 1.0:
            raise ValueError("strength and drift probability must lie in [0, 1]")
        if self.n_users < 1 or self.n_items * MIN_ITEM_INTERACTIONS > self.n_users * (MAX_PER_USER - 10):
            raise ValueError("infeasible spec: too few users to give every item 8 interactions")


@dataclass
class SynthTruth:
    primary: list
    secondary: list
    drift: list


def user_label(u):
    return f"U{u:05d}"


def item_label(i):
    return f"I{i:05d}"


def category_label(c):
    return f"cat{c:03d}"


def generate(spec):
    """Build the synthetic log in memory.

    Returns ``(reviews, categories, truth)`` where ``categories`` maps item id to
    its category label.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C = spec.n_categories
    per_cat = spec.n_items // C
    weights = (np.arange(per_cat) + 5.0) ** -0.5
    weights /= weights.sum()

    def draw(cat):
        return int(cat * per_cat + rng.choice(per_cat, p=weights))

    def other(cat):
        return int((cat + 1 + rng.integers(C - 1)) % C)

    truth = SynthTruth([], [], [])
    plans = []  # per user: list of (day, [items]) with the last two entries recent
    for _ in range(spec.n_users):
        p = int(rng.integers(C))
        s = other(p)
        drift = bool(rng.random() < spec.recent_drift_probability)
        truth.primary.append(p)
        truth.secondary.append(s)
        truth.drift.append(drift)
        recent_cat = s if drift else p

        start = BASE_DAY + int(rng.integers(0, 30))
        last = start + spec.days - 1
        long_span = spec.days - RECENT_DAYS
        k = min(int(rng.integers(4, 8)), long_span)
        long_days = sorted(int(d) for d in start + rng.choice(long_span, size=k, replace=False))
        sizes = rng.integers(1, 5, size=k)
        while sizes.sum() + 3 < MIN_USER_INTERACTIONS + 2:
            sizes[int(rng.integers(k))] += 1
        cats = [p if rng.random() < spec.long_affinity_strength else other(p) for _ in range(int(sizes.sum()))]
        counts = np.bincount(cats, minlength=C)
        while counts[p] <= max(counts[c] for c in range(C) if c != p):
            j = next(j for j, c in enumerate(cats) if c != p)
            counts[cats[j]] -= 1
            cats[j] = p
            counts[p] += 1
        it = iter(cats)
        plan = [(d, [draw(next(it)) for _ in range(n)]) for d, n in zip(long_days, sizes)]

        d1, d2 = sorted(int(d) for d in last - rng.choice(RECENT_DAYS, size=2, replace=False))
        newest = [draw(recent_cat if rng.random() < spec.long_affinity_strength else p)
                  for _ in range(int(rng.integers(2, 5)))]
        held_out = [draw(recent_cat)] + [draw(recent_cat) for _ in range(int(rng.integers(0, 3)))]
        plan += [(d1, newest), (d2, held_out)]
        plans.append(plan)

    _top_up_items(spec, plans, truth, per_cat, rng)

    reviews = []
    for u, plan in enumerate(plans):
        for day, items in plan:
            secs = np.sort(rng.choice(SECONDS_PER_DAY, size=len(items), replace=False))
            for sec, item in zip(secs, items):
                reviews.append(RawReview(user_label(u), item_label(item), day * SECONDS_PER_DAY + int(sec)))
    categories = {item_label(i): category_label(i // per_cat) for i in range(spec.n_items)}
    return reviews, categories, truth


def _top_up_items(spec, plans, truth, per_cat, rng):
    """Give every item at least the minimum interaction count.

    Extra interactions go to older active days of users whose primary category
    matches the item, which keeps each user's primary category modal.
    """
    counts = np.zeros(spec.n_items, dtype=np.int64)
    for plan in plans:
        for _, items in plan:
            for i in items:
                counts[i] += 1
    totals = [sum(len(items) for _, items in plan) for plan in plans]
    by_primary = {}
    for u, p in enumerate(truth.primary):
        by_primary.setdefault(p, []).append(u)
    for item in range(spec.n_items):
        need = MIN_ITEM_INTERACTIONS - counts[item]
        if need <= 0:
            continue
        pool = [u for u in by_primary.get(item // per_cat, []) if totals[u] < MAX_PER_USER]
        if not pool:
            raise ValueError(f"infeasible spec: no user can absorb interactions for item {item}")
        for u in rng.choice(pool, size=need, replace=len(pool) < need):
            u = int(u)
            plans[u][int(rng.integers(len(plans[u]) - 2))][1].append(item)
            totals[u] += 1
            counts[item] += 1


def write_files(reviews, categories, reviews_path, meta_path):
    with open(reviews_path, "w", encoding="utf-8") as fh:
        for r in reviews:
            fh.write(json.dumps({"reviewerID": r.user_ext_id, "asin": r.item_ext_id,
                                 "unixReviewTime": r.timestamp}, sort_keys=True) + "\n")
    with open(meta_path, "w", encoding="utf-8") as fh:
        for item in sorted(categories):
            fh.write(json.dumps({"asin": item, "categories": [["Synthetic", categories[item]]]},
                                sort_keys=True) + "\n")


def generate_synthetic(spec, reviews_path, meta_path):
    """Write review and metadata JSON-lines files; returns the planted truth."""
    reviews, categories, truth = generate(spec)
    write_files(reviews, categories, reviews_path, meta_path)
    return truth
