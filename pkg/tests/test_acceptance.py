"""Acceptance criteria, each checked at its stated tolerance.

One PASS/FAIL line per criterion is printed in the terminal summary.
"""

import os
import time

import numpy as np
import pytest

from oracles import naive_attention, naive_long, naive_user
from tlsan import evaluate as ev
from tlsan.ingest import build_dataset, build_examples, encode_dataset, parse_categories, parse_reviews
from tlsan.ingest import sample_negative, summarize
from tlsan.model import encode_checkpoint, feature_wise_attention, forward, time_aware_history
from tlsan.synth import SynthSpec, generate
from tlsan.train import TrainConfig, grad_check, random_problem, train_loop

PLANTED = SynthSpec(n_users=2000, n_items=1000, n_categories=20, recent_drift_probability=0.5, seed=1)
PLANTED_DATA_SEED = 1
PLANTED_TRAIN_SEED = 1
EVAL_SEED = 0

OVERFIT_SPEC = SynthSpec(n_users=50, n_items=40, n_categories=4, seed=3)
OVERFIT_CONFIG = dict(d_f=8, heads=8, epochs=500, seed=3)


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_c1_gradient_check(criterion):
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        rep = grad_check(seed, d_f=4, max_long=3, heads=2)
        for name, err in rep.errors.items():
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    names = ("U", "I", "C", "P", "gamma", "W1", "W2", "W3", "W4", "b1", "b2", "b3", "b4")
    ok = set(worst) == set(names) and top < 1e-4 and elapsed < 10.0
    criterion("1 gradient check", ok, f"max rel error {top:.2e} over 20 seeds, 13 tensors, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. oracle equivalence


def test_c2_oracle_equivalence(criterion):
    rng = np.random.default_rng(2024)
    auc_ok = 0
    for _ in range(1000):
        users = []
        for _ in range(int(rng.integers(1, 8))):
            pos = rng.integers(-4, 5, size=int(rng.integers(1, 6))).astype(float)
            neg = rng.integers(-4, 5, size=int(rng.integers(1, 6))).astype(float)
            if rng.random() < 0.5:
                pos, neg = pos + rng.normal(size=pos.size), neg + rng.normal(size=neg.size)
            users.append((pos.tolist(), neg.tolist()))
        auc_ok += ev.auc(users) == ev.auc_oracle(users)

    worst_long = worst_short = 0.0
    for _ in range(100):
        params, batch = random_problem(rng, d_f=4, max_long=5, heads=int(rng.choice([1, 2, 4])), n_users=5,
                                       n_items=15, n_categories=4, n_examples=1)
        _, cache = forward(params, batch)
        ex = _example_from_batch(batch)
        worst_long = max(worst_long, np.max(np.abs(cache["u_prev"][0] - naive_long(params, ex.user,
                                                                                     ex.long_items))))
        worst_short = max(worst_short, np.max(np.abs(cache["u_t"][0] - naive_user(params, ex))))
    ok = auc_ok == 1000 and worst_long < 1e-12 and worst_short < 1e-12
    criterion("2 oracle equivalence", ok, f"AUC exact on {auc_ok}/1000; long-term max |diff| {worst_long:.1e}, "
                                          f"short-term max |diff| {worst_short:.1e} (100 instances)")
    assert ok


def _example_from_batch(batch):
    from tlsan.ingest import Example

    m = batch.long_mask[0]
    deltas = [int(round(1 / q - 1)) for q in batch.long_q[0][m]]
    long_items = tuple((int(i), int(c), d) for i, c, d in zip(batch.long_item[0][m], batch.long_cat[0][m], deltas))
    s = batch.short_mask[0]
    short = tuple((int(i), int(c)) for i, c in zip(batch.short_item[0][s], batch.short_cat[0][s]))
    return Example(int(batch.user[0]), int(batch.user_category[0]), long_items, short, int(batch.cand_item[0, 0]))


# ---------------------------------------------------------------------------
# 3. invariant suite


def test_c3_invariants(criterion):
    rng = np.random.default_rng(3)
    checks = {}

    sums_ok, mask_ok = True, True
    for _ in range(50):
        params, batch = random_problem(rng, d_f=4, max_long=5, heads=4)
        _, cache = forward(params, batch)
        for part in ("long", "short"):
            a, mask = cache[part]["a"], cache[part]["mask"]
            live = mask.any(axis=1)
            sums_ok &= bool(np.all(np.abs(a.sum(axis=1)[live] - 1) < 1e-9) and np.all(a >= 0))
            mask_ok &= bool(np.all(a[~mask] == 0))
    checks["softmax normalisation"] = sums_ok
    checks["masked slots zero weight"] = mask_ok

    mono = True
    for _ in range(50):
        D, J = 8, 6
        Wa, Wb = rng.normal(size=(D, D)), rng.normal(size=(D, D))
        ba, bb = rng.normal(size=D), rng.normal(size=D)
        x = rng.normal(size=(J, D))
        mask = np.ones(J, dtype=bool)
        ctx, _ = feature_wise_attention(Wa, Wb, ba, bb, x, mask, heads=1)
        logits = np.maximum(x @ Wb.T + bb, 0) @ Wa + ba
        e = np.exp(logits - logits.max(axis=0))
        mono &= bool(np.array_equal(ctx, np.sum(e / e.sum(axis=0) * x, axis=0)))
        ref = naive_attention(x.tolist(), mask.tolist(), Wa.tolist(), Wb.tolist(), ba.tolist(), bb.tolist(), 1)
        mono &= bool(np.max(np.abs(ctx - ref)) < 1e-12)
    checks["single head equals unsplit"] = mono

    lin = True
    for _ in range(50):
        params, batch = random_problem(rng, d_f=4, max_long=5, heads=2, n_examples=1)
        ex = _example_from_batch(batch)
        h1, _ = time_aware_history(ex.user, ex.long_items, params)
        params.gamma[0] *= 2.0
        h2, _ = time_aware_history(ex.user, ex.long_items, params)
        lin &= bool(np.array_equal(h2, 2.0 * h1))
    checks["h linear in gamma"] = lin

    worst = 0.0
    for _ in range(20):
        params, batch = random_problem(rng, d_f=4, max_long=4, heads=2, n_items=12, n_categories=3)
        base, _ = forward(params, batch)
        perm_i, perm_c = rng.permutation(params.n_items), rng.permutation(params.n_categories)
        q = params.copy()
        q.I[perm_i] = params.I
        q.C[perm_c] = params.C
        b = batch
        b2 = type(b)(**{k: getattr(b, k).copy() for k in b.__dataclass_fields__})
        b2.long_item, b2.short_item, b2.cand_item = perm_i[b.long_item], perm_i[b.short_item], perm_i[b.cand_item]
        b2.long_cat, b2.short_cat, b2.cand_cat = perm_c[b.long_cat], perm_c[b.short_cat], perm_c[b.cand_cat]
        b2.user_category = perm_c[b.user_category]
        moved, _ = forward(q, b2)
        worst = max(worst, float(np.max(np.abs(base - moved))))
    checks["relabeling invariance"] = worst < 1e-12

    pr = True
    for _ in range(200):
        ranked = [rng.permutation(30)[:20].tolist() for _ in range(int(rng.integers(1, 10)))]
        truth = [[int(rng.integers(30))] for _ in ranked]
        ks = tuple(range(1, 21))
        p, r = ev.precision_recall_at_k(ranked, truth, ks)
        pr &= all(r[b] >= r[a] for a, b in zip(ks, ks[1:]))
        for rk, t in zip(ranked, truth):
            one, _ = ev.precision_recall_at_k([rk], [t], ks)
            first = next((k for k in ks if one[k] > 0), None)
            if first is not None:
                pr &= all(one[b] <= one[a] for a, b in zip(ks, ks[1:]) if a >= first)
    checks["precision/recall monotone in K"] = pr

    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    criterion("3 invariant suite", ok, f"{sum(checks.values())}/{len(checks)} green" +
              (f" (failed: {', '.join(failed)})" if failed else ""))
    assert ok


# ---------------------------------------------------------------------------
# 4. overfit sanity


def test_c4_overfit(criterion):
    reviews, cats, _ = generate(OVERFIT_SPEC)
    ds = build_dataset(reviews, cats)
    start = time.perf_counter()
    params, report = train_loop(ds, TrainConfig(**OVERFIT_CONFIG))
    elapsed = time.perf_counter() - start
    final = report.epoch_losses[-1]

    # training AUC: freshly drawn training examples, 20 sampled negatives each
    rng = np.random.default_rng(5)
    hist = ds.histories()
    examples = [build_examples(hist[ex.user], 10, rng)[0] for ex in ds.train]
    scores = ev.context_scores(params, examples, ds.item_category)
    users = []
    for e, ex in enumerate(examples):
        negs = [sample_negative(rng, hist[ex.user].item_set(), ds.manifest.n_items) for _ in range(20)]
        users.append(([scores[e, ex.target]], scores[e, negs].tolist()))
    train_auc = ev.auc(users)[0]
    ok = final < 0.05 and train_auc > 0.99 and elapsed < 60.0 and ds.manifest.n_users == 50
    criterion("4 overfit sanity", ok, f"final loss {final:.4f}, training AUC {train_auc:.4f}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 5 and 6. planted structure and ablations (shared trainings)


@pytest.fixture(scope="module")
def planted():
    reviews, cats, _ = generate(PLANTED)
    ds = build_dataset(reviews, cats, seed=PLANTED_DATA_SEED)
    negatives = ev.sample_eval_negatives(ds, ds.test, EVAL_SEED)
    pop = ev.evaluate_popularity(ds, seed=EVAL_SEED, negatives=negatives)
    runs = {}

    def run(name, **overrides):
        if name not in runs:
            cfg = TrainConfig(seed=PLANTED_TRAIN_SEED, **overrides)
            start = time.perf_counter()
            params, _ = train_loop(ds, cfg)
            rep = ev.evaluate(ds, params, seed=EVAL_SEED, negatives=negatives)
            runs[name] = (rep, time.perf_counter() - start)
        return runs[name]

    return ds, pop, run


def test_c5_planted_structure(planted, criterion):
    ds, pop, run = planted
    rep, elapsed = run("full")
    ok = (ds.manifest.n_users == 2000 and rep.auc >= 0.85 and rep.auc - pop.auc >= 0.05
          and rep.recall[20] >= 2 * pop.recall[20] and elapsed < 600)
    criterion("5 planted structure", ok,
              f"AUC {rep.auc:.4f} vs popularity {pop.auc:.4f}; Recall@20 {rep.recall[20]:.4f} vs "
              f"{pop.recall[20]:.4f}; {elapsed:.0f}s (summed loss, lr 0.1->0.01)")
    assert ok


def test_c5_planted_structure_literal_lr(planted, criterion):
    """Same check with lr 1.0 -> 0.1; the per-batch mean loss keeps that step size stable."""
    _, pop, run = planted
    rep, elapsed = run("mean", loss_reduction="mean", lr_initial=1.0, lr_after=0.1)
    ok = rep.auc >= 0.85 and rep.auc - pop.auc >= 0.05 and rep.recall[20] >= 2 * pop.recall[20] and elapsed < 600
    criterion("5 planted structure (lr 1.0->0.1, mean loss)", ok,
              f"AUC {rep.auc:.4f} vs popularity {pop.auc:.4f}; Recall@20 {rep.recall[20]:.4f} vs "
              f"{pop.recall[20]:.4f}; {elapsed:.0f}s")
    assert ok


def test_c6_ablation_direction(planted, criterion):
    _, _, run = planted
    full, _ = run("full")
    ns, _ = run("ns", no_short=True)
    ng, _ = run("ng", fixed_gamma=True)
    ok = ns.auc < full.auc and ns.recall[20] < full.recall[20] and ng.auc <= full.auc
    criterion("6 ablation direction", ok,
              f"full AUC {full.auc:.4f} R@20 {full.recall[20]:.4f}; NS AUC {ns.auc:.4f} R@20 {ns.recall[20]:.4f}; "
              f"NG AUC {ng.auc:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# 7. optional public dataset


DM_REVIEWS = os.environ.get("TLSAN_DIGITAL_MUSIC_REVIEWS")
DM_META = os.environ.get("TLSAN_DIGITAL_MUSIC_META")


@pytest.mark.skipif(not (DM_REVIEWS and DM_META), reason="set TLSAN_DIGITAL_MUSIC_REVIEWS and "
                                                          "TLSAN_DIGITAL_MUSIC_META to the raw files")
def test_c7_digital_music_counts(criterion):
    with open(DM_REVIEWS, "rb") as fh:
        reviews, _ = parse_reviews(fh)
    with open(DM_META, "rb") as fh:
        cats = parse_categories(fh)
    stats = summarize(build_dataset(reviews, cats))
    target = {"users": 1659, "items": 1583, "categories": 53, "samples": 28852}
    off = {k: stats[k] / v - 1 for k, v in target.items()}
    ok = all(abs(v) <= 0.10 for v in off.values())
    criterion("7 digital music counts", ok, ", ".join(f"{k} {stats[k]} ({off[k]:+.1%})" for k in target))
    # informational: a divergence here documents a filter reading, it does not gate
    if not ok:
        pytest.xfail("counts outside 10%; see decision notes on filter interpretation")


# ---------------------------------------------------------------------------
# 8. determinism


def test_c8_determinism(criterion, tmp_path):
    spec = SynthSpec(n_users=120, n_items=80, n_categories=4, seed=21)

    def pipeline():
        reviews, cats, _ = generate(spec)
        ds = build_dataset(reviews, cats, seed=7)
        params, _ = train_loop(ds, TrainConfig(d_f=8, heads=4, epochs=5, seed=7))
        reports = {"tlsan": ev.evaluate(ds, params, seed=3), "popularity": ev.evaluate_popularity(ds, seed=3)}
        return encode_dataset(ds), encode_checkpoint(params), ev.report_csv_text(reports)

    a, b = pipeline(), pipeline()
    same = [x == y for x, y in zip(a, b)]
    ok = all(same)
    criterion("8 determinism", ok, "dataset {}, checkpoint {}, report {}".format(
        *("identical" if s else "DIFFERENT" for s in same)))
    assert ok
