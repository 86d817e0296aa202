import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_auc
from tlsan import evaluate as ev
from tlsan.ingest import Example, RawReview, build_dataset
from tlsan.model import ModelParams


# ---------------------------------------------------------------------------
# AUC


def test_auc_examples():
    assert ev.auc([([0.9], [0.1])]) == (1.0, 0)
    assert ev.auc([([0.5], [0.5])]) == (0.0, 0)
    assert ev.auc([([0.8, 0.4], [0.6, 0.2])]) == (0.75, 0)


def test_auc_excludes_empty_users():
    value, excluded = ev.auc([([0.9], [0.1]), ([], [0.3]), ([0.2], [])])
    assert value == 1.0 and excluded == 2
    assert ev.auc_oracle([([0.9], [0.1]), ([], [0.3])]) == (1.0, 1)


def test_auc_single_tie_oracle():
    assert ev.auc_oracle([([1.0], [1.0])]) == (0.0, 0)


# small integer-valued scores make ties common
scores = st.lists(st.integers(-5, 5).map(float), min_size=1, max_size=8)
user_sets = st.lists(st.tuples(scores, scores), min_size=1, max_size=10)


@settings(max_examples=1000, deadline=None)
@given(user_sets)
def test_auc_equals_oracle(users):
    assert ev.auc(users) == ev.auc_oracle(users)


@settings(max_examples=200, deadline=None)
@given(user_sets, st.randoms(use_true_random=False))
def test_auc_order_independent(users, rnd):
    shuffled = [(rnd.sample(p, len(p)), rnd.sample(n, len(n))) for p, n in users]
    rnd.shuffle(shuffled)
    assert ev.auc(shuffled) == ev.auc(users)


def test_auc_matches_float_oracle():
    rng = np.random.default_rng(0)
    users = [(rng.normal(size=3).tolist(), rng.normal(size=4).tolist()) for _ in range(50)]
    assert ev.auc(users)[0] == pytest.approx(naive_auc(users), abs=1e-15)


# ---------------------------------------------------------------------------
# ranking


def test_top_k_ties_by_index():
    assert ev.top_k([1.0, 3.0, 3.0, 2.0], 3) == [1, 2, 3]
    assert ev.top_k([1.0, 3.0, 3.0, 2.0], 10, exclude={1}) == [2, 3, 0]


def three_item_params():
    d_f = 1
    z = np.zeros((2, 2))
    return ModelParams(U=np.array([[1.0]]), I=np.array([[0.5], [2.0], [-1.0]]), C=np.array([[0.0], [1.0]]),
                       P=np.ones((1, 1)), gamma=np.ones(1), W1=z.copy(), W2=z.copy(), W3=z.copy(), W4=z.copy(),
                       b1=np.zeros(2), b2=np.zeros(2), b3=np.zeros(2), b4=np.zeros(2), d_f=d_f, max_long=1,
                       heads=1)


def test_rank_catalog_hand_computed():
    p = three_item_params()
    item_category = [1, 0, 1]
    ex = Example(0, 1, ((2, 1, 0),), (), 0)
    # no short items: u_t = u_e + u_prev = [1, 1] + [-1, 1] = [0, 2]
    u_t = np.array([0.0, 2.0])
    table = np.array([[0.5, 1.0], [2.0, 0.0], [-1.0, 1.0]])
    expected = sorted(range(3), key=lambda i: (-(table[i] @ u_t), i))
    assert ev.rank_catalog(ex, p, item_category, 3) == expected == [0, 2, 1]


def test_rank_catalog_excludes_input_items():
    p = three_item_params()
    ex = Example(0, 1, (), ((0, 1),), 1)
    ranked = ev.rank_catalog(ex, p, [1, 0, 1], 10)
    assert 0 not in ranked and sorted(ranked) == [1, 2]


# ---------------------------------------------------------------------------
# precision / recall


def test_precision_recall_examples():
    p, r = ev.precision_recall_at_k([[7, 8, 3, 9, 10, 11]], [[3]], ks=(5,))
    assert (p[5], r[5]) == (0.2, 1.0)
    p, r = ev.precision_recall_at_k([[7, 8, 4, 9, 10, 3]], [[3]], ks=(5,))
    assert (p[5], r[5]) == (0.0, 0.0)


@st.composite
def rankings(draw):
    n = draw(st.integers(1, 12))
    ranked, truth = [], []
    for _ in range(n):
        perm = draw(st.permutations(list(range(25))))
        ranked.append(perm[:20])
        truth.append([draw(st.integers(0, 24))])
    return ranked, truth


@settings(max_examples=300, deadline=None)
@given(rankings())
def test_precision_recall_monotone_in_k(case):
    ranked, truth = case
    ks = tuple(range(1, 21))
    p, r = ev.precision_recall_at_k(ranked, truth, ks)
    for a, b in zip(ks, ks[1:]):
        assert r[b] >= r[a]
    for k in ks:
        assert r[k] == pytest.approx(k * p[k], abs=1e-12)
    # precision@K can only fall once every hit so far is counted
    single = [ev.precision_recall_at_k([rk], [t], ks)[0] for rk, t in zip(ranked, truth)]
    for one in single:
        hit_at = next((k for k in ks if one[k] > 0), None)
        if hit_at is not None:
            assert all(one[b] <= one[a] for a, b in zip(ks, ks[1:]) if a >= hit_at)


def test_popularity_baseline():
    items = [1] * 5 + [0] * 3
    assert ev.popularity_baseline(items, 2) == [1, 0]
    assert ev.popularity_baseline([0, 1, 2, 2], 4) == [2, 0, 1, 3]


# ---------------------------------------------------------------------------
# end to end


def test_perfect_params(small_dataset):
    m = small_dataset.manifest
    d_f = m.n_items
    D = 2 * d_f
    z = np.zeros((D, D))
    examples = [ex for ex in small_dataset.test if ex.target not in {i for i, _ in ex.short_items}]
    U = np.zeros((m.n_users, d_f))
    for ex in examples:
        U[ex.user, ex.target] = 10.0
    p = ModelParams(U=U, I=np.eye(m.n_items), C=np.zeros((m.n_categories, d_f)), P=np.ones((m.n_users, 10)),
                    gamma=np.ones(1), W1=z.copy(), W2=z.copy(), W3=z.copy(), W4=z.copy(), b1=np.zeros(D),
                    b2=np.zeros(D), b3=np.zeros(D), b4=np.zeros(D), d_f=d_f, max_long=10, heads=1)
    rep = ev.evaluate(small_dataset, p, ks=(1, 5), seed=0, examples=examples)
    assert rep.auc == 1.0 and rep.precision[1] == 1.0 and rep.recall[1] == 1.0
    assert rep.users == len(examples)


@pytest.fixture(scope="module")
def big_dataset():
    """Structure-free log: items, categories and days uniform and independent of the user."""
    rng = np.random.default_rng(11)
    reviews = []
    for u in range(1000):
        for _ in range(int(rng.integers(12, 20))):
            day = 16000 + int(rng.integers(60))
            reviews.append(RawReview(f"U{u}", f"I{int(rng.integers(500))}", day * 86400 + int(rng.integers(86400))))
    cats = {f"I{i}": f"c{int(rng.integers(20))}" for i in range(500)}
    return build_dataset(reviews, cats)


def test_random_params_auc_near_half(big_dataset):
    m = big_dataset.manifest
    p = ModelParams.init(np.random.default_rng(3), m.n_users, m.n_items, m.n_categories, d_f=8, heads=2)
    rep = ev.evaluate(big_dataset, p, seed=1)
    assert rep.users >= 1000
    assert abs(rep.auc - 0.5) < 0.05
    for _, value in rep.rows():
        assert 0.0 <= value <= 1.0


def test_rank_invariance_and_user_order(small_dataset):
    rng = np.random.default_rng(4)
    examples = small_dataset.test
    scores = rng.normal(size=(len(examples), small_dataset.manifest.n_items))
    negs = ev.sample_eval_negatives(small_dataset, examples, seed=2)
    base = ev.evaluate_scores(examples, scores, negs)
    warped = ev.evaluate_scores(examples, np.exp(3 * scores) + 7.0, negs)
    assert (base.auc, base.precision, base.recall) == (warped.auc, warped.precision, warped.recall)
    order = rng.permutation(len(examples))
    shuffled = ev.evaluate_scores([examples[i] for i in order], scores[order], [negs[i] for i in order])
    assert (base.auc, base.precision, base.recall) == (shuffled.auc, shuffled.precision, shuffled.recall)


def test_negatives_are_seeded_and_outside_history(small_dataset):
    a = ev.sample_eval_negatives(small_dataset, small_dataset.test, seed=9)
    b = ev.sample_eval_negatives(small_dataset, small_dataset.test, seed=9)
    assert a == b
    hist = small_dataset.histories()
    for ex, negs in zip(small_dataset.test, a):
        assert not set(negs) & hist[ex.user].item_set()


def test_report_outputs():
    rep = ev.EvalReport(0.75, {1: 0.5, 5: 0.2}, {1: 0.5, 5: 1.0}, 4)
    text = rep.table("tlsan")
    assert "precision@5" in text and "0.7500" in text
    csv_text = ev.report_csv_text({"tlsan": rep, "popularity": rep})
    lines = csv_text.splitlines()
    assert lines[0] == "model,users,auc,precision@1,recall@1,precision@5,recall@5"
    assert lines[1].startswith("tlsan,4,0.75,")
    buf = io.StringIO()
    ev.write_report_csv(buf, {"x": rep})
    assert buf.getvalue().count("\n") == 2


def test_evaluate_empty_raises(small_dataset):
    p = ModelParams.init(np.random.default_rng(0), 1, 1, 1, d_f=2, heads=1)
    with pytest.raises(ValueError):
        ev.evaluate(small_dataset, p, examples=[])
