"""Ranking metrics (AUC, Precision@K, Recall@K), catalog ranking and a popularity reference."""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .ingest import sample_negative
from .model import encode_batch, encode_context

DEFAULT_KS = (1, 5, 10, 20)


@dataclass
class EvalReport:
    auc: float
    precision: dict  # K -> value
    recall: dict
    users: int
    auc_excluded: int = 0

    def rows(self):
        out = [("auc", self.auc)]
        for k in sorted(self.precision):
            out += [(f"precision@{k}", self.precision[k]), (f"recall@{k}", self.recall[k])]
        return out

    def table(self, title="TLSAN"):
        width = max(len(name) for name, _ in self.rows())
        lines = [f"{title} ({self.users} users)"]
        lines += [f"  {name:<{width}}  {value:.4f}" for name, value in self.rows()]
        return "\n".join(lines)

    def csv_header(self):
        return ["model", "users"] + [name for name, _ in self.rows()]

    def csv_row(self, model="tlsan"):
        return [model, str(self.users)] + [f"{value:.10g}" for _, value in self.rows()]


def _fsum_mean(values):
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


def _user_auc(pos, neg):
    pos = np.sort(np.asarray(pos, dtype=float))
    neg = np.sort(np.asarray(neg, dtype=float))
    # number of negatives strictly below each positive
    below = np.searchsorted(neg, pos, side="left")
    return float(np.sum(below)) / (len(pos) * len(neg))


def auc(users):
    """Mean over users of the fraction of (positive, negative) pairs ordered strictly.

    ``users`` is an iterable of ``(positives, negatives)`` score collections.
    Users with an empty side are left out; returns ``(auc, excluded)``.
    """
    per_user, excluded = [], 0
    for pos, neg in users:
        if len(pos) == 0 or len(neg) == 0:
            excluded += 1
            continue
        per_user.append(_user_auc(pos, neg))
    return _fsum_mean(per_user), excluded


def auc_oracle(users):
    """Brute-force double loop over every pair; same strict rule as :func:`auc`."""
    per_user, excluded = [], 0
    for pos, neg in users:
        if len(pos) == 0 or len(neg) == 0:
            excluded += 1
            continue
        hits = 0
        for s in pos:
            for s2 in neg:
                if s > s2:
                    hits += 1
        per_user.append(hits / (len(pos) * len(neg)))
    return _fsum_mean(per_user), excluded


def top_k(scores, k, exclude=()):
    """Indices of the ``k`` best scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=float)
    order = np.lexsort((np.arange(len(scores)), -scores))
    if exclude:
        banned = np.zeros(len(scores), dtype=bool)
        banned[list(exclude)] = True
        order = order[~banned[order]]
    return order[:k].tolist()


def rank_catalog(example, params, item_category, k_max):
    """Top ``k_max`` items for one example; its short-term items are never returned."""
    batch = encode_batch([example], item_category, params.max_long)
    u_t, _ = encode_context(params, batch)
    scores = params.item_table(item_category) @ u_t[0]
    return top_k(scores, k_max, exclude={i for i, _ in example.short_items})


def precision_recall_at_k(ranked, truth, ks=DEFAULT_KS):
    """Mean hits/K and mean hits/|pos(u)| over users, for every K."""
    precision, recall = {}, {}
    for k in ks:
        p, r = [], []
        for items, pos in zip(ranked, truth):
            pos = set(pos)
            hits = sum(1 for i in items[:k] if i in pos)
            p.append(hits / k)
            r.append(hits / len(pos) if pos else 0.0)
        precision[k], recall[k] = _fsum_mean(p), _fsum_mean(r)
    return precision, recall


def popularity_counts(items, n_items):
    return np.bincount(np.asarray(items, dtype=np.int64), minlength=n_items)


def popularity_baseline(items, n_items):
    """Global ranking by interaction count; ties by ascending item index."""
    return top_k(popularity_counts(items, n_items), n_items)


def sample_eval_negatives(dataset, examples, seed, per_user=1):
    """Seeded negatives per test example, uniform over the user's non-history items."""
    rng = np.random.default_rng(seed)
    histories = dataset.histories()
    n_items = dataset.manifest.n_items
    return [[sample_negative(rng, histories[ex.user].item_set(), n_items) for _ in range(per_user)]
            for ex in examples]


def evaluate_scores(examples, scores, negatives, ks=DEFAULT_KS):
    """Metrics from a full ``(n_examples, n_items)`` score matrix."""
    scores = np.asarray(scores, dtype=float)
    k_max = max(ks)
    users, ranked, truth = [], [], []
    for e, ex in enumerate(examples):
        row = scores[e]
        users.append(([row[ex.target]], [row[j] for j in negatives[e]]))
        ranked.append(top_k(row, k_max, exclude={i for i, _ in ex.short_items}))
        truth.append([ex.target])
    value, excluded = auc(users)
    precision, recall = precision_recall_at_k(ranked, truth, ks)
    return EvalReport(value, precision, recall, len(examples), excluded)


def context_scores(params, examples, item_category, batch_size=256):
    """Score matrix of every catalog item for every example."""
    table = params.item_table(item_category)
    out = []
    for s in range(0, len(examples), batch_size):
        batch = encode_batch(examples[s:s + batch_size], item_category, params.max_long)
        u_t, _ = encode_context(params, batch)
        out.append(u_t @ table.T)
    return np.concatenate(out) if out else np.zeros((0, len(item_category)))


def evaluate(dataset, params, ks=DEFAULT_KS, seed=0, examples=None, negatives=None):
    """TLSAN metrics on the test examples (or ``examples`` if given)."""
    examples = dataset.test if examples is None else examples
    if not examples:
        raise ValueError("no examples to evaluate")
    if negatives is None:
        negatives = sample_eval_negatives(dataset, examples, seed)
    return evaluate_scores(examples, context_scores(params, examples, dataset.item_category), negatives, ks)


def evaluate_popularity(dataset, ks=DEFAULT_KS, seed=0, examples=None, negatives=None):
    examples = dataset.test if examples is None else examples
    if negatives is None:
        negatives = sample_eval_negatives(dataset, examples, seed)
    counts = popularity_counts(dataset.training_interactions(), dataset.manifest.n_items).astype(float)
    return evaluate_scores(examples, np.broadcast_to(counts, (len(examples), len(counts))), negatives, ks)


def write_report_csv(path_or_stream, reports):
    """``reports`` maps model name -> EvalReport; one CSV row per model."""
    own = isinstance(path_or_stream, str)
    fh = open(path_or_stream, "w", newline="") if own else path_or_stream
    try:
        w = csv.writer(fh, lineterminator="\n")
        first = next(iter(reports.values()))
        w.writerow(first.csv_header())
        for name, rep in reports.items():
            w.writerow(rep.csv_row(name))
    finally:
        if own:
            fh.close()


def report_csv_text(reports):
    buf = io.StringIO()
    write_report_csv(buf, reports)
    return buf.getvalue()

