"""Loss, hand-derived backpropagation, SGD and the training loop."""

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import linalg
from .ingest import TooFewSessions, build_examples, sample_negative
from .model import ModelParams, encode_batch, forward, save_checkpoint

log = logging.getLogger(__name__)

DENSE = ("W1", "W2", "W3", "W4", "b1", "b2", "b3", "b4")
SPARSE = ("U", "I", "C", "P")
METRIC_COLUMNS = ("step", "epoch", "lr", "loss", "auc", "p_at_k", "r_at_k")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    d_f: int = 32
    heads: int = 8
    max_long: int = 10
    batch_size: int = 32
    l2: float = 0.00005
    epochs: int = 50
    seed: int = 0
    # the summed loss diverges at lr 1.0; 0.1 -> 0.01 keeps the 10x drop at 80%
    lr_initial: float = 0.1
    lr_drop_fraction: float = 0.8
    lr_after: float = 0.01
    negatives_per_positive: int = 1
    loss_reduction: str = "sum"
    eval_every: int = 0
    eval_k: int = 20
    no_short: bool = False
    fixed_gamma: bool = False
    fixed_position: bool = False

    def __post_init__(self):
        if not 0.0 < self.lr_drop_fraction < 1.0:
            raise ValueError("lr_drop_fraction must lie in (0, 1)")
        if self.l2 < 0:
            raise ValueError("l2 weight must be non-negative")
        if (2 * self.d_f) % self.heads:
            raise ValueError(f"2*d_f={2 * self.d_f} is not divisible by heads={self.heads}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")
        if self.batch_size < 1 or self.epochs < 0 or self.negatives_per_positive < 1:
            raise ValueError("batch_size, epochs and negatives_per_positive must be positive")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class Gradients:
    dense: dict  # name -> full array (W*, b*, gamma)
    sparse: dict  # name -> (row indices, row gradients)

    def scaled(self, s):
        return Gradients({k: v * s for k, v in self.dense.items()},
                         {k: (i, r * s) for k, (i, r) in self.sparse.items()})

    def to_dense(self, params):
        """Full-shape arrays for every tensor (testing and grad checks)."""
        out = {k: v.copy() for k, v in self.dense.items()}
        for name, (idx, rows) in self.sparse.items():
            full = np.zeros_like(getattr(params, name))
            np.add.at(full, idx, rows)
            out[name] = full
        return out


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # dicts with step, epoch, auc, p_at_k, r_at_k
    epoch_losses: list = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str = None
    steps: int = 0


# ---------------------------------------------------------------------------
# loss


def cross_entropy(scores, labels):
    """Per-sample sigmoid cross entropy, computed through softplus."""
    scores = np.asarray(scores, dtype=linalg.DTYPE)
    labels = np.asarray(labels, dtype=linalg.DTYPE)
    return labels * linalg.softplus(-scores) + (1.0 - labels) * linalg.softplus(scores)


def touched_rows(batch):
    """Unique user rows and item rows referenced by a batch."""
    items = np.concatenate([batch.long_item[batch.long_mask], batch.short_item[batch.short_mask],
                            batch.cand_item.ravel()])
    return np.unique(batch.user), np.unique(items)


def l2_penalty(params, batch):
    users, items = touched_rows(batch)
    total = np.sum(params.U[users] ** 2) + np.sum(params.I[items] ** 2)
    for name in DENSE:
        total += np.sum(getattr(params, name) ** 2)
    return float(total)


def loss(scores, labels, lam=0.0, penalty=0.0, reduction="sum"):
    """Summed (or averaged) cross entropy plus ``lam * penalty``.

    ``penalty`` is the squared norm of the regularised parameters touched by the
    batch (see :func:`l2_penalty`).
    """
    ce = cross_entropy(scores, labels)
    data = float(np.sum(ce)) if reduction == "sum" else float(np.mean(ce))
    return data + lam * penalty


def objective(params, batch, lam, reduction="sum"):
    scores, _ = forward(params, batch)
    return loss(scores, batch.labels, lam, l2_penalty(params, batch) if lam else 0.0, reduction)


def score_gradient(scores, labels, reduction="sum"):
    g = linalg.sigmoid(scores) - labels
    return g / g.size if reduction == "mean" else g


# ---------------------------------------------------------------------------
# backward


def _attend_backward(dctx, cache, Wa, Wb, params):
    x, z, r, a = cache["x"], cache["z"], cache["r"], cache["a"]
    Wa_e, Wb_e = params.effective(Wa), params.effective(Wb)
    dctx = dctx[:, None, :]
    dx = a * dctx
    da = x * dctx
    # softmax over positions, independently per feature
    dlogits = a * (da - np.sum(a * da, axis=1, keepdims=True))
    # per-example weight gradients first, then the batch sum
    dWa = _batch_sum(r.transpose(0, 2, 1) @ dlogits)
    dba = _batch_sum(dlogits.sum(axis=1))
    dz = (dlogits @ Wa_e.T) * linalg.relu_grad(z)
    dWb = _batch_sum(dz.transpose(0, 2, 1) @ x)
    dbb = _batch_sum(dz.sum(axis=1))
    dx = dx + dz @ Wb_e
    return dx, params.effective(dWa), params.effective(dWb), dba, dbb


def _batch_sum(per_example):
    out = np.zeros(per_example.shape[1:])
    for g in per_example:
        out += g
    return out


class _RowGrads:
    """Sparse row gradients, summed within each example before across the batch."""

    def __init__(self, batch_size):
        self.batch_size = batch_size
        self.parts = {}

    def add(self, name, idx, rows, example):
        idx = np.asarray(idx)
        example = np.broadcast_to(np.asarray(example), idx.shape).ravel()
        idx = idx.ravel()
        if idx.size:
            self.parts.setdefault(name, []).append((idx, example, rows.reshape(idx.size, -1)))

    def collect(self):
        out = {}
        for name, parts in self.parts.items():
            idx = np.concatenate([p[0] for p in parts])
            ex = np.concatenate([p[1] for p in parts])
            rows = np.concatenate([p[2] for p in parts])
            keys, inv = np.unique(idx * self.batch_size + ex, return_inverse=True)
            per_example = np.zeros((len(keys), rows.shape[1]))
            np.add.at(per_example, inv, rows)
            uniq, inv = np.unique(keys // self.batch_size, return_inverse=True)
            acc = np.zeros((len(uniq), rows.shape[1]))
            np.add.at(acc, inv, per_example)
            out[name] = (uniq, acc)
        return out


def backward(params, batch, cache, dscores, lam=0.0):
    """Exact gradients of the loss w.r.t. every trainable tensor.

    ``dscores`` is dLoss/dScore for each candidate (B, N); ``lam`` adds the
    gradient of the L2 term over the rows touched by the batch.
    """
    dscores = np.asarray(dscores, dtype=linalg.DTYPE)
    if dscores.shape != cache["scores"].shape:
        raise ValueError(f"score gradient shape {dscores.shape} != {cache['scores'].shape}")
    d_f, D = params.d_f, params.dim
    B = batch.size
    rows = _RowGrads(B)
    ex_id = np.arange(B)
    dense = {name: np.zeros_like(getattr(params, name)) for name in DENSE}
    dgamma = 0.0

    u_t = cache["u_t"]
    du_t = np.einsum("bn,bnd->bd", dscores, cache["cand"])
    dcand = dscores[:, :, None] * u_t[:, None, :]
    cand_ex = np.broadcast_to(ex_id[:, None], batch.cand_item.shape)
    rows.add("I", batch.cand_item, dcand[..., :d_f], cand_ex)
    rows.add("C", batch.cand_cat, dcand[..., d_f:], cand_ex)

    rows.add("U", batch.user, du_t[:, :d_f], ex_id)
    rows.add("C", batch.user_category, du_t[:, d_f:], ex_id)

    if params.no_short:
        du_prev = du_t
    else:
        ds, dense["W3"], dense["W4"], dense["b3"], dense["b4"] = _attend_backward(
            du_t, cache["short"], params.W3, params.W4, params)
        du_prev = ds[:, 0]
        m = batch.short_mask
        short_ex = np.broadcast_to(ex_id[:, None], m.shape)[m]
        rows.add("I", batch.short_item[m], ds[:, 1:][m][:, :d_f], short_ex)
        rows.add("C", batch.short_cat[m], ds[:, 1:][m][:, d_f:], short_ex)

    m = batch.long_mask
    if m.any():
        dh, dense["W1"], dense["W2"], dense["b1"], dense["b2"] = _attend_backward(
            du_prev, cache["long"], params.W1, params.W2, params)
        dl = cache["coef"][:, :, None] * dh
        long_ex = np.broadcast_to(ex_id[:, None], m.shape)[m]
        rows.add("I", batch.long_item[m], dl[m][:, :d_f], long_ex)
        rows.add("C", batch.long_cat[m], dl[m][:, d_f:], long_ex)
        dcoef = np.sum(dh * cache["l"], axis=2) * m
        P_u = params.P[batch.user]
        if not params.fixed_gamma:
            dgamma = float(_batch_sum(np.sum(dcoef * batch.long_q * P_u, axis=1)[:, None])[0])
        if not params.fixed_position:
            dP = dcoef * params.gamma[0] * batch.long_q
            rows.add("P", batch.user, dP, ex_id)

    sparse = rows.collect()
    if lam:
        users, items = touched_rows(batch)
        for name, idx in (("U", users), ("I", items)):
            rows_reg = 2.0 * lam * getattr(params, name)[idx]
            if name in sparse:
                uniq, acc = sparse[name]
                merged = np.concatenate([uniq, idx])
                mrows = np.concatenate([acc, rows_reg])
                u2, inv = np.unique(merged, return_inverse=True)
                out = np.zeros((len(u2), mrows.shape[1]))
                np.add.at(out, inv, mrows)
                sparse[name] = (u2, out)
            else:
                sparse[name] = (idx, rows_reg)
        for name in DENSE:
            dense[name] = dense[name] + 2.0 * lam * getattr(params, name)
    dense["gamma"] = np.array([dgamma])
    return Gradients(dense, sparse)


def sgd_step(params, grads, lr):
    """In-place ``theta <- theta - lr * g``; untouched embedding rows are left alone."""
    updates = []
    for name, g in grads.dense.items():
        if name == "gamma" and params.fixed_gamma:
            continue
        new = getattr(params, name) - lr * g
        if not np.all(np.isfinite(new)):
            raise FloatingPointError(f"non-finite update for tensor {name}")
        updates.append((name, None, new))
    for name, (idx, rows) in grads.sparse.items():
        if name == "P" and params.fixed_position:
            continue
        new = getattr(params, name)[idx] - lr * rows
        if not np.all(np.isfinite(new)):
            raise FloatingPointError(f"non-finite update for tensor {name}")
        updates.append((name, idx, new))
    for name, idx, new in updates:
        if idx is None:
            getattr(params, name)[...] = new
        else:
            getattr(params, name)[idx] = new
    return params


# ---------------------------------------------------------------------------
# training loop


def learning_rate(step, total_steps, config):
    """Step schedule: ``lr_initial`` until the drop fraction of planned steps, then ``lr_after``."""
    return config.lr_initial if step < config.lr_drop_fraction * total_steps else config.lr_after


def init_params(config, n_users, n_items, n_categories, rng):
    return ModelParams.init(rng, n_users, n_items, n_categories, d_f=config.d_f,
                            max_long=config.max_long, heads=config.heads, no_short=config.no_short,
                            fixed_gamma=config.fixed_gamma, fixed_position=config.fixed_position)


def draw_training_batch(histories, users, item_sets, n_items, config, rng):
    """Fresh targets and negatives for a list of users."""
    examples, candidates = [], []
    for u in users:
        try:
            ex, _ = build_examples(histories[u], config.max_long, rng)
        except TooFewSessions:
            continue
        if ex is None:
            continue
        negs = [sample_negative(rng, item_sets[u], n_items) for _ in range(config.negatives_per_positive)]
        examples.append(ex)
        candidates.append([ex.target] + negs)
    return examples, candidates


def _fmt(x):
    return "" if x is None else f"{x:.10g}"


def train_loop(dataset, config, checkpoint_path=None, metrics_path=None, eval_fn=None, params=None):
    """Train on ``dataset``; returns ``(params, TrainReport)``.

    ``eval_fn(params)`` (optional) returns a dict with ``auc``, ``p_at_k`` and
    ``r_at_k`` and is called every ``config.eval_every`` epochs and after the
    last epoch.
    """
    start = time.perf_counter()
    m = dataset.manifest
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(config, m.n_users, m.n_items, m.n_categories, rng)
    histories = dataset.histories()
    users = np.array(sorted(ex.user for ex in dataset.train), dtype=np.int64)
    if not len(users):
        raise ValueError("dataset has no training examples")
    item_sets = {u: histories[u].item_set() for u in users.tolist()}
    steps_per_epoch = math.ceil(len(users) / config.batch_size)
    total = config.epochs * steps_per_epoch

    report = TrainReport()
    rows = []
    last_good = params.copy()
    step = 0
    for epoch in range(config.epochs):
        order = users[rng.permutation(len(users))]
        epoch_losses = []
        for s in range(steps_per_epoch):
            chunk = order[s * config.batch_size:(s + 1) * config.batch_size].tolist()
            examples, cands = draw_training_batch(histories, chunk, item_sets, m.n_items, config, rng)
            if not examples:
                step += 1
                continue
            batch = encode_batch(examples, dataset.item_category, config.max_long, cands)
            lr = learning_rate(step, total, config)
            scores, cache = forward(params, batch)
            value = loss(scores, batch.labels, config.l2,
                         l2_penalty(params, batch) if config.l2 else 0.0, config.loss_reduction)
            per_sample = value / batch.labels.size if config.loss_reduction == "sum" else value
            if not math.isfinite(value):
                return _diverged(last_good, checkpoint_path, step)
            grads = backward(params, batch, cache, score_gradient(scores, batch.labels, config.loss_reduction),
                             config.l2)
            try:
                sgd_step(params, grads, lr)
            except FloatingPointError:
                return _diverged(last_good, checkpoint_path, step)
            report.losses.append(per_sample)
            epoch_losses.append(per_sample)
            rows.append({"step": step, "epoch": epoch, "lr": lr, "loss": per_sample})
            step += 1
        report.epoch_losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        last_good = params.copy()
        last_epoch = epoch == config.epochs - 1
        if eval_fn is not None and ((config.eval_every and (epoch + 1) % config.eval_every == 0) or last_epoch):
            metrics = eval_fn(params)
            metrics = {"step": step - 1, "epoch": epoch, **metrics}
            report.evals.append(metrics)
            if rows:
                rows[-1].update({k: metrics[k] for k in ("auc", "p_at_k", "r_at_k")})
        log.info("epoch %d  loss %.5f", epoch, report.epoch_losses[-1])

    report.steps = step
    if metrics_path:
        write_metrics(metrics_path, rows)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params)
        report.checkpoint = checkpoint_path
    report.wall_clock = time.perf_counter() - start
    return params, report


def _diverged(last_good, checkpoint_path, step):
    if checkpoint_path:
        save_checkpoint(checkpoint_path, last_good)
    raise TrainingDiverged(f"loss became non-finite at step {step}; last good parameters saved")


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["step"], r["epoch"], _fmt(r["lr"]), _fmt(r["loss"]),
                        _fmt(r.get("auc")), _fmt(r.get("p_at_k")), _fmt(r.get("r_at_k"))])


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    errors: dict  # tensor -> worst relative error
    checked: int
    skipped: int
    min_preactivation: float

    @property
    def worst(self):
        return max(self.errors.values())

    def passed(self, tol=1e-4):
        return self.worst < tol


def random_problem(rng, d_f=4, max_long=3, heads=2, n_users=3, n_items=8, n_categories=3, n_examples=3,
                   negatives=2):
    """Random parameters plus a small batch exercising every code path."""
    from .ingest import Example

    D = 2 * d_f
    params = ModelParams(
        U=rng.normal(0, 0.6, (n_users, d_f)), I=rng.normal(0, 0.6, (n_items, d_f)),
        C=rng.normal(0, 0.6, (n_categories, d_f)), P=rng.uniform(0.5, 1.5, (n_users, max_long)),
        gamma=np.array([rng.uniform(0.7, 1.5)]),
        W1=rng.normal(0, 0.5, (D, D)), W2=rng.normal(0, 0.5, (D, D)),
        W3=rng.normal(0, 0.5, (D, D)), W4=rng.normal(0, 0.5, (D, D)),
        b1=rng.normal(0, 0.3, D), b2=rng.normal(0, 0.3, D), b3=rng.normal(0, 0.3, D), b4=rng.normal(0, 0.3, D),
        d_f=d_f, max_long=max_long, heads=heads,
    )
    item_category = rng.integers(n_categories, size=n_items)
    examples, cands = [], []
    for e in range(n_examples):
        n_long = max_long if e == 0 else int(rng.integers(0, max_long + 1))
        n_short = int(rng.integers(1 if n_long == 0 else 0, 4))
        items = rng.integers(n_items, size=n_long + n_short + 1 + negatives)
        deltas = np.sort(rng.integers(1, 30, size=n_long))[::-1]
        long_items = tuple((int(i), int(item_category[i]), int(d)) for i, d in zip(items[:n_long], deltas))
        short = tuple((int(i), int(item_category[i])) for i in items[n_long:n_long + n_short])
        user = int(rng.integers(n_users))
        examples.append(Example(user, int(rng.integers(n_categories)), long_items, short, int(items[-1 - negatives])))
        cands.append([int(i) for i in items[-1 - negatives:]])
    batch = encode_batch(examples, item_category, max_long, cands)
    return params, batch


def _relu_pattern(cache, batch):
    parts = [(cache["long"]["z"] > 0)[batch.long_mask]]
    if "short" in cache:
        parts.append((cache["short"]["z"] > 0)[cache["short"]["mask"]])
    return np.concatenate([p.ravel() for p in parts])


def _min_preactivation(cache, batch):
    vals = [np.abs(cache["long"]["z"][batch.long_mask]).ravel()]
    if "short" in cache:
        vals.append(np.abs(cache["short"]["z"][cache["short"]["mask"]]).ravel())
    return float(np.min(np.concatenate(vals)))


def grad_check(seed=0, d_f=4, max_long=3, heads=2, lam=0.01, h=1e-5, kink_margin=0.0,
               backward_fn=backward, problem=None, order=2):
    """Compare analytic gradients with central differences for every tensor.

    Entries whose perturbation flips any ReLU activation are skipped (the loss
    is not differentiable there). With ``kink_margin > 0`` random instances are
    redrawn until every ReLU pre-activation is at least that far from 0.
    ``order=4`` switches to the five-point central stencil.
    """
    rng = np.random.default_rng(seed)
    if problem is None:
        while True:
            params, batch = random_problem(rng, d_f=d_f, max_long=max_long, heads=heads)
            _, cache = forward(params, batch)
            if _min_preactivation(cache, batch) >= kink_margin:
                break
    else:
        params, batch = problem

    scores, cache = forward(params, batch)
    base_pattern = _relu_pattern(cache, batch)
    grads = backward_fn(params, batch, cache, score_gradient(scores, batch.labels), lam)
    analytic = grads.to_dense(params)

    def f(p):
        s, c = forward(p, batch)
        return loss(s, batch.labels, lam, l2_penalty(p, batch) if lam else 0.0), _relu_pattern(c, batch)

    errors, checked, skipped = {}, 0, 0
    for name in ("U", "I", "C", "P", "gamma") + DENSE:
        arr = getattr(params, name)
        worst = 0.0
        offsets = (1, -1) if order == 2 else (2, 1, -1, -2)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            vals, same = [], True
            for k in offsets:
                arr[idx] = orig + k * h
                v, pat = f(params)
                vals.append(v)
                same = same and np.array_equal(pat, base_pattern)
            arr[idx] = orig
            if not same:
                skipped += 1
                continue
            if order == 2:
                num = (vals[0] - vals[1]) / (2 * h)
            else:
                num = (8 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12 * h)
            a = analytic[name][idx]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
            checked += 1
        errors[name] = worst
    return GradCheckReport(errors, checked, skipped, _min_preactivation(cache, batch))
