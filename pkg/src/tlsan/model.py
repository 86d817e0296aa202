"""TLSAN forward pass.

Embedding assembly, personalised time-position weighting of the long-term
sequence, long- and short-term feature-wise attention with multi-head blocks,
and dot-product scoring. The core works on padded mini-batches; the
single-example helpers wrap a batch of one.

Shapes: ``B`` batch, ``L`` long-term slots (``max_long``), ``S`` short-term
items, ``N`` candidates per example, ``D = 2 * d_f``.
"""

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import linalg

CKPT_MAGIC = b"TLSC"
CKPT_VERSION = 1

TENSOR_NAMES = ("U", "I", "C", "P", "gamma", "W1", "W2", "W3", "W4", "b1", "b2", "b3", "b4")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelParams:
    U: np.ndarray
    I: np.ndarray
    C: np.ndarray
    P: np.ndarray
    gamma: np.ndarray  # shape (1,)
    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    W4: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    b3: np.ndarray
    b4: np.ndarray
    d_f: int
    max_long: int
    heads: int
    # ablation switches: no short-term layer / gamma frozen at 1 / P frozen at 1
    no_short: bool = False
    fixed_gamma: bool = False
    fixed_position: bool = False
    _block: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if (2 * self.d_f) % self.heads:
            raise ValueError(f"2*d_f={2 * self.d_f} is not divisible by heads={self.heads}")
        self.gamma = np.asarray(self.gamma, dtype=linalg.DTYPE).reshape(1)
        self._block = None if self.heads == 1 else linalg.block_diagonal_mask(2 * self.d_f, self.heads)

    @classmethod
    def init(cls, rng, n_users, n_items, n_categories, d_f=32, max_long=10, heads=8, **flags):
        D = 2 * d_f
        return cls(
            U=linalg.init_matrix(rng, n_users, d_f, "embedding"),
            I=linalg.init_matrix(rng, n_items, d_f, "embedding"),
            C=linalg.init_matrix(rng, n_categories, d_f, "embedding"),
            P=linalg.init_matrix(rng, n_users, max_long, "ones"),
            gamma=np.ones(1),
            W1=linalg.init_matrix(rng, D, D, "glorot"),
            W2=linalg.init_matrix(rng, D, D, "glorot"),
            W3=linalg.init_matrix(rng, D, D, "glorot"),
            W4=linalg.init_matrix(rng, D, D, "glorot"),
            b1=np.zeros(D), b2=np.zeros(D), b3=np.zeros(D), b4=np.zeros(D),
            d_f=d_f, max_long=max_long, heads=heads, **flags,
        )

    @property
    def dim(self):
        return 2 * self.d_f

    @property
    def n_users(self):
        return self.U.shape[0]

    @property
    def n_items(self):
        return self.I.shape[0]

    @property
    def n_categories(self):
        return self.C.shape[0]

    def tensors(self):
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def hyper(self):
        return {
            "d_f": self.d_f, "max_long": self.max_long, "heads": self.heads,
            "n_users": self.n_users, "n_items": self.n_items, "n_categories": self.n_categories,
            "no_short": self.no_short, "fixed_gamma": self.fixed_gamma, "fixed_position": self.fixed_position,
        }

    def copy(self):
        kw = {name: arr.copy() for name, arr in self.tensors().items()}
        return ModelParams(d_f=self.d_f, max_long=self.max_long, heads=self.heads,
                           no_short=self.no_short, fixed_gamma=self.fixed_gamma,
                           fixed_position=self.fixed_position, **kw)

    def effective(self, W):
        """Attention weight restricted to its per-head diagonal blocks."""
        return W if self._block is None else W * self._block

    def item_table(self, item_category):
        """``n_items x D`` matrix of every item's embedding."""
        return np.concatenate([self.I, self.C[np.asarray(item_category)]], axis=1)


# ---------------------------------------------------------------------------
# single-vector operations


def _check_index(idx, n, what):
    if not 0 <= idx < n:
        raise IndexError(f"{what} index {idx} out of range [0, {n})")


def item_embedding(item, category, params):
    _check_index(item, params.n_items, "item")
    _check_index(category, params.n_categories, "category")
    return np.concatenate([params.I[item], params.C[category]])


def user_embedding(user, user_category, params):
    _check_index(user, params.n_users, "user")
    _check_index(user_category, params.n_categories, "category")
    return np.concatenate([params.U[user], params.C[user_category]])


def time_decay(day_delta):
    """Fixed reciprocal decay of a day gap: 1 / (1 + delta)."""
    d = np.asarray(day_delta)
    if np.any(d < 0):
        raise ValueError(f"negative day delta {day_delta}")
    q = 1.0 / (1.0 + d.astype(linalg.DTYPE))
    return float(q) if q.ndim == 0 else q


def long_slots(long_items, max_long):
    """Left-pad a long-term list into ``max_long`` slots (last slot = most recent)."""
    if len(long_items) > max_long:
        raise ValueError(f"{len(long_items)} long-term items exceed max_long={max_long}")
    items = np.zeros(max_long, dtype=np.int64)
    cats = np.zeros(max_long, dtype=np.int64)
    q = np.zeros(max_long)
    mask = np.zeros(max_long, dtype=bool)
    off = max_long - len(long_items)
    for k, (item, cat, delta) in enumerate(long_items):
        items[off + k], cats[off + k] = item, cat
        q[off + k] = time_decay(delta)
        mask[off + k] = True
    return items, cats, q, mask


def time_aware_history(user, long_items, params):
    """Rows ``h_j = gamma * q_j * P[user, slot_j] * l_j`` for every slot, plus the mask."""
    items, cats, q, mask = long_slots(long_items, params.max_long)
    l = np.concatenate([params.I[items], params.C[cats]], axis=1)
    coef = params.gamma[0] * q * params.P[user] * mask
    return coef[:, None] * l, mask


def _attend(x, mask, Wa, Wb, ba, bb, params):
    """Batched feature-wise attention; returns the context and a cache dict.

    ``x``: (B, J, D); ``mask``: (B, J). Per position the logits are
    ``Wa^T relu(Wb x + bb) + ba``; the softmax runs across positions separately
    for every feature dimension. With several heads each block of features only
    sees its own block of the input.
    """
    Wa_e, Wb_e = params.effective(Wa), params.effective(Wb)
    z = x @ Wb_e.T + bb
    r = linalg.relu(z)
    logits = r @ Wa_e + ba
    a = linalg.masked_softmax(logits, mask[:, :, None], axis=1)
    ctx = np.sum(a * x, axis=1)
    return ctx, {"x": x, "mask": mask, "z": z, "r": r, "logits": logits, "a": a}


def feature_wise_attention(Wa, Wb, ba, bb, inputs, mask, heads):
    """Single-sequence feature-wise attention.

    Returns ``(context, weights)`` with weights shaped ``D x J``.
    """
    x = linalg.as_mat(inputs)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("all positions are masked")
    D = x.shape[1]
    shim = _Heads(heads, D)
    ctx, cache = _attend(x[None], mask[None], Wa, Wb, ba, bb, shim)
    return ctx[0], cache["a"][0].T


class _Heads:
    def __init__(self, heads, dim):
        self._block = None if heads == 1 else linalg.block_diagonal_mask(dim, heads)

    def effective(self, W):
        return W if self._block is None else W * self._block


def long_term_layer(H, mask, params):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros(params.dim)
    ctx, _ = _attend(np.asarray(H)[None], mask[None], params.W1, params.W2, params.b1, params.b2, params)
    return ctx[0]


def short_term_layer(short_items, u_prev, u_e, params):
    if not short_items and not np.any(u_prev):
        raise ValueError("degenerate context: no short-term items and zero long-term preference")
    rows = [u_prev] + [item_embedding(i, c, params) for i, c in short_items]
    x = np.stack(rows)[None]
    ctx, _ = _attend(x, np.ones((1, len(rows)), dtype=bool), params.W3, params.W4, params.b3, params.b4, params)
    return u_e + ctx[0]


def score(u_t, item, category, params):
    return float(np.dot(u_t, item_embedding(item, category, params)))


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    user: np.ndarray  # (B,)
    user_category: np.ndarray  # (B,)
    long_item: np.ndarray  # (B, L)
    long_cat: np.ndarray
    long_q: np.ndarray
    long_mask: np.ndarray
    short_item: np.ndarray  # (B, S)
    short_cat: np.ndarray
    short_mask: np.ndarray
    cand_item: np.ndarray  # (B, N)
    cand_cat: np.ndarray
    labels: np.ndarray  # (B, N) in {0, 1}

    @property
    def size(self):
        return len(self.user)


def encode_batch(examples, item_category, max_long, candidates=None, labels=None):
    """Pad a list of examples into a :class:`Batch`.

    ``candidates`` holds one list of items per example (defaults to the target);
    ``labels`` matches it (defaults to 1 for the first candidate, 0 after).
    """
    item_category = np.asarray(item_category)
    B = len(examples)
    if candidates is None:
        candidates = [[ex.target] for ex in examples]
    N = max(len(c) for c in candidates)
    if any(len(c) != N for c in candidates):
        raise ValueError("every example needs the same number of candidates")
    if labels is None:
        labels = [[1] + [0] * (N - 1) for _ in examples]
    S = max([len(ex.short_items) for ex in examples] + [0])

    b = Batch(
        user=np.array([ex.user for ex in examples], dtype=np.int64),
        user_category=np.array([ex.user_category for ex in examples], dtype=np.int64),
        long_item=np.zeros((B, max_long), dtype=np.int64),
        long_cat=np.zeros((B, max_long), dtype=np.int64),
        long_q=np.zeros((B, max_long)),
        long_mask=np.zeros((B, max_long), dtype=bool),
        short_item=np.zeros((B, S), dtype=np.int64),
        short_cat=np.zeros((B, S), dtype=np.int64),
        short_mask=np.zeros((B, S), dtype=bool),
        cand_item=np.asarray(candidates, dtype=np.int64).reshape(B, N),
        cand_cat=None,
        labels=np.asarray(labels, dtype=linalg.DTYPE).reshape(B, N),
    )
    b.cand_cat = item_category[b.cand_item]
    for e, ex in enumerate(examples):
        b.long_item[e], b.long_cat[e], b.long_q[e], b.long_mask[e] = long_slots(ex.long_items, max_long)
        for k, (item, cat) in enumerate(ex.short_items):
            b.short_item[e, k], b.short_cat[e, k], b.short_mask[e, k] = item, cat, True
    return b


def encode_context(params, batch):
    """Current-preference vectors ``u_t`` (B, D) and the forward cache."""
    c = {}
    B, L = batch.long_item.shape
    l = np.concatenate([params.I[batch.long_item], params.C[batch.long_cat]], axis=2)
    coef = params.gamma[0] * batch.long_q * params.P[batch.user] * batch.long_mask
    h = coef[:, :, None] * l
    u_prev, c["long"] = _attend(h, batch.long_mask, params.W1, params.W2, params.b1, params.b2, params)
    c.update(l=l, coef=coef, h=h, u_prev=u_prev)

    u_e = np.concatenate([params.U[batch.user], params.C[batch.user_category]], axis=1)
    c["u_e"] = u_e
    if params.no_short:
        u_t = u_e + u_prev
    else:
        empty = ~batch.short_mask.any(axis=1) & ~batch.long_mask.any(axis=1)
        if np.any(empty):
            raise ValueError("degenerate context: example with neither long- nor short-term items")
        s_items = np.concatenate([params.I[batch.short_item], params.C[batch.short_cat]], axis=2)
        s = np.concatenate([u_prev[:, None, :], s_items], axis=1)
        s_mask = np.concatenate([np.ones((B, 1), dtype=bool), batch.short_mask], axis=1)
        ctx, c["short"] = _attend(s, s_mask, params.W3, params.W4, params.b3, params.b4, params)
        u_t = u_e + ctx
    c["u_t"] = u_t
    return u_t, c


def forward(params, batch):
    """Scores (B, N) for every candidate plus the cache used by backprop."""
    u_t, cache = encode_context(params, batch)
    e = np.concatenate([params.I[batch.cand_item], params.C[batch.cand_cat]], axis=2)
    scores = np.einsum("bd,bnd->bn", u_t, e)
    cache.update(cand=e, scores=scores)
    return scores, cache


def forward_example(example, params, item_category, candidates=None):
    batch = encode_batch([example], item_category, params.max_long,
                         None if candidates is None else [list(candidates)])
    scores, cache = forward(params, batch)
    return scores[0], cache


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(params):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION))
    hyper = json.dumps(params.hyper(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hyper)) + hyper)
    tensors = params.tensors()
    buf.write(struct.pack("<H", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def _take(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def decode_checkpoint(data):
    buf = io.BytesIO(data)
    if buf.read(4) != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    (version,) = struct.unpack("<H", _take(buf, 2))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", _take(buf, 4))
    hyper = json.loads(_take(buf, n))
    (count,) = struct.unpack("<H", _take(buf, 2))
    tensors = {}
    for _ in range(count):
        (k,) = struct.unpack("<H", _take(buf, 2))
        name = _take(buf, k).decode()
        (ndim,) = struct.unpack("<B", _take(buf, 1))
        shape = struct.unpack(f"<{ndim}Q", _take(buf, 8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(_take(buf, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)

    d_f, L, D = hyper["d_f"], hyper["max_long"], 2 * hyper["d_f"]
    expected = {
        "U": (hyper["n_users"], d_f), "I": (hyper["n_items"], d_f), "C": (hyper["n_categories"], d_f),
        "P": (hyper["n_users"], L), "gamma": (1,),
        **{f"W{i}": (D, D) for i in range(1, 5)}, **{f"b{i}": (D,) for i in range(1, 5)},
    }
    if set(tensors) != set(expected):
        raise CheckpointError(f"checkpoint tensors {sorted(tensors)} do not match the model")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"tensor {name} has shape {tensors[name].shape}, expected {shape}")
    return ModelParams(d_f=d_f, max_long=L, heads=hyper["heads"], no_short=hyper["no_short"],
                       fixed_gamma=hyper["fixed_gamma"], fixed_position=hyper["fixed_position"], **tensors)


def atomic_write(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params):
    atomic_write(path, encode_checkpoint(params))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
