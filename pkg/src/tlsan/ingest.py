"""Review-log ingestion: parsing, filtering, day sessions and example construction."""

import ast
import io
import json
import logging
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
UNKNOWN = "UNKNOWN"
UNKNOWN_CATEGORY = 0

MIN_USER_INTERACTIONS = 10
MIN_ITEM_INTERACTIONS = 8
WINDOW_DAYS = 90
MIN_KEPT = 4  # exclusive
MAX_KEPT = 90  # exclusive

MAGIC = b"TLSD"
VERSION = 1


class DatasetFormatError(ValueError):
    pass


class TooFewSessions(ValueError):
    pass


@dataclass(frozen=True)
class RawReview:
    user_ext_id: str
    item_ext_id: str
    timestamp: int


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    category: int
    day: int
    timestamp: int = 0


@dataclass(frozen=True)
class Session:
    day: int
    items: tuple  # ((item, category), ...) in timestamp order


@dataclass(frozen=True)
class UserHistory:
    user: int
    sessions: tuple

    def flatten(self):
        return [(s.day, item, cat) for s in self.sessions for item, cat in s.items]

    def item_set(self):
        return frozenset(item for s in self.sessions for item, _ in s.items)


@dataclass(frozen=True)
class Example:
    user: int
    user_category: int
    long_items: tuple  # ((item, category, day_delta), ...) oldest first
    short_items: tuple  # ((item, category), ...)
    target: int
    is_test: bool = False


@dataclass
class DatasetManifest:
    user_ids: list
    item_ids: list
    category_labels: list
    n_samples: int
    max_long: int
    seed: int
    stats: dict = field(default_factory=dict)

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    @property
    def n_categories(self):
        return len(self.category_labels)

    def user_index(self):
        return {u: i for i, u in enumerate(self.user_ids)}

    def item_index(self):
        return {u: i for i, u in enumerate(self.item_ids)}

    def to_json(self):
        payload = {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_categories": self.n_categories,
            "n_samples": self.n_samples,
            "user_ids": self.user_ids,
            "item_ids": self.item_ids,
            "category_labels": self.category_labels,
            "max_long": self.max_long,
            "seed": self.seed,
            "stats": self.stats,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        m = cls(
            user_ids=d["user_ids"],
            item_ids=d["item_ids"],
            category_labels=d["category_labels"],
            n_samples=d["n_samples"],
            max_long=d["max_long"],
            seed=d["seed"],
            stats=d.get("stats", {}),
        )
        if (m.n_users, m.n_items, m.n_categories) != (d["n_users"], d["n_items"], d["n_categories"]):
            raise DatasetFormatError("manifest counts disagree with id maps")
        return m


# ---------------------------------------------------------------------------
# parsing


def _lines(stream):
    if isinstance(stream, (bytes, str)):
        stream = io.BytesIO(stream.encode() if isinstance(stream, str) else stream)
    for line in stream:
        if isinstance(line, bytes):
            line = line.decode("utf-8", errors="replace")
        line = line.strip()
        if line:
            yield line


def _load_record(line):
    try:
        return json.loads(line)
    except json.JSONDecodeError:
        # the 2014 Amazon metadata dumps are Python dict literals
        return ast.literal_eval(line)


def parse_reviews(stream):
    """Parse review JSON-lines into ``RawReview`` records.

    Returns ``(records, skipped)``; malformed lines are skipped and counted.
    """
    records, skipped = [], 0
    for line in _lines(stream):
        try:
            d = _load_record(line)
            user, item, ts = str(d["reviewerID"]), str(d["asin"]), int(d["unixReviewTime"])
        except (ValueError, SyntaxError, KeyError, TypeError):
            skipped += 1
            continue
        if not user or not item or ts <= 0:
            skipped += 1
            continue
        records.append(RawReview(user, item, ts))
    if not records:
        raise ValueError("no records")
    if skipped:
        log.info("skipped %d malformed review lines", skipped)
    return records, skipped


def parse_categories(stream):
    """Map item id -> category label (last label of the first category path)."""
    out = {}
    for line in _lines(stream):
        try:
            d = _load_record(line)
            item = str(d["asin"])
        except (ValueError, SyntaxError, KeyError, TypeError):
            continue
        label = UNKNOWN
        paths = d.get("categories") or []
        if paths and isinstance(paths[0], (list, tuple)) and paths[0]:
            label = str(paths[0][-1]) or UNKNOWN
        out[item] = label
    return out


# ---------------------------------------------------------------------------
# filtering and sessions


def filter_dataset(reviews, categories, max_long=10, seed=0):
    """Apply the user/item frequency filters and the 90-day window.

    (a) users with fewer than 10 records and (b) items with fewer than 8 records
    are dropped in one simultaneous pass; (c) each user keeps the trailing 90
    days of records; (d) users whose remaining count n fails 4 < n < 90 are
    dropped. Dense ids are assigned afterwards in sorted external-id order,
    with category 0 reserved for ``UNKNOWN``.
    """
    user_counts = Counter(r.user_ext_id for r in reviews)
    item_counts = Counter(r.item_ext_id for r in reviews)
    per_user = defaultdict(list)
    for order, r in enumerate(reviews):
        if user_counts[r.user_ext_id] >= MIN_USER_INTERACTIONS and item_counts[r.item_ext_id] >= MIN_ITEM_INTERACTIONS:
            per_user[r.user_ext_id].append((r.timestamp, order, r))

    kept = {}
    for user, recs in per_user.items():
        recs.sort(key=lambda x: (x[0], x[1]))
        last_day = recs[-1][0] // SECONDS_PER_DAY
        recs = [x for x in recs if x[0] // SECONDS_PER_DAY > last_day - WINDOW_DAYS]
        if MIN_KEPT < len(recs) < MAX_KEPT:
            kept[user] = recs
    if not kept:
        raise ValueError("no users survive filtering")

    user_ids = sorted(kept)
    item_ids = sorted({x[2].item_ext_id for recs in kept.values() for x in recs})
    labels = sorted({categories.get(i, UNKNOWN) for i in item_ids} - {UNKNOWN})
    category_labels = [UNKNOWN] + labels
    uidx = {u: i for i, u in enumerate(user_ids)}
    iidx = {u: i for i, u in enumerate(item_ids)}
    cidx = {c: i for i, c in enumerate(category_labels)}

    out = []
    for user in user_ids:
        for ts, _, r in kept[user]:
            out.append(Interaction(uidx[user], iidx[r.item_ext_id], cidx[categories.get(r.item_ext_id, UNKNOWN)],
                                   ts // SECONDS_PER_DAY, ts))
    manifest = DatasetManifest(
        user_ids=user_ids,
        item_ids=item_ids,
        category_labels=category_labels,
        n_samples=len(out),
        max_long=max_long,
        seed=seed,
        stats={
            "raw_records": len(reviews),
            "raw_users": len(user_counts),
            "raw_items": len(item_counts),
        },
    )
    return out, manifest


def sessionize(interactions):
    """Group each user's records into one session per distinct day."""
    per_user = defaultdict(list)
    for order, x in enumerate(interactions):
        per_user[x.user].append((x.timestamp, order, x))
    out = {}
    for user in sorted(per_user):
        recs = sorted(per_user[user], key=lambda r: (r[2].day, r[0], r[1]))
        sessions, day, items = [], None, []
        for _, _, x in recs:
            if x.day != day:
                if items:
                    sessions.append(Session(day, tuple(items)))
                day, items = x.day, []
            items.append((x.item, x.category))
        sessions.append(Session(day, tuple(items)))
        out[user] = UserHistory(user, tuple(sessions))
    return out


def extract_user_category(history, upto_session, exclude=None):
    """Modal item category over sessions ``0..upto_session`` inclusive.

    ``exclude`` is an optional ``(session, position)`` occurrence left out of the
    count (the held-out target). Ties go to the category seen most recently.
    """
    if not 0 <= upto_session < len(history.sessions):
        raise IndexError(f"session {upto_session} out of range")
    counts, last_seen, step = Counter(), {}, 0
    for si in range(upto_session + 1):
        for pos, (_, cat) in enumerate(history.sessions[si].items):
            if exclude is not None and (si, pos) == tuple(exclude):
                continue
            counts[cat] += 1
            last_seen[cat] = step
            step += 1
    if not counts:
        return UNKNOWN_CATEGORY
    return max(counts, key=lambda c: (counts[c], last_seen[c]))


def newest_session_index(history):
    """Index of the newest training session; the one after it, if any, is held out."""
    n = len(history.sessions)
    return n - 2 if n >= 3 else n - 1


def _long_items(sessions, upto, ref_day, max_long):
    flat = [(item, cat, ref_day - s.day) for s in sessions[:upto] for item, cat in s.items]
    return tuple(flat[-max_long:]) if max_long > 0 else ()


def build_examples(history, max_long, rng):
    """Build the (train, test) examples for one user.

    The train target is drawn uniformly from the newest session; a single-item
    newest session instead targets the first item of the following session, or
    (when none follows) becomes the target itself with the previous session as
    short-term input. The test target is the first item after the newest
    session. Long-term day deltas are relative to the short-term session's day.
    Returns ``(train, test)``; either may be ``None`` (degenerate or no held-out
    session).
    """
    sessions = history.sessions
    if len(sessions) < 2:
        raise TooFewSessions(f"user {history.user} has {len(sessions)} session(s)")
    t = newest_session_index(history)
    newest = sessions[t]

    if len(newest.items) > 1:
        pos = int(rng.integers(len(newest.items)))
        target = newest.items[pos][0]
        short = tuple(x for x in newest.items if x[0] != target)
        long_items = _long_items(sessions, t, newest.day, max_long)
        ucat = extract_user_category(history, t, exclude=(t, pos))
    elif t + 1 < len(sessions):
        target = sessions[t + 1].items[0][0]
        short = newest.items
        long_items = _long_items(sessions, t, newest.day, max_long)
        ucat = extract_user_category(history, t)
    else:
        target = newest.items[0][0]
        prev = sessions[t - 1]
        short = tuple(x for x in prev.items if x[0] != target)
        long_items = _long_items(sessions, t - 1, prev.day, max_long)
        ucat = extract_user_category(history, t - 1)
    train = None
    if short or long_items:
        train = Example(history.user, ucat, long_items, short, target, False)

    test = None
    if t + 1 < len(sessions):
        test = Example(
            history.user,
            extract_user_category(history, t),
            _long_items(sessions, t, newest.day, max_long),
            newest.items,
            sessions[t + 1].items[0][0],
            True,
        )
    return train, test


def latest_context(history, max_long):
    """Example whose short-term session is the user's most recent day (target unset)."""
    last = len(history.sessions) - 1
    newest = history.sessions[last]
    return Example(history.user, extract_user_category(history, last),
                   _long_items(history.sessions, last, newest.day, max_long), newest.items, -1, True)


def sample_negative(rng, history_items, n_items):
    """Uniform draw over the items the user never interacted with."""
    if len(history_items) >= n_items:
        raise ValueError("user has interacted with the whole catalog")
    if len(history_items) * 4 <= n_items * 3:
        while True:
            j = int(rng.integers(n_items))
            if j not in history_items:
                return j
    eligible = np.setdiff1d(np.arange(n_items), np.fromiter(history_items, dtype=np.int64))
    return int(eligible[rng.integers(len(eligible))])


# ---------------------------------------------------------------------------
# dataset container and binary format


@dataclass
class Dataset:
    manifest: DatasetManifest
    interactions: list
    item_category: list
    train: list
    test: list

    def histories(self):
        return sessionize(self.interactions)

    def training_interactions(self):
        """Interactions outside each user's held-out session."""
        out = []
        for h in self.histories().values():
            t = newest_session_index(h)
            held_out = t + 1 < len(h.sessions)
            for s in h.sessions[: t + 1] if held_out else h.sessions:
                out.extend(item for item, _ in s.items)
        return out

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.manifest.to_json() == other.manifest.to_json()
                and self.interactions == other.interactions
                and list(self.item_category) == list(other.item_category)
                and self.train == other.train and self.test == other.test)


def build_dataset(reviews, categories, max_long=10, seed=0):
    """Filter, sessionize and draw one train/test example per user."""
    interactions, manifest = filter_dataset(reviews, categories, max_long=max_long, seed=seed)
    item_category = [UNKNOWN_CATEGORY] * manifest.n_items
    for x in interactions:
        item_category[x.item] = x.category
    rng = np.random.default_rng(seed)
    train, test, excluded = [], [], 0
    for user, h in sessionize(interactions).items():
        try:
            tr, te = build_examples(h, max_long, rng)
        except TooFewSessions:
            excluded += 1
            continue
        if tr is not None:
            train.append(tr)
        if te is not None:
            test.append(te)
    manifest.stats.update({
        "excluded_users": excluded,
        "train_examples": len(train),
        "test_examples": len(test),
    })
    return Dataset(manifest, interactions, item_category, train, test)


def _write_array(buf, name, arr):
    arr = np.ascontiguousarray(arr, dtype="<i8")
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise DatasetFormatError("truncated file")
    return data


def _read_array(buf, expected):
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, n).decode()
    if name != expected:
        raise DatasetFormatError(f"expected section {expected!r}, found {name!r}")
    (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(buf, 8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    return np.frombuffer(_read_exact(buf, 8 * count), dtype="<i8").reshape(shape).astype(np.int64)


def encode_dataset(ds):
    L = ds.manifest.max_long
    examples = list(ds.train) + list(ds.test)
    header = np.zeros((len(examples), 6), dtype=np.int64)
    long_arr = np.full((len(examples), L, 3), -1, dtype=np.int64)
    offsets = np.zeros(len(examples) + 1, dtype=np.int64)
    short = []
    for e, ex in enumerate(examples):
        header[e] = (ex.user, ex.user_category, ex.target, int(ex.is_test), len(ex.long_items), len(ex.short_items))
        if ex.long_items:
            long_arr[e, L - len(ex.long_items):] = ex.long_items
        short.extend(ex.short_items)
        offsets[e + 1] = len(short)
    inter = np.array([(x.user, x.item, x.category, x.day, x.timestamp) for x in ds.interactions],
                     dtype=np.int64).reshape(-1, 5)

    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<H", VERSION))
    meta = ds.manifest.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(meta)) + meta)
    _write_array(buf, "interactions", inter)
    _write_array(buf, "item_category", np.asarray(ds.item_category))
    _write_array(buf, "examples", header)
    _write_array(buf, "long", long_arr)
    _write_array(buf, "short_offsets", offsets)
    _write_array(buf, "short", np.array(short, dtype=np.int64).reshape(-1, 2))
    return buf.getvalue()


def decode_dataset(data):
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise DatasetFormatError("bad magic")
    (version,) = struct.unpack("<H", _read_exact(buf, 2))
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    manifest = DatasetManifest.from_json(_read_exact(buf, n).decode("utf-8"))
    inter = _read_array(buf, "interactions")
    item_category = _read_array(buf, "item_category")
    header = _read_array(buf, "examples")
    long_arr = _read_array(buf, "long")
    offsets = _read_array(buf, "short_offsets")
    short = _read_array(buf, "short")
    if buf.read(1):
        raise DatasetFormatError("trailing bytes after last section")

    interactions = [Interaction(*map(int, row)) for row in inter]
    L = manifest.max_long
    train, test = [], []
    for e, (user, ucat, target, is_test, n_long, n_short) in enumerate(header.tolist()):
        long_items = tuple(tuple(r) for r in long_arr[e, L - n_long:].tolist()) if n_long else ()
        short_items = tuple(tuple(r) for r in short[offsets[e]:offsets[e + 1]].tolist())
        if len(short_items) != n_short:
            raise DatasetFormatError("short-term offsets inconsistent")
        ex = Example(user, ucat, long_items, short_items, target, bool(is_test))
        (test if is_test else train).append(ex)
    return Dataset(manifest, interactions, item_category.tolist(), train, test)


def write_dataset(path, ds):
    with open(path, "wb") as fh:
        fh.write(encode_dataset(ds))


def read_dataset(path):
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


def dump_tsv(ds, stream):
    """One example per line: split, user, user category, target, long, short."""
    stream.write("split\tuser\tuser_category\ttarget\tlong_items\tshort_items\n")
    for ex in list(ds.train) + list(ds.test):
        long_s = ",".join(f"{i}:{c}:{d}" for i, c, d in ex.long_items)
        short_s = ",".join(f"{i}:{c}" for i, c in ex.short_items)
        split = "test" if ex.is_test else "train"
        stream.write(f"{split}\t{ex.user}\t{ex.user_category}\t{ex.target}\t{long_s}\t{short_s}\n")


def summarize(ds):
    """Dataset statistics in the layout of the usual Amazon statistics table."""
    m = ds.manifest
    labels = max(m.n_categories - 1, 1)
    return {
        "users": m.n_users,
        "items": m.n_items,
        "categories": m.n_categories,
        "samples": m.n_samples,
        "avg_items_per_category": m.n_items / labels,
        "avg_behaviors_per_item": m.n_samples / max(m.n_items, 1),
        "avg_behaviors_per_user": m.n_samples / max(m.n_users, 1),
        "train_examples": len(ds.train),
        "test_examples": len(ds.test),
    }
