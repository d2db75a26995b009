"""Interaction loading, temporal splitting, task sampling and the synthetic generator."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)

CLICK_TOKENS = frozenset({"click", "pv", "1"})
HEADER = ("user_id", "item_id", "category_id", "timestamp", "behavior")


class MalformedRowError(ValueError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class SyntheticConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    category_id: int
    timestamp: int
    behavior: str  # "click" or "other"


@dataclass(frozen=True)
class Instance:
    user_id: int
    target_item: tuple  # (item_id, category_id)
    history: tuple  # ((item_id, category_id), ...) oldest first
    label: int
    interest: int = -1  # ground-truth interest for synthetic data, -1 if unknown

    def to_json(self):
        return {"user_id": self.user_id, "target_item": list(self.target_item),
                "history": [list(h) for h in self.history], "label": self.label,
                "interest": self.interest}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["user_id"], tuple(obj["target_item"]),
                   tuple(tuple(h) for h in obj["history"]), obj["label"],
                   obj.get("interest", -1))


@dataclass
class Vocab:
    users: dict
    items: dict
    categories: dict
    item_category: np.ndarray  # dense item id -> dense category id

    @property
    def n_items(self):
        return len(self.items)

    @property
    def n_categories(self):
        return len(self.categories)

    def save(self, path):
        payload = {"users": self.users, "items": self.items, "categories": self.categories,
                   "item_category": self.item_category.tolist()}
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        obj = json.loads(Path(path).read_text())
        return cls(obj["users"], obj["items"], obj["categories"],
                   np.asarray(obj["item_category"], dtype=np.int64))


@dataclass
class Interactions:
    records: list
    vocab: Vocab
    n_duplicates: int = 0


@dataclass
class SplitDataset:
    train: list
    valid: list
    test: list
    n_items: int
    n_categories: int
    info: dict = field(default_factory=dict)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("train", "valid", "test"):
            with open(directory / f"{name}.jsonl", "w") as fh:
                for inst in getattr(self, name):
                    fh.write(json.dumps(inst.to_json()) + "\n")
        meta = {"n_items": self.n_items, "n_categories": self.n_categories, "info": self.info}
        (directory / "split.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "split.json").read_text())
        parts = {}
        for name in ("train", "valid", "test"):
            with open(directory / f"{name}.jsonl") as fh:
                parts[name] = [Instance.from_json(json.loads(line)) for line in fh if line.strip()]
        return cls(n_items=meta["n_items"], n_categories=meta["n_categories"],
                   info=meta.get("info", {}), **parts)


@dataclass
class TaskBatch:
    d_in: list
    d_out: list


# ---------------------------------------------------------------------------
# loading

def _parse_int(text, line, column):
    try:
        return int(text)
    except ValueError:
        raise MalformedRowError(line, f"{column} is not an integer: {text!r}") from None


def load_interactions(path, format="tsv"):
    """Parse a ``user item category timestamp behavior`` TSV file.

    Ids are re-indexed densely (ascending original id).  Duplicate
    (user, item, timestamp) rows are dropped and counted.
    """
    if format != "tsv":
        raise ValueError(f"unsupported dataset format {format!r}")
    raw = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            cols = line.split("\t")
            if lineno == 1 and tuple(c.strip() for c in cols) == HEADER:
                continue
            if len(cols) != 5:
                raise MalformedRowError(lineno, f"expected 5 tab-separated columns, got {len(cols)}")
            u = _parse_int(cols[0], lineno, "user_id")
            i = _parse_int(cols[1], lineno, "item_id")
            c = _parse_int(cols[2], lineno, "category_id")
            ts = _parse_int(cols[3], lineno, "timestamp")
            if min(u, i, c) < 0:
                raise MalformedRowError(lineno, "ids must be non-negative")
            behavior = "click" if cols[4].strip().lower() in CLICK_TOKENS else "other"
            raw.append((u, i, c, ts, behavior))

    users = {u: k for k, u in enumerate(sorted({r[0] for r in raw}))}
    items = {i: k for k, i in enumerate(sorted({r[1] for r in raw}))}
    cats = {c: k for k, c in enumerate(sorted({r[2] for r in raw}))}

    seen, records, dupes = set(), [], 0
    for u, i, c, ts, b in sorted(raw, key=lambda r: (users[r[0]], r[3], items[r[1]])):
        key = (u, i, ts)
        if key in seen:
            dupes += 1
            continue
        seen.add(key)
        records.append(InteractionRecord(users[u], items[i], cats[c], ts, b))
    if dupes:
        log.warning("dropped %d duplicate (user, item, timestamp) rows", dupes)

    item_category = np.zeros(len(items), dtype=np.int64)
    assigned = np.zeros(len(items), dtype=bool)
    for r in records:
        if not assigned[r.item_id]:
            item_category[r.item_id] = r.category_id
            assigned[r.item_id] = True
    vocab = Vocab({str(k): v for k, v in users.items()}, {str(k): v for k, v in items.items()},
                  {str(k): v for k, v in cats.items()}, item_category)
    return Interactions(records, vocab, dupes)


def _sample_negative(rng, n_items, clicked):
    if len(clicked) >= n_items:
        raise ValueError("user has clicked every item; cannot sample a negative")
    while True:
        j = int(rng.integers(n_items))
        if j not in clicked:
            return j


def build_split(interactions, max_seq_len=100, seed=0):
    """Temporal leave-last-out split with one sampled negative per positive.

    Per user the last click is the test positive, the second-to-last the
    validation positive, and every earlier click with a non-empty history a
    training positive.  Histories keep only clicks strictly earlier than the
    target, truncated to the most recent ``max_seq_len``.
    """
    rng = np.random.default_rng(seed)
    vocab = interactions.vocab
    item_cat = vocab.item_category
    by_user = {}
    for r in interactions.records:
        if r.behavior == "click":
            by_user.setdefault(r.user_id, []).append(r)

    train, valid, test = [], [], []
    dropped = 0
    for user in sorted(by_user):
        clicks = by_user[user]
        if len(clicks) < 3:
            dropped += 1
            continue
        clicked = {r.item_id for r in clicks}

        def pair(t):
            target = clicks[t]
            hist = [(r.item_id, r.category_id) for r in clicks[:t] if r.timestamp < target.timestamp]
            hist = tuple(hist[-max_seq_len:])
            if not hist:
                return []
            neg = _sample_negative(rng, vocab.n_items, clicked)
            return [Instance(user, (target.item_id, target.category_id), hist, 1),
                    Instance(user, (neg, int(item_cat[neg])), hist, 0)]

        n = len(clicks)
        test.extend(pair(n - 1))
        valid.extend(pair(n - 2))
        for t in range(1, n - 2):
            train.extend(pair(t))
    if not (train or valid or test):
        log.warning("build_split produced an empty dataset")
    info = {"dropped_users": dropped, "max_seq_len": max_seq_len, "seed": seed}
    return SplitDataset(train, valid, test, vocab.n_items, vocab.n_categories, info)


# ---------------------------------------------------------------------------
# tasks

def task_indices(n, in_ratio, batch_size, rng):
    """One epoch of (d_in, d_out) index batches over ``range(n)``.

    The training set is re-partitioned at random into in-bag and out-of-bag
    parts; in-bag batches have ``batch_size`` rows (the last may be short)
    and the out-of-bag part is spread evenly over the same number of steps,
    so both partitions are consumed exactly once.
    """
    if not 0 < in_ratio < 1:
        raise ValueError("in_ratio must lie strictly between 0 and 1")
    if n == 0:
        return
    perm = rng.permutation(n)
    n_in = min(max(int(round(n * in_ratio)), 1), max(n - 1, 1))
    in_part, out_part = perm[:n_in], perm[n_in:]
    steps = math.ceil(n_in / batch_size)
    out_chunks = np.array_split(out_part, steps)
    for s in range(steps):
        yield in_part[s * batch_size:(s + 1) * batch_size], out_chunks[s]


def make_tasks(train, in_ratio, rng, batch_size=128, epochs=1):
    """Stream of TaskBatch over ``epochs`` passes, re-split every epoch."""
    for _ in range(epochs):
        for d_in, d_out in task_indices(len(train), in_ratio, batch_size, rng):
            yield TaskBatch([train[i] for i in d_in], [train[i] for i in d_out])


# ---------------------------------------------------------------------------
# packed arrays

@dataclass
class Batch:
    """Padded array view of a list of instances."""

    item: np.ndarray
    cat: np.ndarray
    hist_item: np.ndarray
    hist_cat: np.ndarray
    mask: np.ndarray
    label: np.ndarray

    def __len__(self):
        return len(self.label)


class PackedDataset:
    """A split stored as padded arrays so batches are cheap index lookups."""

    def __init__(self, instances, max_len=None):
        n = len(instances)
        lens = np.array([len(x.history) for x in instances], dtype=np.int64)
        width = int(lens.max()) if n else 1
        if max_len is not None:
            width = min(width, max_len)
        self.item = np.array([x.target_item[0] for x in instances], dtype=np.int64)
        self.cat = np.array([x.target_item[1] for x in instances], dtype=np.int64)
        self.label = np.array([x.label for x in instances], dtype=np.float64)
        self.hist_item = np.zeros((n, width), dtype=np.int64)
        self.hist_cat = np.zeros((n, width), dtype=np.int64)
        self.lens = np.minimum(lens, width)
        for r, x in enumerate(instances):
            h = x.history[-width:]
            if h:
                self.hist_item[r, :len(h)] = [p[0] for p in h]
                self.hist_cat[r, :len(h)] = [p[1] for p in h]

    def __len__(self):
        return len(self.label)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        width = max(int(self.lens[idx].max()), 1) if len(idx) else 1
        mask = (np.arange(width)[None, :] < self.lens[idx][:, None]).astype(np.float64)
        return Batch(self.item[idx], self.cat[idx], self.hist_item[idx, :width],
                     self.hist_cat[idx, :width], mask, self.label[idx])

    def all(self):
        return self.take(np.arange(len(self)))


def collate(instances):
    return PackedDataset(instances).all()


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SyntheticConfig:
    n_users: int = 100
    n_items: int = 10000
    n_groups: int = 10
    item_group_modulus: int = 10
    pos_per_user: int = 50
    neg_per_user: int = 50
    p_pos_keep: float = 0.5
    p_neg_flip: float = 0.2
    test_fraction: float = 0.1
    history_len: int = 20

    def to_dict(self):
        return asdict(self)


def user_group(i, n_groups=10):
    return i % n_groups


def item_group(j, modulus=10):
    return j % modulus


def generate_synthetic(cfg, rng):
    """Noisy-label user/item group data for the overfitting study.

    Each user gets ``pos_per_user`` items from its own group and
    ``neg_per_user`` from the others; observed labels flip per instance
    (interested kept as clicked with ``p_pos_keep``, non-interested clicked
    with ``p_neg_flip``).  Instances are split train/test at random and each
    instance's history is a sample of that user's *training* clicks,
    excluding the target.  Item category equals item group.
    """
    if cfg.item_group_modulus != cfg.n_groups:
        raise SyntheticConfigError("item groups must match user groups (n_groups)")
    item_ids = np.arange(cfg.n_items)
    groups = item_group(item_ids, cfg.item_group_modulus)
    for g in range(cfg.n_groups):
        inside = int(np.sum(groups == g))
        if inside < cfg.pos_per_user:
            raise SyntheticConfigError(
                f"item group {g} has {inside} items, fewer than pos_per_user={cfg.pos_per_user}")
        if cfg.n_items - inside < cfg.neg_per_user:
            raise SyntheticConfigError("not enough out-of-group items for neg_per_user")

    users, items, labels, interest = [], [], [], []
    for u in range(cfg.n_users):
        g = user_group(u, cfg.n_groups)
        pos = rng.choice(item_ids[groups == g], size=cfg.pos_per_user, replace=False)
        neg = rng.choice(item_ids[groups != g], size=cfg.neg_per_user, replace=False)
        users.extend([u] * (cfg.pos_per_user + cfg.neg_per_user))
        items.extend(pos.tolist() + neg.tolist())
        interest.extend([1] * cfg.pos_per_user + [0] * cfg.neg_per_user)
    users = np.array(users)
    items = np.array(items)
    interest = np.array(interest)
    p_click = np.where(interest == 1, cfg.p_pos_keep, cfg.p_neg_flip)
    labels = (rng.random(len(items)) < p_click).astype(np.int64)

    n = len(items)
    n_test = int(round(n * cfg.test_fraction))
    order = rng.permutation(n)
    is_test = np.zeros(n, dtype=bool)
    is_test[order[:n_test]] = True

    # history pools: each user's observed clicks in the training portion
    pools = {}
    for k in np.flatnonzero((~is_test) & (labels == 1)):
        pools.setdefault(int(users[k]), []).append(int(items[k]))

    pool_lists = []
    for k in range(n):
        pool = pools.get(int(users[k]), [])
        if not is_test[k] and labels[k] == 1:
            pool = [j for j in pool if j != items[k]]
        pool_lists.append(pool)
    sizes = np.array([len(p) for p in pool_lists], dtype=np.int64)
    picks = _kernels.sample_without_replacement(sizes, cfg.history_len,
                                                rng.random((n, cfg.history_len)))

    train, test, skipped = [], [], 0
    for k in range(n):
        chosen = sorted(int(p) for p in picks[k] if p >= 0)
        hist = tuple((pool_lists[k][p], item_group(pool_lists[k][p], cfg.item_group_modulus))
                     for p in chosen)
        if not hist:
            skipped += 1
            continue
        j = int(items[k])
        inst = Instance(int(users[k]), (j, int(groups[j])), hist, int(labels[k]), int(interest[k]))
        (test if is_test[k] else train).append(inst)
    if skipped:
        log.warning("skipped %d synthetic instances with no available history", skipped)
    info = {"synthetic": cfg.to_dict(), "skipped": skipped}
    return SplitDataset(train, [], test, cfg.n_items, cfg.n_groups, info)
