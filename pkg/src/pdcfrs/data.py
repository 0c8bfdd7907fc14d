"""Rating-file parsing, implicit-feedback dataset construction and title/word-vector loading."""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .seeding import stream

log = logging.getLogger(__name__)

_YEAR_SUFFIX = re.compile(r"\(\s*\d{4}\s*\)\s*$")
_NON_ALNUM = re.compile(r"[^0-9a-z]+")


class DataFormatError(ValueError):
    """Raised for malformed input files; message carries the location."""


@dataclass(frozen=True)
class RawRating:
    user_id: str
    item_id: str
    rating: float
    timestamp: Optional[int] = None


@dataclass(frozen=True)
class InteractionDataset:
    """Implicit-feedback dataset with a per-user train/test split.

    ``train`` is an int64 array of shape (n, 3) with columns (user, item, label).
    Rows are grouped by user in ascending user order; within a user, positives
    come first, then the sampled negatives.
    """

    num_users: int
    num_items: int
    train: np.ndarray
    test_positives: Tuple[FrozenSet[int], ...]
    user_positive_sets: Tuple[FrozenSet[int], ...]
    user_ids: Tuple[str, ...]
    item_ids: Tuple[str, ...]
    skipped_users: int = 0
    _offsets: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        counts = np.bincount(self.train[:, 0], minlength=self.num_users) if len(self.train) else np.zeros(self.num_users, dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        object.__setattr__(self, "_offsets", offsets)

    def user_triples(self, user: int) -> np.ndarray:
        return self.train[self._offsets[user]:self._offsets[user + 1]]

    def item_index(self) -> Dict[str, int]:
        return {iid: j for j, iid in enumerate(self.item_ids)}

    def user_index(self) -> Dict[str, int]:
        return {uid: i for i, uid in enumerate(self.user_ids)}

    def interacted(self, user: int) -> FrozenSet[int]:
        return self.user_positive_sets[user] | self.test_positives[user]


def parse_ratings(path, sep: str = "::", encoding: str = "latin-1") -> List[RawRating]:
    """Read ``user<sep>item<sep>rating[<sep>timestamp]`` lines.

    Blank lines are skipped. Anything else that does not match raises
    :class:`DataFormatError` naming the 1-based line number.
    """
    out: List[RawRating] = []
    with open(path, "r", encoding=encoding) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(sep)
            if len(parts) not in (3, 4):
                raise DataFormatError(f"{path}: line {lineno}: expected 3 or 4 fields, got {len(parts)}")
            user, item = parts[0].strip(), parts[1].strip()
            if not user or not item:
                raise DataFormatError(f"{path}: line {lineno}: empty user or item id")
            try:
                rating = float(parts[2])
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno}: non-numeric rating {parts[2]!r}") from None
            ts = None
            if len(parts) == 4:
                try:
                    ts = int(parts[3])
                except ValueError:
                    raise DataFormatError(f"{path}: line {lineno}: non-integer timestamp {parts[3]!r}") from None
            out.append(RawRating(user, item, rating, ts))
    return out


def build_dataset(
    ratings: Sequence[RawRating],
    neg_ratio: int = 4,
    train_frac: float = 0.8,
    rng_seed: int = 0,
    item_ids: Optional[Sequence[str]] = None,
) -> InteractionDataset:
    """Convert ratings to implicit feedback, split per user and sample negatives.

    Every rated item becomes a positive. Each user's deduplicated items are
    shuffled and the first ``round(train_frac * n)`` go to train (at least one
    when the user has any interaction, at most ``n - 1`` when ``n >= 2``).
    ``neg_ratio`` negatives per train positive are drawn without replacement
    from items the user never interacted with.

    ``item_ids`` optionally fixes the item universe (e.g. the full movie
    catalog); otherwise items are indexed in first-appearance order.
    """
    if neg_ratio < 0:
        raise ValueError("neg_ratio must be >= 0")
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must be in (0, 1)")
    if not ratings:
        raise ValueError("at least one rating is required")

    user_map: Dict[str, int] = {}
    if item_ids is not None:
        item_map = {iid: j for j, iid in enumerate(item_ids)}
        if len(item_map) != len(item_ids):
            raise ValueError("duplicate ids in item_ids")
    else:
        item_map = {}
    per_user: List[List[int]] = []
    seen: List[set] = []
    for r in ratings:
        if r.item_id not in item_map:
            if item_ids is not None:
                raise ValueError(f"item {r.item_id!r} not in the supplied item catalog")
            item_map[r.item_id] = len(item_map)
        u = user_map.setdefault(r.user_id, len(user_map))
        if u == len(per_user):
            per_user.append([])
            seen.append(set())
        j = item_map[r.item_id]
        # keep first occurrence only
        if j not in seen[u]:
            seen[u].add(j)
            per_user[u].append(j)

    num_users, num_items = len(user_map), len(item_map)
    split_rng = stream(rng_seed, "split")
    neg_rng = stream(rng_seed, "negatives")
    rows = []
    test_pos: List[FrozenSet[int]] = []
    train_pos: List[FrozenSet[int]] = []
    for u in range(num_users):
        items = np.asarray(per_user[u], dtype=np.int64)
        perm = split_rng.permutation(len(items))
        n = len(items)
        n_train = int(round(train_frac * n))
        n_train = min(max(n_train, 1), n - 1) if n >= 2 else n
        tr = np.sort(items[perm[:n_train]])
        te = items[perm[n_train:]]
        pool_mask = np.ones(num_items, dtype=bool)
        pool_mask[items] = False
        pool = np.flatnonzero(pool_mask)
        n_neg = min(neg_ratio * len(tr), len(pool))
        neg = np.sort(neg_rng.choice(pool, size=n_neg, replace=False)) if n_neg else np.empty(0, dtype=np.int64)
        block = np.empty((len(tr) + len(neg), 3), dtype=np.int64)
        block[:, 0] = u
        block[: len(tr), 1] = tr
        block[: len(tr), 2] = 1
        block[len(tr):, 1] = neg
        block[len(tr):, 2] = 0
        rows.append(block)
        train_pos.append(frozenset(tr.tolist()))
        test_pos.append(frozenset(te.tolist()))

    inv_items = [None] * num_items
    for iid, j in item_map.items():
        inv_items[j] = iid
    inv_users = [None] * num_users
    for uid, i in user_map.items():
        inv_users[i] = uid
    train = np.concatenate(rows) if rows else np.empty((0, 3), dtype=np.int64)
    return InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train=train,
        test_positives=tuple(test_pos),
        user_positive_sets=tuple(train_pos),
        user_ids=tuple(inv_users),
        item_ids=tuple(inv_items),
    )


def subsample_users(ratings: Sequence[RawRating], max_users: int, rng_seed: int = 0) -> List[RawRating]:
    """Keep the ratings of ``max_users`` users chosen uniformly at random."""
    users = sorted({r.user_id for r in ratings})
    if len(users) <= max_users:
        return list(ratings)
    rng = stream(rng_seed, "subsample")
    keep = set(rng.choice(np.array(users, dtype=object), size=max_users, replace=False).tolist())
    return [r for r in ratings if r.user_id in keep]


def tokenize_title(title: str) -> List[str]:
    """Lowercase, strip a trailing ``(YYYY)`` and split on non-alphanumeric runs."""
    title = _YEAR_SUFFIX.sub("", title.strip())
    return [t for t in _NON_ALNUM.split(title.lower()) if t]


def load_titles(path, sep: str = "::", encoding: str = "latin-1") -> Dict[str, List[str]]:
    """Parse a ``ItemID<sep>Title<sep>Genres`` file into item id -> title tokens."""
    titles: Dict[str, List[str]] = {}
    with open(path, "r", encoding=encoding) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            parts = line.split(sep)
            if len(parts) < 2:
                raise DataFormatError(f"{path}: line {lineno}: expected at least id and title")
            titles[parts[0].strip()] = tokenize_title(parts[1])
    return titles


def build_catalog(dataset: InteractionDataset, titles: Dict[str, List[str]]) -> List[List[str]]:
    """Item index -> token list; items without a title get an empty list."""
    return [list(titles.get(iid, [])) for iid in dataset.item_ids]


@dataclass(frozen=True)
class WordVectorTable:
    vectors: Dict[str, np.ndarray]
    dim: int

    def __len__(self):
        return len(self.vectors)

    def get(self, token: str) -> Optional[np.ndarray]:
        return self.vectors.get(token)


def load_word_vectors(path, encoding: str = "utf-8") -> WordVectorTable:
    """Load a GloVe-style ``token v1 ... vd`` text file."""
    vectors: Dict[str, np.ndarray] = {}
    dim = 0
    with open(path, "r", encoding=encoding) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if not values:
                raise DataFormatError(f"{path}: line {lineno}: token {token!r} has no vector")
            if dim == 0:
                dim = len(values)
            elif len(values) != dim:
                raise DataFormatError(
                    f"{path}: line {lineno}: token {token!r} has dimension {len(values)}, expected {dim}")
            try:
                vectors[token] = np.asarray([float(v) for v in values], dtype=np.float64)
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno}: non-numeric value for token {token!r}") from None
    return WordVectorTable(vectors=vectors, dim=dim)


def load_similarity_csv(path, item_ids: Sequence[str]) -> np.ndarray:
    """Read a square similarity CSV (header row and first column hold item ids).

    Returns a dense matrix over ``item_ids``; pairs missing from the file get 0,
    the diagonal defaults to 1. Values outside [-1, 1] raise.
    """
    index = {iid: j for j, iid in enumerate(item_ids)}
    n = len(item_ids)
    sim = np.zeros((n, n))
    np.fill_diagonal(sim, 1.0)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return sim
        cols = [index.get(c.strip()) for c in header[1:]]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            r = index.get(row[0].strip())
            if len(row) - 1 != len(cols):
                raise DataFormatError(f"{path}: line {lineno}: expected {len(cols)} values")
            for c, raw in zip(cols, row[1:]):
                v = float(raw)
                if not -1.0 <= v <= 1.0:
                    raise DataFormatError(f"{path}: line {lineno}: similarity {v} outside [-1, 1]")
                if r is not None and c is not None:
                    sim[r, c] = v
    return sim
