"""MovieLens / BookCrossing ingestion, one-hot profile encoding, and per-user tasks."""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

QUERY_SIZE = 10
SUPPORT_CAP = 64
MIN_INTERACTIONS = 13
MAX_REJECT_FRACTION = 0.01

# MovieLens-1M age bands; ML-100K raw ages are mapped onto them.
AGE_BANDS = (1, 18, 25, 35, 45, 50, 56)
ZIP_BUCKETS = tuple(str(d) for d in range(10))

ML100K_GENRES = (
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western",
)


class DataError(ValueError):
    """Raised for unreadable datasets or invalid encoding requests."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    rating: int
    timestamp: int


@dataclass
class RawDataset:
    schema: str
    users: dict[str, dict[str, object]]
    items: dict[str, dict[str, object]]
    interactions: list[Interaction]
    rating_range: tuple[int, int]
    rejected: int = 0
    dropped: int = 0

    @property
    def n_levels(self) -> int:
        lo, hi = self.rating_range
        return hi - lo + 1

    def validate(self) -> None:
        lo, hi = self.rating_range
        for it in self.interactions:
            if it.user not in self.users or it.item not in self.items:
                raise DataError(f"dangling interaction {it}")
            if not lo <= it.rating <= hi:
                raise DataError(f"rating out of range in {it}")


def _id_key(x: str):
    return (0, int(x), "") if x.isdigit() else (1, 0, x)


def _year(text: str) -> str:
    m = re.search(r"(\d{4})", text or "")
    return m.group(1) if m else "unknown"


class _Rows:
    """Counts rows that fail to parse; aborts when too many do."""

    def __init__(self, label: str):
        self.label = label
        self.total = 0
        self.bad = 0

    def reject(self, line, why: str) -> None:
        self.bad += 1
        log.debug("%s: rejected row %r (%s)", self.label, line, why)

    def finish(self) -> int:
        if self.total == 0:
            log.warning("%s: no rows", self.label)
        elif self.bad:
            log.warning("%s: rejected %d of %d rows", self.label, self.bad, self.total)
            if self.bad > MAX_REJECT_FRACTION * self.total:
                raise DataError(f"{self.label}: {self.bad} of {self.total} rows unparseable")
        return self.bad


def _read_lines(path: Path, encoding: str = "latin-1") -> list[str]:
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset file: {path}")
    with open(path, encoding=encoding) as fh:
        return [ln.rstrip("\r\n") for ln in fh if ln.strip()]


def _parse_ratings(lines: Iterable[str], sep: str, rating_range, label: str):
    lo, hi = rating_range
    rows = _Rows(label)
    out = []
    for line in lines:
        rows.total += 1
        parts = line.split(sep) if sep != "ws" else line.split()
        try:
            user, item, rating, ts = parts[0].strip(), parts[1].strip(), int(parts[2]), int(parts[3])
        except (IndexError, ValueError):
            rows.reject(line, "malformed")
            continue
        if not lo <= rating <= hi:
            rows.reject(line, "rating out of range")
            continue
        out.append(Interaction(user, item, rating, ts))
    return out, rows.finish()


def _crossref(users, items, interactions):
    kept = [it for it in interactions if it.user in users and it.item in items]
    return kept, len(interactions) - len(kept)


def _load_ml100k(root: Path) -> RawDataset:
    users = {}
    for line in _read_lines(root / "u.user"):
        uid, age, gender, occ, zipc = line.split("|")[:5]
        users[uid] = {"age": age, "gender": gender, "occupation": occ, "zip": zipc}
    genre_file = root / "u.genre"
    genres = list(ML100K_GENRES)
    if genre_file.is_file():
        pairs = [ln.split("|") for ln in _read_lines(genre_file)]
        genres = [name for name, idx in sorted(pairs, key=lambda p: int(p[1]))]
    items = {}
    for line in _read_lines(root / "u.item"):
        parts = line.split("|")
        flags = parts[5:5 + len(genres)]
        tags = [g for g, f in zip(genres, flags) if f.strip() == "1"] or ["unknown"]
        items[parts[0]] = {"year": _year(parts[2]), "genre": tags}
    inter, bad = _parse_ratings(_read_lines(root / "u.data"), "ws", (1, 5), "u.data")
    inter, dropped = _crossref(users, items, inter)
    return RawDataset("ml100k", users, items, inter, (1, 5), rejected=bad, dropped=dropped)


def _load_ml1m(root: Path) -> RawDataset:
    users = {}
    for line in _read_lines(root / "users.dat"):
        uid, gender, age, occ, zipc = line.split("::")[:5]
        users[uid] = {"age": age, "gender": gender, "occupation": occ, "zip": zipc}
    items = {}
    for line in _read_lines(root / "movies.dat"):
        mid, title, genre = line.split("::")[:3]
        m = re.search(r"\((\d{4})\)\s*$", title)
        items[mid] = {"year": m.group(1) if m else "unknown", "genre": genre.split("|") or ["unknown"]}
    inter, bad = _parse_ratings(_read_lines(root / "ratings.dat"), "::", (1, 5), "ratings.dat")
    inter, dropped = _crossref(users, items, inter)
    return RawDataset("ml1m", users, items, inter, (1, 5), rejected=bad, dropped=dropped)


def _read_bx(path: Path) -> list[list[str]]:
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset file: {path}")
    with open(path, encoding="latin-1", newline="") as fh:
        rows = list(csv.reader(fh, delimiter=";", quotechar='"', escapechar="\\"))
    return [r for r in rows[1:] if r]


def _load_bookcrossing(root: Path) -> RawDataset:
    users = {}
    for row in _read_bx(root / "BX-Users.csv"):
        uid, location = row[0], row[1] if len(row) > 1 else ""
        age = row[2] if len(row) > 2 else ""
        try:
            age_v = float(age)
        except ValueError:
            continue
        if not 5 <= age_v <= 100:
            continue
        country = location.split(",")[-1].strip() or "unknown"
        users[uid] = {"age": str(int(age_v)), "location": country}
    items = {}
    for row in _read_bx(root / "BX-Books.csv"):
        if len(row) < 5:
            continue
        items[row[0]] = {"year": _year(row[3]), "author": row[2].strip() or "unknown",
                         "publisher": row[4].strip() or "unknown"}
    rows = _Rows("BX-Book-Ratings.csv")
    inter = []
    implicit = 0
    for order, row in enumerate(_read_bx(root / "BX-Book-Ratings.csv")):
        rows.total += 1
        try:
            uid, isbn, rating = row[0], row[1], int(row[2])
        except (IndexError, ValueError):
            rows.reject(row, "malformed")
            continue
        if rating == 0:
            implicit += 1
            continue
        if not 1 <= rating <= 10:
            rows.reject(row, "rating out of range")
            continue
        # No timestamps in this dataset: file order stands in for time.
        inter.append(Interaction(uid, isbn, rating, order))
    bad = rows.finish()
    inter, dropped = _crossref(users, items, inter)
    return RawDataset("bookcrossing", users, items, inter, (1, 10), rejected=bad,
                      dropped=dropped + implicit)


_LOADERS = {"ml100k": _load_ml100k, "ml1m": _load_ml1m, "bookcrossing": _load_bookcrossing}


def load_movielens(directory, schema: str = "ml100k") -> RawDataset:
    """Load a dataset directory in one of the supported layouts.

    Rows that fail to parse (or carry an out-of-range rating) are counted in
    ``rejected``; more than 1% of them is fatal. Interactions pointing at
    unknown users/items, and BookCrossing's implicit zero ratings, are
    counted in ``dropped``.
    """
    if schema not in _LOADERS:
        raise ConfigError(f"unknown schema {schema!r}; expected one of {sorted(_LOADERS)}")
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    raw = _LOADERS[schema](root)
    if not raw.interactions:
        log.warning("%s at %s has no interactions", schema, root)
    return raw


# --- encoding ---------------------------------------------------------------

def age_band(value) -> str:
    age = int(float(value))
    band = AGE_BANDS[0]
    for b in AGE_BANDS:
        if age >= b:
            band = b
    return str(band)


def zip_bucket(value) -> str:
    s = str(value).strip()
    # Non-US codes (e.g. Canadian) have no leading digit; they share bucket 0.
    return s[0] if s[:1].isdigit() else "0"


def _value_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


@dataclass
class ContentBlock:
    name: str
    categories: tuple[str, ...]
    multi: bool = False

    @property
    def size(self) -> int:
        return len(self.categories)

    def encode(self, values) -> np.ndarray:
        vec = np.zeros(self.size)
        index = {c: k for k, c in enumerate(self.categories)}
        for v in ([values] if isinstance(values, str) else values):
            vec[index[v]] = 1.0
        return vec


@dataclass
class EncodedProfile:
    """One-hot (or multi-hot) blocks in fixed content order."""

    key: str
    blocks: tuple[tuple[str, np.ndarray], ...]
    sensitive_index: int | None = None
    sensitive_label: int | None = None

    def block(self, name: str) -> np.ndarray:
        for n, v in self.blocks:
            if n == name:
                return v
        raise KeyError(name)

    def flip_sensitive(self) -> "EncodedProfile":
        if self.sensitive_index is None:
            raise ConfigError("profile has no sensitive block")
        name, vec = self.blocks[self.sensitive_index]
        if vec.size != 2:
            raise ConfigError("counterfactual flip needs a binary sensitive attribute")
        blocks = list(self.blocks)
        blocks[self.sensitive_index] = (name, vec[::-1].copy())
        label = None if self.sensitive_label is None else 1 - self.sensitive_label
        return EncodedProfile(self.key, tuple(blocks), self.sensitive_index, label)


@dataclass
class FeatureSpace:
    user_blocks: list[ContentBlock]
    item_blocks: list[ContentBlock]
    sensitive: str
    n_levels: int
    rating_min: int = 1

    @property
    def sensitive_block(self) -> ContentBlock:
        return next(b for b in self.user_blocks if b.name == self.sensitive)

    @property
    def n_classes(self) -> int:
        return self.sensitive_block.size


def _user_transforms(raw: RawDataset, sensitive: str) -> dict:
    tf = {}
    if raw.schema in ("ml100k", "ml1m") or (raw.users and "zip" in next(iter(raw.users.values()))):
        tf["age"] = age_band
        tf["zip"] = zip_bucket
    if raw.schema == "bookcrossing" and sensitive == "age":
        ages = sorted(int(u["age"]) for u in raw.users.values())
        median = float(np.median(ages)) if ages else 0.0
        tf["age"] = lambda v, m=median: "young" if int(v) <= m else "old"
    return tf


_FIXED_CATEGORIES = {"age": tuple(str(b) for b in AGE_BANDS), "zip": ZIP_BUCKETS}


def _blocks(records: dict, transforms: dict, fixed: dict) -> list[ContentBlock]:
    names = sorted({k for r in records.values() for k in r})
    blocks = []
    for name in names:
        multi = any(not isinstance(r.get(name), str) for r in records.values() if name in r)
        seen = set()
        for r in records.values():
            v = r.get(name)
            vals = [v] if isinstance(v, str) else list(v or [])
            seen.update(transforms.get(name, str)(x) for x in vals)
        cats = fixed.get(name) if name in transforms and name in fixed else None
        if cats is None or not seen <= set(cats):
            cats = tuple(sorted(seen, key=_value_key))
        blocks.append(ContentBlock(name, tuple(cats), multi))
    return blocks


def build_feature_space(raw: RawDataset, sensitive: str = "gender") -> FeatureSpace:
    tf = _user_transforms(raw, sensitive)
    user_blocks = _blocks(raw.users, tf, _FIXED_CATEGORIES)
    names = [b.name for b in user_blocks]
    if sensitive not in names:
        raise ConfigError(f"unknown sensitive attribute {sensitive!r}; user contents are {names}")
    space = FeatureSpace(user_blocks, _blocks(raw.items, {}, {}), sensitive,
                         raw.n_levels, raw.rating_range[0])
    observed = {tf.get(sensitive, str)(u[sensitive]) for u in raw.users.values()}
    if len(observed) < 2:
        raise ConfigError(f"sensitive attribute {sensitive!r} has fewer than two observed values")
    return space


def _encode(key, record, blocks, transforms, sensitive=None):
    out = []
    sidx = label = None
    for k, b in enumerate(blocks):
        v = record.get(b.name)
        if v is None:
            vals = []
        else:
            f = transforms.get(b.name, str)
            vals = [f(v)] if isinstance(v, str) else [f(x) for x in v]
        vec = b.encode(vals)
        out.append((b.name, vec))
        if b.name == sensitive:
            sidx, label = k, int(np.argmax(vec))
    return EncodedProfile(key, tuple(out), sidx, label)


def encode_users(raw: RawDataset, sensitive: str = "gender",
                 space: FeatureSpace | None = None) -> list[EncodedProfile]:
    """Encode every user, sorted by id; the sensitive block also yields ``a_u``."""
    space = space or build_feature_space(raw, sensitive)
    tf = _user_transforms(raw, sensitive)
    return [_encode(uid, raw.users[uid], space.user_blocks, tf, space.sensitive)
            for uid in sorted(raw.users, key=_id_key)]


def encode_items(raw: RawDataset, space: FeatureSpace) -> list[EncodedProfile]:
    return [_encode(iid, raw.items[iid], space.item_blocks, {})
            for iid in sorted(raw.items, key=_id_key)]


class ItemTable:
    """Row-stacked item feature blocks; tasks refer to items by row index."""

    def __init__(self, profiles: Sequence[EncodedProfile]):
        self.keys = [p.key for p in profiles]
        self.row = {k: n for n, k in enumerate(self.keys)}
        names = [n for n, _ in profiles[0].blocks] if profiles else []
        self.blocks = {n: np.stack([p.block(n) for p in profiles]) for n in names}

    def __len__(self) -> int:
        return len(self.keys)

    def features(self, rows: np.ndarray) -> dict[str, np.ndarray]:
        return {n: m[rows] for n, m in self.blocks.items()}


# --- splits and tasks -------------------------------------------------------

@dataclass
class SplitSpec:
    train: list[str]
    valid: list[str]
    test: list[str]
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0


def split_users(profiles, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitSpec:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    keys = sorted((p.key if isinstance(p, EncodedProfile) else str(p) for p in profiles), key=_id_key)
    n = len(keys)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [keys[k] for k in order]
    n_train = math.floor(n * ratios[0] + 1e-9)
    n_valid = math.floor(n * ratios[1] + 1e-9)
    return SplitSpec(shuffled[:n_train], shuffled[n_train:n_train + n_valid],
                     shuffled[n_train + n_valid:], tuple(ratios), seed)


class SensitiveLabelAccess(RuntimeError):
    pass


@dataclass
class UserTask:
    """A user's support/query interactions, with items as ItemTable rows.

    Every read of ``sensitive_label`` is counted; ``blind()`` returns a view
    on which such a read raises.
    """

    user_id: str
    user: EncodedProfile
    support_items: np.ndarray
    support_ratings: np.ndarray
    query_items: np.ndarray
    query_ratings: np.ndarray
    support_times: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    query_times: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    label_reads: int = 0
    _blind: bool = False

    @property
    def sensitive_label(self) -> int:
        if self._blind:
            raise SensitiveLabelAccess(f"sensitive label of user {self.user_id} read on a blind view")
        self.label_reads += 1
        return self.user.sensitive_label

    def blind(self) -> "UserTask":
        profile = EncodedProfile(self.user.key, self.user.blocks, self.user.sensitive_index, None)
        return UserTask(self.user_id, profile, self.support_items, self.support_ratings,
                        self.query_items, self.query_ratings, self.support_times,
                        self.query_times, 0, True)


@dataclass
class TaskSet:
    space: FeatureSpace
    items: ItemTable
    train: list[UserTask]
    valid: list[UserTask]
    test: list[UserTask]
    dropped_users: int = 0


def _user_task(uid, profile, history, items: ItemTable) -> UserTask:
    history = sorted(history, key=lambda it: (it.timestamp, _id_key(it.item)))
    query = history[-QUERY_SIZE:]
    support = history[:-QUERY_SIZE][-SUPPORT_CAP:]

    def arrays(rows):
        return (np.array([items.row[it.item] for it in rows], dtype=np.int64),
                np.array([it.rating for it in rows], dtype=np.int64),
                np.array([it.timestamp for it in rows], dtype=np.int64))

    si, sr, st = arrays(support)
    qi, qr, qt = arrays(query)
    return UserTask(uid, profile, si, sr, qi, qr, st, qt)


def build_tasks(raw: RawDataset, profiles: Sequence[EncodedProfile], split: SplitSpec,
                items: ItemTable | None = None):
    """Return ``(train, valid, test, dropped)`` task lists.

    Per user, the last ``QUERY_SIZE`` interactions by (timestamp, item id)
    form the query set and up to ``SUPPORT_CAP`` preceding ones the support
    set. Users with fewer than ``MIN_INTERACTIONS`` are dropped.
    """
    if items is None:
        raise ValueError("an ItemTable is required")
    by_user: dict[str, list[Interaction]] = {}
    for it in raw.interactions:
        by_user.setdefault(it.user, []).append(it)
    prof = {p.key: p for p in profiles}
    dropped = 0
    out = []
    for ids in (split.train, split.valid, split.test):
        tasks = []
        for uid in sorted(ids, key=_id_key):
            hist = by_user.get(uid, [])
            if len(hist) < MIN_INTERACTIONS:
                dropped += 1
                continue
            tasks.append(_user_task(uid, prof[uid], hist, items))
        out.append(tasks)
    if dropped:
        log.info("dropped %d users with fewer than %d interactions", dropped, MIN_INTERACTIONS)
    return out[0], out[1], out[2], dropped


def prepare(raw: RawDataset, sensitive: str = "gender", ratios=(0.7, 0.1, 0.2), seed: int = 0) -> TaskSet:
    """Encode, split, and build tasks in one go."""
    space = build_feature_space(raw, sensitive)
    users = encode_users(raw, sensitive, space)
    items = ItemTable(encode_items(raw, space))
    counts: dict[str, int] = {}
    for it in raw.interactions:
        counts[it.user] = counts.get(it.user, 0) + 1
    retained = [p for p in users if counts.get(p.key, 0) >= MIN_INTERACTIONS]
    split = split_users(retained, ratios, seed)
    train, valid, test, _ = build_tasks(raw, users, split, items)
    return TaskSet(space, items, train, valid, test, len(users) - len(retained))
