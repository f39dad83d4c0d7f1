"""Synthetic MovieLens-style data with a tunable sensitive-attribute signal.

Ratings are ``center + taste . item / sqrt(d) + bias * (2a - 1) * <item, u_b>
+ noise``, rounded and clipped to the rating range. ``u_b`` lies in the span
of the first few latent axes, and item genres are the sign pattern of those
axes, so genre features carry the attribute-dependent part of a rating.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ML100K_GENRES, Interaction, RawDataset

OCCUPATIONS = ("artist", "doctor", "educator", "engineer", "lawyer", "librarian",
               "programmer", "student", "technician", "writer")
_MONTHS = ("Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")


@dataclass
class SynthConfig:
    n_users: int = 1000
    n_items: int = 400
    ratings_per_user: int = 30
    n_rating_levels: int = 5
    bias_strength: float = 0.75
    latent_dim: int = 8
    n_genres: int = 6
    bias_axes: int = 3
    taste_scale: float = 1.0
    bias_scale: float = 1.0
    popularity_scale: float = 0.3
    noise: float = 0.4
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.bias_strength <= 1.0:
            raise ValueError("bias_strength must lie in [0, 1]")
        if self.ratings_per_user < 13:
            raise ValueError("ratings_per_user must be at least 13")
        if self.ratings_per_user > self.n_items:
            raise ValueError("ratings_per_user cannot exceed n_items")
        if not 1 <= self.n_genres <= min(self.latent_dim, len(ML100K_GENRES) - 1):
            raise ValueError("n_genres must be between 1 and min(latent_dim, 18)")
        if not 1 <= self.bias_axes <= self.latent_dim:
            raise ValueError("bias_axes must be between 1 and latent_dim")


def generate(cfg: SynthConfig) -> RawDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, m, d = cfg.n_users, cfg.n_items, cfg.latent_dim

    attr = np.zeros(n, dtype=np.int64)
    attr[n // 2:] = 1
    rng.shuffle(attr)
    taste = rng.normal(size=(n, d))
    ages = rng.integers(15, 65, size=n)
    occ = rng.integers(0, len(OCCUPATIONS), size=n)
    zips = rng.integers(0, 100000, size=n)

    latent = rng.normal(size=(m, d))
    popularity = cfg.popularity_scale * rng.normal(size=m)
    years = rng.integers(1950, 2000, size=m)
    direction = np.zeros(d)
    direction[:cfg.bias_axes] = 1.0 / np.sqrt(cfg.bias_axes)
    tilt = latent @ direction

    users = {}
    for u in range(n):
        users[str(u + 1)] = {"age": str(int(ages[u])), "gender": "FM"[attr[u]],
                             "occupation": OCCUPATIONS[occ[u]], "zip": f"{zips[u]:05d}"}
    items = {}
    names = ML100K_GENRES[1:1 + cfg.n_genres]
    for i in range(m):
        signs = latent[i, :cfg.n_genres] > 0
        if not signs.any():
            signs[np.argmax(latent[i, :cfg.n_genres])] = True
        items[str(i + 1)] = {"year": str(int(years[i])), "genre": [g for g, s in zip(names, signs) if s]}

    center = (cfg.n_rating_levels + 1) / 2.0
    sign = 2.0 * attr - 1.0
    interactions = []
    for u in range(n):
        chosen = rng.choice(m, size=cfg.ratings_per_user, replace=False)
        times = np.sort(rng.integers(880_000_000, 890_000_000, size=cfg.ratings_per_user))
        score = (center + popularity[chosen]
                 + cfg.taste_scale * latent[chosen] @ taste[u] / np.sqrt(d)
                 + cfg.bias_scale * cfg.bias_strength * sign[u] * tilt[chosen]
                 + cfg.noise * rng.normal(size=len(chosen)))
        ratings = np.clip(np.rint(score), 1, cfg.n_rating_levels).astype(np.int64)
        for i, r, t in zip(chosen, ratings, times):
            interactions.append(Interaction(str(u + 1), str(int(i) + 1), int(r), int(t)))
    return RawDataset("ml100k", users, items, interactions, (1, cfg.n_rating_levels))


def write_ml100k(raw: RawDataset, directory) -> Path:
    """Write ``u.user``, ``u.item``, ``u.genre`` and ``u.data`` in ML-100K layout."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "u.user", "w", encoding="latin-1") as fh:
        for uid, u in raw.users.items():
            fh.write(f"{uid}|{u['age']}|{u['gender']}|{u['occupation']}|{u['zip']}\n")
    with open(out / "u.genre", "w", encoding="latin-1") as fh:
        for k, g in enumerate(ML100K_GENRES):
            fh.write(f"{g}|{k}\n")
    with open(out / "u.item", "w", encoding="latin-1") as fh:
        for iid, it in raw.items.items():
            flags = "|".join("1" if g in it["genre"] else "0" for g in ML100K_GENRES)
            month = _MONTHS[int(iid) % 12]
            fh.write(f"{iid}|Synthetic movie {iid} ({it['year']})|01-{month}-{it['year']}||"
                     f"http://example.invalid/{iid}|{flags}\n")
    with open(out / "u.data", "w", encoding="latin-1") as fh:
        for it in raw.interactions:
            fh.write(f"{it.user}\t{it.item}\t{it.rating}\t{it.timestamp}\n")
    return out


def genre_profile_features(raw: RawDataset) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Per-user mean rating within each genre (0 where unrated), centered per user.

    Returns ``(user_ids, features, labels)`` with labels 1 for "M".
    """
    genres = sorted({g for it in raw.items.values() for g in it["genre"]})
    gidx = {g: k for k, g in enumerate(genres)}
    uids = sorted(raw.users, key=int)
    row = {u: k for k, u in enumerate(uids)}
    total = np.zeros((len(uids), len(genres)))
    count = np.zeros_like(total)
    user_mean = np.zeros(len(uids))
    user_n = np.zeros(len(uids))
    for it in raw.interactions:
        user_mean[row[it.user]] += it.rating
        user_n[row[it.user]] += 1
    user_mean /= np.maximum(user_n, 1)
    for it in raw.interactions:
        r = row[it.user]
        for g in raw.items[it.item]["genre"]:
            total[r, gidx[g]] += it.rating - user_mean[r]
            count[r, gidx[g]] += 1
    feats = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    labels = np.array([1 if raw.users[u]["gender"] == "M" else 0 for u in uids])
    return uids, feats, labels


def proxy_attacker_auc(raw: RawDataset, train_fraction: float = 0.7, seed: int = 0) -> float:
    """AUC of a logistic attacker on rating-history features (no profile features)."""
    from .metrics import attacker_auc

    _, x, y = genre_profile_features(raw)
    order = np.random.default_rng(seed).permutation(len(y))
    cut = int(len(y) * train_fraction)
    tr, te = order[:cut], order[cut:]
    return attacker_auc(x[tr], y[tr], x[te], y[te])
