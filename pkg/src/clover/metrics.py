"""Accuracy and fairness metrics: MAE, NDCG@k, attacker AUC, CF gap, GF gap."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import ItemTable, UserTask, _id_key
from .model import ModelParams, user_embed
from .numerics import Tensor, softmax
from .trainer import TrainerConfig, finetune_test, predict_task, _no_grad_view

HEADLINE = ("MAE", "NDCG", "AUC", "CF", "GF")


class MetricError(ValueError):
    pass


def mae(pred, truth) -> float:
    """Mean absolute error.

    Flat arrays give the plain mean; sequences of per-user arrays are
    averaged within each user first, then across users.
    """
    if len(pred) == 0 or len(pred) != len(truth):
        raise MetricError("mae needs equal, non-zero lengths")
    if np.ndim(pred[0]) == 0:
        return float(np.mean(np.abs(np.asarray(pred, float) - np.asarray(truth, float))))
    return float(np.mean([mae(p, t) for p, t in zip(pred, truth)]))


def dcg(gains: Sequence[float], k: int) -> float:
    g = np.asarray(gains[:k], dtype=np.float64)
    return float(np.sum((2.0 ** g - 1.0) / np.log2(np.arange(2, len(g) + 2))))


def ndcg_at_k(ranked_truth: Sequence[float], k: int = 3, pool: Sequence[float] | None = None) -> float:
    """NDCG of true ratings listed in predicted order.

    The ideal ordering is taken from ``pool`` (default: the same ratings).
    """
    if len(ranked_truth) < k:
        raise MetricError(f"need at least {k} items, got {len(ranked_truth)}")
    pool = ranked_truth if pool is None else pool
    ideal = dcg(sorted(pool, reverse=True), k)
    return dcg(list(ranked_truth), k) / ideal if ideal > 0 else 0.0


def rank_by_score(scores: np.ndarray, item_keys: Sequence) -> np.ndarray:
    """Indices sorted by descending score; ties go to the smaller item id."""
    keys = [_id_key(str(k)) for k in item_keys]
    return np.array(sorted(range(len(scores)), key=lambda i: (-scores[i], keys[i])), dtype=np.int64)


def ndcg_from_scores(scores, truth, item_keys, k: int = 3) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    order = rank_by_score(np.asarray(scores, dtype=np.float64), item_keys)
    return ndcg_at_k(truth[order], k, pool=truth)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as one half; NaN if one class is missing."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class AttackerModel:
    """Multinomial logistic regression on standardized representations."""

    weights: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x, y, n_classes: int = 2, epochs: int = 500, lr: float = 0.1, l2: float = 1e-4) -> "AttackerModel":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if len(np.unique(y)) < 2:
            raise MetricError("attacker needs at least two classes in the training labels")
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        z = (x - mu) / sd
        n, d = z.shape
        w = np.zeros((d, n_classes))
        b = np.zeros(n_classes)
        onehot = np.eye(n_classes)[y]
        for _ in range(epochs):
            p = softmax(z @ w + b)
            err = (p - onehot) / n
            w -= lr * (z.T @ err + l2 * w)
            b -= lr * err.sum(axis=0)
        return cls(w, b, mu, sd)

    def proba(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return softmax(z @ self.weights + self.bias)


def attacker_auc(train_x, train_y, test_x, test_y, n_classes: int = 2, **fit_kw) -> float:
    """Fit the linear attacker on training users, score held-out users.

    Binary attributes use P(class 1) as the score; more classes use the
    one-vs-rest mean.
    """
    model = AttackerModel.fit(train_x, train_y, n_classes, **fit_kw)
    p = model.proba(test_x)
    test_y = np.asarray(test_y)
    if n_classes == 2:
        return roc_auc(p[:, 1], test_y)
    aucs = [roc_auc(p[:, c], (test_y == c).astype(int)) for c in range(n_classes)]
    aucs = [a for a in aucs if not math.isnan(a)]
    return float(np.mean(aucs)) if aucs else math.nan


def counterfactual_gap(params: ModelParams, task: UserTask, items: ItemTable, readout: str = "expected") -> float:
    """Mean |prediction(a_u) - prediction(a_u')| over the query set, weights fixed."""
    if params.arch.n_classes != 2:
        raise MetricError("counterfactual gap is defined for binary sensitive attributes only")
    view = _no_grad_view(params)
    real = predict_task(view, task, items, readout=readout)
    flipped = predict_task(view, task, items, readout=readout, profile=task.user.flip_sensitive())
    return float(np.mean(np.abs(real - flipped)))


def group_gap(values, groups) -> float:
    """|mean over group 0 - mean over group 1|; NaN when a group is empty."""
    values = np.asarray(values, dtype=np.float64)
    groups = np.asarray(groups)
    kinds = np.unique(groups)
    if len(kinds) != 2:
        return math.nan
    a, b = values[groups == kinds[0]], values[groups == kinds[1]]
    return float(abs(a.mean() - b.mean()))


@dataclass
class UserRow:
    user_id: str
    mae: float
    ndcg: float
    cf: float
    group: int


@dataclass
class MetricsReport:
    mae: float
    ndcg3: float
    auc: float
    cf: float
    gf: float
    per_user: list[UserRow] = field(default_factory=list)
    k: int = 3

    def headline(self) -> dict[str, float]:
        return {"MAE": self.mae, "NDCG": self.ndcg3, "AUC": self.auc, "CF": self.cf, "GF": self.gf}

    def to_json(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        return {"headline": {k: clean(v) for k, v in self.headline().items()}, "k": self.k,
                "per_user": [{k: clean(v) for k, v in asdict(r).items()} for r in self.per_user]}

    def write(self, directory, stem: str = "report") -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        jp, cp = d / f"{stem}.json", d / f"{stem}.csv"
        jp.write_text(json.dumps(self.to_json(), indent=1))
        with open(cp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "user_id", "MAE", "NDCG", "CF", "group", "AUC", "GF"])
            h = self.headline()
            w.writerow(["headline", "", repr(h["MAE"]), repr(h["NDCG"]), repr(h["CF"]), "",
                        repr(h["AUC"]), repr(h["GF"])])
            for r in self.per_user:
                w.writerow(["user", r.user_id, repr(r.mae), repr(r.ndcg), repr(r.cf), r.group, "", ""])
        return jp, cp

    def table(self) -> str:
        h = self.headline()
        top = " | ".join(f"{k:>6}" for k in HEADLINE)
        row = " | ".join(f"{h[k]:6.3f}" for k in HEADLINE)
        return f"{top}\n{row}"


def read_csv_headline(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    h = next(r for r in rows if r["row"] == "headline")
    return {k: float(h[k]) for k in HEADLINE}


def user_representations(meta: ModelParams, tasks: Sequence[UserTask], cfg: TrainerConfig,
                         items: ItemTable, adapted=None) -> np.ndarray:
    """Post-fine-tune ``e_u`` for each task, one row per user."""
    out = []
    for k, task in enumerate(tasks):
        theta = adapted[k] if adapted is not None else finetune_test(meta, task, cfg, items)
        out.append(user_embed(task.user, _no_grad_view(theta)).values.reshape(-1))
    return np.array(out)


def evaluate(meta: ModelParams, test_tasks: Sequence[UserTask], cfg: TrainerConfig, items: ItemTable,
             attacker_tasks: Sequence[UserTask] = (), k: int = 3) -> MetricsReport:
    """Fine-tune on each test user's support set and score the query set.

    The attacker is trained on ``attacker_tasks`` (the training users) and
    scored on the test users.
    """
    if not test_tasks:
        raise MetricError("no test users to evaluate")
    rows, reprs, labels = [], [], []
    for task in sorted(test_tasks, key=lambda t: _id_key(t.user_id)):
        theta = finetune_test(meta, task, cfg, items)
        view = _no_grad_view(theta)
        pred = predict_task(view, task, items, readout=cfg.readout)
        truth = task.query_ratings.astype(np.float64)
        keys = [items.keys[r] for r in task.query_items]
        cf = counterfactual_gap(view, task, items, cfg.readout) if meta.arch.n_classes == 2 else math.nan
        group = task.sensitive_label
        rows.append(UserRow(task.user_id, mae(pred, truth), ndcg_from_scores(pred, truth, keys, k), cf, group))
        reprs.append(user_embed(task.user, view).values.reshape(-1))
        labels.append(group)
    auc = math.nan
    if attacker_tasks:
        train_x = user_representations(meta, attacker_tasks, cfg, items)
        train_y = [t.sensitive_label for t in attacker_tasks]
        if len(set(train_y)) >= 2:
            auc = attacker_auc(train_x, train_y, np.array(reprs), labels, meta.arch.n_classes)
    maes = [r.mae for r in rows]
    return MetricsReport(
        mae=float(np.mean(maes)),
        ndcg3=float(np.mean([r.ndcg for r in rows])),
        auc=auc,
        cf=float(np.mean([r.cf for r in rows])),
        gf=group_gap(maes, [r.group for r in rows]),
        per_user=rows,
        k=k,
    )
