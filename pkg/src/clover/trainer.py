"""Interleaved inner/outer meta-optimization with the adversarial discriminators."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import ItemTable, UserTask, _id_key
from .model import (EMB, Architecture, ModelParams, combined_loss, expected_rating,
                    argmax_rating, item_embed, predict, save_checkpoint, user_embed)
from .numerics import Tape, Tensor

log = logging.getLogger(__name__)

MODES = ("melu", "clover", "clover_wo", "clover_t2", "clover_t1t2")

# (inner recommender objective, inner discriminator ascent)
_INNER = {
    "melu": ("rec", False),
    "clover_wo": ("rec", False),
    "clover": ("rec", True),
    "clover_t2": ("full", False),
    "clover_t1t2": ("full", True),
}


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainerConfig:
    alpha: float = 1e-2
    beta: float = 1e-3
    inner_steps: int = 5
    batch_size: int = 32
    epochs: int = 50
    lam: float = 1.0
    gamma: float = 0.1
    seed: int = 0
    mode: str = "clover"
    grad_clip: float = 5.0
    meta_grad: str = "first_order"
    use_eg: bool = True
    use_eh: bool = True
    workers: int = 1
    readout: str = "expected"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (self.alpha >= 0 and self.beta > 0):
            raise ValueError("alpha must be >= 0 and beta > 0")
        if self.inner_steps < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("inner_steps and batch_size must be >= 1, epochs >= 0")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be non-negative")
        if self.meta_grad != "first_order":
            raise ValueError("only first_order meta-gradients are supported")
        if self.readout not in ("expected", "argmax"):
            raise ValueError("readout must be 'expected' or 'argmax'")

    @property
    def weights(self) -> tuple[float, float]:
        """Adversarial weights actually applied; MELU trains no adversary."""
        return (0.0, 0.0) if self.mode == "melu" else (self.lam, self.gamma)


def _adapted_view(meta: ModelParams) -> ModelParams:
    # Embedding tables are shared read-only: no gradient is ever computed for them here.
    t = {}
    for n, v in meta.tensors.items():
        if meta.groups[n] == EMB:
            t[n] = Tensor(v.values, requires_grad=False, name=n)
        else:
            t[n] = Tensor(v.values.copy(), requires_grad=True, name=n)
    return ModelParams(meta.arch, t, meta.groups)


def _sgd(tensors: Sequence[Tensor], lr: float, clip: float | None, sign: float) -> None:
    tensors = [t for t in tensors if t.grad is not None]
    nx.clip_global_norm(tensors, clip)
    for t in tensors:
        t.values += sign * lr * t.grad


def inner_adapt(meta: ModelParams, task: UserTask, cfg: TrainerConfig, items: ItemTable) -> ModelParams:
    """Fine-tune a copy of ``meta`` on the task's support set.

    Plain gradient steps with ``cfg.alpha``. Which parameters move, and on
    which objective, depends on ``cfg.mode``; embedding tables never move.
    """
    theta = _adapted_view(meta)
    if len(task.support_items) == 0:
        log.warning("user %s has an empty support set; skipping adaptation", task.user_id)
        return theta
    objective, ascend_disc = _INNER[cfg.mode]
    with_disc = objective == "full" or ascend_disc
    lam, gamma = cfg.weights
    label = task.sensitive_label if with_disc else None
    feats = items.features(task.support_items)
    rec = [theta[n] for n in theta.names("rec")]
    disc = [theta[n] for n in theta.disc_names]
    for _ in range(cfg.inner_steps):
        theta.zero_grad()
        with Tape() as tape:
            losses = combined_loss(task.user, feats, task.support_ratings, label, theta, lam, gamma,
                                   with_disc=with_disc, detach_disc_inputs=objective == "rec",
                                   use_eg=cfg.use_eg, use_eh=cfg.use_eh)
            tape.backward(losses.total)
        _sgd(rec, cfg.alpha, cfg.grad_clip, -1.0)
        if ascend_disc:
            _sgd(disc, cfg.alpha, cfg.grad_clip, +1.0)
    theta.zero_grad()
    return theta


def finetune_test(meta: ModelParams, task: UserTask, cfg: TrainerConfig, items: ItemTable) -> ModelParams:
    """Test-time adaptation: recommender loss only, on a label-blind view of the task."""
    return inner_adapt(meta, task.blind(), replace(cfg, mode="melu"), items)


@dataclass
class TaskGrad:
    user_id: str
    grads: dict[str, np.ndarray]
    losses: dict[str, float]


def task_meta_gradient(meta: ModelParams, task: UserTask, cfg: TrainerConfig, items: ItemTable) -> TaskGrad:
    """First-order meta-gradient of the query loss for one user.

    Gradients are taken w.r.t. the adapted parameters and credited to the
    meta-parameters at the same names; embedding tables (not adapted) get
    their exact query-loss gradient.
    """
    theta = inner_adapt(meta, task, cfg, items)
    for n in theta.names(EMB):
        theta.tensors[n] = Tensor(meta[n].values, requires_grad=True, name=n)
    theta.zero_grad()
    lam, gamma = cfg.weights
    with Tape() as tape:
        losses = combined_loss(task.user, items.features(task.query_items), task.query_ratings,
                               task.sensitive_label, theta, lam, gamma,
                               use_eg=cfg.use_eg, use_eh=cfg.use_eh)
        tape.backward(losses.total)
    grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.values)) for n, t in theta.tensors.items()}
    return TaskGrad(task.user_id, grads, losses.values())


class MetaOptimizers:
    """Adam for the recommender (descent) and the discriminators (ascent)."""

    def __init__(self, meta: ModelParams, cfg: TrainerConfig, kind: str = "adam"):
        self.rec = nx.Optimizer([meta[n] for n in meta.rec_names], cfg.beta, kind)
        self.disc = nx.Optimizer([meta[n] for n in meta.disc_names], cfg.beta, kind)


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def outer_step(meta: ModelParams, batch: Sequence[UserTask], cfg: TrainerConfig,
               opts: MetaOptimizers, items: ItemTable) -> list[TaskGrad]:
    """One meta-update from a batch of user tasks; returns per-task results."""
    if not batch:
        raise ValueError("empty batch")
    ordered = sorted(batch, key=lambda t: _id_key(t.user_id))
    results = _map(lambda t: task_meta_gradient(meta, t, cfg, items), ordered, cfg.workers)
    meta.zero_grad()
    for r in results:
        for n, g in r.grads.items():
            t = meta[n]
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad += g
    nx.clip_global_norm(opts.rec.params, cfg.grad_clip)
    opts.rec.step("descend")
    if cfg.mode != "melu":
        nx.clip_global_norm(opts.disc.params, cfg.grad_clip)
        opts.disc.step("ascend")
    meta.zero_grad()
    return results


def predict_task(params: ModelParams, task: UserTask, items: ItemTable, *, query: bool = True,
                 readout: str = "expected", profile=None) -> np.ndarray:
    rows = task.query_items if query else task.support_items
    e_u = user_embed(profile or task.user, params)
    e_i = item_embed(items.features(rows), params)
    logits = predict(e_u, e_i, params)
    if readout == "argmax":
        return argmax_rating(logits, params.arch)
    return expected_rating(logits, params.arch)


def _no_grad_view(params: ModelParams) -> ModelParams:
    return ModelParams(params.arch, {n: Tensor(t.values) for n, t in params.tensors.items()}, params.groups)


def validation_mae(meta: ModelParams, tasks: Sequence[UserTask], cfg: TrainerConfig, items: ItemTable) -> float:
    if not tasks:
        return math.nan
    errs = []
    for task in tasks:
        theta = _no_grad_view(finetune_test(meta, task, cfg, items))
        pred = predict_task(theta, task, items, readout=cfg.readout)
        errs.append(float(np.mean(np.abs(pred - task.query_ratings))))
    return float(np.mean(errs))


HISTORY_FIELDS = ("epoch", "l_R", "l_D_g", "l_D_h", "valid_MAE")


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_params: ModelParams | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in HISTORY_FIELDS})


def init_params(arch: Architecture, cfg: TrainerConfig) -> tuple[ModelParams, np.random.Generator]:
    rng = np.random.default_rng(cfg.seed)
    return ModelParams.init(arch, rng), rng


def train(train_tasks: Sequence[UserTask], items: ItemTable, arch: Architecture, cfg: TrainerConfig,
          valid_tasks: Sequence[UserTask] = (), out_dir=None, progress=None,
          every_epoch: bool = True) -> tuple[ModelParams, History]:
    """Run the full meta-training loop and return ``(meta_params, history)``.

    With ``out_dir`` set, each epoch writes ``epoch<k>.ckpt.json`` (unless
    ``every_epoch`` is off) and rewrites ``last.ckpt.json``;
    ``best.ckpt.json`` tracks the lowest validation MAE, and ``history.csv``
    is kept current.
    """
    if not train_tasks:
        raise ValueError("no training tasks")
    meta, rng = init_params(arch, cfg)
    opts = MetaOptimizers(meta, cfg)
    history = History()
    out = Path(out_dir) if out_dir is not None else None
    tasks = list(train_tasks)
    best = math.inf
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(tasks))
        sums = {"l_R": 0.0, "l_D_g": 0.0, "l_D_h": 0.0}
        count = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [tasks[k] for k in order[start:start + cfg.batch_size]]
            results = outer_step(meta, batch, cfg, opts, items)
            for r in results:
                if not all(math.isfinite(v) for v in r.losses.values()):
                    dump = {"epoch": epoch, "users": [t.user_id for t in batch],
                            "losses": {x.user_id: x.losses for x in results}}
                    if out is not None:
                        (out / "diverged.json").write_text(json.dumps(dump, indent=1, default=str))
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} for user {r.user_id}", dump)
                for k in sums:
                    sums[k] += r.losses[k]
                count += 1
        vmae = validation_mae(meta, valid_tasks, cfg, items)
        row = {"epoch": epoch, **{k: v / count for k, v in sums.items()}, "valid_MAE": vmae}
        history.rows.append(row)
        if math.isfinite(vmae) and vmae < best:
            best = vmae
            history.best_epoch = epoch
            history.best_params = meta.clone()
            if out is not None:
                save_checkpoint(meta, out / "best.ckpt.json", {"epoch": epoch, "valid_MAE": vmae})
        if out is not None:
            if every_epoch:
                save_checkpoint(meta, out / f"epoch{epoch:03d}.ckpt.json", {"epoch": epoch})
            save_checkpoint(meta, out / "last.ckpt.json", {"epoch": epoch})
            history.write_csv(out / "history.csv")
        if progress is not None:
            progress(row)
        log.info("epoch %d  l_R=%.4f  l_D^g=%.4f  l_D^h=%.4f  valid MAE=%.4f",
                 epoch, row["l_R"], row["l_D_g"], row["l_D_h"], vmae)
    if out is not None and cfg.epochs == 0:
        save_checkpoint(meta, out / "last.ckpt.json", {"epoch": 0})
        history.write_csv(out / "history.csv")
    return meta, history


def config_dict(cfg: TrainerConfig) -> dict:
    return asdict(cfg)
