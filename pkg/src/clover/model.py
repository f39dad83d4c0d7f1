"""MELU-style recommender with representation (g) and prediction (h) discriminators."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data import EncodedProfile, FeatureSpace
from .numerics import Tensor

CHECKPOINT_FORMAT = "clover-checkpoint"
CHECKPOINT_VERSION = 1

EMB, REC, DISC = "emb", "rec", "disc"


@dataclass
class Architecture:
    user_blocks: list[tuple[str, int]]
    item_blocks: list[tuple[str, int]]
    n_levels: int
    n_classes: int
    rating_min: int = 1
    sensitive: str = "gender"
    embed_dim: int = 64
    hidden: int = 64
    n_hidden: int = 2
    disc_hidden: int = 64
    disc_layers: int = 2

    @classmethod
    def from_space(cls, space: FeatureSpace, **kw) -> "Architecture":
        return cls([(b.name, b.size) for b in space.user_blocks],
                   [(b.name, b.size) for b in space.item_blocks],
                   space.n_levels, space.n_classes, space.rating_min, space.sensitive, **kw)

    @property
    def levels(self) -> np.ndarray:
        return self.rating_min + np.arange(self.n_levels, dtype=np.float64)


class ModelParams:
    """Named tensors split into embedding tables, recommender, and discriminators.

    Embedding tables and the rest of the recommender together form the
    recommender parameters; ``disc`` holds both discriminators.
    """

    def __init__(self, arch: Architecture, tensors: Mapping[str, Tensor], groups: Mapping[str, str]):
        self.arch = arch
        self.tensors = dict(tensors)
        self.groups = dict(groups)

    @classmethod
    def init(cls, arch: Architecture, rng: np.random.Generator) -> "ModelParams":
        t: dict[str, Tensor] = {}
        g: dict[str, str] = {}
        d = arch.embed_dim

        def weight(name, fan_in, fan_out, group):
            t[name] = Tensor(nx.xavier_uniform(rng, fan_in, fan_out), requires_grad=True, name=name)
            g[name] = group

        def bias(name, n, group):
            t[name] = Tensor(np.zeros(n), requires_grad=True, name=name)
            g[name] = group

        def stack(prefix, widths, group):
            for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                weight(f"{prefix}.{k}.W", a, b, group)
                bias(f"{prefix}.{k}.b", b, group)

        for name, size in arch.user_blocks:
            weight(f"emb.user.{name}", size, d, EMB)
        for name, size in arch.item_blocks:
            weight(f"emb.item.{name}", size, d, EMB)
        stack("rec.user_proj", [d * len(arch.user_blocks), d], REC)
        stack("rec.item_proj", [d * len(arch.item_blocks), d], REC)
        stack("rec.decision", [2 * d] + [arch.hidden] * arch.n_hidden + [arch.n_levels], REC)
        hidden = [arch.disc_hidden] * arch.disc_layers
        stack("disc.g", [d + arch.n_levels] + hidden + [arch.n_classes], DISC)
        stack("disc.h", [2 * arch.n_levels + d] + hidden + [arch.n_classes], DISC)
        return cls(arch, t, g)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self, *groups: str) -> list[str]:
        return [n for n in self.tensors if self.groups[n] in groups]

    @property
    def rec_names(self) -> list[str]:
        return self.names(EMB, REC)

    @property
    def disc_names(self) -> list[str]:
        return self.names(DISC)

    def clone(self) -> "ModelParams":
        t = {n: Tensor(v.values.copy(), requires_grad=True, name=n) for n, v in self.tensors.items()}
        return ModelParams(self.arch, t, self.groups)

    def zero_grad(self) -> None:
        for v in self.tensors.values():
            v.grad = None

    def digest(self, *groups: str) -> str:
        h = hashlib.sha256()
        for n in (self.names(*groups) if groups else self.tensors):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.tensors[n].values).tobytes())
        return h.hexdigest()

    def equal(self, other: "ModelParams", *groups: str) -> bool:
        names = self.names(*groups) if groups else list(self.tensors)
        return all(np.array_equal(self[n].values, other[n].values) for n in names)

    def stacks(self, prefix: str) -> list[tuple[Tensor, Tensor]]:
        k, out = 0, []
        while f"{prefix}.{k}.W" in self.tensors:
            out.append((self.tensors[f"{prefix}.{k}.W"], self.tensors[f"{prefix}.{k}.b"]))
            k += 1
        return out


# --- forward pieces ----------------------------------------------------------

def _normalize(x: np.ndarray) -> np.ndarray:
    # Multi-hot rows become the average of their columns' embeddings.
    s = x.sum(axis=-1, keepdims=True)
    return x / np.where(s > 0, s, 1.0)


def user_embed(profile: EncodedProfile, params: ModelParams) -> Tensor:
    """``e_u = relu(W_U [E^1 x^1; ...; E^P x^P] + b_U)`` as a ``1 x d`` row."""
    parts = []
    for name, size in params.arch.user_blocks:
        x = _normalize(profile.block(name))[None, :]
        table = params[f"emb.user.{name}"]
        if x.shape[1] != table.shape[0]:
            raise nx.ShapeError(f"user block {name!r} has {x.shape[1]} categories, table expects {table.shape[0]}")
        parts.append(nx.matmul(x, table))
    return nx.affine_relu_stack(nx.concat(parts, axis=1), params.stacks("rec.user_proj"),
                                final_linear=False)


def item_embed(features: Mapping[str, np.ndarray], params: ModelParams) -> Tensor:
    """Item embeddings for a batch; ``features`` maps block name to an ``n x d_p`` array.

    A single profile may be passed as an :class:`EncodedProfile`.
    """
    if isinstance(features, EncodedProfile):
        features = {n: v[None, :] for n, v in features.blocks}
    parts = []
    for name, size in params.arch.item_blocks:
        x = _normalize(np.atleast_2d(features[name]))
        table = params[f"emb.item.{name}"]
        if x.shape[1] != table.shape[0]:
            raise nx.ShapeError(f"item block {name!r} has {x.shape[1]} categories, table expects {table.shape[0]}")
        parts.append(nx.matmul(x, table))
    return nx.affine_relu_stack(nx.concat(parts, axis=1), params.stacks("rec.item_proj"),
                                final_linear=False)


def _as_vector(t: Tensor) -> Tensor:
    if t.values.ndim == 1:
        return t
    return nx.squeeze_row(t)


def predict(e_u: Tensor, e_i: Tensor, params: ModelParams) -> Tensor:
    """Rating-class logits ``F_N([e_u; e_i])``, one row per item."""
    d = params.arch.embed_dim
    e_u = _as_vector(e_u)
    if e_u.shape[0] != d or e_i.values.shape[-1] != d:
        raise nx.ShapeError("embeddings must both have length %d" % d)
    n = e_i.shape[0]
    return nx.affine_relu_stack(nx.concat([nx.repeat_rows(e_u, n), e_i], axis=1),
                                params.stacks("rec.decision"), final_linear=True)


def expected_rating(logits, arch: Architecture) -> np.ndarray:
    """Softmax-weighted mean of the rating levels."""
    v = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    return nx.softmax(v) @ arch.levels


def argmax_rating(logits, arch: Architecture) -> np.ndarray:
    v = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    return arch.levels[np.argmax(v, axis=-1)]


def one_hot(classes: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(classes), n))
    out[np.arange(len(classes)), classes] = 1.0
    return out


def rating_classes(ratings: np.ndarray, arch: Architecture) -> np.ndarray:
    c = np.asarray(ratings, dtype=np.int64) - arch.rating_min
    if c.size and (c.min() < 0 or c.max() >= arch.n_levels):
        raise IndexError("rating outside the model's level range")
    return c


def rec_loss(logits: Tensor, ratings: np.ndarray, arch: Architecture) -> Tensor:
    return nx.softmax_cross_entropy(logits, rating_classes(ratings, arch))


def disc_g_logits(e_u: Tensor, ratings: np.ndarray, params: ModelParams, external: bool = True) -> Tensor:
    arch = params.arch
    y = one_hot(rating_classes(ratings, arch), arch.n_levels)
    if not external:
        y = np.zeros_like(y)
    return nx.affine_relu_stack(nx.concat([nx.repeat_rows(_as_vector(e_u), len(ratings)), y], axis=1),
                                params.stacks("disc.g"), final_linear=True)


def disc_h_logits(logits: Tensor, e_i: Tensor, ratings: np.ndarray, params: ModelParams,
                  external: bool = True) -> Tensor:
    arch = params.arch
    y = one_hot(rating_classes(ratings, arch), arch.n_levels)
    if not external:
        e_i = Tensor(np.zeros(e_i.shape))
    return nx.affine_relu_stack(nx.concat([y, logits, e_i], axis=1),
                                params.stacks("disc.h"), final_linear=True)


def disc_g_loss(e_u: Tensor, ratings: np.ndarray, label: int, params: ModelParams,
                external: bool = True) -> Tensor:
    z = disc_g_logits(e_u, ratings, params, external)
    return nx.softmax_cross_entropy(z, np.full(len(ratings), label, dtype=np.int64))


def disc_h_loss(logits: Tensor, e_i: Tensor, ratings: np.ndarray, label: int, params: ModelParams,
                external: bool = True) -> Tensor:
    z = disc_h_logits(logits, e_i, ratings, params, external)
    return nx.softmax_cross_entropy(z, np.full(len(ratings), label, dtype=np.int64))


@dataclass
class Losses:
    total: Tensor
    rec: Tensor
    g: Tensor | None = None
    h: Tensor | None = None
    logits: Tensor | None = None
    e_u: Tensor | None = None

    def values(self) -> dict[str, float]:
        return {"L": self.total.item(), "l_R": self.rec.item(),
                "l_D_g": self.g.item() if self.g is not None else 0.0,
                "l_D_h": self.h.item() if self.h is not None else 0.0}


def combined_loss(profile: EncodedProfile, item_features: Mapping[str, np.ndarray],
                  ratings: np.ndarray, label: int | None, params: ModelParams,
                  lam: float, gamma: float, *, with_disc: bool = True,
                  detach_disc_inputs: bool = False, use_eg: bool = True,
                  use_eh: bool = True) -> Losses:
    """``L = l_R - (lam * l_D^g + gamma * l_D^h)`` over one user's pairs.

    With ``detach_disc_inputs`` the discriminators see constant copies of
    ``e_u``, the logits and ``e_i``, so gradients of the adversarial terms
    reach only discriminator parameters.
    """
    if lam < 0 or gamma < 0:
        raise ValueError("lam and gamma must be non-negative")
    e_u = user_embed(profile, params)
    e_i = item_embed(item_features, params)
    logits = predict(e_u, e_i, params)
    l_r = rec_loss(logits, ratings, params.arch)
    if not with_disc:
        return Losses(l_r, l_r, logits=logits, e_u=e_u)
    if detach_disc_inputs:
        d_eu, d_logits, d_ei = e_u.detach(), logits.detach(), e_i.detach()
    else:
        d_eu, d_logits, d_ei = e_u, logits, e_i
    l_g = disc_g_loss(d_eu, ratings, label, params, use_eg)
    l_h = disc_h_loss(d_logits, d_ei, ratings, label, params, use_eh)
    total = nx.sub(l_r, nx.add(nx.scale(l_g, lam), nx.scale(l_h, gamma)))
    return Losses(total, l_r, l_g, l_h, logits, e_u)


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Write every tensor as base64 little-endian float64 in a JSON manifest."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": asdict(params.arch),
        "extra": extra or {},
        "tensors": [
            {"name": n, "group": params.groups[n], "shape": list(t.shape),
             "data": base64.b64encode(np.ascontiguousarray(t.values, dtype="<f8").tobytes()).decode()}
            for n, t in params.tensors.items()
        ],
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, expect: Architecture | None = None) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    a = doc["architecture"]
    arch = Architecture(**{**a, "user_blocks": [tuple(b) for b in a["user_blocks"]],
                           "item_blocks": [tuple(b) for b in a["item_blocks"]]})
    if expect is not None and asdict(expect) != asdict(arch):
        raise CheckpointError("checkpoint architecture does not match the dataset's feature space")
    tensors, groups = {}, {}
    for rec in doc["tensors"]:
        raw = np.frombuffer(base64.b64decode(rec["data"]), dtype="<f8")
        values = raw.astype(np.float64).reshape(rec["shape"])
        tensors[rec["name"]] = Tensor(values, requires_grad=True, name=rec["name"])
        groups[rec["name"]] = rec["group"]
    return ModelParams(arch, tensors, groups)
