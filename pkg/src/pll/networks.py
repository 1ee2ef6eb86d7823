"""Query/key encoder pair and classifier over a shared MLP backbone.

The query side is differentiable: backbone -> projection head -> unit
embedding, with a linear softmax head reading the backbone feature (the
pre-projection activation). The key side is a shadow copy of backbone and
projection updated only by momentum averaging, never by the optimizer,
and its forward pass records no gradients.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = "pll-ckpt-v1"


@dataclass(frozen=True)
class EncoderConfig:
    d_in: int
    n_classes: int
    hidden: tuple = (64, 64)
    d_emb: int = 128

    def validate(self):
        dims = (self.d_in, self.n_classes, self.d_emb, *self.hidden)
        if any(d < 1 for d in dims) or not self.hidden:
            raise ValueError("all encoder dimensions must be >= 1")


def _init_layer(d_in, d_out, rng):
    w = ad.uniform_init((d_in, d_out), d_in, rng)
    b = ad.uniform_init((d_out,), d_in, rng)
    return w, b


def _normalize_rows(z, what):
    if not np.all(np.isfinite(z)):
        raise ad.NumericError(f"non-finite {what}")
    with np.errstate(over="ignore"):
        norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norms)):
        raise ad.NumericError(f"{what} norm overflowed")
    if norms.min() < ad.NORMALIZE_EPS:
        raise ad.DegenerateEmbeddingError(f"degenerate {what}")
    return z / norms


class ModelState:
    """All trainable parameters plus the key-network shadow arrays."""

    def __init__(self, config: EncoderConfig, rng):
        config.validate()
        self.config = config
        dims = [config.d_in, *config.hidden]
        self.backbone = [_init_layer(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
        d_h = dims[-1]
        self.proj = [_init_layer(d_h, d_h, rng), _init_layer(d_h, config.d_emb, rng)]
        self.head = _init_layer(d_h, config.n_classes, rng)
        # key network starts as an exact copy of the query network
        self.key_backbone = [(w.data.copy(), b.data.copy()) for w, b in self.backbone]
        self.key_proj = [(w.data.copy(), b.data.copy()) for w, b in self.proj]

    def parameters(self):
        params = []
        for w, b in [*self.backbone, *self.proj, self.head]:
            params.extend([w, b])
        return params

    def forward_query(self, x):
        """Graph forward pass: returns (unit embedding, class probabilities)."""
        h = ad.Tensor(np.asarray(x, dtype=np.float64))
        for w, b in self.backbone:
            h = ad.relu(ad.affine(h, w, b))
        z = h
        z = ad.relu(ad.affine(z, *self.proj[0]))
        z = ad.affine(z, *self.proj[1])
        q = ad.l2_normalize(z)
        logits = ad.affine(h, *self.head)
        probs = ad.exp(ad.log_softmax(logits))
        return q, probs

    def forward_key(self, x):
        """Key-network embedding; plain arrays, no gradient is ever recorded."""
        h = np.asarray(x, dtype=np.float64)
        for w, b in self.key_backbone:
            h = np.maximum(h @ w + b, 0.0)
        z = np.maximum(h @ self.key_proj[0][0] + self.key_proj[0][1], 0.0)
        z = z @ self.key_proj[1][0] + self.key_proj[1][1]
        return _normalize_rows(z, "key embedding")

    def forward_eval(self, x):
        """Query-side forward without the tape: (embeddings, probabilities)."""
        h = np.asarray(x, dtype=np.float64)
        for w, b in self.backbone:
            h = np.maximum(h @ w.data + b.data, 0.0)
        z = np.maximum(h @ self.proj[0][0].data + self.proj[0][1].data, 0.0)
        z = z @ self.proj[1][0].data + self.proj[1][1].data
        logits = h @ self.head[0].data + self.head[1].data
        shifted = logits - logits.max(axis=-1, keepdims=True)
        expd = np.exp(shifted)
        return _normalize_rows(z, "query embedding"), expd / expd.sum(axis=-1, keepdims=True)

    def momentum_update(self, m: float):
        """key <- m * key + (1 - m) * query, elementwise over backbone and projection."""
        if not 0.0 <= m <= 1.0:
            raise ValueError("momentum coefficient must lie in [0, 1]")
        query_side = [*self.backbone, *self.proj]
        key_side = [*self.key_backbone, *self.key_proj]
        for (kw, kb), (qw, qb) in zip(key_side, query_side):
            kw *= m
            kw += (1.0 - m) * qw.data
            kb *= m
            kb += (1.0 - m) * qb.data


def predict_within(probs, candidates, n_classes=None):
    """Arg-max over candidate entries only; ties break to the smallest index."""
    p = np.asarray(probs, dtype=np.float64)
    if isinstance(candidates, (set, frozenset, list, tuple)):
        mask = np.zeros(p.shape[-1], dtype=bool)
        mask[sorted(candidates)] = True
    else:
        mask = np.asarray(candidates, dtype=bool)
    if not mask.any():
        raise ValueError("candidate set must be non-empty")
    return int(np.argmax(np.where(mask, p, -np.inf)))


def predict_within_batch(probs, cand_mask):
    """Row-wise candidate-restricted arg-max; smallest index wins ties."""
    if not cand_mask.any(axis=1).all():
        raise ValueError("every candidate set must be non-empty")
    return np.argmax(np.where(cand_mask, probs, -np.inf), axis=1)


def save_checkpoint(model: ModelState, path):
    arrays = {}
    for i, (w, b) in enumerate(model.backbone):
        arrays[f"bb{i}_w"], arrays[f"bb{i}_b"] = w.data, b.data
    for i, (w, b) in enumerate(model.proj):
        arrays[f"pj{i}_w"], arrays[f"pj{i}_b"] = w.data, b.data
    arrays["head_w"], arrays["head_b"] = model.head[0].data, model.head[1].data
    for i, (w, b) in enumerate(model.key_backbone):
        arrays[f"kbb{i}_w"], arrays[f"kbb{i}_b"] = w, b
    for i, (w, b) in enumerate(model.key_proj):
        arrays[f"kpj{i}_w"], arrays[f"kpj{i}_b"] = w, b
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.config)}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> ModelState:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version in {path}")
        cfg_fields = dict(meta["config"])
        cfg_fields["hidden"] = tuple(cfg_fields["hidden"])
        config = EncoderConfig(**cfg_fields)
        model = ModelState(config, np.random.default_rng(0))
        model.backbone = [
            (ad.Parameter(data[f"bb{i}_w"]), ad.Parameter(data[f"bb{i}_b"]))
            for i in range(len(model.backbone))
        ]
        model.proj = [
            (ad.Parameter(data[f"pj{i}_w"]), ad.Parameter(data[f"pj{i}_b"]))
            for i in range(len(model.proj))
        ]
        model.head = (ad.Parameter(data["head_w"]), ad.Parameter(data["head_b"]))
        model.key_backbone = [
            (data[f"kbb{i}_w"].copy(), data[f"kbb{i}_b"].copy())
            for i in range(len(model.key_backbone))
        ]
        model.key_proj = [
            (data[f"kpj{i}_w"].copy(), data[f"kpj{i}_b"].copy())
            for i in range(len(model.key_proj))
        ]
    return model
