"""Contrastive partial-label training with prototype-based disambiguation.

One epoch processes mini-batches in a fixed order: augment two views,
embed them, predict a label inside each candidate set, momentum-update
the predicted class prototype, select positives from the pooled
embeddings by predicted label, nudge each pseudo-target toward its
nearest prototype, then descend the combined classification +
contrastive objective and refresh the key network and queue.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .datagen import AugmentSpec, two_views_batch
from .networks import ModelState, predict_within_batch

POLICIES = ("pico", "onehot", "soft", "ma_soft", "uniform")
STRATEGIES = ("default", "jaccard_filter", "confidence_threshold")
PROTOTYPE_MODES = ("momentum", "recompute")


@dataclass(frozen=True)
class PicoConfig:
    tau: float = 0.07
    lam: float = 0.5
    gamma: float = 0.99
    phi_start: float = 0.95
    phi_end: float = 0.8
    warmup_epochs: int = 1
    policy: str = "pico"
    positive_strategy: str = "default"
    jaccard_rho: float = 0.5
    conf_threshold: float = 0.95
    strategy_switch_epoch: int | None = None
    prototype_mode: str = "momentum"

    def validate(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        for name, v in (("gamma", self.gamma), ("phi_start", self.phi_start),
                        ("phi_end", self.phi_end)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if self.positive_strategy not in STRATEGIES:
            raise ValueError(f"positive_strategy must be one of {STRATEGIES}")

    def phi_at(self, epoch, total_epochs):
        """Linear ramp from phi_start at epoch 0 to phi_end at the last epoch."""
        if total_epochs <= 1:
            return self.phi_start
        t = min(max(epoch, 0), total_epochs - 1) / (total_epochs - 1)
        return self.phi_start + (self.phi_end - self.phi_start) * t


class PrototypeBank:
    """One unit embedding per class, maintained by momentum averaging."""

    def __init__(self, n_classes, d_emb):
        self.mu = np.zeros((n_classes, d_emb))

    def update(self, q, label, gamma):
        mixed = gamma * self.mu[label] + (1.0 - gamma) * np.asarray(q)
        norm = np.linalg.norm(mixed)
        if norm < ad.NORMALIZE_EPS:
            return  # exact cancellation: keep the previous prototype
        self.mu[label] = mixed / norm

    def recompute(self, embeddings, labels):
        """Replace each prototype by the normalized mean of its predicted members."""
        for c in range(self.mu.shape[0]):
            members = embeddings[labels == c]
            if len(members) == 0:
                continue
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm < ad.NORMALIZE_EPS:
                continue
            self.mu[c] = mean / norm

    def similarities(self, q):
        return np.asarray(q) @ self.mu.T


class EmbeddingQueue:
    """Fixed-capacity FIFO of key embeddings with their predicted labels.

    Entries also carry the full-label prediction, a clean flag and the
    candidate mask of the source example so that downstream positive-set
    variants can filter pool elements.
    """

    def __init__(self, capacity, d_emb, n_classes):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.embeddings = np.zeros((0, d_emb))
        self.labels = np.zeros(0, dtype=np.int64)
        self.labels_hat = np.zeros(0, dtype=np.int64)
        self.clean = np.zeros(0, dtype=bool)
        self.cand = np.zeros((0, n_classes), dtype=bool)

    def __len__(self):
        return len(self.embeddings)

    def enqueue(self, embeddings, labels, labels_hat, clean, cand):
        norms = np.linalg.norm(embeddings, axis=1)
        if len(norms) and np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("queue accepts unit-norm embeddings only")
        keep = slice(max(len(self.embeddings) + len(embeddings) - self.capacity, 0), None)
        self.embeddings = np.concatenate([self.embeddings, embeddings])[keep]
        self.labels = np.concatenate([self.labels, labels])[keep]
        self.labels_hat = np.concatenate([self.labels_hat, labels_hat])[keep]
        self.clean = np.concatenate([self.clean, clean])[keep]
        self.cand = np.concatenate([self.cand, cand])[keep]


@dataclass
class Pool:
    """Contrastive pool: batch queries, batch keys, then queue contents.

    Row ``i`` for ``i < n_batch`` is anchor i's own query embedding; the
    per-anchor view excludes exactly that row.
    """

    embeddings: np.ndarray
    labels: np.ndarray
    labels_hat: np.ndarray
    clean: np.ndarray
    cand: np.ndarray
    n_batch: int

    def __len__(self):
        return len(self.embeddings)

    def anchor_valid_mask(self):
        valid = np.ones((self.n_batch, len(self.embeddings)), dtype=bool)
        valid[np.arange(self.n_batch), np.arange(self.n_batch)] = False
        return valid


def build_pool(q_emb, k_emb, labels, queue, labels_hat=None, clean=None, cand=None):
    n_batch, n_classes = len(q_emb), queue.cand.shape[1]
    labels = np.asarray(labels)
    if labels_hat is None:
        labels_hat = labels
    if clean is None:
        clean = np.ones(n_batch, dtype=bool)
    if cand is None:
        cand = np.ones((n_batch, n_classes), dtype=bool)
    return Pool(
        embeddings=np.concatenate([q_emb, k_emb, queue.embeddings]),
        labels=np.concatenate([labels, labels, queue.labels]),
        labels_hat=np.concatenate([labels_hat, labels_hat, queue.labels_hat]),
        clean=np.concatenate([clean, clean, queue.clean]),
        cand=np.concatenate([cand, cand, queue.cand]),
        n_batch=n_batch,
    )


def select_positives(anchor_labels, pool, valid, *, strategy="default", config=None,
                     epoch=0, total_epochs=1, anchor_cand=None, anchor_conf=None):
    """Per-anchor positive masks over the pool: same predicted label, own query excluded.

    The filter variant additionally drops pairs whose candidate sets are
    dissimilar (Jaccard <= rho) during the early stage; the threshold
    variant empties the positive set of low-confidence anchors late in
    training.
    """
    anchor_labels = np.asarray(anchor_labels)
    pos = valid & (pool.labels[None, :] == anchor_labels[:, None])
    if strategy == "default":
        return pos
    switch = None if config is None else config.strategy_switch_epoch
    if switch is None:
        switch = total_epochs // 2
    if strategy == "jaccard_filter":
        if epoch < switch:
            inter = anchor_cand.astype(np.int64) @ pool.cand.T.astype(np.int64)
            union = (anchor_cand.sum(1)[:, None] + pool.cand.sum(1)[None, :] - inter)
            jaccard = inter / np.maximum(union, 1)
            pos &= jaccard > config.jaccard_rho
        return pos
    if strategy == "confidence_threshold":
        if epoch >= switch:
            pos &= (np.asarray(anchor_conf) > config.conf_threshold)[:, None]
        return pos
    raise ValueError(f"unknown positive strategy {strategy!r}")


def classification_loss(f_out, s):
    """Cross-entropy -sum_j s_j log f_j against a pseudo-target, log clamped at 1e-12."""
    f = f_out if isinstance(f_out, ad.Tensor) else ad.Tensor(f_out)
    return ad.weighted_sum(ad.log_clamped(f), -np.asarray(s, dtype=np.float64))


def contrastive_loss(q, positives, pool_view, tau):
    """Single-anchor contrastive loss against an explicit pool view.

    The denominator runs over the entire view, positives included. An
    empty positive set contributes zero.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    positives = np.asarray(positives, dtype=np.float64).reshape(-1, len(q))
    if len(positives) == 0:
        return 0.0
    pool_view = np.asarray(pool_view, dtype=np.float64)
    sims = pool_view @ np.asarray(q) / tau
    m = sims.max()
    lse = m + np.log(np.exp(sims - m).sum())
    pos_sims = positives @ np.asarray(q) / tau
    return float(lse - pos_sims.mean())


def disambiguate(s, q, bank, cand, phi, policy, tau):
    """Refresh candidate-supported pseudo-targets from the prototypes.

    Policies: 'pico' moves s toward the one-hot nearest prototype by a phi
    moving average; 'onehot' jumps straight there; 'soft' uses the
    candidate-restricted prototype softmax; 'ma_soft' moving-averages the
    softmax; 'uniform' resets to uniform over the candidates.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    cand = np.atleast_2d(np.asarray(cand, dtype=bool))
    sims = bank.similarities(q)
    masked = np.where(cand, sims, -np.inf)
    if policy in ("pico", "onehot"):
        z = np.zeros_like(s)
        z[np.arange(len(s)), np.argmax(masked, axis=1)] = 1.0
        out = z if policy == "onehot" else phi * s + (1.0 - phi) * z
    elif policy in ("soft", "ma_soft"):
        shifted = masked / tau
        shifted -= shifted.max(axis=1, keepdims=True)
        expd = np.where(cand, np.exp(shifted), 0.0)
        soft = expd / expd.sum(axis=1, keepdims=True)
        out = soft if policy == "soft" else phi * s + (1.0 - phi) * soft
    elif policy == "uniform":
        out = cand / cand.sum(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    return out


def uniform_targets(cand_mask):
    cand = np.asarray(cand_mask, dtype=bool)
    return cand / cand.sum(axis=1, keepdims=True)


def classification_mean_graph(probs, targets, rows):
    """Batch-mean cross-entropy of the selected rows against constant targets."""
    picked = ad.take_rows(probs, rows)
    weights = -np.asarray(targets, dtype=np.float64) / len(rows)
    return ad.weighted_sum(ad.log_clamped(picked), weights)


def contrastive_mean_graph(q_graph, pool_graph, anchor_rows, pos, valid, tau):
    """Batch-mean contrastive loss; anchors with empty positive sets add zero."""
    anchors = ad.take_rows(q_graph, anchor_rows)
    sims = ad.scale(ad.matmul(anchors, ad.transpose(pool_graph)), 1.0 / tau)
    lse = ad.masked_logsumexp_rows(sims, valid)
    counts = pos.sum(axis=1)
    active = counts > 0
    n_anchor = len(anchor_rows)
    lse_w = np.where(active, 1.0 / n_anchor, 0.0)
    pos_w = np.where(pos, 1.0, 0.0)
    pos_w[active] /= (counts[active] * n_anchor)[:, None]
    pos_w[~active] = 0.0
    return ad.weighted_sum(lse, lse_w) - ad.weighted_sum(sims, pos_w)


@dataclass
class EpochMetrics:
    epoch: int
    loss_cls: float
    loss_cont: float
    loss_total: float
    pseudo_acc: float
    mmc: float
    test_acc: float | None = None
    loss_mix: float | None = None
    loss_clean: float | None = None
    loss_ncont: float | None = None
    loss_knn: float | None = None
    loss_ncls: float | None = None
    clean_fraction: float | None = None
    clean_precision: float | None = None
    clean_recall: float | None = None


class PicoTrainer:
    """Training state and epoch loop.

    ``true_labels`` are consulted only when computing evaluation metrics,
    never by the update rules.
    """

    def __init__(self, model: ModelState, features, cand_mask, true_labels,
                 config: PicoConfig, *, total_epochs, batch_size=256, base_lr=0.05,
                 sgd_momentum=0.9, encoder_momentum=0.999, queue_size=None,
                 augment: AugmentSpec = AugmentSpec(), rng=None):
        config.validate()
        augment.validate()
        self.model = model
        self.features = np.asarray(features, dtype=np.float64)
        self.cand = np.asarray(cand_mask, dtype=bool)
        self.true_labels = np.asarray(true_labels, dtype=np.int64)
        self.config = config
        self.total_epochs = total_epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.encoder_momentum = encoder_momentum
        self.augment = augment
        self.rng = rng if rng is not None else np.random.default_rng(0)
        n, self.n_classes = self.cand.shape
        if queue_size is None:
            queue_size = min(8192, 4 * n)
        self.queue = EmbeddingQueue(queue_size, model.config.d_emb, self.n_classes)
        self.bank = PrototypeBank(self.n_classes, model.config.d_emb)
        self.s = uniform_targets(self.cand)
        self.opt = ad.SgdMomentum(model.parameters(), lr=base_lr, momentum=sgd_momentum)

    # -- shared loss pieces -------------------------------------------------

    def _classification_mean(self, probs, targets, rows):
        return classification_mean_graph(probs, targets, rows)

    def _contrastive_mean(self, q_graph, pool_graph, anchor_rows, pos, valid, tau):
        return contrastive_mean_graph(q_graph, pool_graph, anchor_rows, pos, valid, tau)

    def _pool_graph(self, q, k):
        """Differentiable pool in build_pool's row order; call while recording."""
        return ad.concat_rows([q, ad.Tensor(k), ad.Tensor(self.queue.embeddings)])

    def _pico_losses(self, tape, q, probs, k, anchor_rows, targets, pos, valid,
                     lam_effective, pool_graph=None):
        """Combined objective on a subset of anchors; returns (cls, cont, total)."""
        with ad.recording(tape):
            cls = self._classification_mean(probs, targets, anchor_rows)
            if lam_effective > 0 and len(anchor_rows):
                if pool_graph is None:
                    pool_graph = self._pool_graph(q, k)
                cont = self._contrastive_mean(q, pool_graph, anchor_rows, pos,
                                              valid, self.config.tau)
                total = cls + lam_effective * cont
            else:
                cont = ad.Tensor(0.0)
                total = cls
        return cls, cont, total

    # -- epoch loop ---------------------------------------------------------

    def _batches(self):
        n = len(self.features)
        order = self.rng.permutation(n)
        for start in range(0, n, self.batch_size):
            yield order[start : start + self.batch_size]

    def _forward_batch(self, idx):
        qv, kv = two_views_batch(self.features[idx], self.augment, self.rng)
        tape = ad.Tape()
        with ad.recording(tape):
            q, probs = self.model.forward_query(qv)
        k = self.model.forward_key(kv)
        y_tilde = predict_within_batch(probs.data, self.cand[idx])
        return tape, qv, q, probs, k, y_tilde

    def _update_prototypes(self, q_values, y_tilde, rows):
        if self.config.prototype_mode != "momentum":
            return
        for i in rows:
            self.bank.update(q_values[i], y_tilde[i], self.config.gamma)

    def _disambiguate_batch(self, idx, q_values, epoch, warmup):
        if warmup:
            return
        phi = self.config.phi_at(epoch, self.total_epochs)
        self.s[idx] = disambiguate(self.s[idx], q_values, self.bank, self.cand[idx],
                                   phi, self.config.policy, self.config.tau)

    def _finish_batch(self, tape, total, k, y_tilde, y_hat, clean, idx):
        tape.backward(total)
        self.opt.step()
        self.model.momentum_update(self.encoder_momentum)
        self.queue.enqueue(k, y_tilde, y_hat, clean, self.cand[idx])

    def _end_of_epoch(self):
        if self.config.prototype_mode == "recompute":
            emb, probs = self.model.forward_eval(self.features)
            self.bank.recompute(emb, predict_within_batch(probs, self.cand))

    def run_epoch(self, epoch) -> EpochMetrics:
        self.opt.lr = ad.cosine_lr(epoch, self.total_epochs, self.base_lr)
        warmup = epoch < self.config.warmup_epochs
        lam = 0.0 if warmup else self.config.lam
        sums = np.zeros(3)
        n_batches = 0
        for idx in self._batches():
            tape, qv, q, probs, k, y_tilde = self._forward_batch(idx)
            rows = np.arange(len(idx))
            self._update_prototypes(q.data, y_tilde, rows)
            pool = build_pool(q.data, k, y_tilde, self.queue, cand=self.cand[idx])
            valid = pool.anchor_valid_mask()
            pos = select_positives(
                y_tilde, pool, valid, strategy=self.config.positive_strategy,
                config=self.config, epoch=epoch, total_epochs=self.total_epochs,
                anchor_cand=self.cand[idx], anchor_conf=probs.data.max(axis=1))
            self._disambiguate_batch(idx, q.data, epoch, warmup)
            cls, cont, total = self._pico_losses(
                tape, q, probs, k, rows, self.s[idx], pos, valid, lam)
            self._finish_batch(tape, total, k, y_tilde, y_tilde,
                               np.ones(len(idx), dtype=bool), idx)
            sums += (cls.item(), cont.item(), total.item())
            n_batches += 1
        self._end_of_epoch()
        mean = sums / max(n_batches, 1)
        return EpochMetrics(
            epoch=epoch,
            loss_cls=mean[0],
            loss_cont=mean[1],
            loss_total=mean[2],
            pseudo_acc=self.pseudo_target_accuracy(),
            mmc=self.mmc(),
        )

    # -- metrics ------------------------------------------------------------

    def pseudo_target_accuracy(self):
        return float((self.s.argmax(axis=1) == self.true_labels).mean())

    def mmc(self):
        return float(self.s.max(axis=1).mean())

    def evaluate(self, features, labels):
        """Test accuracy of the classifier head on held-out labeled data."""
        _, probs = self.model.forward_eval(np.asarray(features, dtype=np.float64))
        return float((probs.argmax(axis=1) == np.asarray(labels)).mean())
