"""Noise-robust training on top of the core loop.

Each epoch starts by splitting the dataset into clean and noisy halves by
prototype similarity. Clean examples run the ordinary partial-label step
(prototypes and label-match positives drawn from clean pool elements
only); noisy examples are treated as unlabeled and handled with
full-label positive sets, nearest-neighbor positive sets, prototype-based
guessed targets, and mixup over everything.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .networks import predict_within_batch
from .pico import (
    EpochMetrics,
    PicoTrainer,
    build_pool,
    classification_mean_graph,
    contrastive_mean_graph,
    select_positives,
)

SELECTION_METHODS = ("similarity", "small_loss")


@dataclass(frozen=True)
class PicoPlusConfig:
    delta: float = 0.6
    knn_k: int = 16
    varsigma: float = 4.0  # Beta shape for mixup; <= 0 disables mixup entirely
    alpha: float = 2.0
    beta: float = 0.1
    warmup_epochs: int = 5
    knn_start_epoch: int = 20
    selection: str = "similarity"

    def validate(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.warmup_epochs < 0 or self.knn_start_epoch < 0:
            raise ValueError("epoch thresholds must be >= 0")
        if self.selection not in SELECTION_METHODS:
            raise ValueError(f"selection must be one of {SELECTION_METHODS}")


@dataclass
class CleanSplit:
    """Partition of the dataset into clean and noisy index sets."""

    clean: np.ndarray
    threshold: float

    @property
    def noisy(self):
        return ~self.clean

    def fraction(self):
        return float(self.clean.mean())


def select_clean(similarities, delta) -> CleanSplit:
    """Keep the delta fraction most prototype-similar examples.

    The threshold is the (1 - delta) quantile; membership is strict, so
    ties fall to the noisy side. delta = 1 selects everything.
    """
    sims = np.asarray(similarities, dtype=np.float64)
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    if delta == 1.0:
        return CleanSplit(clean=np.ones(len(sims), dtype=bool), threshold=-np.inf)
    threshold = float(np.quantile(sims, 1.0 - delta))
    return CleanSplit(clean=sims > threshold, threshold=threshold)


def select_clean_small_loss(losses, delta) -> CleanSplit:
    """Ablation selector: keep the delta fraction with the lowest loss."""
    losses = np.asarray(losses, dtype=np.float64)
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    if delta == 1.0:
        return CleanSplit(clean=np.ones(len(losses), dtype=bool), threshold=np.inf)
    threshold = float(np.quantile(losses, delta))
    return CleanSplit(clean=losses < threshold, threshold=threshold)


def noisy_positive_mask(anchor_labels_hat, pool, valid):
    """Pool elements whose full-or-within-set prediction matches the anchor's."""
    anchor = np.asarray(anchor_labels_hat)
    return valid & (pool.labels_hat[None, :] == anchor[:, None])


def knn_positive_mask(q_values, pool, valid, k):
    """The k pool elements most cosine-similar to each anchor, within its view."""
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = np.asarray(q_values) @ pool.embeddings.T
    sims = np.where(valid, sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")
    mask = np.zeros_like(valid)
    counts = np.minimum(valid.sum(axis=1), k)
    for i in range(len(mask)):
        mask[i, order[i, : counts[i]]] = True
    return mask


def guess_labels(q_values, bank, tau):
    """Prototype-softmax targets over all classes (not candidate-restricted)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    logits = bank.similarities(q_values) / tau
    logits = np.atleast_2d(logits)
    logits -= logits.max(axis=1, keepdims=True)
    expd = np.exp(logits)
    return expd / expd.sum(axis=1, keepdims=True)


def mix_pairs(x_views, targets, perm, sigma):
    """Convex combination of each row with its permuted partner."""
    sig = np.asarray(sigma, dtype=np.float64)[:, None]
    x_m = sig * x_views + (1.0 - sig) * x_views[perm]
    s_m = sig * np.asarray(targets) + (1.0 - sig) * np.asarray(targets)[perm]
    return x_m, s_m


def mixup_batch(x_views, targets, varsigma, rng):
    """Draw the pairing permutation and Beta(varsigma, varsigma) coefficients."""
    if varsigma <= 0:
        raise ValueError("varsigma must be positive; non-positive disables mixup")
    perm = rng.permutation(len(x_views))
    sigma = rng.beta(varsigma, varsigma, size=len(x_views))
    return mix_pairs(x_views, targets, perm, sigma)


class PicoPlusTrainer(PicoTrainer):
    """Noise-robust trainer; warm-up epochs run the plain training step."""

    def __init__(self, *args, plus_config: PicoPlusConfig = PicoPlusConfig(), **kwargs):
        super().__init__(*args, **kwargs)
        plus_config.validate()
        self.plus = plus_config
        self.split = None

    # -- epoch-start split ----------------------------------------------

    def _compute_split(self):
        emb, probs = self.model.forward_eval(self.features)
        y_tilde = predict_within_batch(probs, self.cand)
        if self.plus.selection == "small_loss":
            losses = -(self.s * np.log(np.maximum(probs, ad.LOG_CLAMP))).sum(axis=1)
            return select_clean_small_loss(losses, self.plus.delta)
        sims = (emb * self.bank.mu[y_tilde]).sum(axis=1)
        return select_clean(sims, self.plus.delta)

    def _split_metrics(self):
        truth_in_cand = self.cand[np.arange(len(self.cand)), self.true_labels]
        clean = self.split.clean
        precision = float(truth_in_cand[clean].mean()) if clean.any() else 0.0
        recall = float(clean[truth_in_cand].mean()) if truth_in_cand.any() else 0.0
        return self.split.fraction(), precision, recall

    # -- epoch loop -------------------------------------------------------

    def run_epoch(self, epoch) -> EpochMetrics:
        if epoch < self.plus.warmup_epochs:
            return super().run_epoch(epoch)
        self.split = self._compute_split()
        self.opt.lr = ad.cosine_lr(epoch, self.total_epochs, self.base_lr)
        names = ("cls", "cont", "total", "mix", "clean", "ncont", "knn", "ncls")
        sums = dict.fromkeys(names, 0.0)
        n_batches = 0
        for idx in self._batches():
            values = self._plus_batch(idx, epoch)
            for name in names:
                sums[name] += values[name]
            n_batches += 1
        self._end_of_epoch()
        denom = max(n_batches, 1)
        frac, precision, recall = self._split_metrics()
        return EpochMetrics(
            epoch=epoch,
            loss_cls=sums["cls"] / denom,
            loss_cont=sums["cont"] / denom,
            loss_total=sums["total"] / denom,
            pseudo_acc=self.pseudo_target_accuracy(),
            mmc=self.mmc(),
            loss_mix=sums["mix"] / denom,
            loss_clean=sums["clean"] / denom,
            loss_ncont=sums["ncont"] / denom,
            loss_knn=sums["knn"] / denom,
            loss_ncls=sums["ncls"] / denom,
            clean_fraction=frac,
            clean_precision=precision,
            clean_recall=recall,
        )

    def _plus_batch(self, idx, epoch):
        cfg, plus = self.config, self.plus
        tape, qv, q, probs, k, y_tilde = self._forward_batch(idx)
        n_batch = len(idx)
        clean_b = self.split.clean[idx]
        y_hat = np.where(clean_b, y_tilde, probs.data.argmax(axis=1))
        rows_clean = np.flatnonzero(clean_b)
        rows_noisy = np.flatnonzero(~clean_b)

        self._update_prototypes(q.data, y_tilde, rows_clean)
        pool = build_pool(q.data, k, y_tilde, self.queue, labels_hat=y_hat,
                          clean=clean_b, cand=self.cand[idx])
        valid = pool.anchor_valid_mask()
        pos_clean = select_positives(
            y_tilde, pool, valid, strategy=cfg.positive_strategy, config=cfg,
            epoch=epoch, total_epochs=self.total_epochs,
            anchor_cand=self.cand[idx], anchor_conf=probs.data.max(axis=1),
        ) & pool.clean[None, :]
        self._disambiguate_batch(idx, q.data, epoch, warmup=False)
        s_guess = guess_labels(q.data, self.bank, cfg.tau)

        with ad.recording(tape):
            pool_graph = self._pool_graph(q, k)
        if len(rows_clean):
            cls_c, cont_c, l_clean = self._pico_losses(
                tape, q, probs, k, rows_clean, self.s[idx][clean_b],
                pos_clean[rows_clean], valid[rows_clean], cfg.lam,
                pool_graph=pool_graph)
        else:
            cls_c = cont_c = l_clean = ad.Tensor(0.0)

        zero = ad.Tensor(0.0)
        l_mix = l_ncont = l_knn = l_ncls = zero
        mixup_on = plus.varsigma > 0
        if mixup_on:
            s_hat = np.where(clean_b[:, None], self.s[idx], s_guess)
            x_m, s_m = mixup_batch(qv, s_hat, plus.varsigma, self.rng)
            with ad.recording(tape):
                _, probs_m = self.model.forward_query(x_m)
                l_mix = classification_mean_graph(probs_m, s_m, np.arange(n_batch))
        if plus.beta > 0:
            with ad.recording(tape):
                pos_noisy = noisy_positive_mask(y_hat, pool, valid)
                l_ncont = contrastive_mean_graph(
                    q, pool_graph, np.arange(n_batch), pos_noisy, valid, cfg.tau)
                if len(rows_noisy):
                    if epoch >= plus.knn_start_epoch:
                        pos_knn = knn_positive_mask(q.data[rows_noisy], pool,
                                                    valid[rows_noisy], plus.knn_k)
                        l_knn = contrastive_mean_graph(
                            q, pool_graph, rows_noisy, pos_knn,
                            valid[rows_noisy], cfg.tau)
                    l_ncls = classification_mean_graph(probs, s_guess[rows_noisy],
                                                       rows_noisy)

        with ad.recording(tape):
            terms = []
            if mixup_on:
                terms.append(l_mix)
            terms.append(ad.scale(l_clean, plus.alpha))
            if plus.beta > 0:
                terms.append(ad.scale(l_ncont + l_knn + l_ncls, plus.beta))
            total = terms[0]
            for term in terms[1:]:
                total = total + term

        self._finish_batch(tape, total, k, y_tilde, y_hat, clean_b, idx)
        return {
            "cls": cls_c.item(), "cont": cont_c.item(), "total": total.item(),
            "mix": l_mix.item(), "clean": l_clean.item(), "ncont": l_ncont.item(),
            "knn": l_knn.item(), "ncls": l_ncls.item(),
        }
