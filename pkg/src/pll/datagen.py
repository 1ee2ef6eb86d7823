"""Synthetic feature-vector datasets in partial-label and noisy-label form.

Generation follows the standard benchmark protocol: draw labeled blobs,
flip negative labels into the candidate set (uniformly, by a
label-dependent matrix, or within superclasses), then optionally knock
the true label out of a noise fraction of the candidate sets. Image
augmentation is replaced by its vector-space analogue: additive Gaussian
noise plus random coordinate masking.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DatasetFormatError(ValueError):
    """A dataset file failed validation; the message carries the position."""


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    true_label: int


@dataclass(frozen=True, eq=False)
class PartialExample:
    """A feature vector with its candidate label set.

    ``hidden_true_label`` exists for evaluation only; in noisy mode it may
    fall outside ``candidates``.
    """

    features: np.ndarray
    candidates: frozenset
    hidden_true_label: int

    def __eq__(self, other):
        return (
            isinstance(other, PartialExample)
            and np.array_equal(self.features, other.features)
            and self.candidates == other.candidates
            and self.hidden_true_label == other.hidden_true_label
        )


@dataclass(frozen=True)
class UniformFlip:
    """Each negative label becomes a candidate independently with probability q."""

    q: float

    def validate(self, n_classes):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError("uniform flip probability must lie in [0, 1]")


@dataclass(frozen=True)
class MatrixFlip:
    """Label j joins the candidate set of a class-y example with probability matrix[y, j]."""

    matrix: np.ndarray

    def validate(self, n_classes):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (n_classes, n_classes):
            raise ValueError(f"flip matrix must be {n_classes}x{n_classes}")
        if not np.allclose(np.diag(m), 1.0, atol=0):
            raise ValueError("flip matrix diagonal must be exactly 1")
        if m.min() < 0.0 or m.max() > 1.0:
            raise ValueError("flip matrix entries must lie in [0, 1]")


@dataclass(frozen=True)
class HierarchicalFlip:
    """Negatives inside the true label's superclass flip with probability q; others never."""

    partition: tuple
    q: float

    def validate(self, n_classes):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError("hierarchical flip probability must lie in [0, 1]")
        seen = sorted(c for group in self.partition for c in group)
        if seen != list(range(n_classes)):
            raise ValueError("superclass partition must cover all classes disjointly")


@dataclass(frozen=True)
class NoiseSpec:
    """With probability eta an example's candidate set is regenerated without its true label."""

    eta: float

    def validate(self):
        if not 0.0 <= self.eta < 1.0:
            raise ValueError("noise rate must lie in [0, 1)")


@dataclass(frozen=True)
class AugmentSpec:
    noise_sigma_query: float = 0.1
    noise_sigma_key: float = 0.05
    mask_prob_query: float = 0.1
    mask_prob_key: float = 0.05

    def validate(self):
        if self.noise_sigma_query < 0 or self.noise_sigma_key < 0:
            raise ValueError("augment noise sigmas must be >= 0")
        for p in (self.mask_prob_query, self.mask_prob_key):
            if not 0.0 <= p <= 1.0:
                raise ValueError("augment mask probabilities must lie in [0, 1]")


def cyclic_pair_matrix(n_classes: int) -> np.ndarray:
    """Banded preset: each label drags in its cyclic successor with probability 0.5."""
    if n_classes < 2:
        raise ValueError("cyclic_pair_matrix needs at least 2 classes")
    m = np.eye(n_classes)
    for y in range(n_classes):
        m[y, (y + 1) % n_classes] = 0.5
    return m


def cyclic_band_matrix(n_classes: int) -> np.ndarray:
    """Banded preset: the five cyclic successors flip at 0.9, 0.7, 0.5, 0.3, 0.1."""
    band = (0.9, 0.7, 0.5, 0.3, 0.1)
    if n_classes < len(band) + 1:
        raise ValueError("cyclic_band_matrix needs at least 6 classes")
    m = np.eye(n_classes)
    for y in range(n_classes):
        for offset, p in enumerate(band, start=1):
            m[y, (y + offset) % n_classes] = p
    return m


def make_gaussian_blobs(n, n_classes, d_in, spread, seed):
    """Balanced isotropic Gaussian blobs with unit-sphere class means.

    Labels are assigned round-robin so class counts differ by at most one.
    """
    if n_classes < 2 or n < n_classes:
        raise ValueError("need n >= n_classes >= 2")
    if d_in < 2:
        raise ValueError("need d_in >= 2")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, d_in))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.arange(n) % n_classes
    noise = rng.standard_normal((n, d_in))
    features = means[labels] + spread * noise
    return [
        LabeledExample(features=features[i], true_label=int(labels[i]))
        for i in range(n)
    ]


def _flip_row_probs(flip, y, n_classes):
    """Per-label candidate-inclusion probabilities for a class-y example."""
    if isinstance(flip, UniformFlip):
        probs = np.full(n_classes, flip.q)
    elif isinstance(flip, MatrixFlip):
        probs = np.asarray(flip.matrix, dtype=np.float64)[y].copy()
    elif isinstance(flip, HierarchicalFlip):
        probs = np.zeros(n_classes)
        for group in flip.partition:
            if y in group:
                probs[list(group)] = flip.q
                break
    else:
        raise TypeError(f"unknown flip spec: {flip!r}")
    probs[y] = 1.0
    return probs


def _structural_negatives(flip, y, n_classes):
    """Negative labels the flip variant could ever include, for the noisy fallback."""
    if isinstance(flip, MatrixFlip):
        row = np.asarray(flip.matrix, dtype=np.float64)[y]
        support = [j for j in range(n_classes) if j != y and row[j] > 0]
    elif isinstance(flip, HierarchicalFlip):
        support = []
        for group in flip.partition:
            if y in group:
                support = [j for j in group if j != y]
                break
    else:
        support = [j for j in range(n_classes) if j != y]
    if not support:
        support = [j for j in range(n_classes) if j != y]
    return support


def infer_n_classes(flip, labels):
    if isinstance(flip, MatrixFlip):
        return np.asarray(flip.matrix).shape[0]
    if isinstance(flip, HierarchicalFlip):
        return sum(len(g) for g in flip.partition)
    return int(max(labels)) + 1


def apply_flip(data, flip, seed, n_classes=None):
    """Turn labeled examples into standard partial-label examples."""
    if n_classes is None:
        n_classes = infer_n_classes(flip, [ex.true_label for ex in data])
    flip.validate(n_classes)
    rng = np.random.default_rng(seed)
    draws = rng.random((len(data), n_classes))
    out = []
    for i, ex in enumerate(data):
        probs = _flip_row_probs(flip, ex.true_label, n_classes)
        mask = draws[i] < probs
        mask[ex.true_label] = True
        out.append(
            PartialExample(
                features=ex.features,
                candidates=frozenset(int(j) for j in np.flatnonzero(mask)),
                hidden_true_label=ex.true_label,
            )
        )
    return out


_REGEN_CAP = 1000


def apply_noise(data, originals, noise, flip, seed, n_classes=None):
    """Knock the true label out of a noise-rate fraction of candidate sets.

    Affected examples get a fresh candidate draw over negatives only,
    regenerated until non-empty. When the flip variant cannot produce any
    negative candidate (for instance q = 0), one structurally admissible
    wrong label is drawn instead so the non-emptiness guarantee holds.
    """
    if len(data) != len(originals):
        raise ValueError("data and originals must be parallel lists")
    noise.validate()
    if n_classes is None:
        n_classes = infer_n_classes(flip, [ex.true_label for ex in originals])
    flip.validate(n_classes)
    rng = np.random.default_rng(seed)
    out = []
    for partial, orig in zip(data, originals):
        y = orig.true_label
        if rng.random() >= noise.eta:
            out.append(partial)
            continue
        probs = _flip_row_probs(flip, y, n_classes)
        probs[y] = 0.0
        if probs.max() <= 0.0:
            support = _structural_negatives(flip, y, n_classes)
            pick = support[int(rng.integers(len(support)))]
            candidates = frozenset([pick])
        else:
            for attempt in range(_REGEN_CAP):
                mask = rng.random(n_classes) < probs
                if mask.any():
                    break
            else:
                raise RuntimeError("candidate regeneration failed to produce labels")
            candidates = frozenset(int(j) for j in np.flatnonzero(mask))
        out.append(
            PartialExample(
                features=partial.features,
                candidates=candidates,
                hidden_true_label=y,
            )
        )
    return out


def two_views_rng(x, spec, rng):
    """Draw a (query, key) view pair: Gaussian jitter then coordinate masking."""
    x = np.asarray(x, dtype=np.float64)
    q = x + spec.noise_sigma_query * rng.standard_normal(x.shape)
    q = q * (rng.random(x.shape) >= spec.mask_prob_query)
    k = x + spec.noise_sigma_key * rng.standard_normal(x.shape)
    k = k * (rng.random(x.shape) >= spec.mask_prob_key)
    return q, k


def two_views(x, spec, seed):
    return two_views_rng(x, spec, np.random.default_rng(seed))


# a batch of rows shares one draw sequence; same maths as two_views_rng
two_views_batch = two_views_rng


def to_arrays(examples, n_classes):
    """Pack examples into (features, candidate mask, true labels) arrays."""
    n = len(examples)
    if n == 0:
        raise ValueError("empty dataset")
    d = len(examples[0].features)
    features = np.zeros((n, d))
    cand = np.zeros((n, n_classes), dtype=bool)
    truth = np.zeros(n, dtype=np.int64)
    for i, ex in enumerate(examples):
        features[i] = ex.features
        cand[i, sorted(ex.candidates)] = True
        truth[i] = ex.hidden_true_label
    return features, cand, truth


def save_dataset(examples, n_classes, path):
    """Write the one-line-per-example text format; floats round-trip exactly."""
    n = len(examples)
    d = len(examples[0].features) if n else 0
    lines = [f"pll v1 n={n} d={d} C={n_classes}"]
    for ex in examples:
        feats = ",".join(repr(float(v)) for v in ex.features)
        cands = ";".join(str(c) for c in sorted(ex.candidates))
        lines.append(f"{feats} | {cands} | {ex.hidden_true_label}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    """Read a dataset file back; returns (examples, n_classes)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    header = lines[0].split()
    try:
        tag, version = header[0], header[1]
        fields = dict(part.split("=") for part in header[2:])
        n, d, n_classes = int(fields["n"]), int(fields["d"]), int(fields["C"])
    except (IndexError, KeyError, ValueError) as err:
        raise DatasetFormatError(f"{path}:1: bad header {lines[0]!r}") from err
    if tag != "pll" or version != "v1":
        raise DatasetFormatError(f"{path}:1: unsupported format {lines[0]!r}")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise DatasetFormatError(f"{path}: header says n={n}, found {len(body)} rows")
    examples = []
    for lineno, line in enumerate(body, start=2):
        parts = line.split("|")
        if len(parts) != 3:
            raise DatasetFormatError(f"{path}:{lineno}: expected 3 '|' fields")
        try:
            feats = np.array([float(v) for v in parts[0].strip().split(",")])
            cands = frozenset(int(c) for c in parts[1].strip().split(";") if c != "")
            truth = int(parts[2].strip())
        except ValueError as err:
            raise DatasetFormatError(f"{path}:{lineno}: malformed row") from err
        if feats.shape != (d,):
            raise DatasetFormatError(
                f"{path}:{lineno}: expected {d} features, got {feats.shape[0]}"
            )
        if not cands:
            raise DatasetFormatError(f"{path}:{lineno}: empty candidate list")
        bad = [c for c in cands if not 0 <= c < n_classes]
        if bad or not 0 <= truth < n_classes:
            raise DatasetFormatError(
                f"{path}:{lineno}: label index out of range [0, {n_classes})"
            )
        examples.append(
            PartialExample(features=feats, candidates=cands, hidden_true_label=truth)
        )
    return examples, n_classes
