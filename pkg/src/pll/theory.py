"""Mechanical checks of the clustering view of the contrastive objective.

For unit embeddings split into predicted-label clusters, the intra-cluster
spread can be written three ways (all-pairs distances, distances to the
cluster mean, and a closed form in the mean norms), the mean-norm
surrogates R1 and R2 bound each other, and the von Mises-Fisher
concentration grows with the mean norm. ``run_verification`` exercises
all of it on random instances and reports per-check residuals.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .networks import predict_within

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class ClusterAssignment:
    """Unit embeddings partitioned by their integer cluster labels."""

    embeddings: np.ndarray
    labels: np.ndarray

    @staticmethod
    def create(embeddings, labels, validate=True):
        emb = np.asarray(embeddings, dtype=np.float64)
        lab = np.asarray(labels, dtype=np.int64)
        if emb.ndim != 2 or len(emb) != len(lab):
            raise ValueError("embeddings must be [n, d] with one label per row")
        if validate:
            norms = np.linalg.norm(emb, axis=1)
            if np.abs(norms - 1.0).max() > UNIT_TOL:
                raise ValueError("embeddings must be unit vectors")
        return ClusterAssignment(embeddings=emb, labels=lab)

    def clusters(self):
        for c in np.unique(self.labels):
            yield c, self.embeddings[self.labels == c]


def cluster_means(assignment):
    """(sizes, Euclidean means) over the distinct labels, in label order."""
    sizes, means = [], []
    for _, members in assignment.clusters():
        sizes.append(len(members))
        means.append(members.mean(axis=0))
    return np.array(sizes), np.stack(means)


def alignment_two_ways(assignment):
    """Intra-cluster spread by three routes: all-pairs, centered, closed form.

    Returns (pairwise, centered, closed) where
      pairwise = sum_j (1 / 2n_j) sum_{x, x' in S_j} ||x - x'||^2
      centered = sum_j sum_{x in S_j} ||x - mu_j||^2
      closed   = sum_j n_j (1 - ||mu_j||^2)
    The three agree to ~1e-10 on unit embeddings.
    """
    pairwise = centered = closed = 0.0
    for _, members in assignment.clusters():
        n_j = len(members)
        diff = members[:, None, :] - members[None, :, :]
        pairwise += (diff ** 2).sum() / (2.0 * n_j)
        mu = members.mean(axis=0)
        centered += ((members - mu) ** 2).sum()
        closed += n_j * (1.0 - float(mu @ mu))
    return pairwise, centered, closed


def alignment_pairwise_excluding_self(assignment):
    """All-pairs form normalized by 1/(2(n_j - 1)): the positives-without-self variant.

    Singleton clusters contribute zero. The gap to the centered form is the
    small-cluster approximation error, reported (not asserted) by the
    verification suite.
    """
    total = 0.0
    for _, members in assignment.clusters():
        n_j = len(members)
        if n_j < 2:
            continue
        diff = members[:, None, :] - members[None, :, :]
        total += (diff ** 2).sum() / (2.0 * (n_j - 1))
    return total


def r1_r2(assignment):
    """Size-weighted mean-norm surrogates: R1 = sum (n_j/n)||mu_j||^2, R2 with ||mu_j||."""
    sizes, means = cluster_means(assignment)
    n = sizes.sum()
    norms = np.linalg.norm(means, axis=1)
    r1 = float((sizes / n) @ (norms ** 2))
    r2 = float((sizes / n) @ norms)
    return r1, r2


def intraclass_covariance(assignment):
    """The closed-form spread; affinely tied to R1 by covariance = n (1 - R1)."""
    return alignment_two_ways(assignment)[2]


def vmf_kappa(mu_norm, d, regime):
    """Concentration of a d-variate von Mises-Fisher fit from its mean norm.

    'large' regime: (d-1) / (2 (1 - r)); 'small' regime: the fourth-order
    series d r (1 + d/(d+2) r^2 + d^2 (d+8) / ((d+2)^2 (d+4)) r^4).
    """
    r = float(mu_norm)
    if not 0.0 <= r <= 1.0:
        raise ValueError("mean norm must lie in [0, 1]")
    if regime == "large":
        if r >= 1.0:
            raise ValueError("large-regime approximation diverges at mean norm 1")
        return (d - 1) / (2.0 * (1.0 - r))
    if regime == "small":
        return d * r * (1.0 + d / (d + 2) * r ** 2
                        + d ** 2 * (d + 8) / ((d + 2) ** 2 * (d + 4)) * r ** 4)
    raise ValueError("regime must be 'large' or 'small'")


def em_posterior(f_out, candidates, mode="soft"):
    """Posterior over the candidate set from classifier probabilities.

    Soft: restrict to candidates and renormalize (uniform fallback when all
    candidate mass is zero). Hard: one-hot at the within-set arg-max.
    """
    f = np.asarray(f_out, dtype=np.float64)
    cand = sorted(candidates)
    if not cand:
        raise ValueError("candidate set must be non-empty")
    pi = np.zeros_like(f)
    if mode == "hard":
        pi[predict_within(f, set(cand))] = 1.0
        return pi
    if mode != "soft":
        raise ValueError("mode must be 'soft' or 'hard'")
    mass = f[cand].sum()
    if mass <= 0.0:
        pi[cand] = 1.0 / len(cand)
    else:
        pi[cand] = f[cand] / mass
    return pi


def brute_force_log_likelihood(assignment, kappa):
    """Per-example parameter-dependent log-likelihood under hard assignments.

    With each cluster modeled as a von Mises-Fisher component at fixed
    concentration, the theta-dependent part reduces to kappa times the
    size-weighted mean norm (the R2 surrogate); normalization constants and
    the candidate-generation constant drop out. Clusters with a zero mean
    vector have no defined direction and contribute zero.
    """
    total = 0.0
    n = len(assignment.embeddings)
    for _, members in assignment.clusters():
        mu = members.mean(axis=0)
        norm = np.linalg.norm(mu)
        if norm == 0.0:
            continue
        total += kappa * float((members @ (mu / norm)).sum())
    return total / n


# -- verification suite ------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    residual: float
    detail: str


@dataclass
class VerificationReport:
    checks: list

    @property
    def all_passed(self):
        return all(c.passed for c in self.checks)

    def lines(self):
        out = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            out.append(f"{status}  {c.name:<28} residual={c.residual:.3e}  {c.detail}")
        return out


def random_assignment(rng, max_n=100, max_d=16, max_clusters=6):
    n = int(rng.integers(2, max_n + 1))
    d = int(rng.integers(2, max_d + 1))
    c = int(rng.integers(1, max_clusters + 1))
    emb = rng.standard_normal((n, d))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return ClusterAssignment.create(emb, rng.integers(0, c, size=n))


def paper_example_assignment():
    """Two equal clusters with mean norms 0.5 and 1: R1 = 0.625, R2 = 0.75."""
    root3_half = np.sqrt(3.0) / 2.0
    emb = np.array([
        [0.5, root3_half],
        [0.5, -root3_half],
        [1.0, 0.0],
        [1.0, 0.0],
    ])
    return ClusterAssignment.create(emb, [0, 0, 1, 1])


def run_verification(seed=0, n_instances=1000, inject_fault=False) -> VerificationReport:
    """Run every identity and bound check; nonzero residuals are reported per check."""
    rng = np.random.default_rng(seed)
    checks = []

    # three-way alignment identity on random clusterings
    worst = 0.0
    for i in range(n_instances):
        a = random_assignment(rng)
        if inject_fault and i == 0:
            a.embeddings[0] *= 1.0 + 1e-4  # test hook: break one norm
        pairwise, centered, closed = alignment_two_ways(a)
        worst = max(worst, abs(pairwise - centered), abs(centered - closed))
    checks.append(CheckResult(
        "alignment-identity", worst <= 1e-10, worst,
        f"max 3-way gap over {n_instances} instances"))

    # R2^2 <= R1 <= R2 <= 1 on random clusterings
    worst = 0.0
    for _ in range(n_instances):
        r1, r2 = r1_r2(random_assignment(rng))
        worst = max(worst, r2 ** 2 - r1, r1 - r2, r2 - 1.0, -r1)
    checks.append(CheckResult(
        "theorem-bounds", worst <= 1e-12, max(worst, 0.0),
        f"max bound violation over {n_instances} instances"))

    # the worked example with mean norms (0.5, 1)
    r1, r2 = r1_r2(paper_example_assignment())
    residual = max(abs(r1 - 0.625), abs(r2 - 0.75))
    checks.append(CheckResult(
        "mean-norm-example", residual == 0.0, residual,
        f"R1={r1!r} (want 0.625), R2={r2!r} (want 0.75)"))

    # concentration approximations: spot value, limits, monotonicity
    kappa_spot = vmf_kappa(0.9, 3, "large")
    grid = np.linspace(0.0, 0.99, 100)
    large_vals = [vmf_kappa(r, 8, "large") for r in grid]
    small_vals = [vmf_kappa(r, 8, "small") for r in grid]
    mono = all(b > a for a, b in zip(large_vals, large_vals[1:]))
    mono &= all(b > a for a, b in zip(small_vals[1:], small_vals[2:]))
    residual = max(abs(kappa_spot - 10.0), abs(vmf_kappa(0.0, 5, "small")))
    checks.append(CheckResult(
        "kappa-approximations", residual < 1e-9 and mono, residual,
        "spot value 10 at (d=3, r=0.9), zero at r=0, strictly increasing"))

    # posterior consistency: hard form equals within-set arg-max
    bad = 0
    for _ in range(100):
        f = rng.dirichlet(np.ones(6))
        cand = set(int(c) for c in rng.choice(6, size=int(rng.integers(1, 6)),
                                              replace=False))
        hard = em_posterior(f, cand, mode="hard")
        if int(np.argmax(hard)) != predict_within(f, cand):
            bad += 1
        soft = em_posterior(f, cand, mode="soft")
        if abs(soft.sum() - 1.0) > 1e-12 or np.any(soft[[j for j in range(6)
                                                         if j not in cand]] != 0):
            bad += 1
    checks.append(CheckResult(
        "posterior-consistency", bad == 0, float(bad),
        "hard = within-set arg-max; soft = candidate-restricted renormalization"))

    # likelihood surrogate: relabeling choice agrees with R2; noise decreases it
    agree = True
    emb = rng.standard_normal((30, 5))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    for _ in range(50):
        lab_a = rng.integers(0, 3, 30)
        lab_b = rng.integers(0, 3, 30)
        a = ClusterAssignment.create(emb, lab_a)
        b = ClusterAssignment.create(emb, lab_b)
        la, lb = brute_force_log_likelihood(a, 4.0), brute_force_log_likelihood(b, 4.0)
        (_, ra), (_, rb) = r1_r2(a), r1_r2(b)
        if (la > lb) != (ra > rb) and la != lb:
            agree = False
    base = np.tile(np.eye(3, 5), (10, 1))
    labels = np.tile(np.arange(3), 10)
    prev = np.inf
    decreasing = True
    for noise in (0.0, 0.3, 0.6, 1.0):
        pert = base + noise * rng.standard_normal(base.shape)
        pert /= np.linalg.norm(pert, axis=1, keepdims=True)
        _, r2n = r1_r2(ClusterAssignment.create(pert, labels))
        decreasing &= r2n < prev
        prev = r2n
    checks.append(CheckResult(
        "likelihood-surrogate", agree and decreasing, 0.0 if (agree and decreasing) else 1.0,
        "relabeling argmax matches R2; added noise strictly lowers R2"))

    # equality degeneracy: R1 == R2 forces every mean norm to 0 or 1
    worst = 0.0
    for _ in range(200):
        a = random_assignment(rng, max_n=20, max_d=6)
        r1, r2 = r1_r2(a)
        if abs(r1 - r2) <= 1e-12:
            _, means = cluster_means(a)
            norms = np.linalg.norm(means, axis=1)
            worst = max(worst, float((norms * (1.0 - norms)).max()))
    tight = ClusterAssignment.create(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                                     [0, 0, 1])
    r1t, r2t = r1_r2(tight)
    worst = max(worst, abs(r1t - r2t))
    checks.append(CheckResult(
        "equality-degeneracy", worst < 1e-6, worst,
        "R1 = R2 only when every cluster mean norm is 0 or 1"))

    # covariance is affine in R1: closed form equals n (1 - R1)
    worst = 0.0
    for _ in range(200):
        a = random_assignment(rng, max_n=40, max_d=8)
        cov = intraclass_covariance(a)
        r1, _ = r1_r2(a)
        worst = max(worst, abs(cov - len(a.embeddings) * (1.0 - r1)))
    checks.append(CheckResult(
        "covariance-affine-in-r1", worst <= 1e-9, worst,
        "spread = n (1 - R1) on random instances"))

    # informational: small-cluster gap of the self-excluding pairwise form
    gaps = []
    for _ in range(50):
        a = random_assignment(rng, max_n=12, max_d=6)
        _, centered, _ = alignment_two_ways(a)
        gaps.append(abs(alignment_pairwise_excluding_self(a) - centered))
    checks.append(CheckResult(
        "self-excluded-gap (info)", True, float(max(gaps)),
        "reported only: 1/(n_j-1) variant vs centered form at small n_j"))

    return VerificationReport(checks=checks)
