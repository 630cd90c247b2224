"""Random-Fourier independence statistic, stability clustering, and the
cluster-masked decorrelation objective.

Dependence between two embedding variables is measured by the squared
Frobenius norm of their weighted partial cross-covariance in a fixed bank
of random cosine features. Variables whose pairwise correlation is stable
across mini-batches are grouped together; only pairs that straddle two
groups are penalized, which keeps the effective sample size from
collapsing the way full pairwise decorrelation does.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import InvalidArgumentError, ShapeError
from .tape import Tensor

log = logging.getLogger(__name__)

_SQRT2 = np.sqrt(2.0)
_CONST_TOL = 1e-12


# ---------------------------------------------------------------------------
# random Fourier feature bank


@dataclass(frozen=True)
class RFFBank:
    """Frozen cosine feature maps h(z) = sqrt(2) * cos(omega * z + phi).

    One bank of n_u maps for the left side of a pair and n_v maps for the
    right side, shared by every variable. The same bank must be used for
    training and evaluation, so it is part of the checkpoint format.
    """

    omega_u: np.ndarray
    phi_u: np.ndarray
    omega_v: np.ndarray
    phi_v: np.ndarray

    @classmethod
    def create(cls, n_u=5, n_v=5, seed=0):
        rng = np.random.default_rng(seed)
        return cls(
            omega_u=rng.standard_normal(n_u),
            phi_u=rng.uniform(0.0, 2.0 * np.pi, n_u),
            omega_v=rng.standard_normal(n_v),
            phi_v=rng.uniform(0.0, 2.0 * np.pi, n_v),
        )

    @property
    def n_u(self):
        return self.omega_u.shape[0]

    @property
    def n_v(self):
        return self.omega_v.shape[0]

    def map_u(self, z):
        z = np.asarray(z, dtype=np.float64)
        return _SQRT2 * np.cos(z[:, None] * self.omega_u[None, :] + self.phi_u[None, :])

    def map_v(self, z):
        z = np.asarray(z, dtype=np.float64)
        return _SQRT2 * np.cos(z[:, None] * self.omega_v[None, :] + self.phi_v[None, :])

    def to_dict(self):
        return {
            "omega_u": self.omega_u.tolist(), "phi_u": self.phi_u.tolist(),
            "omega_v": self.omega_v.tolist(), "phi_v": self.phi_v.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def partial_cross_cov(Z, w, i, j, bank):
    """Weighted partial cross-covariance of variables i and j, (n_u, n_v).

    Entry (a, b) = 1/(N-1) * sum_n [w_n u_a(Z[n,i]) - mean_m w_m u_a(Z[m,i])]
                              * [w_n v_b(Z[n,j]) - mean_m w_m v_b(Z[m,j])].
    With uniform w this is the plain cross-covariance of the feature maps.
    Indices are 0-based.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    if n < 2:
        raise InvalidArgumentError("need at least 2 rows for a covariance")
    d = Z.shape[1]
    if not (0 <= i < d and 0 <= j < d) or i == j:
        raise InvalidArgumentError(f"invalid variable pair ({i}, {j}) for d={d}")
    w = np.asarray(w, dtype=np.float64)
    wu = w[:, None] * bank.map_u(Z[:, i])
    wv = w[:, None] * bank.map_v(Z[:, j])
    cu = wu - wu.mean(axis=0)
    cv = wv - wv.mean(axis=0)
    return cu.T @ cv / (n - 1)


# ---------------------------------------------------------------------------
# per-graph weights


def weight_map(rho):
    """Positive weights with unit mean over the active set.

    w = softplus(rho) / mean(softplus(rho)). The normalization is part of
    the map, so mean(w) = 1 holds by construction after every update and
    the all-zero solution of the decorrelation objective is unreachable.
    """
    raw = tape.softplus(rho)
    return tape.div(raw, tape.mean_(raw))


def weight_values(rho):
    """Numpy version of weight_map for reporting and constant weights."""
    raw = np.logaddexp(0.0, np.asarray(rho, dtype=np.float64))
    return raw / raw.mean()


RHO_UNIFORM = float(np.log(np.expm1(1.0)))  # softplus(rho) == 1


# ---------------------------------------------------------------------------
# cluster assignments


@dataclass
class ClusterAssignment:
    """Partition of the d embedding variables with medoid centers."""

    n_clusters: int
    assign: np.ndarray  # (d,) cluster id per variable
    medoids: np.ndarray  # (K,) variable index of each cluster center

    def __post_init__(self):
        self.assign = np.asarray(self.assign, dtype=np.intp)
        self.medoids = np.asarray(self.medoids, dtype=np.intp)
        d = self.assign.shape[0]
        if not 1 <= self.n_clusters <= d:
            raise InvalidArgumentError("need 1 <= K <= d clusters")
        if self.medoids.shape[0] != self.n_clusters:
            raise InvalidArgumentError("one medoid per cluster required")
        if set(self.assign.tolist()) - set(range(self.n_clusters)):
            raise InvalidArgumentError("cluster ids must lie in [0, K)")
        for j, m in enumerate(self.medoids):
            if self.assign[m] != j:
                raise InvalidArgumentError(f"medoid {m} not in its own cluster {j}")

    @property
    def n_vars(self):
        return self.assign.shape[0]

    @classmethod
    def round_robin(cls, d, k):
        """Seedless initial partition: variable v goes to cluster v mod K."""
        k = min(k, d)
        return cls(k, np.arange(d) % k, np.arange(k))

    def members(self, j):
        return np.flatnonzero(self.assign == j)

    def penalized_pairs(self, within=False):
        """Variable pairs i < j entering the decorrelation objective.

        Default penalizes pairs in different clusters; within=True flips to
        the literal same-cluster indicator kept for comparison runs.
        """
        d = self.n_vars
        pairs = []
        for i in range(d):
            for j in range(i + 1, d):
                same = self.assign[i] == self.assign[j]
                if same == within:
                    pairs.append((i, j))
        return pairs

    def to_dict(self):
        return {
            "K": int(self.n_clusters),
            "assign": self.assign.tolist(),
            "medoids": self.medoids.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["K"]), d["assign"], d["medoids"])


# ---------------------------------------------------------------------------
# decorrelation objective (tape)


def _stacked_centered_rff(z3, w_col, omega, phi):
    """Weighted, column-centered feature maps for every variable at once.

    z3: (N, d, 1) tensor; returns (d, N, n_feat).
    """
    angles = tape.add(tape.mul(z3, omega.reshape(1, 1, -1)),
                      phi.reshape(1, 1, -1))
    feats = tape.mul(_SQRT2, tape.cos_(angles))
    weighted = tape.mul(w_col, feats)
    centered = tape.sub(weighted, tape.mean_(weighted, axis=0, keepdims=True))
    return tape.permute(centered, (1, 0, 2))


def decor_loss(Z, w, clusters, bank, within=False):
    """Sum of squared Frobenius norms of weighted cross-covariances over
    the penalized variable pairs. Differentiable in both w and Z.

    Z: (N, d) tensor or array; w: (N,) tensor or array, already mapped to
    positive unit-mean weights by the caller.
    """
    zd = Z.data if isinstance(Z, Tensor) else np.asarray(Z, dtype=np.float64)
    n, d = zd.shape
    if n < 2:
        raise InvalidArgumentError("need at least 2 rows for a covariance")
    if clusters.n_vars != d:
        raise ShapeError(f"cluster assignment covers {clusters.n_vars} vars, Z has {d}")
    wd = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if wd.shape != (n,):
        raise ShapeError(f"weight shape {wd.shape} != ({n},)")

    pairs = clusters.penalized_pairs(within=within)
    if not pairs:
        return tape.mul(tape.sum_(w if isinstance(w, Tensor) else tape.constant(wd)),
                        0.0)

    if not isinstance(Z, Tensor):
        Z = tape.constant(Z)
    if not isinstance(w, Tensor):
        w = tape.constant(wd)
    z3 = tape.reshape(Z, (n, d, 1))
    w_col = tape.reshape(w, (n, 1, 1))
    cu = _stacked_centered_rff(z3, w_col, bank.omega_u, bank.phi_u)
    cv = _stacked_centered_rff(z3, w_col, bank.omega_v, bank.phi_v)
    mask = np.zeros((d, d))
    for i, j in pairs:
        mask[i, j] = 1.0
    return tape.masked_pair_frobenius(cu, cv, mask, 1.0 / (n - 1))


# ---------------------------------------------------------------------------
# correlation-stability profiles


def pearson_corr(x):
    """Pairwise Pearson correlation of columns; (corr, n_constant_columns).

    Constant columns get zero correlation with everything (including their
    own diagonal) and are counted as flagged.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    xc = x - x.mean(axis=0)
    sd = xc.std(axis=0)
    const = sd < _CONST_TOL
    xn = xc / np.where(const, 1.0, sd)
    c = xn.T @ xn / n
    c[const, :] = 0.0
    c[:, const] = 0.0
    diag = np.where(const, 0.0, 1.0)
    np.fill_diagonal(c, diag)
    np.clip(c, -1.0, 1.0, out=c)
    return c, int(const.sum())


class CorrelationProfile:
    """Per-subset correlation matrices plus a reference average.

    Subsets are mini-batches of graph embeddings. The reference average is
    recomputed from the momentum queue blocks when available, otherwise it
    falls back to the running mean of the stored subsets.
    """

    def __init__(self, d):
        self.d = d
        self.subsets = []
        self.reference = None
        self.constant_flags = 0

    @property
    def n_subsets(self):
        return len(self.subsets)

    def append_subset(self, z_block):
        z_block = np.asarray(z_block, dtype=np.float64)
        if z_block.ndim != 2 or z_block.shape[1] != self.d:
            raise ShapeError(f"subset must be (n, {self.d})")
        if z_block.shape[0] < 2:
            raise InvalidArgumentError("subset needs at least 2 rows")
        c, flagged = pearson_corr(z_block)
        if flagged:
            self.constant_flags += flagged
            log.debug("constant columns in correlation subset: %d", flagged)
        self.subsets.append(c)

    def set_reference_from_blocks(self, blocks):
        mats = []
        for b in blocks:
            c, flagged = pearson_corr(b)
            self.constant_flags += flagged
            mats.append(c)
        self.reference = np.mean(mats, axis=0) if mats else None

    def average_corr(self):
        if self.reference is not None:
            return self.reference
        if not self.subsets:
            raise InvalidArgumentError("profile has no subsets")
        return np.mean(self.subsets, axis=0)

    def dis_matrix(self):
        """Dissimilarity for every variable pair, (d, d) symmetric."""
        ell = self.n_subsets
        if ell < 2:
            raise InvalidArgumentError("need at least 2 subsets for dissimilarity")
        stack = np.stack(self.subsets)
        dev = stack - self.average_corr()[None, :, :]
        dm = np.sqrt((dev * dev).sum(axis=0) / (ell - 1))
        np.fill_diagonal(dm, 0.0)
        return dm


def dis(i, j, profile):
    """Stability dissimilarity: standard deviation (around the reference
    average) of the pair's correlation across subsets."""
    if profile.n_subsets < 2:
        raise InvalidArgumentError("need at least 2 subsets for dissimilarity")
    vals = np.array([c[i, j] for c in profile.subsets])
    ave = profile.average_corr()[i, j]
    return float(np.sqrt(((vals - ave) ** 2).sum() / (profile.n_subsets - 1)))


def update_profile(profile, z_batch, queue_blocks=()):
    """Append a batch subset and refresh the reference from queue blocks."""
    profile.append_subset(z_batch)
    if queue_blocks:
        profile.set_reference_from_blocks(queue_blocks)
    return profile


# ---------------------------------------------------------------------------
# k-medoids clustering under Dis


def _assignment_cost(dis_mat, medoids):
    return dis_mat[:, medoids].min(axis=1).sum()


def cluster_variables(dis_mat, k, seed=0, max_iter=50):
    """Partition variables by k-medoids (PAM swap heuristic) under Dis.

    Deterministic given the seed; ties break toward the lowest index.
    Accepts a precomputed dissimilarity matrix or a CorrelationProfile.
    """
    if isinstance(dis_mat, CorrelationProfile):
        dis_mat = dis_mat.dis_matrix()
    dis_mat = np.asarray(dis_mat, dtype=np.float64)
    d = dis_mat.shape[0]
    if not 1 <= k <= d:
        raise InvalidArgumentError(f"need 1 <= K <= {d}, got {k}")

    rng = np.random.default_rng(seed)
    medoids = np.sort(rng.choice(d, size=k, replace=False))
    cost = _assignment_cost(dis_mat, medoids)

    for _ in range(max_iter):
        best = None
        for mi in range(k):
            for o in range(d):
                if o in medoids:
                    continue
                cand = medoids.copy()
                cand[mi] = o
                c = _assignment_cost(dis_mat, np.sort(cand))
                if c < cost - 1e-15 and (best is None or c < best[0]):
                    best = (c, mi, o)
        if best is None:
            break
        cost, mi, o = best
        medoids[mi] = o
        medoids = np.sort(medoids)

    assign = np.argmin(dis_mat[:, medoids], axis=1)
    assign[medoids] = np.arange(k)  # a medoid always belongs to its own cluster
    return ClusterAssignment(k, assign, medoids)
