"""Compression schemes: decompression, projection, storage cost and exact oracles.

Every scheme acts on the *constrained* entries of a weight vector. For the
low-rank scheme these are the entries of one designated layer matrix (in
row-major order); for every other scheme they are the entries selected by
``compress_mask``. Indices (assignments, supports) are 0-based.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, SizeLimitError
from .model import LEAST_SQUARES, loss_eval, restricted_lstsq

ADAPTIVE_QUANT = "adaptive-quant"
FIXED_CODEBOOK = "fixed-codebook"
BINARIZE = "binarize"
TERNARY = "ternary"
LOW_RANK = "low-rank"
PRUNE = "prune-l0"
KINDS = (ADAPTIVE_QUANT, FIXED_CODEBOOK, BINARIZE, TERNARY, LOW_RANK, PRUNE)

SIGN_CODEBOOK = np.array([-1.0, 1.0])
TERNARY_CODEBOOK = np.array([-1.0, 0.0, 1.0])
SVD_RTOL = 1e-12


@dataclass(frozen=True)
class CompressionScheme:
    """Which feasible set to project on, and its compression level.

    ``K`` (adaptive-quant), ``codebook`` (fixed-codebook), ``rank`` and
    ``layer`` (low-rank) and ``kappa`` (prune-l0) are only read by their kind.
    """

    kind: str
    K: int = None
    codebook: tuple = None
    rank: int = None
    layer: str = None
    kappa: int = None
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scheme kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == ADAPTIVE_QUANT:
            if self.K is None or int(self.K) < 1:
                raise ConfigError("adaptive-quant needs K >= 1")
            if int(self.restarts) < 1:
                raise ConfigError("restarts must be a positive integer")
        elif self.kind == FIXED_CODEBOOK:
            cb = np.asarray(self.codebook if self.codebook is not None else [], dtype=np.float64)
            if cb.size == 0 or not np.all(np.isfinite(cb)):
                raise ConfigError("fixed-codebook needs a nonempty finite codebook")
            if np.any(np.diff(cb) <= 0):
                raise ConfigError("fixed codebook values must be strictly increasing")
            object.__setattr__(self, "codebook", tuple(float(c) for c in cb))
        elif self.kind == LOW_RANK:
            if self.rank is None or int(self.rank) < 1:
                raise ConfigError("low-rank needs rank >= 1")
        elif self.kind == PRUNE:
            if self.kappa is None or int(self.kappa) < 1:
                raise ConfigError("prune-l0 needs kappa >= 1")

    @classmethod
    def from_level(cls, kind, level=None, **kwargs):
        """Build a scheme from the CLI-style single ``level`` knob (K, r or kappa)."""
        key = {ADAPTIVE_QUANT: "K", LOW_RANK: "rank", PRUNE: "kappa"}.get(kind)
        if key is not None:
            if level is None:
                raise ConfigError(f"{kind} needs a compression level")
            kwargs[key] = int(level)
        return cls(kind, **kwargs)

    @property
    def level(self):
        return {ADAPTIVE_QUANT: self.K, LOW_RANK: self.rank, PRUNE: self.kappa}.get(self.kind)

    def fixed_values(self):
        if self.kind == BINARIZE:
            return SIGN_CODEBOOK
        if self.kind == TERNARY:
            return TERNARY_CODEBOOK
        if self.kind == FIXED_CODEBOOK:
            return np.array(self.codebook)
        return None

    def target_layer(self, w):
        if self.layer is not None:
            shape = w.layer_shape(self.layer)
            if len(shape) != 2:
                raise ConfigError(f"layer {self.layer!r} is not a matrix")
            return self.layer
        for name, shape in w.layout:
            if len(shape) == 2:
                return name
        raise ConfigError("low-rank compression needs a matrix layer")

    def constrained_indices(self, w):
        if self.kind == LOW_RANK:
            sl = w.layer_slice(self.target_layer(w))
            return np.arange(sl.start, sl.stop)
        return np.flatnonzero(w.compress_mask)

    def matrix_shape(self, w):
        return w.layer_shape(self.target_layer(w))

    def validate(self, w):
        """Check the level against the weight vector it will be applied to."""
        pm = self.constrained_indices(w).size
        if pm < 1:
            raise ConfigError("compression needs at least one masked weight")
        if self.kind == ADAPTIVE_QUANT and not self.K <= pm:
            raise ConfigError(f"K={self.K} exceeds the {pm} masked weights")
        if self.kind == PRUNE and not self.kappa <= pm:
            raise ConfigError(f"kappa={self.kappa} exceeds the {pm} masked weights")
        if self.kind == LOW_RANK:
            m, n = self.matrix_shape(w)
            if not self.rank <= min(m, n):
                raise ConfigError(f"rank {self.rank} exceeds min({m}, {n})")
        return pm


@dataclass
class QuantParams:
    codebook: np.ndarray
    assign: np.ndarray

    def __post_init__(self):
        self.codebook = np.asarray(self.codebook, dtype=np.float64).ravel()
        self.assign = np.asarray(self.assign, dtype=np.int64).ravel()
        if not np.all(np.isfinite(self.codebook)):
            raise NumericError("non-finite codebook entry")
        if self.assign.size and (self.assign.min() < 0 or self.assign.max() >= self.codebook.size):
            raise ConfigError("assignment index outside the codebook")


@dataclass
class SignParams:
    signs: np.ndarray

    def __post_init__(self):
        self.signs = np.asarray(self.signs, dtype=np.int8).ravel()
        if not np.all(np.abs(self.signs) == 1):
            raise ConfigError("signs must be +1 or -1")


@dataclass
class TernaryParams:
    levels: np.ndarray

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.int8).ravel()
        if not np.all(np.abs(self.levels) <= 1):
            raise ConfigError("ternary levels must be -1, 0 or +1")


@dataclass
class LowRankParams:
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.U = np.atleast_2d(np.asarray(self.U, dtype=np.float64))
        self.V = np.atleast_2d(np.asarray(self.V, dtype=np.float64))
        if self.U.shape[1] != self.V.shape[1]:
            raise ConfigError(f"factor ranks differ: {self.U.shape} vs {self.V.shape}")
        if not (np.all(np.isfinite(self.U)) and np.all(np.isfinite(self.V))):
            raise NumericError("non-finite low-rank factor")


@dataclass
class SparseParams:
    """Nonzero positions and values; ``size`` is the number of constrained weights."""

    support: np.ndarray
    vals: np.ndarray
    size: int = None

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.int64).ravel()
        self.vals = np.asarray(self.vals, dtype=np.float64).ravel()
        if self.support.size != self.vals.size:
            raise ConfigError("support and vals differ in length")
        if np.any(np.diff(self.support) <= 0):
            raise ConfigError("support must be strictly increasing")


_PARAM_TYPES = {
    ADAPTIVE_QUANT: QuantParams,
    FIXED_CODEBOOK: QuantParams,
    BINARIZE: SignParams,
    TERNARY: TernaryParams,
    LOW_RANK: LowRankParams,
    PRUNE: SparseParams,
}


def _check_variant(scheme, theta):
    expected = _PARAM_TYPES[scheme.kind]
    if not isinstance(theta, expected):
        raise ConfigError(
            f"{scheme.kind} expects {expected.__name__}, got {type(theta).__name__}"
        )


def delta_values(scheme, theta, pm, shape=None):
    """Decompressed constrained entries as a flat vector of length ``pm``."""
    _check_variant(scheme, theta)
    if isinstance(theta, QuantParams):
        if theta.assign.size != pm:
            raise ConfigError(f"{theta.assign.size} assignments for {pm} weights")
        return theta.codebook[theta.assign]
    if isinstance(theta, SignParams):
        if theta.signs.size != pm:
            raise ConfigError(f"{theta.signs.size} signs for {pm} weights")
        return theta.signs.astype(np.float64)
    if isinstance(theta, TernaryParams):
        if theta.levels.size != pm:
            raise ConfigError(f"{theta.levels.size} levels for {pm} weights")
        return theta.levels.astype(np.float64)
    if isinstance(theta, LowRankParams):
        if shape is not None and (theta.U.shape[0], theta.V.shape[0]) != tuple(shape):
            raise ConfigError(f"factors {theta.U.shape}, {theta.V.shape} do not match layer {shape}")
        return (theta.U @ theta.V.T).ravel()
    if theta.size is not None and theta.size != pm:
        raise ConfigError(f"sparse params describe {theta.size} weights, template has {pm}")
    out = np.zeros(pm)
    if theta.support.size and (theta.support[0] < 0 or theta.support[-1] >= pm):
        raise ConfigError("support index out of range")
    out[theta.support] = theta.vals
    return out


def constrained_values(scheme, w):
    return w.values[scheme.constrained_indices(w)]


def decompress(scheme, theta, template):
    """Weight vector whose constrained entries are Delta(theta); the rest copy ``template``."""
    idx = scheme.constrained_indices(template)
    shape = scheme.matrix_shape(template) if scheme.kind == LOW_RANK else None
    out = template.values.copy()
    out[idx] = delta_values(scheme, theta, idx.size, shape)
    return template.copy(out)


def _kmeanspp(x, K, rng):
    n = x.size
    centers = np.empty(K)
    centers[0] = x[rng.integers(n)]
    d2 = (x - centers[0]) ** 2
    for j in range(1, K):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[j] = x[i]
        d2 = np.minimum(d2, (x - centers[j]) ** 2)
    return centers


def _distortion(x, centers, assign):
    r = x - centers[assign]
    return float(np.sum(r * r))


def _repair_empty(x, centers, assign):
    # move the point farthest from its centroid (taken from a cluster with >= 2 points)
    K = centers.size
    for j in range(K):
        counts = np.bincount(assign, minlength=K)
        if counts[j] > 0:
            continue
        d = (x - centers[assign]) ** 2
        d[counts[assign] < 2] = -1.0
        i = int(np.argmax(d))
        if d[i] <= 0:
            break
        assign[i] = j
        centers[j] = x[i]


def _lloyd(x, centers, max_iter):
    d = (x[:, None] - centers[None, :]) ** 2
    assign = np.argmin(d, axis=1)
    _repair_empty(x, centers, assign)
    history = [_distortion(x, centers, assign)]
    for _ in range(max_iter):
        counts = np.bincount(assign, minlength=centers.size)
        sums = np.bincount(assign, weights=x, minlength=centers.size)
        new_centers = centers.copy()
        nz = counts > 0
        new_centers[nz] = sums[nz] / counts[nz]
        dist = _distortion(x, new_centers, assign)
        if dist > history[-1]:
            break  # rounding in the mean; keep the previous centroids
        centers = new_centers
        history.append(dist)
        d = (x[:, None] - centers[None, :]) ** 2
        new_assign = np.argmin(d, axis=1)
        rows = np.arange(x.size)
        keep = d[rows, assign] <= d[rows, new_assign]
        new_assign[keep] = assign[keep]
        _repair_empty(x, centers, new_assign)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        history.append(_distortion(x, centers, assign))
    return centers, assign, history


def _hartigan(x, centers, assign, history, max_sweeps):
    # single-point moves that lower the distortion once both centroids follow the move;
    # a sweep whose recomputed distortion rises (rounding) is rolled back
    K = centers.size
    for _ in range(max_sweeps):
        new_assign = assign.copy()
        counts = np.bincount(new_assign, minlength=K).astype(np.float64)
        sums = np.bincount(new_assign, weights=x, minlength=K)
        c = np.where(counts > 0, sums / np.maximum(counts, 1), centers)
        moved = False
        for i in range(x.size):
            a = new_assign[i]
            if counts[a] < 2:
                continue
            loss_out = counts[a] / (counts[a] - 1) * (x[i] - c[a]) ** 2
            gain_in = counts / (counts + 1.0) * (x[i] - c) ** 2
            gain_in[a] = np.inf
            b = int(np.argmin(gain_in))
            if not gain_in[b] < loss_out * (1 - 1e-12):
                continue
            new_assign[i] = b
            counts[a] -= 1
            counts[b] += 1
            sums[a] -= x[i]
            sums[b] += x[i]
            c[a] = sums[a] / counts[a]
            c[b] = sums[b] / counts[b]
            moved = True
        if not moved:
            break
        counts = np.bincount(new_assign, minlength=K)
        sums = np.bincount(new_assign, weights=x, minlength=K)
        new_centers = centers.copy()
        nz = counts > 0
        new_centers[nz] = sums[nz] / counts[nz]
        dist = _distortion(x, new_centers, new_assign)
        if not dist < history[-1]:
            break
        centers, assign = new_centers, new_assign
        history.append(dist)
    return centers, assign


def _local_search(x, init, max_iter):
    centers, assign, history = _lloyd(x, init.copy(), max_iter)
    centers, assign = _hartigan(x, centers, assign, history, max_iter)
    return centers, assign, history


GLOBAL_SEED_CANDIDATES = 64
GLOBAL_SEED_MAX_POINTS = 64


def _incremental_seed(x, K, max_iter):
    # grow the codebook one centroid at a time, trying each candidate point as the
    # new centroid and keeping the best locally optimized solution
    cand = np.unique(x)
    if cand.size > GLOBAL_SEED_CANDIDATES:
        cand = np.quantile(x, np.linspace(0, 1, GLOBAL_SEED_CANDIDATES), method="nearest")
    centers = np.array([x.mean()])
    best = (centers, np.zeros(x.size, dtype=np.int64), [_distortion(x, centers, np.zeros(x.size, dtype=np.int64))])
    for _ in range(1, K):
        stage = None
        for c in cand:
            out = _local_search(x, np.append(best[0], c), max_iter)
            if stage is None or out[2][-1] < stage[2][-1]:
                stage = out
        best = stage
    return best


def kmeans_1d(x, K, restarts=10, seed=0, max_iter=300, return_history=False):
    """k-means on scalars: best of ``restarts`` k-means++ runs plus one incremental run.

    Each run is Lloyd iterations polished by Hartigan single-point moves.
    Restart ``i`` draws from its own child seed, so the result does not depend
    on the order restarts are executed in. The deterministic incremental
    seeding (grow the codebook one centroid at a time) is tried last, for inputs
    of at most ``GLOBAL_SEED_MAX_POINTS`` values. Ties in
    distortion keep the earliest run. The returned codebook is sorted ascending.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if not 1 <= K <= x.size:
        raise ConfigError(f"K={K} must lie in [1, {x.size}]")
    runs = [
        _local_search(x, _kmeanspp(x, K, np.random.default_rng(child)), max_iter)
        for child in np.random.SeedSequence(seed).spawn(restarts)
    ]
    if x.size <= GLOBAL_SEED_MAX_POINTS:
        runs.append(_incremental_seed(x, K, max_iter))
    best = None
    for centers, assign, history in runs:
        dist = _distortion(x, centers, assign)
        if best is None or dist < best[2]:
            best = (centers, assign, dist)
    centers, assign, dist = best
    order = np.argsort(centers, kind="stable")
    rank = np.empty(K, dtype=np.int64)
    rank[order] = np.arange(K)
    out = (centers[order], rank[assign], dist)
    if return_history:
        return out + ([h for _, _, h in runs],)
    return out


def _nearest(x, values):
    # values ascending; ties go to the lower value
    d = np.abs(x[:, None] - values[None, :])
    return np.argmin(d, axis=1)


def project_values(scheme, x, shape=None):
    """Orthogonal projection of the constrained vector ``x`` onto the scheme's feasible set."""
    x = np.asarray(x, dtype=np.float64).ravel()
    kind = scheme.kind
    if kind == ADAPTIVE_QUANT:
        codebook, assign, _ = kmeans_1d(x, scheme.K, scheme.restarts, scheme.seed)
        return QuantParams(codebook, assign)
    if kind == FIXED_CODEBOOK:
        cb = np.array(scheme.codebook)
        return QuantParams(cb, _nearest(x, cb))
    if kind == BINARIZE:
        return SignParams(np.where(x >= 0, 1, -1))
    if kind == TERNARY:
        return TernaryParams(_nearest(x, TERNARY_CODEBOOK) - 1)
    if kind == PRUNE:
        if not 1 <= scheme.kappa <= x.size:
            raise ConfigError(f"kappa={scheme.kappa} must lie in [1, {x.size}]")
        order = np.argsort(-np.abs(x), kind="stable")
        support = np.sort(order[:scheme.kappa])
        return SparseParams(support, x[support], x.size)
    m, n = shape
    if x.size != m * n:
        raise ConfigError(f"{x.size} values do not fill a {m}x{n} matrix")
    r = scheme.rank
    if not 1 <= r <= min(m, n):
        raise ConfigError(f"rank {r} must lie in [1, {min(m, n)}]")
    try:
        u, s, vt = np.linalg.svd(x.reshape(m, n), full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc
    s = s[:r].copy()
    if s.size and s[0] > 0:
        s[s < SVD_RTOL * s[0]] = 0.0
    root = np.sqrt(s)
    return LowRankParams(u[:, :r] * root, vt[:r].T * root)


def project(scheme, w):
    """Compression mapping: the feasible parameters closest to ``w`` in the l2 sense."""
    scheme.validate(w)
    shape = scheme.matrix_shape(w) if scheme.kind == LOW_RANK else None
    return project_values(scheme, constrained_values(scheme, w), shape)


def distortion(scheme, w, theta):
    """Squared distance between the constrained entries of ``w`` and Delta(theta)."""
    x = constrained_values(scheme, w)
    shape = scheme.matrix_shape(w) if scheme.kind == LOW_RANK else None
    r = x - delta_values(scheme, theta, x.size, shape)
    return float(r @ r)


@dataclass
class StorageCost:
    theta_bits: int
    overhead_bits: int
    total_bits: int


def _index_bits(n):
    # ceil(log2 n) in exact integer arithmetic
    return (int(n) - 1).bit_length() if n > 1 else 0


def storage_cost(scheme, theta, float_bits=32):
    """Bits needed for theta plus the decompression metadata."""
    if float_bits not in (32, 64):
        raise ConfigError(f"float_bits must be 32 or 64, got {float_bits}")
    _check_variant(scheme, theta)
    if isinstance(theta, QuantParams):
        pm, K = theta.assign.size, theta.codebook.size
        bits, overhead = pm * _index_bits(K), K * float_bits
    elif isinstance(theta, SignParams):
        bits, overhead = theta.signs.size, 0
    elif isinstance(theta, TernaryParams):
        bits, overhead = theta.levels.size * _index_bits(3), 0
    elif isinstance(theta, LowRankParams):
        (m, r), n = theta.U.shape, theta.V.shape[0]
        bits, overhead = (m + n) * r * float_bits, 0
    else:
        if theta.size is None:
            raise ConfigError("sparse params need their size to price the support indices")
        kappa = theta.support.size
        bits, overhead = kappa * float_bits, kappa * _index_bits(theta.size)
    return StorageCost(int(bits), int(overhead), int(bits + overhead))


# -- exhaustive oracles ------------------------------------------------------

ORACLE_QUANT_MAX_P = 12
ORACLE_QUANT_MAX_K = 3
ORACLE_ENUM_MAX_P = 16
ORACLE_LOWRANK_MAX = 8


def oracle_quant(w_masked, K):
    """Globally optimal scalar quantization by enumerating contiguous partitions.

    Optimal 1-D clusters are intervals of the sorted values, so trying every
    placement of ``K - 1`` cut points is exhaustive.
    """
    x = np.asarray(w_masked, dtype=np.float64).ravel()
    pm = x.size
    if pm > ORACLE_QUANT_MAX_P or K > ORACLE_QUANT_MAX_K:
        raise SizeLimitError(
            f"oracle_quant handles Pm <= {ORACLE_QUANT_MAX_P} and K <= {ORACLE_QUANT_MAX_K}"
        )
    if not 1 <= K <= pm:
        raise ConfigError(f"K={K} must lie in [1, {pm}]")
    order = np.argsort(x, kind="stable")
    xs = x[order]
    best = None
    for cuts in itertools.combinations(range(1, pm), K - 1):
        bounds = (0,) + cuts + (pm,)
        means = [xs[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])]
        dist = sum(float(np.sum((xs[a:b] - c) ** 2))
                   for (a, b), c in zip(zip(bounds[:-1], bounds[1:]), means))
        if best is None or dist < best[0]:
            best = (dist, bounds, means)
    dist, bounds, means = best
    assign = np.empty(pm, dtype=np.int64)
    for j, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        assign[order[a:b]] = j
    return QuantParams(np.array(means), assign), dist


def _ls_free_solver(task, fixed_idx):
    """Pseudo-inverse map from fixed values to the optimal remaining entries."""
    A = np.hstack([task.inputs, np.ones((task.n_points, 1))])
    free = np.setdiff1d(np.arange(A.shape[1]), fixed_idx)
    Af = A[:, free]
    if task.l2_reg:
        Af = np.vstack([Af, np.sqrt(task.l2_reg) * np.eye(free.size)])
    return A, free, np.linalg.pinv(Af)


def oracle_sign_loss(task, template):
    """Best +-1 assignment of the masked weights by trying all of them.

    For least squares the unmasked weights are re-solved exactly for each sign
    vector, which makes the answer the global optimum of the constrained
    problem. Other families keep the unmasked weights at ``template``.
    """
    idx = np.flatnonzero(template.compress_mask)
    pm = idx.size
    if pm > ORACLE_ENUM_MAX_P:
        raise SizeLimitError(f"oracle_sign_loss handles at most {ORACLE_ENUM_MAX_P} masked weights")
    if pm < 1:
        raise ConfigError("no masked weights")
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=pm)))
    if task.family == LEAST_SQUARES:
        A, free, pinv = _ls_free_solver(task, idx)
        V = np.zeros((signs.shape[0], A.shape[1]))
        V[:, idx] = signs
        if free.size:
            R = task.targets[None, :] - signs @ A[:, idx].T
            if task.l2_reg:
                R = np.hstack([R, np.zeros((R.shape[0], free.size))])
            V[:, free] = R @ pinv.T
        res = V @ A.T - task.targets[None, :]
        losses = 0.5 * np.sum(res * res, axis=1) + 0.5 * task.l2_reg * np.sum(V * V, axis=1)
        best = int(np.argmin(losses))
        w = template.copy(V[best])
    else:
        best_loss, w = None, None
        for s in signs:
            cand = template.copy()
            cand.values[idx] = s
            val = loss_eval(task, cand)
            if best_loss is None or val < best_loss:
                best_loss, w = val, cand
    return SignParams(w.values[idx]), loss_eval(task, w)


def oracle_support_loss(task, template, kappa):
    """Best kappa-sparse support of the masked weights by trying every subset.

    Least squares only: each support is scored by its exact restricted
    least-squares solution (unmasked weights are free too).
    """
    if task.family != LEAST_SQUARES:
        raise ConfigError("oracle_support_loss needs the least-squares family")
    idx = np.flatnonzero(template.compress_mask)
    pm = idx.size
    if pm > ORACLE_ENUM_MAX_P:
        raise SizeLimitError(f"oracle_support_loss handles at most {ORACLE_ENUM_MAX_P} masked weights")
    if not 1 <= kappa <= pm:
        raise ConfigError(f"kappa={kappa} must lie in [1, {pm}]")
    unmasked = ~template.compress_mask
    best = None
    for support in itertools.combinations(range(pm), kappa):
        base = template.values.copy()
        base[idx] = 0.0
        free = unmasked.copy()
        free[idx[list(support)]] = True
        cand = restricted_lstsq(task, template.copy(base), free)
        val = loss_eval(task, cand)
        if best is None or val < best[0]:
            best = (val, support, cand)
    val, support, w = best
    support = np.array(support, dtype=np.int64)
    return SparseParams(support, w.values[idx[support]], pm), val


def oracle_lowrank(W, r):
    """Frobenius error of the best rank-``r`` approximation, from the eigenvalues of the Gram matrix."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    m, n = W.shape
    if m > ORACLE_LOWRANK_MAX or n > ORACLE_LOWRANK_MAX:
        raise SizeLimitError(f"oracle_lowrank handles matrices up to {ORACLE_LOWRANK_MAX}x{ORACLE_LOWRANK_MAX}")
    if not 0 <= r <= min(m, n):
        raise ConfigError(f"rank {r} must lie in [0, {min(m, n)}]")
    # the smaller Gram matrix has no structural zero eigenvalues, whose rounding
    # noise would otherwise show up as sqrt(eps) in the error
    G = W @ W.T if m < n else W.T @ W
    ev = np.sort(np.linalg.eigvalsh(G))[::-1]
    return math.sqrt(float(np.sum(np.clip(ev[r:], 0.0, None))))
