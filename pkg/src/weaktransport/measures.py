"""Finite probability spaces, metrics, relative entropy, and path measures.

Everything downstream (transport solvers, coupling coefficients, inequality
verifiers) computes on the immutable structures defined here.  Probabilities
are double-precision reals; normalization drift beyond ``WEIGHT_TOL`` is an
error, never silently repaired, because the exact solvers trust marginals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

WEIGHT_TOL = 1e-12


class DomainError(ValueError):
    """An input violates a documented precondition."""


def _readonly(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DiscreteSpace:
    """A finite point set, optionally embedded in a real vector space.

    ``points`` are hashable ids; ``embedding`` (if given) is a
    ``len(points) x k`` array whose rows are the point coordinates, aligned
    with the order of ``points``.
    """

    points: tuple
    embedding: np.ndarray | None = None

    def __post_init__(self):
        pts = tuple(self.points)
        if len(set(pts)) != len(pts):
            raise DomainError("point ids must be unique")
        object.__setattr__(self, "points", pts)
        if self.embedding is not None:
            emb = _readonly(self.embedding)
            if emb.ndim != 2 or emb.shape[0] != len(pts):
                raise DomainError(
                    "embedding must be a 2-d array with one row per point"
                )
            object.__setattr__(self, "embedding", emb)
        index = {p: i for i, p in enumerate(pts)}
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.points)

    def index(self, point) -> int:
        try:
            return self._index[point]
        except KeyError:
            raise DomainError(f"point {point!r} not in space") from None

    def __eq__(self, other):
        if not isinstance(other, DiscreteSpace):
            return NotImplemented
        if self.points != other.points:
            return False
        if (self.embedding is None) != (other.embedding is None):
            return False
        if self.embedding is not None and not np.array_equal(
            self.embedding, other.embedding
        ):
            return False
        return True

    def __hash__(self):
        return hash(self.points)


def space_from_embedding(vectors) -> DiscreteSpace:
    """Space whose point ids are 0..m-1 with the given embedding rows."""
    vecs = np.atleast_2d(np.asarray(vectors, dtype=float))
    return DiscreteSpace(points=tuple(range(vecs.shape[0])), embedding=vecs)


@dataclass(frozen=True)
class DiscreteMeasure:
    """Probability vector over a finite space.

    Weights must be nonnegative and sum to 1 within ``WEIGHT_TOL``.
    Zero-weight points are retained so couplings keep rectangular shape.
    """

    space: DiscreteSpace
    weights: np.ndarray

    def __post_init__(self):
        w = _readonly(self.weights)
        if w.ndim != 1 or w.shape[0] != self.space.size:
            raise DomainError("weights must align with the space's points")
        if np.any(w < 0):
            raise DomainError("weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > WEIGHT_TOL:
            raise DomainError(
                f"weights sum to {w.sum():.17g}, outside 1 +/- {WEIGHT_TOL}"
            )
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.space.size

    def prob(self, point) -> float:
        return float(self.weights[self.space.index(point)])

    def support(self) -> np.ndarray:
        """Indices of points with strictly positive weight."""
        return np.nonzero(self.weights > 0)[0]

    def to_dict(self) -> dict:
        out = {"points": list(self.space.points), "weights": self.weights.tolist()}
        if self.space.embedding is not None:
            out["embedding"] = self.space.embedding.tolist()
        return out

    @staticmethod
    def from_dict(data: dict) -> "DiscreteMeasure":
        emb = data.get("embedding")
        space = DiscreteSpace(
            points=tuple(_as_point(p) for p in data["points"]),
            embedding=None if emb is None else np.asarray(emb, dtype=float),
        )
        return DiscreteMeasure(space, np.asarray(data["weights"], dtype=float))


def _as_point(p):
    return tuple(p) if isinstance(p, list) else p


def uniform_measure(space: DiscreteSpace) -> DiscreteMeasure:
    return DiscreteMeasure(space, np.full(space.size, 1.0 / space.size))


def measure(space: DiscreteSpace, weights) -> DiscreteMeasure:
    return DiscreteMeasure(space, np.asarray(weights, dtype=float))


def total_variation(p: DiscreteMeasure | np.ndarray, q: DiscreteMeasure | np.ndarray) -> float:
    wp = p.weights if isinstance(p, DiscreteMeasure) else np.asarray(p, dtype=float)
    wq = q.weights if isinstance(q, DiscreteMeasure) else np.asarray(q, dtype=float)
    return 0.5 * float(np.abs(wp - wq).sum())


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

HAMMING = "hamming"
EUCLIDEAN = "euclidean"
TABLE = "table"


@dataclass(frozen=True)
class MetricSpec:
    """Base metric on a finite space: Hamming, Euclidean, or explicit table.

    On path spaces the per-coordinate base distances are combined with the
    exponent supplied to the path-space helpers, d_p(x, y)^p = sum_j d(x_j, y_j)^p.
    """

    kind: str
    table: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (HAMMING, EUCLIDEAN, TABLE):
            raise DomainError(f"unknown metric kind {self.kind!r}")
        if self.kind == TABLE:
            if self.table is None:
                raise DomainError("table metric requires a cost matrix")
            t = _readonly(self.table)
            if t.ndim != 2 or t.shape[0] != t.shape[1]:
                raise DomainError("cost table must be square")
            if np.any(t < 0):
                raise DomainError("cost table must be nonnegative")
            if not np.allclose(t, t.T, atol=1e-12):
                raise DomainError("cost table must be symmetric")
            if np.any(np.abs(np.diag(t)) > 1e-15):
                raise DomainError("cost table must have zero diagonal")
            object.__setattr__(self, "table", t)
        elif self.table is not None:
            raise DomainError("only table metrics carry a cost matrix")

    def cost_matrix(self, space: DiscreteSpace) -> np.ndarray:
        """Pairwise distances d(x, y) over the space's point order."""
        m = space.size
        if self.kind == HAMMING:
            return 1.0 - np.eye(m)
        if self.kind == EUCLIDEAN:
            if space.embedding is None:
                raise DomainError("euclidean metric requires an embedding")
            e = space.embedding
            diff = e[:, None, :] - e[None, :, :]
            return np.sqrt((diff**2).sum(axis=2))
        if self.table.shape[0] != m:
            raise DomainError("cost table size does not match the space")
        return np.asarray(self.table)


hamming_metric = MetricSpec(HAMMING)
euclidean_metric = MetricSpec(EUCLIDEAN)


# ---------------------------------------------------------------------------
# Relative entropy
# ---------------------------------------------------------------------------


def kl_divergence(q: DiscreteMeasure, p: DiscreteMeasure) -> float:
    """Relative entropy sum_x q(x) log(q(x)/p(x)), natural log.

    Returns +inf when q is not absolutely continuous with respect to p.
    """
    if q.space != p.space:
        raise DomainError("measures live on different spaces")
    qw, pw = q.weights, p.weights
    mask = qw > 0
    if np.any(pw[mask] == 0):
        return math.inf
    return float(np.sum(qw[mask] * np.log(qw[mask] / pw[mask])))


# ---------------------------------------------------------------------------
# Path measures
# ---------------------------------------------------------------------------


def path_space(space: DiscreteSpace, n: int) -> DiscreteSpace:
    """Product space E^n; points are n-tuples, embeddings concatenate."""
    pts = tuple(product(space.points, repeat=n))
    emb = None
    if space.embedding is not None:
        idx = list(product(range(space.size), repeat=n))
        emb = np.concatenate(
            [space.embedding[[t[j] for t in idx]] for j in range(n)], axis=1
        )
    return DiscreteSpace(points=pts, embedding=emb)


class PathMeasure:
    """Law of (X_1, ..., X_n) on E^n built from an initial law and kernels.

    ``kernels[j]`` drives step j+2: either an |E| x |E| row-stochastic matrix
    (Markov, row indexed by the previous state) or a dict mapping history
    index tuples (x_1, ..., x_{j+1}) to weight vectors on E.
    """

    def __init__(self, space: DiscreteSpace, initial, kernels, n: int | None = None):
        self.space = space
        init = np.asarray(initial, dtype=float)
        _check_stochastic(init, "initial law")
        self.initial = _readonly(init)
        kernels = list(kernels)
        self.n = n if n is not None else len(kernels) + 1
        if self.n < 1:
            raise DomainError("horizon must be >= 1")
        if len(kernels) == 1 and self.n > 2:
            kernels = kernels * (self.n - 1)
        if len(kernels) != self.n - 1:
            raise DomainError("need one kernel per step after the first")
        self.kernels = []
        for step, ker in enumerate(kernels):
            if isinstance(ker, dict):
                clean = {}
                for hist, row in ker.items():
                    row = np.asarray(row, dtype=float)
                    _check_stochastic(row, f"kernel row {hist} at step {step + 2}")
                    clean[tuple(hist)] = _readonly(row)
                self.kernels.append(clean)
            else:
                mat = np.asarray(ker, dtype=float)
                if mat.shape != (space.size, space.size):
                    raise DomainError("Markov kernel must be |E| x |E|")
                for i in range(mat.shape[0]):
                    _check_stochastic(mat[i], f"kernel row {i} at step {step + 2}")
                self.kernels.append(_readonly(mat))

    @property
    def is_markov(self) -> bool:
        return all(not isinstance(k, dict) for k in self.kernels)

    def kernel_row(self, j: int, history: tuple) -> np.ndarray:
        """Law of X_j given X_1..X_{j-1} = history (indices), 2 <= j <= n."""
        ker = self.kernels[j - 2]
        if isinstance(ker, dict):
            try:
                return ker[tuple(history)]
            except KeyError:
                raise DomainError(
                    f"no kernel row for history {history} at step {j}"
                ) from None
        return ker[history[-1]]

    def prefix_prob(self, prefix: tuple) -> float:
        """Probability of X_1..X_i = prefix (point indices)."""
        p = float(self.initial[prefix[0]])
        for j in range(2, len(prefix) + 1):
            if p == 0.0:
                return 0.0
            p *= float(self.kernel_row(j, prefix[: j - 1])[prefix[j - 1]])
        return p

    def joint(self) -> DiscreteMeasure:
        """Flattened joint law on E^n (paths enumerated in product order)."""
        m = self.space.size
        if m**self.n > 200_000:
            raise DomainError("path space too large to enumerate")
        weights = np.empty(m**self.n)
        for flat, path in enumerate(product(range(m), repeat=self.n)):
            weights[flat] = self.prefix_prob(path)
        total = float(weights.sum())
        if abs(total - 1.0) > WEIGHT_TOL:
            raise DomainError(f"joint mass {total:.17g} drifted beyond tolerance")
        return DiscreteMeasure(path_space(self.space, self.n), weights)

    def conditional(self, prefix: tuple) -> DiscreteMeasure:
        """Law of (X_{i+1}, ..., X_n) given X_1..X_i = prefix (indices)."""
        prefix = tuple(prefix)
        i = len(prefix)
        if not 1 <= i < self.n:
            raise DomainError("prefix length must be in [1, n-1]")
        base = self.prefix_prob(prefix)
        if base <= 0:
            raise DomainError(f"prefix {prefix} has zero probability")
        m = self.space.size
        tail = self.n - i
        weights = np.empty(m**tail)
        for flat, suffix in enumerate(product(range(m), repeat=tail)):
            p = 1.0
            hist = list(prefix)
            for step, x in enumerate(suffix):
                p *= float(self.kernel_row(i + step + 1, tuple(hist))[x])
                if p == 0.0:
                    break
                hist.append(x)
            weights[flat] = p
        total = float(weights.sum())
        if abs(total - 1.0) > WEIGHT_TOL:
            raise DomainError("conditional mass drifted beyond tolerance")
        return DiscreteMeasure(path_space(self.space, tail), weights / total)

    def coordinate_conditional(self, k: int, prefix: tuple) -> np.ndarray:
        """Weight vector of X_k given X_1..X_i = prefix (indices), i < k <= n."""
        prefix = tuple(prefix)
        i = len(prefix)
        if not i < k <= self.n:
            raise DomainError("need len(prefix) < k <= n")
        if self.prefix_prob(prefix) <= 0:
            raise DomainError(f"prefix {prefix} has zero probability")
        if self.is_markov:
            v = np.zeros(self.space.size)
            v[prefix[-1]] = 1.0
            for j in range(i + 1, k + 1):
                v = v @ self.kernels[j - 2]
            return v
        total = np.zeros(self.space.size)
        for suffix in product(range(self.space.size), repeat=k - i - 1):
            hist = prefix + suffix
            p = 1.0
            for step, x in enumerate(suffix):
                p *= float(self.kernel_row(i + step + 1, hist[: i + step])[x])
                if p == 0.0:
                    break
            if p > 0.0:
                total += p * self.kernel_row(k, hist)
        return total / total.sum()

    def to_dict(self) -> dict:
        if not self.is_markov:
            raise DomainError("only Markov path measures serialize")
        out = {
            "points": list(self.space.points),
            "initial": self.initial.tolist(),
            "kernels": [np.asarray(k).tolist() for k in self.kernels],
        }
        if self.space.embedding is not None:
            out["embedding"] = self.space.embedding.tolist()
        return out

    @staticmethod
    def from_dict(data: dict) -> "PathMeasure":
        emb = data.get("embedding")
        space = DiscreteSpace(
            points=tuple(_as_point(p) for p in data["points"]),
            embedding=None if emb is None else np.asarray(emb, dtype=float),
        )
        return PathMeasure(space, data["initial"], data["kernels"])


def _check_stochastic(row: np.ndarray, what: str):
    if np.any(row < 0):
        raise DomainError(f"{what} has negative entries")
    if abs(float(row.sum()) - 1.0) > WEIGHT_TOL:
        raise DomainError(f"{what} sums to {row.sum():.17g}, not 1")


def chain_from_start(space: DiscreteSpace, kernel, x0, n: int) -> PathMeasure:
    """Markov path law of (X_1, ..., X_n) with a fixed origin X_0 = x0.

    Time 0 is artificial: the initial law of X_1 is the kernel row at x0.
    """
    mat = np.asarray(kernel, dtype=float)
    return PathMeasure(space, mat[space.index(x0)], [mat] * max(n - 1, 0), n=n)


def decompose_path_measure(joint: DiscreteMeasure, base: DiscreteSpace, n: int) -> PathMeasure:
    """Sequential (initial, kernels) decomposition of a joint law on E^n.

    Kernel rows exist only for positive-probability histories; the
    reconstruction reproduces the joint exactly on its support.
    """
    m = base.size
    if joint.size != m**n:
        raise DomainError("joint size does not match E^n")
    w = joint.weights.reshape((m,) * n)
    initial = w.reshape(m, -1).sum(axis=1) if n > 1 else w.copy()
    kernels = []
    for j in range(2, n + 1):
        ker = {}
        lead = w.reshape((m,) * j + (-1,)).sum(axis=-1) if j < n else w
        prev = lead.sum(axis=-1)
        for hist in product(range(m), repeat=j - 1):
            mass = prev[hist]
            if mass > 0:
                ker[hist] = lead[hist] / mass
        kernels.append(ker)
    return PathMeasure(base, initial, kernels, n=n)


# ---------------------------------------------------------------------------
# Random test-case generation
# ---------------------------------------------------------------------------


def random_measure(space: DiscreteSpace, seed: int, concentration: float) -> DiscreteMeasure:
    """Seeded random measure with strictly positive weights.

    Weights are normalized Gamma(concentration) draws, so large concentration
    yields near-uniform measures and small concentration spiky ones.
    """
    if concentration <= 0:
        raise DomainError("concentration must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D65]))
    g = rng.gamma(concentration, 1.0, size=space.size)
    g = np.maximum(g, 1e-300)
    return DiscreteMeasure(space, g / g.sum())


def derived_rng(seed: int, *keys: int) -> np.random.Generator:
    """Deterministic per-task generator; independent of worker scheduling."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
