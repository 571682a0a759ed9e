"""Simulators for classical dependent processes with trajectory coupling.

Covers linear vector autoregressions, affine recursions with bounded
volatility, recursions on the whole past with summable Lipschitz weights,
and scalar autoregressions of infinite order.  All simulators share one
innovation stream between the two members of a coupled pair, which is the
natural coupling whose per-step distances estimate the dependence
coefficients gamma_hat(k).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from weaktransport.measures import DomainError, derived_rng


class SimulationError(RuntimeError):
    """Trajectory left the finite range; carries the failing step."""

    def __init__(self, step, message="non-finite state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# Innovation laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InnovationLaw:
    """Seedable innovation distribution with its known base constants.

    ``base_constants`` records the transport/variance constants the law is
    known to satisfy: every law satisfies the weighted-Hamming bound with
    constant 1; the standard normal satisfies the Euclidean quadratic
    transport bound and the convex Poincare inequality with constant 1;
    uniform on [-1, 1] inherits the unit-interval convex Poincare constant
    scaled by the squared interval length.
    """

    name: str
    dim: int = 1
    base_constants: dict = field(default_factory=dict)

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.name == "gaussian":
            return rng.standard_normal(tuple(shape) + (self.dim,))
        if self.name == "uniform":
            return rng.uniform(-1.0, 1.0, size=tuple(shape) + (self.dim,))
        if self.name == "rademacher":
            return rng.integers(0, 2, size=tuple(shape) + (self.dim,)) * 2.0 - 1.0
        if self.name == "truncated_gaussian":
            out = rng.standard_normal(tuple(shape) + (self.dim,))
            bad = np.abs(out) > 3.0
            while bad.any():
                out[bad] = rng.standard_normal(int(bad.sum()))
                bad = np.abs(out) > 3.0
            return out
        raise DomainError(f"unknown innovation law {self.name!r}")


def gaussian_innovations(dim=1):
    return InnovationLaw(
        "gaussian", dim, {"hamming_t2": 1.0, "euclidean_t2": 1.0, "convex_poincare": 1.0}
    )


def uniform_innovations(dim=1):
    return InnovationLaw("uniform", dim, {"hamming_t2": 1.0, "convex_poincare": 4.0})


def rademacher_innovations(dim=1):
    return InnovationLaw("rademacher", dim, {"hamming_t2": 1.0})


def truncated_gaussian_innovations(dim=1):
    return InnovationLaw("truncated_gaussian", dim, {"hamming_t2": 1.0})


# ---------------------------------------------------------------------------
# Process specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Arma:
    """Linear recursion X_{t+1} = A X_t + xi_{t+1} on R^k."""

    a_matrix: np.ndarray
    innovation: InnovationLaw
    allow_unstable: bool = False

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_matrix, dtype=float))
        object.__setattr__(self, "a_matrix", a)
        if a.shape[0] != a.shape[1]:
            raise DomainError("state matrix must be square")
        if not self.allow_unstable and spectral_radius(a) >= 1.0:
            raise DomainError("stationary runs need spectral radius below 1")

    @property
    def dim(self):
        return self.a_matrix.shape[0]


@dataclass(frozen=True)
class Affine:
    """X_{t+1} = drift(X_t) + vol(X_t) xi_{t+1} with a uniform volatility bound."""

    drift: callable
    vol: callable
    vol_bound: float
    innovation: InnovationLaw
    dim: int = 1

    def __post_init__(self):
        if self.vol_bound <= 0:
            raise DomainError("volatility bound must be positive")


@dataclass(frozen=True)
class InfiniteMemory:
    """X_t = update(past, xi_t) where past is the whole truncated history.

    ``update(past, xi)`` receives the history as an array with the most
    recent state first (rows of length ``dim``), zero-padded beyond the
    truncation horizon, and must be Lipschitz with the supplied summable
    weights: d(update(x, xi), update(y, xi)) <= sum_i a_i d(x_i, y_i).
    """

    update: callable
    weights: np.ndarray
    innovation: InnovationLaw
    dim: int = 1
    truncation: int = 512

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if np.any(w < 0):
            raise DomainError("Lipschitz weights must be nonnegative")
        if w.sum() >= 1.0:
            raise DomainError("Lipschitz weights must sum below 1")


@dataclass(frozen=True)
class ArInfinity:
    """Scalar X_t = sum_i a_i X_{t-i} + xi_t with summable coefficients."""

    coeffs: np.ndarray
    innovation: InnovationLaw
    truncation: int = 512

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        object.__setattr__(self, "coeffs", c)
        if np.abs(c).sum() >= 1.0:
            raise DomainError("coefficients must be absolutely summable below 1")

    @property
    def dim(self):
        return 1


def weight_tail_condition(weights) -> float:
    """sum_i i log(i) a_i on the supplied truncation (finite by construction)."""
    w = np.asarray(weights, dtype=float)
    idx = np.arange(1, len(w) + 1, dtype=float)
    return float(np.sum(idx * np.log(np.maximum(idx, 1.0)) * w))


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def spectral_radius(a) -> float:
    """Modulus of the dominant eigenvalue (QR iteration via LAPACK)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise DomainError("spectral radius needs a square matrix")
    if a.shape[0] == 0 or not np.any(a):
        return 0.0
    return float(np.abs(np.linalg.eigvals(a)).max())


def _check_finite(state, step):
    if not np.all(np.isfinite(state)):
        raise SimulationError(step)


def _as_state(spec, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (spec.dim,):
        raise DomainError(f"state must have dimension {spec.dim}")
    return x


def _step_batch(spec, states, history, xi, t):
    """One transition applied to a batch of trajectories (rows)."""
    if isinstance(spec, Arma):
        with np.errstate(over="ignore", invalid="ignore"):
            return states @ spec.a_matrix.T + xi
    if isinstance(spec, Affine):
        out = np.empty_like(states)
        for r in range(states.shape[0]):
            out[r] = spec.drift(states[r]) + spec.vol(states[r]) @ np.atleast_1d(xi[r])
        return out
    if isinstance(spec, InfiniteMemory):
        out = np.empty_like(states)
        for r in range(states.shape[0]):
            out[r] = spec.update(history[r], xi[r])
        return out
    if isinstance(spec, ArInfinity):
        m = min(len(spec.coeffs), history.shape[1])
        past = history[:, :m, 0]
        return (past @ spec.coeffs[:m] + xi[:, 0])[:, None]
    raise DomainError(f"unknown process spec {type(spec).__name__}")


def _needs_history(spec):
    return isinstance(spec, (InfiniteMemory, ArInfinity))


def _history_depth(spec):
    if isinstance(spec, InfiniteMemory):
        return min(spec.truncation, max(len(spec.weights), 1))
    if isinstance(spec, ArInfinity):
        return min(spec.truncation, max(len(spec.coeffs), 1))
    return 1


def simulate(spec, n, x0, seed) -> np.ndarray:
    """Path (X_1, ..., X_n) from X_0 = x0, deterministic given the seed.

    Histories beyond time 0 are zero-padded for the infinite-memory
    variants (truncation per the spec's horizon).
    """
    return simulate_batch(spec, n, x0, seed, replicates=1)[0]


def simulate_batch(spec, n, x0, seed, replicates) -> np.ndarray:
    """Vectorized replicated paths, shape (replicates, n, dim)."""
    x0 = _as_state(spec, x0)
    rng = derived_rng(seed, 0x51)
    xi = np.asarray(spec.innovation.sample(rng, (replicates, n)), dtype=float)
    if xi.ndim == 2:
        xi = xi[:, :, None]
    out = np.empty((replicates, n, spec.dim))
    states = np.tile(x0, (replicates, 1))
    depth = _history_depth(spec)
    history = np.zeros((replicates, depth, spec.dim))
    history[:, 0, :] = states
    for t in range(n):
        states = _step_batch(spec, states, history, xi[:, t], t)
        _check_finite(states, t + 1)
        out[:, t, :] = states
        if depth > 1:
            history = np.roll(history, 1, axis=1)
        history[:, 0, :] = states
    return out


@dataclass(frozen=True)
class CoupledPath:
    """Two trajectories sharing innovations, with per-step distances."""

    first: np.ndarray
    second: np.ndarray
    distances: np.ndarray


def coupled_pair(spec, x, x_alt, n, seed) -> CoupledPath:
    """Coupled trajectories from x and x_alt driven by one innovation stream."""
    paths = coupled_batch(spec, x, x_alt, n, seed, replicates=1)
    return CoupledPath(paths[0][0], paths[1][0], paths[2][0])


def coupled_batch(spec, x, x_alt, n, seed, replicates):
    x = _as_state(spec, x)
    x_alt = _as_state(spec, x_alt)
    rng = derived_rng(seed, 0x51)
    xi = np.asarray(spec.innovation.sample(rng, (replicates, n)), dtype=float)
    if xi.ndim == 2:
        xi = xi[:, :, None]
    depth = _history_depth(spec)
    a = np.tile(x, (replicates, 1))
    b = np.tile(x_alt, (replicates, 1))
    ha = np.zeros((replicates, depth, spec.dim))
    hb = np.zeros((replicates, depth, spec.dim))
    ha[:, 0, :] = a
    hb[:, 0, :] = b
    out_a = np.empty((replicates, n, spec.dim))
    out_b = np.empty((replicates, n, spec.dim))
    dist = np.empty((replicates, n))
    for t in range(n):
        a = _step_batch(spec, a, ha, xi[:, t], t)
        b = _step_batch(spec, b, hb, xi[:, t], t)
        _check_finite(a, t + 1)
        _check_finite(b, t + 1)
        out_a[:, t, :] = a
        out_b[:, t, :] = b
        dist[:, t] = np.sqrt(((a - b) ** 2).sum(axis=1))
        if depth > 1:
            ha = np.roll(ha, 1, axis=1)
            hb = np.roll(hb, 1, axis=1)
        ha[:, 0, :] = a
        hb[:, 0, :] = b
    return out_a, out_b, dist


# ---------------------------------------------------------------------------
# Coefficient estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaEstimate:
    """Monte-Carlo dependence coefficients from the natural coupling.

    ``gamma_hat[k-1]`` estimates the order-p distance contraction at lag k;
    ``se`` are bootstrap standard errors; ``s_hat`` is the truncated sum,
    ``tail`` a geometric extrapolation of the remainder (0 when no decay is
    detectable) and ``s_total`` their sum.
    """

    gamma_hat: np.ndarray
    se: np.ndarray
    s_hat: float
    tail: float
    s_total: float
    p: float
    pairs: tuple


def default_pair_sampler(spec, seed, directions=4, radii=(0.5, 1.0, 2.0)):
    """Perturbation pairs: center plus sphere directions at several radii."""
    rng = derived_rng(seed, 0x7072)
    center = np.zeros(spec.dim)
    pairs = []
    for _ in range(directions):
        u = rng.standard_normal(spec.dim)
        u /= np.linalg.norm(u)
        for r in radii:
            pairs.append((center + r * u, center.copy()))
    return pairs


def estimate_gamma(spec, p, horizon, replicates, pairs=None, seed=0, bootstrap=200):
    """Estimated coefficients gamma_hat(k) = max over pairs of
    (mean d^p(X_k, X'_k))^(1/p) / d(x, x'), for k = 1..horizon.

    ``pairs`` is a list of (x, x') start pairs or None for the default
    sphere sampler; degenerate pairs are skipped.  Returns a GammaEstimate
    with bootstrap standard errors of the achieving pair's statistic and a
    geometric tail extrapolation of the truncated coefficient sum.
    """
    if pairs is None:
        pairs = default_pair_sampler(spec, seed)
    clean = []
    for x, x_alt in pairs:
        xa = np.atleast_1d(np.asarray(x, dtype=float))
        xb = np.atleast_1d(np.asarray(x_alt, dtype=float))
        if np.array_equal(xa, xb):
            continue
        clean.append((xa, xb))
    if not clean:
        raise DomainError("no non-degenerate start pairs supplied")

    gamma = np.zeros(horizon)
    winner = np.zeros(horizon, dtype=int)
    per_pair_dist = []
    for idx, (xa, xb) in enumerate(clean):
        _, _, dist = coupled_batch(spec, xa, xb, horizon, derived_rng(seed, idx).integers(2**32), replicates)
        denom = float(np.sqrt(((xa - xb) ** 2).sum()))
        est = (dist**p).mean(axis=0) ** (1.0 / p) / denom
        per_pair_dist.append((dist, denom))
        better = est > gamma
        gamma[better] = est[better]
        winner[better] = idx

    se = np.zeros(horizon)
    for k in range(horizon):
        dist, denom = per_pair_dist[winner[k]]
        vals = dist[:, k] ** p
        if np.ptp(vals) == 0.0:
            se[k] = 0.0
            continue
        rng = derived_rng(seed, 0xB007, k)
        reps = np.empty(bootstrap)
        for b in range(bootstrap):
            sample = rng.integers(0, len(vals), size=len(vals))
            reps[b] = vals[sample].mean() ** (1.0 / p) / denom
        se[k] = float(reps.std(ddof=1))

    s_hat = math.fsum(gamma)
    tail = _geometric_tail(gamma)
    return GammaEstimate(
        gamma_hat=gamma,
        se=se,
        s_hat=s_hat,
        tail=tail,
        s_total=math.fsum(list(gamma) + [tail]),
        p=p,
        pairs=tuple((tuple(a), tuple(b)) for a, b in clean),
    )


def _geometric_tail(gamma):
    """Extrapolated remainder past the horizon, assuming geometric decay.

    Fits the decay ratio from the last coefficients; returns 0 when the
    sequence does not exhibit a contraction (ratio >= 1 or zeros).
    """
    if len(gamma) < 3 or gamma[-1] <= 0 or gamma[-2] <= 0:
        return 0.0
    r = gamma[-1] / gamma[-2]
    if not 0 < r < 1:
        return 0.0
    return float(gamma[-1] * r / (1.0 - r))


def fitted_decay_rate(gamma, k_min, k_max):
    """Geometric decay rate exp(slope) of log gamma over k in [k_min, k_max]."""
    ks = np.arange(k_min, k_max + 1)
    vals = gamma[k_min - 1 : k_max]
    mask = vals > 0
    if mask.sum() < 2:
        raise DomainError("not enough positive coefficients to fit a rate")
    slope = np.polyfit(ks[mask], np.log(vals[mask]), 1)[0]
    return float(math.exp(slope))


def infinite_memory_gamma_bound(weights, gamma_10, horizon):
    """Lag-t bounds gamma_10 * min_s { a^(t/s) + sum_{j >= s} a_j }, s = 1..t.

    ``weights`` are the Lipschitz weights a_1, a_2, ...; a is their sum.
    Evaluated exactly by scanning the inner integer.
    """
    w = np.asarray(weights, dtype=float)
    if w.sum() >= 1.0:
        raise DomainError("weights must sum below 1")
    a = float(w.sum())
    tails = np.concatenate([np.cumsum(w[::-1])[::-1], [0.0]])
    out = np.empty(horizon)
    for t in range(1, horizon + 1):
        best = math.inf
        for s in range(1, t + 1):
            tail = tails[s - 1] if s - 1 < len(w) else 0.0
            best = min(best, a ** (t / s) + tail)
        out[t - 1] = gamma_10 * best
    return out


def path_to_csv(path: np.ndarray) -> str:
    """CSV text with one row per step: t, state components."""
    path = np.atleast_2d(path)
    if path.ndim == 1:
        path = path[:, None]
    dim = path.shape[1]
    lines = ["t," + ",".join(f"x{i+1}" for i in range(dim))]
    for t, row in enumerate(path, start=1):
        lines.append(f"{t}," + ",".join(repr(float(v)) for v in np.atleast_1d(row)))
    return "\n".join(lines) + "\n"
