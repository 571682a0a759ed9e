"""Monte-Carlo and exact verification of exponential concentration bounds.

Implements an exact Euclidean distance-to-convex-hull solver (minimum-norm
point by Frank-Wolfe with away steps), the convex distance to a set in the
weighted-Hamming sense, and checkers for the exponential inequalities:
the separately-convex exponential bound, its concave mirror, the convex
Poincare inequality, and the two convex-distance concentration bounds.

Samplers are callables ``sampler(rng, n) -> (n, dim) array``; expectations
of exponentials are accumulated in log space and PASS thresholds allow
three standard errors of one-sided slack so that Monte-Carlo noise cannot
generate false failures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from weaktransport.measures import DomainError, derived_rng
from weaktransport.report import FAIL, INCONCLUSIVE, PASS, ExperimentReport

SEPARATELY_CONVEX = "separately-convex"
SEPARATELY_CONCAVE = "separately-concave"
LIPSCHITZ = "lipschitz"
SELF_BOUNDING_HAMMING = "self-bounding-hamming"


@dataclass(frozen=True)
class TestFunction:
    """Black-box test function with structural claims spot-checked numerically.

    ``fn(batch)`` maps an (N, d) array to N values; ``grad(batch)`` to an
    (N, d) array of per-coordinate subgradients.  The structural ``tag``
    is trusted only after random midpoint-convexity probes per coordinate
    and a finite-difference audit of the subgradient callback; failures
    abort with a domain error (convexity of a callback cannot be proven,
    only refuted).
    """

    fn: callable
    grad: callable = None
    tag: str = SEPARATELY_CONVEX
    name: str = "g"

    __test__ = False  # not a pytest class despite the name

    def spot_check(self, dim, seed=0, points=100, tol=1e-5):
        rng = derived_rng(seed, 0x5AFE)
        x = rng.standard_normal((points, dim))
        if self.tag in (SEPARATELY_CONVEX, SEPARATELY_CONCAVE):
            sign = 1.0 if self.tag == SEPARATELY_CONVEX else -1.0
            a = x.copy()
            b = x.copy()
            j = rng.integers(dim, size=points)
            rows = np.arange(points)
            a[rows, j] += rng.uniform(0.2, 1.5, size=points)
            b[rows, j] -= rng.uniform(0.2, 1.5, size=points)
            mid = 0.5 * (a + b)
            lhs = sign * self.fn(mid)
            rhs = sign * 0.5 * (self.fn(a) + self.fn(b))
            if np.any(lhs > rhs + 1e-9):
                raise DomainError(
                    f"{self.name}: coordinate midpoint test refutes the {self.tag} tag"
                )
        if self.grad is not None:
            g = np.asarray(self.grad(x))
            h = 1e-6
            for j in range(dim):
                xp = x.copy()
                xm = x.copy()
                xp[:, j] += h
                xm[:, j] -= h
                fd = (self.fn(xp) - self.fn(xm)) / (2 * h)
                scale = np.maximum(np.abs(fd), 1.0)
                bad = np.abs(fd - g[:, j]) / scale > tol
                if bad.mean() > 0.05:
                    raise DomainError(
                        f"{self.name}: subgradient disagrees with finite differences"
                    )
        return True


def linear_fn(a) -> TestFunction:
    a = np.asarray(a, dtype=float)
    return TestFunction(
        fn=lambda x: x @ a,
        grad=lambda x: np.tile(a, (len(x), 1)),
        tag=SEPARATELY_CONVEX,
        name="linear",
    )


def coordinate_max_fn() -> TestFunction:
    def grad(x):
        g = np.zeros_like(x)
        g[np.arange(len(x)), np.argmax(x, axis=1)] = 1.0
        return g

    return TestFunction(
        fn=lambda x: x.max(axis=1), grad=grad, tag=SEPARATELY_CONVEX, name="max"
    )


def euclidean_norm_fn() -> TestFunction:
    def grad(x):
        nrm = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, nrm, out=np.zeros_like(x), where=nrm > 0)

    return TestFunction(
        fn=lambda x: np.linalg.norm(x, axis=1),
        grad=grad,
        tag=SEPARATELY_CONVEX,
        name="norm2",
    )


def piecewise_linear_fn(slopes, offsets) -> TestFunction:
    """max_r (<slopes[r], x> + offsets[r]): polyhedral and separately convex."""
    slopes = np.asarray(slopes, dtype=float)
    offsets = np.asarray(offsets, dtype=float)

    def fn(x):
        return (x @ slopes.T + offsets).max(axis=1)

    def grad(x):
        idx = np.argmax(x @ slopes.T + offsets, axis=1)
        return slopes[idx]

    return TestFunction(fn=fn, grad=grad, tag=SEPARATELY_CONVEX, name="pwl")


@dataclass(frozen=True)
class MCEstimate:
    """Monte-Carlo mean with its standard error."""

    mean: float
    se: float
    n: int
    seed: int

    def __post_init__(self):
        if self.n <= 1:
            raise DomainError("need at least two replicates")


# ---------------------------------------------------------------------------
# Exact hull distances
# ---------------------------------------------------------------------------


def distance_to_convex_hull(x, points, gap_tol=1e-10, max_iter=1000):
    """Euclidean distance from x to the convex hull of the points.

    Minimum-norm-point method: grow a corral of affinely independent
    points, project onto its affine hull by a small linear solve, and drop
    vertices whose barycentric weight would turn negative.  Terminates in
    finitely many steps; the exit condition is the linear-minimization gap
    certifying the squared distance within ``gap_tol``.  Returns
    (distance, convex weights over the input points).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x = np.asarray(x, dtype=float)
    if pts.shape[0] == 0:
        raise DomainError("need at least one point")
    q = pts - x[None, :]
    start = int(np.argmin((q**2).sum(axis=1)))
    corral = [start]
    w = np.array([1.0])
    y = q[start].copy()
    for _ in range(max_iter):
        scores = q @ y
        j = int(np.argmin(scores))
        gap = float(y @ y - scores[j])
        if gap <= gap_tol:
            break
        if j not in corral:
            corral.append(j)
            w = np.append(w, 0.0)
        for _ in range(len(q) + 2):
            sub = q[corral]
            k = len(corral)
            a_sys = np.zeros((k + 1, k + 1))
            a_sys[0, 1:] = 1.0
            a_sys[1:, 0] = 1.0
            a_sys[1:, 1:] = sub @ sub.T
            rhs = np.zeros(k + 1)
            rhs[0] = 1.0
            try:
                sol = np.linalg.solve(a_sys, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(a_sys, rhs, rcond=None)[0]
            a = sol[1:]
            if np.all(a > 1e-12):
                w = a
                break
            neg = a <= 1e-12
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(neg, w / (w - a), np.inf)
            theta = float(np.clip(ratios.min(), 0.0, 1.0))
            w = (1.0 - theta) * w + theta * a
            w[w < 1e-12] = 0.0
            keep = w > 0
            corral = [c for c, k_ in zip(corral, keep) if k_]
            w = w[keep]
            if w.sum() <= 0:
                corral = [j]
                w = np.array([1.0])
                break
            w /= w.sum()
        y = w @ q[corral]
    lam = np.zeros(pts.shape[0])
    lam[corral] = w
    return float(np.linalg.norm(y)), lam


def convex_distance(x, members, n=None):
    """Weighted-Hamming convex distance from x to the member list.

    sup over unit-norm weights of the weighted disagreement count equals
    the Euclidean distance from the origin to the convex hull of the
    disagreement indicator vectors, which is solved exactly.
    """
    x = np.asarray(x, dtype=float)
    members = np.atleast_2d(np.asarray(members, dtype=float))
    if members.shape[0] == 0:
        raise DomainError("the target set is empty")
    disagree = (members != x[None, :]).astype(float)
    dist, _ = distance_to_convex_hull(np.zeros(x.shape[0]), disagree)
    return dist


# ---------------------------------------------------------------------------
# Monte-Carlo exponential checks
# ---------------------------------------------------------------------------


def mc_exponential_check(sampler, exponent_fn, N, seed, center_fn=None):
    """Estimate E[exp(W)] with W = exponent_fn(X) - mean(center_fn(X')).

    The centering mean is estimated on an independent batch of the same
    size to keep plug-in bias out of the exponent.  The expectation is
    accumulated in log space; the report passes when the estimate is at
    most 1 + 3 standard errors.  Returns (MCEstimate, passed).
    """
    if N < 2:
        raise DomainError("need at least two samples")
    center = 0.0
    if center_fn is not None:
        batch0 = sampler(derived_rng(seed, 0xC0), N)
        vals0 = np.asarray(center_fn(batch0), dtype=float)
        if not np.all(np.isfinite(vals0)):
            raise DomainError("non-finite centering samples")
        center = float(vals0.mean())
    batch = sampler(derived_rng(seed, 0xC1), N)
    w = np.asarray(exponent_fn(batch), dtype=float) - center
    if not np.all(np.isfinite(w)):
        raise DomainError(f"non-finite exponent samples: {np.sum(~np.isfinite(w))}")
    log_mean = float(logsumexp(w) - math.log(N))
    log_sq = float(logsumexp(2.0 * w) - math.log(N))
    mean = math.exp(log_mean)
    var = max(math.exp(log_sq) - mean**2, 0.0)
    se = math.sqrt(var / N)
    est = MCEstimate(mean=mean, se=se, n=N, seed=seed)
    return est, mean <= 1.0 + 3.0 * se


def tsirelson_check(sampler, g: TestFunction, C, N, seed, dim, concave=False, scale=1.0):
    """Exponential bound for separately convex g (or its concave mirror).

    Convex variant: E exp(g - E g - C |grad g|^2 / 2) <= 1 with the
    gradient penalty inside the expectation; concave variant: the penalty
    is the pre-estimated mean C E|grad g|^2 / 2.  ``scale`` multiplies g
    (and rescales the penalty quadratically), probing tightness.
    """
    g.spot_check(dim, seed=seed)
    if g.grad is None:
        raise DomainError("the exponential check needs subgradients")
    sign = -1.0 if concave else 1.0

    def gval(batch):
        return sign * scale * np.asarray(g.fn(batch), dtype=float)

    if concave:
        batch_pen = sampler(derived_rng(seed, 0xC2), N)
        gp = np.asarray(g.grad(batch_pen), dtype=float)
        pen_const = 0.5 * C * scale**2 * float((gp**2).sum(axis=1).mean())

        def exponent(batch):
            return gval(batch) - pen_const

    else:

        def exponent(batch):
            gp = np.asarray(g.grad(batch), dtype=float)
            pen = 0.5 * C * scale**2 * (gp**2).sum(axis=1)
            return gval(batch) - pen

    est, ok = mc_exponential_check(sampler, exponent, N, seed, center_fn=gval)
    return ExperimentReport(
        experiment="separately-concave-exponential" if concave else "separately-convex-exponential",
        verdict=PASS if ok else FAIL,
        left=est.mean,
        right=1.0,
        left_se=est.se,
        seed=seed,
        inputs={"C": C, "N": N, "g": g.name, "scale": scale},
        detail={"direction": "forward only: sampling checks the bound, not its converse"},
    )


def hamming_bound_check(sampler, f_fn, alpha_fns, C, N, seed, lam=1.0, inverted=False):
    """Self-bounding weighted-Hamming exponential inequality by Monte Carlo.

    Checks E exp(lam (f - E f) - (C lam^2 / 2) sum_j alpha_j^2) <= 1; the
    inverted variant centers the other way and uses the pre-estimated mean
    of the squared weights.
    """

    def fval(batch):
        v = np.asarray(f_fn(batch), dtype=float)
        return -v if inverted else v

    def sum_sq(batch):
        return sum(np.asarray(a(batch), dtype=float) ** 2 for a in alpha_fns)

    if inverted:
        pen_batch = sampler(derived_rng(seed, 0xC3), N)
        pen_const = 0.5 * C * lam**2 * float(sum_sq(pen_batch).mean())

        def exponent(batch):
            return lam * fval(batch) - pen_const

    else:

        def exponent(batch):
            return lam * fval(batch) - 0.5 * C * lam**2 * sum_sq(batch)

    def center(batch):
        return lam * fval(batch)

    est, ok = mc_exponential_check(sampler, exponent, N, seed, center_fn=center)
    return ExperimentReport(
        experiment="weighted-hamming-exponential",
        verdict=PASS if ok else FAIL,
        left=est.mean,
        right=1.0,
        left_se=est.se,
        seed=seed,
        inputs={"C": C, "N": N, "lam": lam, "inverted": inverted},
    )


def convex_poincare_check(sampler, g: TestFunction, C, N, seed, dim):
    """Variance bound Var(g) <= C E|grad g|^2 with three-sigma slack."""
    g.spot_check(dim, seed=seed)
    if g.grad is None:
        raise DomainError("the variance check needs subgradients")
    batch = sampler(derived_rng(seed, 0xC4), N)
    vals = np.asarray(g.fn(batch), dtype=float)
    grads = np.asarray(g.grad(batch), dtype=float)
    if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(grads))):
        raise DomainError("non-finite samples in the variance check")
    var = float(vals.var(ddof=1))
    centered = vals - vals.mean()
    se_var = math.sqrt(
        max(float((centered**4).mean()) - var**2, 0.0) / N
    )
    gsq = (grads**2).sum(axis=1)
    rhs = float(gsq.mean())
    se_rhs = float(gsq.std(ddof=1)) / math.sqrt(N)
    slack = 3.0 * math.sqrt(se_var**2 + (C * se_rhs) ** 2)
    ok = var <= C * rhs + slack
    return ExperimentReport(
        experiment="convex-poincare",
        verdict=PASS if ok else FAIL,
        left=var,
        right=C * rhs,
        left_se=se_var,
        right_se=C * se_rhs,
        seed=seed,
        inputs={"C": C, "N": N, "g": g.name},
    )


# ---------------------------------------------------------------------------
# Convex-distance concentration
# ---------------------------------------------------------------------------


def talagrand_check(sampler, membership, n, C, variant, N, seed, exhaustive=None, hull_cap=1500):
    """Convex-distance concentration: E exp(d^2 / 4C) <= 1 / P(A).

    ``variant`` selects the weighted-Hamming convex distance (with the set
    itself as members) or the Euclidean distance to the convex hull of the
    set.  With ``exhaustive=(points, probs)`` both sides are computed
    exactly by enumeration; otherwise both are Monte-Carlo estimates and
    the hull is built from at most ``hull_cap`` sampled members of A.
    """
    if variant not in ("hamming_dT", "euclidean_dN"):
        raise DomainError(f"unknown variant {variant!r}")

    if exhaustive is not None:
        points, probs = exhaustive
        points = np.atleast_2d(np.asarray(points, dtype=float))
        probs = np.asarray(probs, dtype=float)
        mask = np.asarray(membership(points), dtype=bool)
        pa = float(probs[mask].sum())
        if pa <= 0:
            raise DomainError("the target set has zero probability")
        members = points[mask]
        dists = _set_distances(points, members, mask, variant, precise=True)
        left = float(probs @ np.exp(dists**2 / (4.0 * C)))
        right = 1.0 / pa
        return ExperimentReport(
            experiment=f"convex-distance-{variant}",
            verdict=PASS if left <= right * (1 + 1e-12) else FAIL,
            left=left,
            right=right,
            seed=seed,
            inputs={"C": C, "N": len(points), "variant": variant, "exact": True},
        )

    batch = np.asarray(sampler(derived_rng(seed, 0xA7), N), dtype=float)
    mask = np.asarray(membership(batch), dtype=bool)
    pa = float(mask.mean())
    if mask.sum() == 0:
        return ExperimentReport(
            experiment=f"convex-distance-{variant}",
            verdict=FAIL,
            seed=seed,
            inputs={"C": C, "N": N, "variant": variant},
            detail={"reason": "target set empty in the sample"},
        )
    if pa < 0.01:
        return ExperimentReport(
            experiment=f"convex-distance-{variant}",
            verdict=INCONCLUSIVE,
            left=pa,
            seed=seed,
            inputs={"C": C, "N": N, "variant": variant},
            detail={"reason": "estimated target probability below 1%"},
        )
    members = batch[mask]
    if len(members) > hull_cap:
        idx = np.linspace(0, len(members) - 1, hull_cap).astype(int)
        members = members[idx]
    dists = _set_distances(batch, members, mask, variant)
    vals = np.exp(dists**2 / (4.0 * C))
    left = float(vals.mean())
    se_left = float(vals.std(ddof=1)) / math.sqrt(N)
    se_pa = math.sqrt(pa * (1 - pa) / N)
    right = 1.0 / pa
    se_right = se_pa / pa**2
    rel = math.sqrt((se_left / left) ** 2 + (se_right / right) ** 2)
    ok = left <= right * (1.0 + 3.0 * rel)
    return ExperimentReport(
        experiment=f"convex-distance-{variant}",
        verdict=PASS if ok else FAIL,
        left=left,
        right=right,
        left_se=se_left,
        right_se=se_right,
        seed=seed,
        inputs={"C": C, "N": N, "variant": variant, "hull_points": len(members)},
    )


def _set_distances(points, members, member_mask, variant, precise=False):
    """Distances of every point to the member set (members get zero)."""
    dists = np.zeros(len(points))
    outside = np.nonzero(~member_mask)[0]
    if variant == "hamming_dT":
        for i in outside:
            dists[i] = convex_distance(points[i], members)
    else:
        for i in outside:
            dists[i], _ = distance_to_convex_hull(points[i], members)
    return dists


def hull_distances(xs, members, gap_tol=1e-10):
    """Hull distances for a batch of query points (one solve per row)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    return np.array(
        [distance_to_convex_hull(x, members, gap_tol=gap_tol)[0] for x in xs]
    )


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


def gaussian_sampler(dim):
    return lambda rng, n: rng.standard_normal((n, dim))


def uniform01_sampler(dim):
    return lambda rng, n: rng.uniform(0.0, 1.0, size=(n, dim))


def rademacher_sampler(dim):
    return lambda rng, n: rng.integers(0, 2, size=(n, dim)) * 2.0 - 1.0
