"""Least-squares risk bounds on simulated dependent data.

Fits ordinary least squares on generated regression samples, evaluates the
finite-sample risk bounds (multiplicative and exact variants, residual
inequality, bounded-design span constant) with explicit constants, and runs
coverage experiments that count how often the bounds hold across replicated
datasets.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from weaktransport.measures import DomainError, derived_rng
from weaktransport.report import FAIL, PASS, ExperimentReport

COND_LIMIT = 1e12


@dataclass(frozen=True)
class RegressionData:
    """n observations of a response and a d-dimensional design row."""

    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        if z.shape[0] != y.shape[0]:
            raise DomainError("design and response lengths differ")
        if y.shape[0] <= z.shape[1]:
            raise DomainError("need more observations than parameters")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            raise DomainError("non-finite observations")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def d(self):
        return self.z.shape[1]

    def design_norm_sq(self) -> float:
        """n^{-1} sum ||Z_i||^2."""
        return float((self.z**2).sum() / self.n)


@dataclass(frozen=True)
class RiskOracle:
    """Population risk R(theta) = E(Y - Z theta)^2 in closed quadratic form.

    ``gram`` is E[Z^T Z], ``cross`` is E[Y Z], ``y_sq`` is E[Y^2]; the
    minimizer theta_bar solves gram theta = cross, and rho is
    max(1, 1/lambda_min(gram)).
    """

    gram: np.ndarray
    cross: np.ndarray
    y_sq: float

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gram, dtype=float))
        c = np.atleast_1d(np.asarray(self.cross, dtype=float))
        object.__setattr__(self, "gram", g)
        object.__setattr__(self, "cross", c)
        evals = np.linalg.eigvalsh(g)
        if evals.min() <= 0:
            raise DomainError("population Gram matrix must be positive definite")
        theta = np.linalg.solve(g, c)
        object.__setattr__(self, "_theta_bar", theta)
        object.__setattr__(self, "_rho", max(1.0, 1.0 / float(evals.min())))
        # probe optimality of the minimizer on a small random grid
        rng = np.random.default_rng(0)
        base = self.risk(theta)
        for _ in range(32):
            probe = theta + rng.standard_normal(len(theta))
            if self.risk(probe) < base - 1e-9:
                raise DomainError("risk oracle is not minimized at theta_bar")

    @property
    def theta_bar(self) -> np.ndarray:
        return self._theta_bar

    @property
    def rho(self) -> float:
        return self._rho

    def risk(self, theta) -> float:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return float(self.y_sq - 2.0 * self.cross @ theta + theta @ self.gram @ theta)

    def excess_risk(self, theta) -> float:
        return self.risk(theta) - self.risk(self.theta_bar)


@dataclass(frozen=True)
class OracleParams:
    """Tuning constants of the risk bounds."""

    eta: float
    eps: float
    C: float
    beta: float = 1.0
    M: float = 1.0
    B: float = 0.0

    def validate(self, d, n):
        if not (d + 2) / n < self.eta < 1:
            raise DomainError(f"eta must lie in (({d}+2)/{n}, 1)")
        if not 0 < self.eps < 1:
            raise DomainError("eps must lie in (0, 1)")
        if self.C <= 0 or self.beta <= 0:
            raise DomainError("C and beta must be positive")
        if self.M <= 0:
            raise DomainError("truncation level must be positive")
        if self.B < 0:
            raise DomainError("span constant must be nonnegative")
        return self


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IIDGaussianRegression:
    """Y = Z theta* + sigma xi with standard normal design rows."""

    d: int
    n: int
    theta_star: np.ndarray
    noise_sd: float = 1.0

    def sample(self, seed) -> RegressionData:
        rng = derived_rng(seed, 0x1D)
        z = rng.standard_normal((self.n, self.d))
        theta = np.asarray(self.theta_star, dtype=float)
        y = z @ theta + self.noise_sd * rng.standard_normal(self.n)
        return RegressionData(y, z)

    def risk_oracle(self) -> RiskOracle:
        theta = np.asarray(self.theta_star, dtype=float)
        return RiskOracle(
            gram=np.eye(self.d),
            cross=theta,
            y_sq=float(theta @ theta + self.noise_sd**2),
        )


@dataclass(frozen=True)
class AR1Regression:
    """Scalar autoregression: the regressor is the lagged response.

    Y_t = phi Y_{t-1} + xi_t with a stationary Gaussian start; Z_i = Y_{i-1}
    so theta_bar = phi and the excess risk is Gram-weighted.
    """

    n: int
    phi: float
    noise_sd: float = 1.0

    @property
    def d(self):
        return 1

    def sample(self, seed) -> RegressionData:
        if abs(self.phi) >= 1:
            raise DomainError("autoregression must be stable")
        rng = derived_rng(seed, 0xA1)
        var = self.noise_sd**2 / (1.0 - self.phi**2)
        y_prev = math.sqrt(var) * rng.standard_normal()
        zs = np.empty(self.n)
        ys = np.empty(self.n)
        xi = self.noise_sd * rng.standard_normal(self.n)
        for i in range(self.n):
            zs[i] = y_prev
            y_prev = self.phi * y_prev + xi[i]
            ys[i] = y_prev
        return RegressionData(ys, zs[:, None])

    def risk_oracle(self) -> RiskOracle:
        var = self.noise_sd**2 / (1.0 - self.phi**2)
        return RiskOracle(
            gram=np.array([[var]]),
            cross=np.array([self.phi * var]),
            y_sq=var,
        )

    def transport_constant(self, base_c=1.0) -> float:
        """Path-coupling constant for the stable scalar recursion.

        The shared-innovation coupling contracts by |phi| per step, so the
        summed coefficients are S = |phi| / (1 - |phi|) and the constant is
        base_c (1 + S)^2.
        """
        s = abs(self.phi) / (1.0 - abs(self.phi))
        return sre_constant(base_c, 1.0, s)


@dataclass(frozen=True)
class RademacherRegression:
    """Bounded design: sign coordinates, uniform noise on [-b, b]."""

    d: int
    n: int
    theta_star: np.ndarray
    noise_bound: float = 1.0

    def sample(self, seed) -> RegressionData:
        rng = derived_rng(seed, 0xAA)
        z = rng.integers(0, 2, size=(self.n, self.d)) * 2.0 - 1.0
        theta = np.asarray(self.theta_star, dtype=float)
        y = z @ theta + rng.uniform(-self.noise_bound, self.noise_bound, self.n)
        return RegressionData(y, z)

    def risk_oracle(self) -> RiskOracle:
        theta = np.asarray(self.theta_star, dtype=float)
        noise_var = self.noise_bound**2 / 3.0
        return RiskOracle(
            gram=np.eye(self.d),
            cross=theta,
            y_sq=float(theta @ theta + noise_var),
        )

    def design_atoms(self):
        """Support atoms of one design row with probabilities."""
        import itertools

        pts = np.array(list(itertools.product([-1.0, 1.0], repeat=self.d)))
        probs = np.full(len(pts), 1.0 / len(pts))
        return pts, probs


def sre_constant(base_c, domination, coefficient_sum) -> float:
    """Constant base_c (M + S)^2 from the recursion's coupling coefficients."""
    return base_c * (domination + coefficient_sum) ** 2


def translate_gamma_lags(gamma_y, delay) -> np.ndarray:
    """Coefficients of a lag-``delay`` functional design from those of Y:
    the lag-k coefficient is bounded by the ceil(k / delay) coefficient."""
    gamma_y = np.asarray(gamma_y, dtype=float)
    out = np.empty(len(gamma_y) * delay)
    for k in range(1, len(out) + 1):
        out[k - 1] = gamma_y[(k + delay - 1) // delay - 1]
    return out


# ---------------------------------------------------------------------------
# Fitting and risks
# ---------------------------------------------------------------------------


def ols_fit(data: RegressionData) -> np.ndarray:
    """Least-squares parameter by normal equations (positive solve).

    An ill-conditioned empirical Gram matrix (condition number above 1e12)
    raises a domain error carrying the near-null directions.
    """
    gram = data.z.T @ data.z
    u, s, _ = np.linalg.svd(gram)
    if s.min() <= 0 or s.max() / max(s.min(), 1e-300) > COND_LIMIT:
        null = u[:, s <= s.max() / COND_LIMIT]
        err = DomainError("singular design matrix")
        err.null_directions = null
        raise err
    from scipy.linalg import solve

    return solve(gram, data.z.T @ data.y, assume_a="pos")


def risks(theta, oracle: RiskOracle, data: RegressionData):
    """(population risk, empirical risk, excess of each) at theta."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape[0] != data.d:
        raise DomainError("parameter dimension mismatch")
    pop = oracle.risk(theta)
    emp = float(((data.y - data.z @ theta) ** 2).mean())
    theta_bar = oracle.theta_bar
    emp_bar = float(((data.y - data.z @ theta_bar) ** 2).mean())
    return pop, emp, pop - oracle.risk(theta_bar), emp - emp_bar


# ---------------------------------------------------------------------------
# Bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NonexactBound:
    b1: float
    b2: float
    b3: float
    multiplier: float
    additive: float
    rhs: float


def nonexact_bound(params: OracleParams, oracle: RiskOracle, d, n) -> NonexactBound:
    """Multiplicative risk bound with explicit constants.

    R(theta_hat) <= (1 + B1 eta) R(theta_bar)
                    + (B2 d + 16 rho C log(1/eps)) / (n eta) + B3 / (n eta)^2
    with B1 = 2(3 + 2|theta_bar|^2 + eta/n), B2 = 2(5 + |theta_bar|^2),
    B3 = 2(d(d-1) + d/n).
    """
    params.validate(d, n)
    eta = params.eta
    tb_sq = float(oracle.theta_bar @ oracle.theta_bar)
    b1 = 2.0 * (3.0 + 2.0 * tb_sq + eta / n)
    b2 = 2.0 * (5.0 + tb_sq)
    b3 = 2.0 * (d * (d - 1) + d / n)
    additive = (b2 * d + 16.0 * oracle.rho * params.C * math.log(1.0 / params.eps)) / (
        n * eta
    ) + b3 / (n * eta) ** 2
    mult = 1.0 + b1 * eta
    rhs = mult * oracle.risk(oracle.theta_bar) + additive
    return NonexactBound(b1, b2, b3, mult, additive, rhs)


def residual_k(params: OracleParams, oracle: RiskOracle, d, emp_risk_bar) -> float:
    """The moment aggregate K entering the residual inequality."""
    beta = params.beta
    tb_sq = float(oracle.theta_bar @ oracle.theta_bar)
    r_bar = oracle.risk(oracle.theta_bar)
    return (
        4.0 * d / beta
        + (1.0 + tb_sq + (d + 2.0) / beta) * r_bar
        + (tb_sq + d / beta) * (d - 1.0) / beta
        + (1.0 + tb_sq) * emp_risk_bar
    )


def theorem_io_residual(datasets, params: OracleParams, oracle: RiskOracle, seed=0):
    """Residual inequality at the data-generating law (zero entropy term):

    E[excess(theta_hat)] <= E[|Z|_n^2]/beta
                            + 4 sqrt(rho C E[K] beta E[excess] / (2 n)).

    All expectations are Monte-Carlo means over the replicated datasets;
    the right side's standard error is bootstrapped.  Passes with
    three-standard-error slack.
    """
    if len(datasets) < 2:
        raise DomainError("need replicated datasets")
    n = datasets[0].n
    d = datasets[0].d
    excess = []
    design = []
    kvals = []
    for data in datasets:
        theta = ols_fit(data)
        excess.append(oracle.excess_risk(theta))
        design.append(data.design_norm_sq())
        _, emp_bar, _, _ = risks(oracle.theta_bar, oracle, data)
        kvals.append(residual_k(params, oracle, d, emp_bar))
    excess = np.asarray(excess)
    design = np.asarray(design)
    kvals = np.asarray(kvals)

    def rhs_of(e, dn, kv):
        return dn.mean() / params.beta + 4.0 * math.sqrt(
            oracle.rho
            * params.C
            * kv.mean()
            * params.beta
            * max(e.mean(), 0.0)
            / (2.0 * n)
        )

    left = float(excess.mean())
    left_se = float(excess.std(ddof=1)) / math.sqrt(len(excess))
    right = rhs_of(excess, design, kvals)
    rng = derived_rng(seed, 0xB5)
    boots = np.empty(200)
    for b in range(200):
        idx = rng.integers(0, len(excess), len(excess))
        boots[b] = rhs_of(excess[idx], design[idx], kvals[idx])
    right_se = float(boots.std(ddof=1))
    slack = 3.0 * math.sqrt(left_se**2 + right_se**2)
    ok = left <= right + slack
    return ExperimentReport(
        experiment="residual-risk-inequality",
        verdict=PASS if ok else FAIL,
        left=left,
        right=right,
        left_se=left_se,
        right_se=right_se,
        seed=seed,
        inputs={"replications": len(datasets), "beta": params.beta, "C": params.C},
    )


def bernstein_B(atoms, probs, theta_spec, refine=3) -> float:
    """Span constant: sup over the parameter set of
    esssup|Z theta| / E[(Z theta)^2] for a bounded design row Z.

    ``theta_spec`` is {"kind": "grid", "points": [...]} or
    {"kind": "ball_complement", "radius": r}; the ratio decays along rays,
    so the ball-complement supremum sits on the radius-r sphere and is
    found by direction search with local refinement.  A vanishing second
    moment reports +inf.

    The numerator reads the sup norm as the essential supremum of |Z theta|
    over the design's randomness (the role the constant plays in the
    additive bound); a per-coordinate sup reading would instead use
    max_j |(Z theta)_j| and is not implemented.
    """
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    probs = np.asarray(probs, dtype=float)
    d = atoms.shape[1]

    def ratio(theta):
        theta = np.atleast_1d(theta)
        vals = atoms @ theta
        denom = float(probs @ vals**2)
        if denom <= 0:
            return math.inf
        return float(np.abs(vals).max()) / denom

    kind = theta_spec.get("kind")
    if kind == "grid":
        return max(ratio(np.asarray(t, dtype=float)) for t in theta_spec["points"])
    if kind != "ball_complement":
        raise DomainError("theta_spec kind must be 'grid' or 'ball_complement'")
    r = float(theta_spec["radius"])
    if r <= 0:
        raise DomainError("radius must be positive")
    if d == 1:
        return max(ratio(np.array([r])), ratio(np.array([-r])))
    rng = derived_rng(0x5B, d)
    best_val, best_u = -math.inf, None
    for _ in range(256):
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        v = ratio(r * u)
        if v > best_val:
            best_val, best_u = v, u
    width = 0.5
    for _ in range(refine * 4):
        for _ in range(64):
            u = best_u + width * rng.standard_normal(d)
            u /= np.linalg.norm(u)
            v = ratio(r * u)
            if v > best_val:
                best_val, best_u = v, u
        width /= 2.0
    return best_val


def estimate_log_tail(generator, M, replications, seed):
    """log P(empirical risk at theta_bar exceeds M), Monte-Carlo estimated.

    A zero count is clipped at log(1/(N+1)) and flagged.
    """
    oracle = generator.risk_oracle()
    theta_bar = oracle.theta_bar
    hits = 0
    for rep in range(replications):
        data = generator.sample(derived_rng(seed, 0x7A, rep).integers(2**63))
        _, emp_bar, _, _ = risks(theta_bar, oracle, data)
        hits += emp_bar > M
    if hits == 0:
        return math.log(1.0 / (replications + 1)), True
    return math.log(hits / replications), False


@dataclass(frozen=True)
class ExactBound:
    term: float
    rhs: float
    tail_clipped: bool


def exact_bound(params: OracleParams, oracle: RiskOracle, d, n, B, M, log_tail, tail_clipped=False) -> ExactBound:
    """Additive risk bound under the span condition:

    R(theta_hat) <= R(theta_bar) + 160 (B^2 + 4BM)/n (Bd
        + 8 rho C (log(1/eps) - log_tail)
        + d (R(theta_bar) + M) / (10B + 40M) + 8 (Bd)^2 / n).
    """
    if B <= 0 or M <= 0:
        raise DomainError("B and M must be positive")
    r_bar = oracle.risk(oracle.theta_bar)
    inner = (
        B * d
        + 8.0 * oracle.rho * params.C * (math.log(1.0 / params.eps) - log_tail)
        + d * (r_bar + M) / (10.0 * B + 40.0 * M)
        + 8.0 * (B * d) ** 2 / n
    )
    term = 160.0 * (B**2 + 4.0 * B * M) / n * inner
    return ExactBound(term=term, rhs=r_bar + term, tail_clipped=tail_clipped)


# ---------------------------------------------------------------------------
# Coverage experiments
# ---------------------------------------------------------------------------


def coverage_experiment(generator, params: OracleParams, bound="nonexact", replications=500, seed=0, workers=1, bound_kwargs=None):
    """Fraction of replications on which the chosen bound covers R(theta_hat).

    PASS when the empirical coverage is at least
    1 - eps - 2 sqrt(eps (1-eps) / replications).  Returns the report; rows
    (seed, risk, bound, hit) sit in ``detail['rows']``.
    """
    oracle = generator.risk_oracle()
    d = generator.d
    n = generator.n
    if bound == "nonexact":
        value = nonexact_bound(params, oracle, d, n).rhs
        clipped = False
    elif bound == "exact":
        kw = dict(bound_kwargs or {})
        if "log_tail" not in kw:
            lt, clipped = estimate_log_tail(generator, kw.get("M", params.M), 2000, seed)
            kw["log_tail"] = lt
            kw["tail_clipped"] = clipped
        eb = exact_bound(
            params,
            oracle,
            d,
            n,
            kw.get("B", params.B),
            kw.get("M", params.M),
            kw["log_tail"],
            kw.get("tail_clipped", False),
        )
        value = eb.rhs
        clipped = eb.tail_clipped
    else:
        raise DomainError("bound must be 'nonexact' or 'exact'")

    def one(rep):
        rep_seed = int(derived_rng(seed, 0xC0E, rep).integers(2**63))
        data = generator.sample(rep_seed)
        theta = ols_fit(data)
        risk = oracle.risk(theta)
        return rep_seed, risk, value, risk <= value

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(replications)))
    else:
        rows = [one(rep) for rep in range(replications)]
    coverage = float(np.mean([r[3] for r in rows]))
    eps = params.eps
    threshold = 1.0 - eps - 2.0 * math.sqrt(eps * (1 - eps) / replications)
    return ExperimentReport(
        experiment=f"risk-bound-coverage-{bound}",
        verdict=PASS if coverage >= threshold else FAIL,
        left=coverage,
        right=threshold,
        seed=seed,
        inputs={"replications": replications, "eps": eps, "C": params.C},
        detail={
            "bound_value": value,
            "tail_clipped": clipped,
            "rows": [(r[0], r[1], r[2], bool(r[3])) for r in rows],
        },
    )
