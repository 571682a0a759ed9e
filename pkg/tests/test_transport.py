import itertools
import math

import numpy as np
import pytest

from weaktransport.measures import (
    DiscreteSpace,
    DomainError,
    MetricSpec,
    PathMeasure,
    chain_from_start,
    hamming_metric,
    kl_divergence,
    measure,
    path_space,
    random_measure,
    space_from_embedding,
    uniform_measure,
)
from weaktransport.transport import (
    AlphaWeights,
    CertifiedValue,
    Coupling,
    MarkovCoupling,
    dual_form_check,
    glue_markov,
    inf_convolution,
    ot_exact,
    _ot_lp,
    round_to_coupling,
    wasserstein,
    weak_cost_fixed_alpha,
    weak_transport_cost,
)

BINARY = DiscreteSpace(points=(0, 1))
TRIPLE = DiscreteSpace(points=(0, 1, 2))


def random_metric(space, rng):
    kind = rng.integers(3)
    if kind == 0:
        return hamming_metric
    if kind == 1:
        emb = rng.standard_normal((space.size, 2))
        return MetricSpec("euclidean"), DiscreteSpace(space.points, emb)
    m = space.size
    t = np.abs(rng.standard_normal((m, m)))
    t = t + t.T
    np.fill_diagonal(t, 0.0)
    # enforce triangle inequality by shortest-path closure
    for k in range(m):
        for i in range(m):
            for j in range(m):
                t[i, j] = min(t[i, j], t[i, k] + t[k, j])
    return MetricSpec("table", table=t)


# ---------------------------------------------------------------------------
# exact OT plumbing
# ---------------------------------------------------------------------------


def test_nw_family_matches_simplex_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(60):
        m, k = rng.integers(2, 5, size=2)
        cost = np.abs(rng.standard_normal((m, k)))
        p = rng.dirichlet([1.0] * m)
        q = rng.dirichlet([1.0] * k)
        v1, plan1 = ot_exact(cost, p, q)
        v2, _ = _ot_lp(cost, p, q)
        assert v1 == pytest.approx(v2, abs=1e-9)
        assert np.abs(plan1.sum(axis=1) - p).max() < 1e-12
        assert np.abs(plan1.sum(axis=0) - q).max() < 1e-12


def test_ot_exact_with_zero_mass_rows():
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    v, plan = ot_exact(cost, np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    assert v == pytest.approx(0.5)
    assert plan[1].sum() == 0.0


def test_round_to_coupling_restores_margins():
    rng = np.random.default_rng(1)
    p = rng.dirichlet([1.0] * 4)
    q = rng.dirichlet([1.0] * 3)
    plan = np.outer(p, q) + 1e-6 * rng.standard_normal((4, 3))
    fixed = round_to_coupling(plan, p, q)
    assert np.all(fixed >= 0)
    assert np.abs(fixed.sum(axis=1) - p).max() < 1e-12
    assert np.abs(fixed.sum(axis=0) - q).max() < 1e-12


# ---------------------------------------------------------------------------
# classical Wasserstein
# ---------------------------------------------------------------------------


def test_wasserstein_identity_is_zero():
    p = measure(TRIPLE, [0.2, 0.5, 0.3])
    val, _ = wasserstein(p, p, 2, hamming_metric)
    assert val == pytest.approx(0.0, abs=1e-12)


def test_wasserstein_hamming_equals_tv_brute_force():
    # one-parameter family oracle: couplings of two binary measures
    P = measure(BINARY, [0.5, 0.5])
    Q = measure(BINARY, [1.0, 0.0])
    best = math.inf
    for s in np.linspace(max(0.0, 1.0 - 0.5), min(0.5, 1.0), 101):
        plan = np.array([[s, 0.5 - s], [1.0 - s, s - 0.5]])
        if plan.min() < -1e-12:
            continue
        best = min(best, float(plan[0, 1] + plan[1, 0]))
    val, coupling = wasserstein(P, Q, 1, hamming_metric)
    assert best == pytest.approx(0.5, abs=1e-9)
    assert val == pytest.approx(0.5, abs=1e-9)
    assert isinstance(coupling, Coupling)


def test_wasserstein_point_masses_euclidean():
    sp = space_from_embedding([[0.0], [1.0]])
    P = measure(sp, [1.0, 0.0])
    Q = measure(sp, [0.0, 1.0])
    for p in (1.0, 1.5, 2.0):
        val, _ = wasserstein(P, Q, p, MetricSpec("euclidean"))
        assert val == pytest.approx(1.0, abs=1e-12)


def test_wasserstein_rejects_bad_order():
    P = uniform_measure(BINARY)
    with pytest.raises(DomainError):
        wasserstein(P, P, 3, hamming_metric)


# ---------------------------------------------------------------------------
# fixed-weight weak cost
# ---------------------------------------------------------------------------


def test_fixed_alpha_zero_weights_give_zero():
    P = measure(BINARY, [0.3, 0.7])
    Q = measure(BINARY, [0.9, 0.1])
    alpha = AlphaWeights(np.zeros((1, 2)), q=2)
    val, _ = weak_cost_fixed_alpha(P, Q, alpha, hamming_metric)
    assert val == 0.0


def test_fixed_alpha_unit_weights_reduce_to_w1():
    rng = np.random.default_rng(3)
    for trial in range(20):
        P = random_measure(TRIPLE, trial, 1.0)
        Q = random_measure(TRIPLE, trial + 500, 1.0)
        alpha = AlphaWeights(np.ones((1, 3)), q=2)
        val, _ = weak_cost_fixed_alpha(P, Q, alpha, hamming_metric)
        w1, _ = wasserstein(P, Q, 1, hamming_metric)
        assert val == pytest.approx(w1, abs=1e-9)
    del rng


def test_fixed_alpha_rejects_negative_weights():
    with pytest.raises(DomainError):
        AlphaWeights(np.array([[-0.1, 1.0]]), q=2)


def _markov_value_on_grid(P, Q, alpha, base, steps):
    """Brute-force the Markov infimum on a binary 2-step space.

    Stage plans are parametrized by their free corner entries; the grid
    scans all five scalars and is refined around the best point.
    """
    pw = P.weights.reshape(2, 2)
    qw = Q.weights.reshape(2, 2)
    p1, q1 = pw.sum(axis=1), qw.sum(axis=1)
    pk = pw / p1[:, None]
    qk = qw / q1[:, None]
    d = np.ones((2, 2)) - np.eye(2)

    def path_cost(plan1, conds):
        total = 0.0
        for x1, y1 in itertools.product(range(2), repeat=2):
            w1 = plan1[x1, y1]
            if w1 <= 0:
                continue
            c = conds[(x1, y1)]
            for x2, y2 in itertools.product(range(2), repeat=2):
                w = w1 * c[x2, y2]
                if w <= 0:
                    continue
                yf = y1 * 2 + y2
                total += w * (
                    alpha.values[0, yf] * d[x1, y1] + alpha.values[1, yf] * d[x2, y2]
                )
        return total

    def plan_from_scalar(s, row, col):
        return np.array(
            [[s, row[0] - s], [col[0] - s, row[1] - col[0] + s]]
        )

    def bounds(row, col):
        return max(0.0, col[0] - row[1]), min(row[0], col[0])

    centers = [0.5] * 5
    widths = [1.0] * 5
    best = math.inf
    for _ in range(steps):
        grids = []
        lims = [bounds(p1, q1)] + [
            bounds(pk[x1], qk[y1]) for x1, y1 in itertools.product(range(2), repeat=2)
        ]
        for c, w, (lo, hi) in zip(centers, widths, lims):
            lo2, hi2 = max(lo, c - w * (hi - lo)), min(hi, c + w * (hi - lo))
            grids.append(np.linspace(lo2, hi2, 7))
        best_pt = None
        for combo in itertools.product(*grids):
            plan1 = plan_from_scalar(combo[0], p1, q1)
            if plan1.min() < -1e-12:
                continue
            conds = {}
            ok = True
            for idx, (x1, y1) in enumerate(itertools.product(range(2), repeat=2)):
                c = plan_from_scalar(combo[1 + idx], pk[x1], qk[y1])
                if c.min() < -1e-12:
                    ok = False
                    break
                conds[(x1, y1)] = np.maximum(c, 0)
            if not ok:
                continue
            val = path_cost(np.maximum(plan1, 0), conds)
            if val < best:
                best = val
                best_pt = combo
        if best_pt is not None:
            centers = list(best_pt)
        widths = [w / 3 for w in widths]
    return best


def test_fixed_alpha_markov_matches_grid_oracle():
    # binary chain against the iid product, unit weights, Hamming distance
    k = np.array([[0.7, 0.3], [0.4, 0.6]])
    P = chain_from_start(BINARY, k, 0, 2).joint()
    mu = np.array([0.5, 0.5])
    Q = PathMeasure(BINARY, mu, [np.vstack([mu, mu])], n=2).joint()
    alpha = AlphaWeights(np.ones((2, 4)), q=2)
    val, coupling = weak_cost_fixed_alpha(
        measure(path_space(BINARY, 2), P.weights),
        measure(path_space(BINARY, 2), Q.weights),
        alpha,
        hamming_metric,
        markov=True,
        n=2,
        base_space=BINARY,
    )
    oracle = _markov_value_on_grid(P, Q, alpha, BINARY, steps=6)
    assert val == pytest.approx(oracle, abs=1e-6)
    assert np.abs(coupling.plan.sum(axis=1) - P.weights).max() < 1e-9


def test_fixed_alpha_markov_at_least_unrestricted():
    rng = np.random.default_rng(9)
    psp = path_space(BINARY, 2)
    for trial in range(10):
        P = random_measure(psp, trial, 1.0)
        Q = random_measure(psp, trial + 99, 1.0)
        alpha = AlphaWeights(np.abs(rng.standard_normal((2, 4))), q=2)
        v_markov, _ = weak_cost_fixed_alpha(
            P, Q, alpha, hamming_metric, markov=True, n=2, base_space=BINARY
        )
        v_free, _ = weak_cost_fixed_alpha(
            P, Q, alpha, hamming_metric, markov=False, n=2, base_space=BINARY
        )
        assert v_free <= v_markov + 1e-9


# ---------------------------------------------------------------------------
# variational weak cost
# ---------------------------------------------------------------------------


def test_weak_cost_identity_is_zero():
    P = measure(TRIPLE, [0.2, 0.5, 0.3])
    cert = weak_transport_cost(P, P, 2, hamming_metric)
    assert cert.lower == pytest.approx(0.0, abs=1e-9)
    assert cert.upper == pytest.approx(0.0, abs=1e-9)


def test_weak_cost_hamming_forced_coupling():
    P = measure(BINARY, [1.0, 0.0])
    Q = measure(BINARY, [0.5, 0.5])
    cert = weak_transport_cost(P, Q, 2, hamming_metric)
    assert cert.upper == pytest.approx(math.sqrt(2) / 2, abs=1e-9)
    assert cert.lower == pytest.approx(math.sqrt(2) / 2, abs=1e-9)


def test_weak_cost_hamming_point_mass_second():
    P = measure(BINARY, [0.5, 0.5])
    Q = measure(BINARY, [1.0, 0.0])
    cert = weak_transport_cost(P, Q, 2, hamming_metric)
    assert cert.upper == pytest.approx(0.5, abs=1e-9)
    assert cert.lower == pytest.approx(0.5, abs=1e-9)


def test_weak_cost_order_one_collapses_to_w1():
    for trial in range(10):
        P = random_measure(TRIPLE, trial, 1.0)
        Q = random_measure(TRIPLE, trial + 77, 1.0)
        cert = weak_transport_cost(P, Q, 1, hamming_metric)
        w1, _ = wasserstein(P, Q, 1, hamming_metric)
        assert cert.lower == cert.upper == pytest.approx(w1, abs=1e-12)


def test_weak_cost_minimax_gap_small_all_metrics():
    # zero duality gap holds on single-coordinate instances; solver must
    # certify it within 1e-4
    rng = np.random.default_rng(17)
    for trial in range(25):
        size = int(rng.integers(2, 4))
        sp = DiscreteSpace(tuple(range(size)), rng.standard_normal((size, 2)))
        P = random_measure(sp, trial, 1.0)
        Q = random_measure(sp, trial + 1000, 1.0)
        metric = [hamming_metric, MetricSpec("euclidean")][trial % 2]
        cert = weak_transport_cost(P, Q, 2, metric, seed=trial)
        assert cert.gap <= 1e-4, f"gap {cert.gap} at trial {trial}"


def test_weak_cost_dominated_by_wasserstein():
    rng = np.random.default_rng(23)
    for trial in range(15):
        sp = DiscreteSpace(tuple(range(3)), rng.standard_normal((3, 2)))
        P = random_measure(sp, trial, 1.0)
        Q = random_measure(sp, trial + 31, 1.0)
        metric = MetricSpec("euclidean")
        cert = weak_transport_cost(P, Q, 2, metric, seed=trial)
        w2, _ = wasserstein(P, Q, 2, metric)
        assert cert.upper <= w2 + 1e-6


def test_weak_cost_universal_hamming_entropy_bound():
    # sqrt(2 KL) dominates the order-2 Hamming weak cost, both directions
    for trial in range(60):
        size = 2 + trial % 4
        sp = DiscreteSpace(tuple(range(size)))
        P = random_measure(sp, trial, 0.7)
        Q = random_measure(sp, trial + 4000, 0.7)
        kl = kl_divergence(Q, P)
        fwd = weak_transport_cost(P, Q, 2, hamming_metric)
        inv = weak_transport_cost(Q, P, 2, hamming_metric)
        assert fwd.upper <= math.sqrt(2 * kl) + 1e-6
        assert inv.upper <= math.sqrt(2 * kl) + 1e-6


def test_weak_cost_triangle_inequality():
    for trial in range(30):
        size = 2 + trial % 3
        sp = DiscreteSpace(tuple(range(size)))
        P = random_measure(sp, trial, 1.0)
        Q = random_measure(sp, trial + 100, 1.0)
        R = random_measure(sp, trial + 200, 1.0)
        pr = weak_transport_cost(P, R, 2, hamming_metric)
        pq = weak_transport_cost(P, Q, 2, hamming_metric)
        qr = weak_transport_cost(Q, R, 2, hamming_metric)
        assert pr.lower <= pq.upper + qr.upper + 1e-6


def test_weak_cost_transported_weights_inequality():
    # constructive triangle step: conditional averaging of the weights
    # along the optimal (Q, R) coupling cannot increase the q-norm, and the
    # three fixed-weight costs chain accordingly
    rng = np.random.default_rng(29)
    for trial in range(20):
        sp = TRIPLE
        P = random_measure(sp, trial, 1.0)
        Q = random_measure(sp, trial + 300, 1.0)
        R = random_measure(sp, trial + 600, 1.0)
        alpha = AlphaWeights(np.abs(rng.standard_normal((1, 3))), q=2)
        v_qr, coup_qr = weak_cost_fixed_alpha(Q, R, alpha, hamming_metric)
        # transported weights: conditional expectation of alpha(Z) given Y
        qw = Q.weights
        tilde_vals = np.zeros_like(qw)
        mask = qw > 0
        tilde_vals[mask] = (coup_qr.plan @ alpha.values[0])[mask] / qw[mask]
        tilde = AlphaWeights(tilde_vals[None, :], q=2)
        lhs_norm = float(np.sum(qw * tilde_vals**2))
        rhs_norm = float(np.sum(R.weights * alpha.values[0] ** 2))
        assert lhs_norm <= rhs_norm + 1e-9
        v_pr, _ = weak_cost_fixed_alpha(P, R, alpha, hamming_metric)
        v_pq, _ = weak_cost_fixed_alpha(P, Q, tilde, hamming_metric)
        assert v_pr <= v_pq + v_qr + 1e-9


def test_weak_cost_intermediate_order():
    # p strictly between 1 and 2 still certifies on tiny spaces
    P = measure(TRIPLE, [0.6, 0.3, 0.1])
    Q = measure(TRIPLE, [0.2, 0.3, 0.5])
    cert = weak_transport_cost(P, Q, 1.5, hamming_metric)
    assert cert.gap <= 1e-3
    assert cert.upper > 0


def test_certified_value_rejects_crossed_bounds():
    with pytest.raises(DomainError):
        CertifiedValue(1.0, 0.5)


# ---------------------------------------------------------------------------
# gluing
# ---------------------------------------------------------------------------


def _random_markov_coupling(P: PathMeasure, Q: PathMeasure, rng):
    m = P.space.size
    p1, q1 = P.initial, Q.initial
    _, step1 = ot_exact(rng.standard_normal((m, m)), p1, q1)
    step1 = 0.5 * step1 + 0.5 * np.outer(p1, q1)
    cond = {}
    for x1 in range(m):
        for y1 in range(m):
            pr = P.kernel_row(2, (x1,))
            qr = Q.kernel_row(2, (y1,))
            _, v = ot_exact(rng.standard_normal((m, m)), pr, qr)
            cond[(x1, y1)] = 0.5 * v + 0.5 * np.outer(pr, qr)
    return MarkovCoupling(step1, cond)


def _random_binary_path_measure(rng):
    init = rng.dirichlet([1.0, 1.0])
    k = np.vstack([rng.dirichlet([1.0, 1.0]) for _ in range(2)])
    return PathMeasure(BINARY, init, [k], n=2)


def test_glue_independent_couplings_stay_independent():
    rng = np.random.default_rng(4)
    P, Q, R = (_random_binary_path_measure(rng) for _ in range(3))
    ind_xy = MarkovCoupling(
        np.outer(P.initial, Q.initial),
        {
            (x1, y1): np.outer(P.kernel_row(2, (x1,)), Q.kernel_row(2, (y1,)))
            for x1 in range(2)
            for y1 in range(2)
        },
    )
    ind_yz = MarkovCoupling(
        np.outer(Q.initial, R.initial),
        {
            (y1, z1): np.outer(Q.kernel_row(2, (y1,)), R.kernel_row(2, (z1,)))
            for y1 in range(2)
            for z1 in range(2)
        },
    )
    glued = glue_markov(ind_xy, ind_yz)
    pj = P.joint().weights.reshape(2, 2)
    qj = Q.joint().weights.reshape(2, 2)
    rj = R.joint().weights.reshape(2, 2)
    expected = np.einsum("ab,cd,ef->abcdef", pj, qj, rj)
    assert np.abs(glued - expected).max() < 1e-12


def test_glue_diagonal_identifies_outer_with_middle():
    rng = np.random.default_rng(5)
    Q = _random_binary_path_measure(rng)
    R = _random_binary_path_measure(rng)
    diag_xy = MarkovCoupling(
        np.diag(Q.initial),
        {
            (y1, y1): np.diag(Q.kernel_row(2, (y1,)))
            for y1 in range(2)
        }
        | {
            (x1, y1): np.outer(Q.kernel_row(2, (x1,)), Q.kernel_row(2, (y1,)))
            for x1 in range(2)
            for y1 in range(2)
            if x1 != y1
        },
    )
    pi_yz = _random_markov_coupling(Q, R, rng)
    glued = glue_markov(diag_xy, pi_yz)
    # with X glued to Y, the (x, z) margin equals the (y, z) coupling
    xz = glued.sum(axis=(2, 3)).reshape(4, 4)
    yz = pi_yz.to_joint()
    assert np.abs(xz - yz).max() < 1e-10


def test_glue_margins_and_conditional_independence():
    rng = np.random.default_rng(6)
    for trial in range(25):
        P = _random_binary_path_measure(rng)
        Q = _random_binary_path_measure(rng)
        R = _random_binary_path_measure(rng)
        pi_xy = _random_markov_coupling(P, Q, rng)
        pi_yz = _random_markov_coupling(Q, R, rng)
        glued = glue_markov(pi_xy, pi_yz)
        assert glued.min() > -1e-15
        assert glued.sum() == pytest.approx(1.0, abs=1e-9)
        xy = glued.sum(axis=(4, 5)).reshape(4, 4)
        yz = glued.sum(axis=(0, 1)).transpose(0, 1, 2, 3).reshape(4, 4)
        assert np.abs(xy - pi_xy.to_joint()).max() < 1e-9
        assert np.abs(yz - pi_yz.to_joint()).max() < 1e-9
        # conditional independence of the outer paths given the middle path
        for y1 in range(2):
            for y2 in range(2):
                block = glued[:, :, y1, y2, :, :]
                mass = block.sum()
                if mass <= 1e-12:
                    continue
                x_marg = block.sum(axis=(2, 3)) / mass
                z_marg = block.sum(axis=(0, 1)) / mass
                product = np.einsum("ab,cd->abcd", x_marg, z_marg)
                assert np.abs(block / mass - product).max() < 1e-9


def test_glue_rejects_mismatched_middle():
    rng = np.random.default_rng(7)
    P = _random_binary_path_measure(rng)
    Q = _random_binary_path_measure(rng)
    Q2 = _random_binary_path_measure(rng)
    R = _random_binary_path_measure(rng)
    pi_xy = _random_markov_coupling(P, Q, rng)
    pi_yz = _random_markov_coupling(Q2, R, rng)
    with pytest.raises(DomainError):
        glue_markov(pi_xy, pi_yz)


# ---------------------------------------------------------------------------
# inf-convolution and the dual form
# ---------------------------------------------------------------------------


def test_inf_convolution_zero_weights_give_min():
    f = np.array([0.3, 1.2, 0.9])
    out = inf_convolution(f, np.zeros(3), hamming_metric, TRIPLE)
    assert np.allclose(out, 0.3)


def test_inf_convolution_huge_weights_return_f():
    f = np.array([0.3, 1.2, 0.9])
    out = inf_convolution(f, np.full(3, 100.0), hamming_metric, TRIPLE)
    assert np.allclose(out, f)


def test_inf_convolution_two_point_case():
    f = np.array([0.0, 1.0])
    out = inf_convolution(f, np.full(2, 0.5), hamming_metric, BINARY)
    assert np.allclose(out, [0.0, 0.5])


def test_dual_form_constant_function_passes():
    P = measure(TRIPLE, [0.3, 0.4, 0.3])
    rep = dual_form_check(
        P, 1.0, 2, hamming_metric, np.full(3, 2.0), np.full(3, 0.7), lam=1.3
    )
    assert rep.passed
    assert rep.left <= 1.0 + 1e-9


def test_dual_form_small_lambda_approaches_one():
    P = measure(TRIPLE, [0.3, 0.4, 0.3])
    rep = dual_form_check(
        P, 1.0, 2, hamming_metric, np.array([0.1, 0.9, 0.4]), np.ones(3), lam=1e-8
    )
    assert rep.passed
    assert rep.left == pytest.approx(1.0, abs=1e-6)


def test_dual_form_grid_on_uniform_binary():
    # grid over (lam, alpha) confirms the universal Hamming constant
    P = uniform_measure(BINARY)
    f = np.array([0.0, 1.0])
    for lam in np.linspace(0.05, 4.0, 12):
        for a in np.linspace(0.0, 3.0, 13):
            rep = dual_form_check(
                P, 1.0, 2, hamming_metric, f, np.full(2, a), lam=float(lam)
            )
            assert rep.passed, (lam, a, rep.left)


def test_dual_form_rejects_bad_lambda():
    P = uniform_measure(BINARY)
    with pytest.raises(DomainError):
        dual_form_check(P, 1.0, 2, hamming_metric, np.zeros(2), np.ones(2), lam=0.0)
