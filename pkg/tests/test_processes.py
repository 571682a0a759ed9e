import math

import numpy as np
import pytest

from weaktransport.dependence import tv_gamma
from weaktransport.measures import DiscreteSpace, DomainError, PathMeasure
from weaktransport.processes import (
    Affine,
    ArInfinity,
    Arma,
    InfiniteMemory,
    SimulationError,
    coupled_pair,
    default_pair_sampler,
    estimate_gamma,
    fitted_decay_rate,
    gaussian_innovations,
    infinite_memory_gamma_bound,
    path_to_csv,
    rademacher_innovations,
    simulate,
    spectral_radius,
    truncated_gaussian_innovations,
    uniform_innovations,
    weight_tail_condition,
)


def test_spectral_radius_examples():
    assert spectral_radius(np.zeros((2, 2))) == 0.0
    assert spectral_radius([[0.5]]) == pytest.approx(0.5, abs=1e-14)
    rot = np.array([[0.0, -0.9], [0.9, 0.0]])
    # characteristic polynomial x^2 + 0.81 has roots +-0.9i
    assert spectral_radius(rot) == pytest.approx(0.9, abs=1e-12)


def test_arma_requires_stability():
    with pytest.raises(DomainError):
        Arma(np.array([[1.1]]), gaussian_innovations())
    Arma(np.array([[1.1]]), gaussian_innovations(), allow_unstable=True)


def test_simulate_no_feedback_gives_iid_innovations():
    spec = Arma(np.array([[0.0]]), gaussian_innovations(), allow_unstable=True)
    path = simulate(spec, 50, [0.0], seed=7)
    # reproduce the innovation stream directly
    from weaktransport.measures import derived_rng

    xi = spec.innovation.sample(derived_rng(7, 0x51), (1, 50))[0]
    assert np.array_equal(path[:, 0], xi[:, 0])


def test_simulate_deterministic_decay():
    spec = Arma(np.array([[0.5]]), rademacher_innovations())
    # the noiseless recursion halves the state each step
    path = [1.0]
    for _ in range(4):
        path.append(0.5 * path[-1])
    assert path[1:] == [0.5, 0.25, 0.125, 0.0625]
    # packaged simulator agrees once innovations cancel in a coupled pair
    cp = coupled_pair(spec, [2.0], [1.0], 4, seed=0)
    assert np.array_equal(cp.distances, [0.5, 0.25, 0.125, 0.0625])


def test_simulate_reproducible():
    spec = Arma(np.array([[0.5]]), gaussian_innovations())
    a = simulate(spec, 20, [1.0], seed=3)
    b = simulate(spec, 20, [1.0], seed=3)
    assert np.array_equal(a, b)


def test_simulate_detects_blowup():
    spec = Arma(np.array([[3.0]]), gaussian_innovations(), allow_unstable=True)
    with pytest.raises(SimulationError):
        simulate(spec, 2000, [1e300], seed=0)


def test_coupled_pair_identical_starts():
    spec = Arma(np.array([[0.5]]), gaussian_innovations())
    cp = coupled_pair(spec, [1.0], [1.0], 10, seed=1)
    assert np.all(cp.distances == 0.0)


def test_coupled_pair_linear_noise_cancels():
    spec = Arma(np.array([[0.5]]), gaussian_innovations())
    cp = coupled_pair(spec, [3.0], [1.0], 20, seed=5)
    expected = 2.0 * 0.5 ** np.arange(1, 21)
    assert np.allclose(cp.distances, expected, rtol=1e-10, atol=1e-13)


def test_ar_infinity_reduces_to_ar1():
    arma = Arma(np.array([[0.5]]), gaussian_innovations())
    arinf = ArInfinity(np.array([0.5]), gaussian_innovations())
    a = simulate(arma, 30, [1.0], seed=11)
    b = simulate(arinf, 30, [1.0], seed=11)
    assert np.array_equal(a, b)


def test_ar_infinity_matches_companion_form_oracle():
    # direct companion-form recursion with the same innovation stream
    coeffs = np.array([0.4, 0.2, 0.1])
    spec = ArInfinity(coeffs, gaussian_innovations())
    from weaktransport.measures import derived_rng

    xi = spec.innovation.sample(derived_rng(13, 0x51), (1, 40))[0][:, 0]
    hist = [1.0, 0.0, 0.0]
    expected = []
    for t in range(40):
        nxt = coeffs @ np.array(hist[:3]) + xi[t]
        expected.append(nxt)
        hist = [nxt] + hist[:2]
    path = simulate(spec, 40, [1.0], seed=13)
    assert np.allclose(path[:, 0], expected, rtol=0, atol=0)


def test_affine_contraction_decays_in_l2():
    # drift contracts by 0.6, volatility constant: squared distances decay
    # at the squared-contraction rate (log-regression over replicates)
    spec = Affine(
        drift=lambda x: 0.6 * x,
        vol=lambda x: np.array([[0.5]]),
        vol_bound=0.5,
        innovation=gaussian_innovations(),
        dim=1,
    )
    from weaktransport.processes import coupled_batch

    _, _, dist = coupled_batch(spec, [2.0], [0.0], 12, seed=3, replicates=2000)
    mean_sq = (dist**2).mean(axis=0)
    rate = math.exp(np.polyfit(np.arange(1, 13), np.log(mean_sq), 1)[0])
    assert rate == pytest.approx(0.36, rel=0.05)


def test_estimate_gamma_ar1_exact_dyadic():
    spec = Arma(np.array([[0.5]]), rademacher_innovations())
    est = estimate_gamma(spec, 2, horizon=30, replicates=50, pairs=[([2.0], [1.0])], seed=0)
    expected = 0.5 ** np.arange(1, 31)
    assert np.array_equal(est.gamma_hat, expected)
    assert np.all(est.se == 0.0)
    assert est.s_hat == 1.0 - 2.0**-30
    assert est.tail == 2.0**-30
    assert est.s_total == 1.0


def test_estimate_gamma_skips_degenerate_pairs():
    spec = Arma(np.array([[0.5]]), gaussian_innovations())
    est = estimate_gamma(
        spec, 2, horizon=5, replicates=20, pairs=[([1.0], [1.0]), ([2.0], [1.0])], seed=0
    )
    assert len(est.pairs) == 1
    with pytest.raises(DomainError):
        estimate_gamma(spec, 2, horizon=5, replicates=20, pairs=[([1.0], [1.0])], seed=0)


def test_estimate_gamma_geometric_decay_rate():
    rot = np.array([[0.0, -0.9], [0.9, 0.0]])
    spec = Arma(rot, gaussian_innovations(dim=2))
    est = estimate_gamma(
        spec, 2, horizon=20, replicates=100, pairs=[([1.0, 0.0], [0.0, 0.0])], seed=1
    )
    rate = fitted_decay_rate(est.gamma_hat, 5, 20)
    assert abs(rate - 0.9) / 0.9 < 0.10


def test_estimate_gamma_two_state_chain_matches_tv_oracle():
    # uniformly ergodic two-state chain driven by shared uniforms realizes
    # the maximal coupling, so the estimates match the exact tv coefficients
    rows = np.array([[0.7, 0.3], [0.3, 0.7]])

    from weaktransport.processes import InnovationLaw

    u01 = InnovationLaw("uniform", 1, {"hamming_t2": 1.0})

    # map uniform(-1,1) to uniform(0,1) inside the update
    def update01(past, xi):
        u = (xi[0] + 1.0) / 2.0
        state = int(past[0, 0] > 0.5)
        return np.array([1.0 if u < rows[state, 1] else 0.0])

    spec = InfiniteMemory(
        update=update01,
        weights=np.array([math.sqrt(0.4)]),
        innovation=u01,
        dim=1,
        truncation=1,
    )
    est = estimate_gamma(
        spec, 2, horizon=4, replicates=4000, pairs=[([0.0], [1.0])], seed=9
    )
    sp = DiscreteSpace(points=(0, 1))
    pm = PathMeasure(sp, [0.5, 0.5], [rows] * 4, n=5)
    exact = tv_gamma(pm, 2)
    for k in range(1, 5):
        target = exact.entries[k, 0]
        assert abs(est.gamma_hat[k - 1] - target) <= 3 * max(est.se[k - 1], 1e-3)


def test_default_pair_sampler_shapes():
    spec = Arma(np.array([[0.2, 0.0], [0.0, 0.3]]), gaussian_innovations(dim=2))
    pairs = default_pair_sampler(spec, seed=0)
    assert len(pairs) == 12
    for x, y in pairs:
        assert len(x) == 2 and len(y) == 2


def test_infinite_memory_bound_single_weight():
    bounds = infinite_memory_gamma_bound([0.5], gamma_10=1.0, horizon=6)
    # scan over the inner integer: tail vanishes once s >= 2
    for t in range(1, 7):
        cands = [0.5 ** (t / s) + (0.5 if s == 1 else 0.0) for s in range(1, t + 1)]
        assert bounds[t - 1] == pytest.approx(min(cands), abs=1e-12)
    # the bound dominates the simulated contraction of the matching model
    spec = ArInfinity(np.array([0.5]), gaussian_innovations())
    est = estimate_gamma(spec, 2, horizon=6, replicates=50, pairs=[([1.0], [0.0])], seed=2)
    gamma_10 = est.gamma_hat[0]
    assert np.all(infinite_memory_gamma_bound([0.5], gamma_10, 6) >= est.gamma_hat - 1e-9)


def test_infinite_memory_bound_zero_weights():
    bounds = infinite_memory_gamma_bound([0.0, 0.0], gamma_10=2.0, horizon=4)
    assert np.all(bounds == 0.0)


def test_infinite_memory_bound_cubic_weights_summable():
    w = 1.0 / np.arange(1, 200) ** 3
    w = 0.5 * w / w.sum()
    bounds = infinite_memory_gamma_bound(w, gamma_10=1.0, horizon=1000)
    total = bounds.sum()
    assert math.isfinite(total)
    # the summed bound stabilizes: the last decade contributes a vanishing share
    assert bounds[900:].sum() < 0.01 * total


def test_weight_tail_condition_finite():
    w = 1.0 / np.arange(1, 100) ** 3
    w = 0.5 * w / w.sum()
    assert weight_tail_condition(w) < math.inf


def test_infinite_memory_rejects_non_contracting_weights():
    with pytest.raises(DomainError):
        InfiniteMemory(update=lambda h, x: h[0], weights=[0.7, 0.4], innovation=gaussian_innovations())
    with pytest.raises(DomainError):
        ArInfinity(np.array([0.6, 0.5]), gaussian_innovations())


def test_truncated_gaussian_is_bounded():
    law = truncated_gaussian_innovations()
    from weaktransport.measures import derived_rng

    draws = law.sample(derived_rng(0, 1), (1000,))
    assert np.abs(draws).max() <= 3.0


def test_path_to_csv_format():
    path = np.array([[1.0, 2.0], [3.0, 4.0]])
    text = path_to_csv(path)
    lines = text.strip().split("\n")
    assert lines[0] == "t,x1,x2"
    assert lines[1].startswith("1,1.0,2.0")
