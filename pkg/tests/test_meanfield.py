import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import scalar_model
from submfg.meanfield import (A_LE_B, B_LE_A, EQUAL, INCOMPARABLE, ConditionalLawFlow, SummaryFlow,
                              check_dominance_1d_cdf, check_dominance_pathwise, conditional_empirical_law,
                              conditional_w2_gap, mix_flows, pathspace_distance, summaries,
                              wasserstein2_empirical_1d)
from submfg.model import InteractionSpec, clamped, coordinate
from submfg.sde import FeedbackControl, PathBundle, TimeGrid, generate_noise, simulate_forward

IDENTITY = InteractionSpec.scalar([coordinate(0)])


def _bundle(values, T=1.0, fp="p"):
    values = np.asarray(values, dtype=float)
    return PathBundle(values, TimeGrid(T, values.shape[2] - 1), fp)


def _flow_from_inner(points_per_step, fp="p"):
    """Single-scenario flow with the given inner particles at every step (1-d)."""
    pts = np.asarray(points_per_step, dtype=float)  # (n_steps + 1, n_inner)
    if pts.shape[0] == 1:
        pts = np.vstack([pts, pts])
    return conditional_empirical_law(_bundle(pts.T[None, :, :, None], fp=fp))


def test_empirical_law_of_three_particles():
    flow = _flow_from_inner([[1, 2, 3], [0, 0, 0]])
    s = summaries(flow, IDENTITY, 0, 0)
    assert s.m[0] == pytest.approx(2.0)
    assert s.norm1 == pytest.approx(2.0)
    assert s.norm2 == pytest.approx(np.sqrt(14 / 3))
    assert flow.provenance == "single-ensemble"
    np.testing.assert_allclose(flow.weights.sum(axis=2), 1.0)


def test_single_particle_is_a_dirac():
    flow = _flow_from_inner([[1.5], [2.5]])
    pts, w = flow.cloud(1, 0)
    assert w.tolist() == [1.0]
    assert wasserstein2_empirical_1d(pts, pts, w, w) == 0.0


def test_deterministic_dynamics_give_dirac_clouds():
    plan = generate_noise(0, TimeGrid(1.0, 20), 2, 5, (1, 0, 0))
    X = simulate_forward(scalar_model(drift="1 - x1 + a1"), plan, FeedbackControl.constant(0.0))
    flow = conditional_empirical_law(X)
    euler = 1 - (1 - 0.05) ** np.arange(21)
    for k in range(21):
        pts, _ = flow.cloud(k, 1)
        np.testing.assert_allclose(pts[:, 0], euler[k], rtol=0, atol=1e-15)
    assert abs(euler[-1] - (1 - np.exp(-1))) < 0.01


def test_scalar_and_order1_summaries():
    flow = _flow_from_inner([[0, 2]])
    assert summaries(flow, IDENTITY, 0, 0).m[0] == pytest.approx(1.0)
    flow = _flow_from_inner([[-5, 5]])
    assert summaries(flow, InteractionSpec.scalar([clamped(0, -1, 1)]), 0, 0).m[0] == 0.0
    flow = _flow_from_inner([[1, -1]])
    gamma = InteractionSpec.order1(lambda x, y: np.sum((x - y) ** 2, axis=-1))
    assert summaries(flow, gamma, 0, 0, x=[0.0]).m[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        summaries(flow, gamma, 0, 0)


def test_flow_rejects_bad_weights():
    pts = np.zeros((1, 2, 2, 1))
    with pytest.raises(ValueError):
        ConditionalLawFlow(pts, np.full((1, 2, 2), 0.4), TimeGrid(1.0, 1), "p")


def test_mixture_of_one_flow_is_the_flow():
    flow = _flow_from_inner([[0, 1, 5], [2, 2, 3]])
    mixed = mix_flows([flow])
    np.testing.assert_array_equal(mixed.points, flow.points)
    np.testing.assert_array_equal(mixed.weights, flow.weights)


def test_mixture_of_two_diracs():
    a, b = _flow_from_inner([[0.0]]), _flow_from_inner([[2.0]])
    mixed = mix_flows([a, b])
    assert summaries(mixed, IDENTITY, 0, 0).m[0] == pytest.approx(1.0)
    assert mixed.provenance == "mixture(2)"


def test_three_way_mixture_weights():
    flows = [_flow_from_inner([[float(j), j + 1.0]]) for j in range(3)]
    mixed = mix_flows(flows)
    w = mixed.weights[0, 0]
    for j in range(3):
        assert w[2 * j:2 * j + 2].sum() == pytest.approx(1 / 3)


def test_mixture_rejects_other_plans():
    with pytest.raises(ValueError):
        mix_flows([_flow_from_inner([[0.0]], fp="p"), _flow_from_inner([[0.0]], fp="q")])
    with pytest.raises(ValueError):
        mix_flows([_flow_from_inner([[0.0]])], weights=[0.5])


def test_summary_flows_mix_by_averaging():
    a = SummaryFlow(np.zeros((2, 3, 1)))
    b = SummaryFlow(np.full((2, 3, 1), 3.0))
    np.testing.assert_allclose(mix_flows([a, b], [2 / 3, 1 / 3]).values, 1.0)


def test_thinned_mixture_stays_normalized():
    rng = np.random.default_rng(0)
    flows = [conditional_empirical_law(_bundle(rng.normal(size=(2, 50, 3, 1)))) for _ in range(4)]
    thin = mix_flows(flows, cap=64)
    assert thin.cloud_size == 64
    np.testing.assert_allclose(thin.weights.sum(axis=2), 1.0)
    exact = summaries(mix_flows(flows), IDENTITY, 1, 0).m[0]
    assert summaries(thin, IDENTITY, 1, 0).m[0] == pytest.approx(exact, abs=0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2 ** 31))
def test_mixture_commutes_with_summaries(n, seed):
    rng = np.random.default_rng(seed)
    flows = [conditional_empirical_law(_bundle(rng.normal(size=(2, 4, 3, 1)))) for _ in range(n)]
    lam = rng.dirichlet(np.ones(n))
    mixed = mix_flows(flows, lam)
    np.testing.assert_allclose(mixed.weights.sum(axis=2), 1.0, atol=1e-12)
    expected = sum(lam[j] * flows[j].summary_path(IDENTITY) for j in range(n))
    np.testing.assert_allclose(mixed.summary_path(IDENTITY), expected, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=20), st.floats(0, 10))
def test_summaries_monotone_in_particles(a, shift):
    a = np.sort(np.array(a))
    b = a + shift
    fns = InteractionSpec.scalar([coordinate(0), clamped(0, -1, 1)])
    ma = fns.for_cloud(a[:, None], np.zeros((1, 1)))
    mb = fns.for_cloud(b[:, None], np.zeros((1, 1)))
    assert np.all(ma <= mb + 1e-12)


# -- dominance -----------------------------------------------------------------


def test_pathwise_dominance():
    rng = np.random.default_rng(1)
    X = _bundle(rng.normal(size=(2, 3, 5, 2)))
    assert check_dominance_pathwise(X, X).violation == 0.0
    Y = _bundle(X.values + 1)
    up = check_dominance_pathwise(X, Y)
    assert up.violation == 0.0 and up.passed
    down = check_dominance_pathwise(Y, X, tol=1e-3)
    assert not down.passed
    assert down.violation == pytest.approx(2 + X.grid.T)
    assert down.normalized == pytest.approx(1.0)
    assert down.max_violation == pytest.approx(1.0)
    assert down.witness["gap"] == pytest.approx(1.0)


def test_cdf_dominance_examples():
    assert check_dominance_1d_cdf([0, 1], [1, 2]) == A_LE_B
    assert check_dominance_1d_cdf([1, 2], [0, 1]) == B_LE_A
    assert check_dominance_1d_cdf([0, 2], [1, 1]) == INCOMPARABLE
    assert check_dominance_1d_cdf([3, 1, 2], [1, 2, 3]) == EQUAL
    with pytest.raises(ValueError):
        check_dominance_1d_cdf([], [1.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=30), st.floats(1e-3, 10))
def test_cdf_dominance_of_shifted_cloud(a, delta):
    a = np.array(a)
    assert check_dominance_1d_cdf(a, a + delta) == A_LE_B


# -- distances -----------------------------------------------------------------


def test_wasserstein_examples():
    assert wasserstein2_empirical_1d([1.5], [1.5]) == 0.0
    assert wasserstein2_empirical_1d([0.0], [3.0]) == pytest.approx(3.0)
    assert wasserstein2_empirical_1d([0, 2], [1, 3]) == pytest.approx(1.0)
    # unequal weights: quantile coupling moves mass 1/4 by 2 and mass 3/4 by 0
    assert wasserstein2_empirical_1d([0, 2], [2], [0.25, 0.75]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        wasserstein2_empirical_1d([], [1.0])


def _w2_sorted_oracle(a, b):
    """Equal-size clouds: W2 is the RMS gap between sorted samples."""
    return float(np.sqrt(np.mean((np.sort(a) - np.sort(b)) ** 2)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_wasserstein_matches_sorted_matching(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    a, b = rng.normal(size=n), rng.normal(2, 3, size=n)
    assert wasserstein2_empirical_1d(a, b) == pytest.approx(_w2_sorted_oracle(a, b), rel=1e-12, abs=1e-12)


def test_wasserstein_triangle_inequality():
    rng = np.random.default_rng(7)
    for _ in range(100):
        clouds = [rng.normal(rng.normal(), rng.uniform(0.1, 3), size=rng.integers(1, 30)) for _ in range(3)]
        a, b, c = clouds
        ab, bc, ac = (wasserstein2_empirical_1d(*p) for p in ((a, b), (b, c), (a, c)))
        assert ac <= ab + bc + 1e-12


def test_pathspace_distance():
    rng = np.random.default_rng(2)
    X = _bundle(rng.normal(size=(3, 4, 6, 2)))
    assert pathspace_distance(X, X) == 0.0
    c = np.array([0.3, -0.4])
    assert pathspace_distance(X, _bundle(X.values + c)) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        pathspace_distance(X, _bundle(X.values, fp="other"))


def test_conditional_w2_gap_of_shift():
    rng = np.random.default_rng(3)
    X = _bundle(rng.normal(size=(3, 8, 4, 1)))
    assert conditional_w2_gap(X, _bundle(X.values + 0.25), 2) == pytest.approx(0.25)
