import numpy as np
import pytest

from helpers import frozen, scalar_lq, scalar_model
from submfg.fbsde import (HamiltonianMinimizationError, PicardSettings, RegressionBasis, RegressionWarning,
                          RiccatiError, feedback_monotonicity_probe, hamiltonian_eval, minimize_hamiltonian,
                          random_ordered_probes, riccati_oracle, solve_bsde_backward, solve_fbsde_picard)
from submfg.meanfield import SummaryFlow
from submfg.model import (EXAMPLE_1, EXAMPLE_2, ControlBox, InteractionSpec, LQModelParams, build_expression_model,
                          build_lq_model, clamped, coordinate, example_params)
from submfg.sde import FeedbackControl, TimeGrid, generate_noise, simulate_forward


# -- Hamiltonian -----------------------------------------------------------------


def test_hamiltonian_value():
    model = scalar_model()
    assert hamiltonian_eval(model, 0.0, [0.0], np.zeros(0), [3.0], [1.0]) == pytest.approx(4.0)
    assert hamiltonian_eval(model, 0.0, [0.0], np.zeros(0), [0.0], [1.5]) == pytest.approx(2.25)


@pytest.mark.parametrize("y,box,expected", [
    (2.0, None, -1.0),
    (0.0, None, 0.0),
    (-3.0, None, 1.5),
])
def test_minimizer_closed_form(y, box, expected):
    a = minimize_hamiltonian(scalar_model(box=box), 0.0, [0.0], np.zeros(0), [y])
    assert a[0] == pytest.approx(expected)


def _grid_argmin(f, lo, hi, step=1e-4):
    a = np.arange(lo, hi + step / 2, step)
    return a[np.argmin(f(a))]


def test_minimizer_in_box_matches_grid_search():
    model = scalar_model(box=ControlBox.symmetric(1, 0.5))
    a = minimize_hamiltonian(model, 0.0, [0.0], np.zeros(0), [2.0])
    oracle = _grid_argmin(lambda a: 2 * a + a ** 2, -0.5, 0.5)
    assert a[0] == pytest.approx(oracle, abs=1e-4)
    assert a[0] == -0.5


def test_non_quadratic_minimizer_matches_grid_search():
    model = scalar_model(h="a1^4 + a1^2 + x1*a1", box=ControlBox(np.array([-2.0]), np.array([2.0])))
    for x, y in [(0.0, 1.0), (1.0, -3.0), (-2.0, 5.0)]:
        a = minimize_hamiltonian(model, 0.0, [x], np.zeros(0), [y])
        oracle = _grid_argmin(lambda a: y * a + a ** 4 + a ** 2 + x * a, -2.0, 2.0)
        assert a[0] == pytest.approx(oracle, abs=1e-4)


def test_minimizer_reports_non_convergence():
    model = scalar_model(h="a1^4 + a1^2")
    with pytest.raises(HamiltonianMinimizationError) as info:
        minimize_hamiltonian(model, 0.0, [0.0], np.zeros(0), [50.0], max_iter=1)
    assert info.value.grad_norm > 0
    assert np.shape(info.value.last_iterate) == (1,)


@pytest.mark.parametrize("which", ["ex1", "ex2", "quartic"])
def test_minimizer_beats_random_controls(which):
    if which == "quartic":
        model = scalar_model(h="a1^4 + a1^2 + x1*a1", box=ControlBox.symmetric(1, 2.0))
        lam = 1.0
    else:
        model = build_lq_model(example_params(EXAMPLE_1 if which == "ex1" else EXAMPLE_2))
        lam = model.lam
    rng = np.random.default_rng(4)
    box = model.control_box
    for _ in range(20):
        t = rng.uniform(0, model.T)
        x = rng.uniform(-2, 2, model.d)
        m = rng.uniform(-1, 1, model.J)
        y = rng.uniform(-3, 3, model.d)
        a_hat = minimize_hamiltonian(model, t, x, m, y)
        a = rng.uniform(box.lower, box.upper, (64, model.k))
        H = hamiltonian_eval(model, t, x, m, y, a)
        H_hat = hamiltonian_eval(model, t, x, m, y, a_hat)
        margin = lam * np.sum((a - a_hat) ** 2, axis=-1) - 1e-8
        assert np.all(H - H_hat >= margin)


def test_feedback_lipschitz_quotient_bounded():
    # alpha_hat = clip(-y / 2) for R = I, b2 = I: the quotient never exceeds 1/2
    model = build_lq_model(example_params(EXAMPLE_1))
    rng = np.random.default_rng(5)
    n = 10 ** 4
    x, xb = rng.uniform(-2, 2, (2, n, 2))
    y, yb = rng.uniform(-3, 3, (2, n, 2))
    m = np.zeros((n, 2))
    a, ab = (minimize_hamiltonian(model, 0.3, xi, m, yi) for xi, yi in ((x, y), (xb, yb)))
    q = np.linalg.norm(a - ab, axis=1) / (np.linalg.norm(x - xb, axis=1) + np.linalg.norm(y - yb, axis=1))
    assert q.max() <= 0.5 + 1e-12


def _linear_m_model():
    return build_expression_model(d=1, k=1, T=1.0, drift=["a1"], h="a1^2 - m1*a1", g="x1^2",
                                  regime="nonseparable",
                                  interaction=InteractionSpec.scalar([coordinate(0)]))


def test_feedback_monotone_on_ordered_pair():
    model = _linear_m_model()
    lo = minimize_hamiltonian(model, 0.0, [0.0], [0.0], [1.0])
    hi = minimize_hamiltonian(model, 0.0, [0.0], [1.0], [0.0])
    assert (lo[0], hi[0]) == pytest.approx((-0.5, 0.5))
    probes = {"t": [0.0], "x": [[0.0]], "xb": [[0.0]], "m": [[0.0]], "mb": [[1.0]], "y": [[1.0]], "yb": [[0.0]]}
    assert feedback_monotonicity_probe(model, probes).passed


def test_feedback_equal_probes_give_equality():
    model = build_lq_model(example_params(EXAMPLE_2))
    p = random_ordered_probes(model, 50, seed=3)
    p.update(xb=p["x"], mb=p["m"], yb=p["y"])
    rep = feedback_monotonicity_probe(model, p, tol=0.0)
    assert rep.passed and rep.worst_violation == 0.0


def test_feedback_monotone_on_example_2():
    rep = feedback_monotonicity_probe(build_lq_model(example_params(EXAMPLE_2)), n=1000, seed=1)
    assert rep.n_probes == 1000 and rep.n_violations == 0


def test_feedback_probe_detects_reversed_order():
    model = build_expression_model(d=1, k=1, T=1.0, drift=["a1"], h="a1^2 + m1*a1", g="x1^2",
                                   regime="nonseparable", interaction=InteractionSpec.scalar([coordinate(0)]))
    rep = feedback_monotonicity_probe(model, n=200)
    assert not rep.passed and rep.witness


# -- regression and backward solver ---------------------------------------------


def test_regression_reproduces_polynomials():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 50, 2))
    target = (1 + 2 * x[..., 0] - x[..., 1] + 0.5 * x[..., 0] * x[..., 1])[..., None]
    fit, pred = RegressionBasis(degree=2, ridge=0.0).fit_predict(x, None, target)
    np.testing.assert_allclose(pred, target, atol=1e-10)
    np.testing.assert_allclose(fit(x, None), target, atol=1e-10)


def test_regression_warns_on_collinear_features():
    rng = np.random.default_rng(0)
    x1 = rng.normal(size=(2, 30, 1))
    x = np.concatenate([x1, 2 * x1], axis=-1)
    with pytest.warns(RegressionWarning):
        RegressionBasis(degree=1, ridge=0.0).fit(x, None, x1)


def test_regression_rejects_too_many_features():
    with pytest.raises(ValueError):
        RegressionBasis(degree=3).fit(np.random.default_rng(0).normal(size=(1, 5, 3)), None, np.zeros((1, 5, 1)))


def _noisy_plan(N=20, n_outer=4, n_inner=32):
    return generate_noise(1, TimeGrid(1.0, N), n_outer, n_inner, (1, 1, 0))


def test_constant_terminal_gives_constant_adjoint():
    model = scalar_model(g="0.7*x1", sigma="0.5")
    plan = _noisy_plan()
    X = simulate_forward(model, plan, FeedbackControl(lambda k, t, x, m: -x))
    sol = solve_bsde_backward(model, X)
    assert np.all(sol.Y == 0.7)


def test_unit_driver_integrates_to_horizon():
    model = scalar_model(h="x1 + a1^2", g="0*x1", sigma="0.5")
    plan = _noisy_plan()
    X = simulate_forward(model, plan, FeedbackControl.constant(0.0))
    sol = solve_bsde_backward(model, X)
    np.testing.assert_allclose(sol.Y[:, :, 0, 0], 1.0, rtol=0, atol=1e-10)


def test_terminal_adjoint_is_exact():
    model = build_lq_model(example_params(EXAMPLE_1))
    plan = generate_noise(2, TimeGrid(1.0, 10), 4, 32, (2, 2, 1), model.initial_law)
    flow = SummaryFlow(np.full((4, 11, 2), 0.1))
    X = simulate_forward(model, plan, FeedbackControl.constant([0.2, -0.3]), flow)
    sol = solve_bsde_backward(model, X, flow, plan=plan, estimate_z=True)
    m = np.full(X.at(10).shape[:2] + (2,), 0.1)
    assert np.max(np.abs(sol.Y[:, :, 10] - model.Dxg(X.at(10), m))) == 0.0
    assert sol.Z.shape == (4, 32, 10, 2, 2) and sol.Z0.shape == (4, 32, 10, 2, 1)
    assert np.all(np.isfinite(sol.Z)) and np.all(np.isfinite(sol.Z0))


def test_backward_solver_rejects_non_finite_targets():
    model = scalar_model(h="1/x1 + a1^2", sigma="0.1")
    plan = generate_noise(0, TimeGrid(1.0, 4), 1, 8, (1, 1, 0))
    X = simulate_forward(model, plan, FeedbackControl.constant(0.0))
    with pytest.raises(ValueError):
        solve_bsde_backward(model, X)


def test_backward_solver_matches_riccati_on_deterministic_lq():
    params = scalar_lq()
    model = build_lq_model(params)
    grid = TimeGrid(1.0, 50)
    plan = generate_noise(0, grid, 2, 8, (1, 0, 0), model.initial_law)
    ric = riccati_oracle(params, grid)
    X = simulate_forward(model, plan, ric.control(), frozen(plan, 1))
    sol = solve_bsde_backward(model, X, frozen(plan, 1))
    assert sol.Y[0, 0, 0, 0] == pytest.approx(1.0, rel=0.02)


# -- Picard ---------------------------------------------------------------------


def test_uncoupled_problem_converges_after_one_sweep():
    model = scalar_model(drift="-x1 + 0*a1", h="x1^2 + a1^2", sigma="0.3")
    plan = _noisy_plan()
    X, sol = solve_fbsde_picard(model, plan)
    assert sol.picard.converged and sol.picard.converged_at == 1
    assert sol.picard.history[1]["y_change"] == 0.0


def test_undamped_picard_cycles_on_identical_paths():
    # every path coincides, so each sweep maps a constant adjoint Y to 2 - Y
    model = build_lq_model(scalar_lq())
    plan = generate_noise(0, TimeGrid(1.0, 50), 4, 16, (1, 0, 0), model.initial_law)
    _, sol = solve_fbsde_picard(model, plan, frozen(plan, 1), PicardSettings(max_iters=6))
    assert not sol.picard.converged
    assert [h["y_change"] for h in sol.picard.history[1:]] == pytest.approx([2.0] * 5)


def test_damped_picard_matches_riccati_oracle():
    model = build_lq_model(scalar_lq())
    plan = generate_noise(0, TimeGrid(1.0, 50), 4, 16, (1, 0, 0), model.initial_law)
    X, sol = solve_fbsde_picard(model, plan, frozen(plan, 1), PicardSettings(tol=1e-8, theta=0.5))
    assert sol.picard.converged
    assert sol.Y[:, :, 0, 0].mean() == pytest.approx(1.0, rel=0.02)
    # closed form: x(t) = x0 (1 + T - t) / (1 + T)
    assert X.at(50).mean() == pytest.approx(0.5, rel=0.02)


def test_picard_matches_riccati_oracle_with_noise():
    model = build_lq_model(scalar_lq(sigma=0.2))
    plan = generate_noise(0, TimeGrid(1.0, 50), 8, 256, (1, 1, 0), model.initial_law)
    X, sol = solve_fbsde_picard(model, plan, frozen(plan, 1))
    assert sol.picard.converged
    assert sol.Y[:, :, 0, 0].mean() == pytest.approx(1.0, rel=0.02)
    assert X.at(50).mean() == pytest.approx(0.5, rel=0.02)


def test_picard_is_deterministic():
    model = build_lq_model(example_params(EXAMPLE_1))
    plan = generate_noise(3, TimeGrid(1.0, 10), 4, 32, (2, 2, 1), model.initial_law)
    flow = SummaryFlow(np.full((4, 11, 2), 0.2))
    Xa, sa = solve_fbsde_picard(model, plan, flow)
    Xb, sb = solve_fbsde_picard(model, plan, flow)
    assert Xa.values.tobytes() == Xb.values.tobytes()
    assert sa.Y.tobytes() == sb.Y.tobytes()


def test_picard_reports_non_convergence():
    model = build_lq_model(example_params(EXAMPLE_1))
    plan = generate_noise(3, TimeGrid(1.0, 10), 2, 32, (2, 2, 1), model.initial_law)
    _, sol = solve_fbsde_picard(model, plan, SummaryFlow(np.zeros((2, 11, 2))), PicardSettings(max_iters=1))
    assert not sol.picard.converged and sol.picard.converged_at is None
    assert len(sol.picard.history) == 1


@pytest.mark.parametrize("kwargs", [dict(tol=0.0), dict(max_iters=0), dict(theta=0.0), dict(theta=1.5)])
def test_picard_settings_validation(kwargs):
    with pytest.raises(ValueError):
        PicardSettings(**kwargs)


# -- Riccati oracle ---------------------------------------------------------------


def _rk4_reference(f, y_T, T, n):
    """Independent backward RK4 for a scalar ODE ``y' = f(t, y)``."""
    h, y, t = T / n, y_T, T
    for _ in range(n):
        k1 = f(t, y)
        k2 = f(t - h / 2, y - h / 2 * k1)
        k3 = f(t - h / 2, y - h / 2 * k2)
        k4 = f(t - h, y - h * k3)
        y, t = y - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4), t - h
    return y


def test_riccati_terminal_cost_closed_form():
    sol = riccati_oracle(scalar_lq(), TimeGrid(1.0, 1000), n_sub=1)
    exact = 1.0 / (2.0 - sol.grid.times)
    assert np.max(np.abs(sol.P[:, 0, 0] - exact)) <= 1e-8
    assert sol.P[0, 0, 0] == pytest.approx(0.5, abs=1e-12)
    assert _rk4_reference(lambda t, p: p * p, 1.0, 1.0, 1000) == pytest.approx(0.5, abs=1e-8)


def test_riccati_zero_costs():
    sol = riccati_oracle(scalar_lq(terminal=0.0), TimeGrid(1.0, 20))
    assert np.all(sol.P == 0) and np.all(sol.r == 0)
    assert np.all(sol.Y(5, np.array([[1.3]])) == 0)
    assert np.all(sol.alpha(5, np.array([[1.3]])) == 0)


def test_riccati_running_cost_closed_form():
    sol = riccati_oracle(scalar_lq(q=1.0, terminal=0.0), TimeGrid(1.0, 1000), n_sub=1)
    exact = np.tanh(1.0 - sol.grid.times)
    assert np.max(np.abs(sol.P[:, 0, 0] - exact)) <= 1e-8
    assert sol.P[0, 0, 0] == pytest.approx(0.7616, abs=1e-4)
    assert _rk4_reference(lambda t, p: p * p - 1, 0.0, 1.0, 1000) == pytest.approx(np.tanh(1.0), abs=1e-8)


def test_riccati_feedback_reconstruction():
    sol = riccati_oracle(scalar_lq(), TimeGrid(1.0, 10))
    x = np.array([[2.0]])
    assert sol.Y(0, x)[0, 0] == pytest.approx(2 * sol.P[0, 0, 0] * 2.0)
    assert sol.alpha(0, x)[0, 0] == pytest.approx(-0.5 * sol.Y(0, x)[0, 0])


def test_riccati_rejects_singular_weight_and_binding_box():
    with pytest.raises(RiccatiError):
        riccati_oracle(LQModelParams(EXAMPLE_1, P=[[0.0]], Q=[[0.0]], R=[[0.0]], phi=(clamped(0, -1, 1),)),
                       TimeGrid(1.0, 5))
    with pytest.raises(RiccatiError):
        riccati_oracle(scalar_lq(box=ControlBox.symmetric(1, 0.1)), TimeGrid(1.0, 5), x_probe=[[1.0]])
