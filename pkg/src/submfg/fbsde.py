"""Hamiltonian minimization, regression-based backward solver, Picard loop, Riccati oracle.

The adjoint is approximated by a Markovian decoupling field
``Y_k ~ u_k(X_k, m_k)`` fitted by pooled least squares on polynomial
features; the forward equation is then driven by the feedback
``alpha_hat(t, x, m, u_k(x, m))``.
"""
from __future__ import annotations

import itertools
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import EXAMPLE_1, ControlBox, LQModelParams, ModelSpec
from .sde import FeedbackControl, NoisePlan, PathBundle, TimeGrid, _freeze, simulate_forward

GRAD_TOL = 1e-10
MAX_PG_ITERS = 20000


class HamiltonianMinimizationError(RuntimeError):
    def __init__(self, message, last_iterate, grad_norm):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm


class RegressionWarning(UserWarning):
    """Ill-conditioned regression solved with a larger ridge."""


class RiccatiError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------


def hamiltonian_eval(model: ModelSpec, t, x, m, y, a):
    """``H = b(t, x, m, a) . y + h(t, x, m, a)``."""
    x, m, y, a = (np.asarray(v, dtype=float) for v in (x, m, y, a))
    return np.sum(model.drift(t, x, m, a) * y, axis=-1) + model.h(t, x, m, a)


def _batch(model, x, m, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1], m.shape[:-1])
    return (np.broadcast_to(x, shape + (model.d,)), np.broadcast_to(m, shape + (model.J,)),
            np.broadcast_to(y, shape + (model.d,)), shape)


def minimize_hamiltonian(model: ModelSpec, t, x, m, y, tol: float = GRAD_TOL, max_iter: int = MAX_PG_ITERS):
    """Pointwise minimizer ``alpha_hat(t, x, m, y)`` of ``a -> H`` over the control box.

    Closed form when ``h`` is quadratic in ``a`` and the box is either the
    whole space or the quadratic part is diagonal; otherwise projected
    gradient descent with Armijo backtracking until the projected-gradient
    norm is at most ``tol``.

    Raises:
        HamiltonianMinimizationError: no convergence within ``max_iter``.
    """
    x, m, y, shape = _batch(model, x, m, y)
    box = model.control_box
    B2 = model.b2(t)
    by = y @ B2
    quad = model.control_quadratic
    if quad is not None:
        H = np.asarray(quad[0](t), dtype=float)
        rhs = -(by + quad[1](t, x, m))
        unbounded = not (np.isfinite(box.lower).any() or np.isfinite(box.upper).any())
        if np.count_nonzero(H - np.diag(np.diag(H))) == 0:
            return box.project(rhs / np.diag(H))
        a_free = np.linalg.solve(H, rhs[..., None])[..., 0] if rhs.size else rhs
        if unbounded:
            return a_free
        start = box.project(a_free)
    else:
        start = box.project(np.zeros(shape + (model.k,)))
    return _projected_gradient(model, t, x, m, y, by, start, tol, max_iter)


def _projected_gradient(model, t, x, m, y, by, a, tol, max_iter):
    box = model.control_box

    def grad(a_):
        return by + model.Dah(t, x, m, a_)

    # backtracking on the gradient form of the curvature test; for convex h it implies the
    # descent lemma and, unlike function values, stays accurate next to the optimum
    step = np.ones(a.shape[:-1])
    g = grad(a)
    for _ in range(max_iter):
        pg = a - box.project(a - g)
        gnorm = np.linalg.norm(pg, axis=-1)
        if np.all(gnorm <= tol):
            return a
        active = gnorm > tol
        while True:
            cand = box.project(a - step[..., None] * g)
            delta = cand - a
            g_new = grad(cand)
            curv = np.sum((g_new - g) * delta, axis=-1)
            bad = active & (curv > np.sum(delta ** 2, axis=-1) / (2 * step))
            if not bad.any():
                break
            step = np.where(bad, step / 2, step)
            if np.min(step) < 1e-30:
                break
        a = np.where(active[..., None], cand, a)
        g = np.where(active[..., None], g_new, g)
        step = np.where(active, step * 2, step)
    pg = a - box.project(a - g)
    gn = float(np.max(np.linalg.norm(pg, axis=-1)))
    raise HamiltonianMinimizationError(f"projected gradient did not reach {tol:g} (norm {gn:.3g})", a, gn)


def reduced_driver(model: ModelSpec, t, x, m, y, a=None):
    """``D_x H = (D_x b1)^T y + D_x h`` evaluated at ``a`` (default ``alpha_hat``)."""
    if a is None:
        a = minimize_hamiltonian(model, t, x, m, y)
    return np.einsum("...i,...ij->...j", y, model.Dxb1(t, x, m)) + model.Dxh(t, x, m, a)


# ---------------------------------------------------------------------------
# Feedback monotonicity
# ---------------------------------------------------------------------------


@dataclass
class MonotonicityProbeReport:
    n_probes: int
    n_violations: int
    worst_violation: float
    witness: dict
    tol: float

    @property
    def passed(self) -> bool:
        return self.n_violations == 0

    def to_dict(self) -> dict:
        return {"n_probes": self.n_probes, "n_violations": self.n_violations,
                "worst_violation": self.worst_violation, "witness": self.witness, "tol": self.tol,
                "passed": self.passed}


def random_ordered_probes(model: ModelSpec, n: int, seed: int = 0, radius: float = 2.0):
    """Triples with ``x <= xb``, ``yb <= y``, ``m <= mb`` (summaries kept in range)."""
    rng = np.random.default_rng(seed)
    d, J = model.d, model.J
    t = rng.uniform(0, model.T, n)
    x = rng.uniform(-radius, radius, (n, d))
    xb = x + rng.exponential(0.5, (n, d))
    y = rng.uniform(-radius, radius, (n, d))
    yb = y - rng.exponential(0.5, (n, d))
    lo = np.maximum(model.interaction.lower, -radius)
    hi = np.minimum(model.interaction.upper, radius)
    m = rng.uniform(lo, hi, (n, J))
    mb = np.minimum(m + rng.exponential(0.5, (n, J)), hi)
    return {"t": t, "x": x, "xb": xb, "m": m, "mb": mb, "y": y, "yb": yb}


def feedback_monotonicity_probe(model: ModelSpec, probes: dict | None = None, n: int = 1000, seed: int = 0,
                                tol: float = 1e-9) -> MonotonicityProbeReport:
    """Check ``alpha_hat(t, x, m, y) <= alpha_hat(t, xb, mb, yb)`` on ordered probes."""
    p = probes if probes is not None else random_ordered_probes(model, n, seed)
    t = np.atleast_1d(np.asarray(p["t"], dtype=float))
    lo_all, hi_all = [], []
    for i, ti in enumerate(t):
        lo_all.append(minimize_hamiltonian(model, float(ti), p["x"][i], p["m"][i], p["y"][i]))
        hi_all.append(minimize_hamiltonian(model, float(ti), p["xb"][i], p["mb"][i], p["yb"][i]))
    gap = np.array(lo_all) - np.array(hi_all)
    excess = gap.max(axis=-1) if gap.size else np.zeros(len(t))
    bad = excess > tol
    witness = {}
    if bad.any():
        i = int(np.argmax(excess))
        witness = {key: np.atleast_1d(np.asarray(p[key][i], dtype=float)).tolist() for key in p}
        witness.update(alpha=np.asarray(lo_all[i]).tolist(), alpha_bar=np.asarray(hi_all[i]).tolist())
    return MonotonicityProbeReport(len(t), int(bad.sum()), float(max(excess.max(initial=0.0), 0.0)), witness, tol)


# ---------------------------------------------------------------------------
# Regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomials of total degree ``<= degree`` in standardized ``(x, m)``.

    Columns with zero sample variance are dropped at fit time; the constant
    feature is always present and is not penalized by the ridge.
    """

    degree: int = 2
    ridge: float = 1e-10
    use_measure: bool = True
    cond_limit: float = 1e12
    fallback_ridge: float = 1e-6

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")

    def fit(self, x: np.ndarray, m: np.ndarray, target: np.ndarray) -> "DecouplingFit":
        return self.fit_predict(x, m, target)[0]

    def fit_predict(self, x: np.ndarray, m: np.ndarray, target: np.ndarray):
        """Fit and return ``(fit, in-sample predictions shaped like target)``."""
        z = self._raw(x, m)
        n = z.shape[0]
        mean = z.mean(axis=0) if n else np.zeros(z.shape[1])
        sd = z.std(axis=0) if n else np.zeros(z.shape[1])
        keep = sd > 1e-12 * (1.0 + np.abs(mean))
        exps = _exponents(int(keep.sum()), self.degree)
        use_m = bool(self.use_measure and m is not None and np.shape(m)[-1])
        fitter = DecouplingFit(exps, mean[keep], sd[keep], keep, None, use_m)
        F = fitter.features(z)
        if F.shape[1] > n:
            raise ValueError(f"{F.shape[1]} features exceed {n} samples; lower the basis degree")
        tgt = target.reshape(n, -1)
        # the intercept is unpenalized and absorbs a median shift, so constant targets are reproduced exactly
        shift = np.median(tgt, axis=0) if n else np.zeros(tgt.shape[1])
        G = F.T @ F / n
        rhs = F.T @ (tgt - shift) / n
        eye = np.eye(G.shape[0])
        eye[0, 0] = 0.0
        ridge = self.ridge
        ev = np.linalg.eigvalsh(G + ridge * eye)
        if ev[0] <= 0 or ev[-1] / ev[0] > self.cond_limit:
            ridge = max(ridge, self.fallback_ridge * max(1.0, np.trace(G) / G.shape[0]))
            warnings.warn(f"ill-conditioned regression; ridge raised to {ridge:.3g}", RegressionWarning,
                          stacklevel=3)
        coef = np.linalg.solve(G + ridge * eye, rhs)
        coef[0] += shift
        fitter.coef = coef
        return fitter, (F @ coef).reshape(target.shape)

    def _raw(self, x, m):
        x = np.asarray(x, dtype=float)
        parts = [x.reshape(-1, x.shape[-1])]
        if self.use_measure and m is not None and np.shape(m)[-1]:
            m = np.asarray(m, dtype=float)
            parts.append(np.broadcast_to(m, x.shape[:-1] + m.shape[-1:]).reshape(-1, m.shape[-1]))
        return np.hstack(parts)


def _exponents(n_vars: int, degree: int) -> list:
    out = [()]
    for deg in range(1, degree + 1):
        out += list(itertools.combinations_with_replacement(range(n_vars), deg))
    return out


@dataclass(eq=False)
class DecouplingFit:
    """One fitted time slice ``u_k(x, m)``."""

    exponents: list
    mean: np.ndarray
    sd: np.ndarray
    keep: np.ndarray
    coef: np.ndarray | None
    use_measure: bool = True

    def features(self, z: np.ndarray) -> np.ndarray:
        s = ((z[:, self.keep] - self.mean) / self.sd).T.copy()
        # column-major so each feature is contiguous
        F = np.empty((len(self.exponents), z.shape[0]))
        F[0] = 1.0
        first = {}
        for c, e in enumerate(self.exponents[1:], start=1):
            if len(e) == 1:
                F[c] = s[e[0]]
            else:
                np.multiply(F[first[e[:-1]]], s[e[-1]], out=F[c])
            first[e] = c
        return F.T

    def __call__(self, x, m) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        parts = [x.reshape(-1, x.shape[-1])]
        if self.use_measure and m is not None and np.shape(m)[-1]:
            m = np.asarray(m, dtype=float)
            parts.append(np.broadcast_to(m, x.shape[:-1] + m.shape[-1:]).reshape(-1, m.shape[-1]))
        out = self.features(np.hstack(parts)) @ self.coef
        return out.reshape(x.shape[:-1] + (self.coef.shape[1],))


class Decoupling:
    """Adjoint estimate ``Y_k ~ u_k(x, m)`` for every grid step.

    Step ``N`` is the exact terminal map ``D_x g``; earlier steps are fits,
    optionally blended with a previous decoupling (damping).
    """

    def __init__(self, model: ModelSpec, fits: list, previous: "Decoupling | None" = None, theta: float = 1.0):
        self.model = model
        self.fits = fits
        self.previous = previous if theta < 1.0 else None
        self.theta = theta

    @property
    def n_steps(self) -> int:
        return len(self.fits)

    def __call__(self, k: int, x, m) -> np.ndarray:
        if k == len(self.fits):
            return self.model.Dxg(x, m)
        y = self.fits[k](x, m)
        if self.previous is not None:
            y = self.theta * y + (1 - self.theta) * self.previous(k, x, m)
        return y

    @classmethod
    def zero(cls, model: ModelSpec, n_steps: int) -> "Decoupling":
        d = model.d

        class _Zero:
            def __call__(self, x, m):
                return np.zeros(np.shape(x)[:-1] + (d,))

        return cls(model, [_Zero()] * n_steps)

    def control(self, model: ModelSpec, grid: TimeGrid) -> FeedbackControl:
        times = grid.times

        def rule(k, t, x, m):
            return minimize_hamiltonian(model, times[k], x, m, self(k, x, m))

        return FeedbackControl(rule, "alpha_hat(decoupling)")


# ---------------------------------------------------------------------------
# Backward solver
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class BsdeSolution:
    """Adjoint values on a bundle's paths.

    Attributes:
        Y: ``(n_outer, n_inner, n_steps + 1, d)``.
        Z, Z0: optional ``(n_outer, n_inner, n_steps, d, d1 | d2)`` diagnostic estimates.
        decoupling: fitted ``u_k`` used to produce ``Y``.
        picard: Picard report when produced by :func:`solve_fbsde_picard`.
    """

    Y: np.ndarray
    grid: TimeGrid
    fingerprint: str
    decoupling: Decoupling
    Z: np.ndarray | None = None
    Z0: np.ndarray | None = None
    picard: "PicardReport | None" = None

    def __post_init__(self):
        self.Y = _freeze(self.Y)

    def pi_rms(self) -> float:
        sq = np.sum(self.Y ** 2, axis=3)
        return float(np.sqrt(np.mean(sq @ self.grid.pi_weights) / (self.Y.shape[3] * (2 + self.grid.T))))

    def to_csv(self, path_or_buf, extra: dict | None = None) -> None:
        PathBundle(self.Y, self.grid, self.fingerprint).to_csv(path_or_buf, columns_prefix="y", extra=extra)


def _summaries_path(model, X: PathBundle, flow):
    """Summaries ``(n_outer, n_inner, n_steps + 1, J)`` seen along ``X``."""
    o, i, n1, _ = X.shape
    J = model.J
    if J == 0:
        return np.zeros((o, i, n1, 0))
    if flow is None:
        raise ValueError("model depends on the measure; a flow is required")
    if isinstance(flow, np.ndarray):
        from .meanfield import SummaryFlow

        flow = SummaryFlow(flow)
    return np.stack([flow.summaries_at(k, model.interaction, X.values[:, :, k, :]) for k in range(n1)], axis=2)


def solve_bsde_backward(model: ModelSpec, X: PathBundle, flow=None, basis: RegressionBasis | None = None,
                        plan: NoisePlan | None = None, estimate_z: bool = False) -> BsdeSolution:
    """Regression scheme for ``dY = -D_x H(t, X, m, Y, alpha_hat) dt + Z dW + Z0 dB``.

    ``Y_N = D_x g(X_N, m_N)``; for ``k = N-1, ..., 0`` a candidate
    ``Y~_k = E[Y_{k+1} | X_k, m_k]`` is fitted, then one correction fit of
    ``Y_{k+1} + D_x H(t_k, X_k, m_k, Y~_k) dt`` gives ``Y_k``.

    Raises:
        ValueError: non-finite regression targets, or ``estimate_z`` without ``plan``.
    """
    basis = basis or RegressionBasis()
    grid = X.grid
    N, dt, times = grid.n_steps, grid.dt, grid.times
    o, i, _, d = X.shape
    M = _summaries_path(model, X, flow)
    Y = np.empty(X.shape)
    Y[:, :, N, :] = model.Dxg(X.values[:, :, N, :], M[:, :, N, :])
    if not np.all(np.isfinite(Y[:, :, N, :])):
        raise ValueError("non-finite terminal adjoint values")
    fits = [None] * N
    Z = Z0 = None
    if estimate_z:
        if plan is None or plan.fingerprint != X.fingerprint:
            raise ValueError("Z estimation needs the bundle's noise plan")
        Z = np.empty((o, i, N, d, plan.d1))
        Z0 = np.empty((o, i, N, d, plan.d2))
    for k in range(N - 1, -1, -1):
        t = times[k]
        xk, mk = X.values[:, :, k, :], M[:, :, k, :]
        # summaries are regressors only when some coefficient reads them
        mf = mk if model.measure_dependent else None
        y_next = Y[:, :, k + 1, :]
        _, y_tilde = basis.fit_predict(xk, mf, y_next)
        drv = reduced_driver(model, t, xk, mk, y_tilde)
        target = y_next + drv * dt
        if not np.all(np.isfinite(target)):
            raise ValueError(f"non-finite regression target at step {k}")
        fits[k], Y[:, :, k, :] = basis.fit_predict(xk, mf, target)
        if estimate_z:
            if plan.d1:
                tw = np.einsum("oid,oij->oidj", y_next, plan.dW[:, :, k, :]) / dt
                Z[:, :, k] = basis.fit_predict(xk, mf, tw.reshape(o, i, -1))[1].reshape(o, i, d, plan.d1)
            if plan.d2:
                tb = np.einsum("oid,oj->oidj", y_next, plan.dB[:, k, :]) / dt
                Z0[:, :, k] = basis.fit_predict(xk, mf, tb.reshape(o, i, -1))[1].reshape(o, i, d, plan.d2)
    return BsdeSolution(Y, grid, X.fingerprint, Decoupling(model, fits), Z, Z0)


# ---------------------------------------------------------------------------
# Picard loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PicardSettings:
    """Picard loop controls.

    ``tol`` bounds the pi-weighted RMS change of ``Y`` between sweeps,
    relative to ``max(1, RMS(Y))``.
    """

    max_iters: int = 50
    tol: float = 1e-6
    theta: float = 1.0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0 < self.theta <= 1:
            raise ValueError("damping theta must lie in (0, 1]")


@dataclass
class PicardReport:
    """``converged_at`` is the sweep whose output the next sweep reproduced within tolerance."""

    converged: bool
    iterations: int
    history: list = field(default_factory=list)

    @property
    def converged_at(self) -> int | None:
        return self.iterations - 1 if self.converged else None

    def to_dict(self) -> dict:
        return {"converged": self.converged, "iterations": self.iterations, "converged_at": self.converged_at,
                "history": self.history}


def _pi_rms(arr: np.ndarray, grid: TimeGrid) -> float:
    sq = np.sum(arr ** 2, axis=3)
    return float(np.sqrt(np.mean(sq @ grid.pi_weights) / (arr.shape[3] * (2 + grid.T))))


def solve_fbsde_picard(model: ModelSpec, plan: NoisePlan, flow=None, settings: PicardSettings | None = None,
                       basis: RegressionBasis | None = None, initial: Decoupling | None = None,
                       estimate_z: bool = False):
    """Solve the FBSDE for a frozen flow by forward/backward sweeps.

    Each sweep simulates the state under ``alpha_hat(t, x, m, u(x, m))`` for
    the current decoupling ``u`` and refits ``u`` backward on the new paths.
    The first sweep uses ``initial`` when given (warm start), else ``y = 0``.

    Returns:
        ``(X, solution)``; ``solution.picard`` records convergence and the
        per-sweep history ``{iter, y_change, seconds}``.
    """
    settings = settings or PicardSettings()
    basis = basis or RegressionBasis()
    grid = plan.grid
    dec = initial if initial is not None else Decoupling.zero(model, grid.n_steps)
    history = []
    prev_Y = None
    X = sol = None
    converged = False
    for it in range(1, settings.max_iters + 1):
        t0 = time.perf_counter()
        X = simulate_forward(model, plan, dec.control(model, grid), flow)
        sol = solve_bsde_backward(model, X, flow, basis)
        new = Decoupling(model, sol.decoupling.fits, dec, settings.theta)
        change = float("inf") if prev_Y is None else _pi_rms(sol.Y - prev_Y, grid)
        history.append({"iter": it, "y_change": change, "seconds": round(time.perf_counter() - t0, 6)})
        prev_Y = np.array(sol.Y)
        dec = new
        if change <= settings.tol * max(1.0, _pi_rms(sol.Y, grid)):
            converged = True
            break
    if estimate_z:
        sol = solve_bsde_backward(model, X, flow, basis, plan=plan, estimate_z=True)
    sol.decoupling = dec
    sol.picard = PicardReport(converged, len(history), history)
    return X, sol


# ---------------------------------------------------------------------------
# Riccati oracle
# ---------------------------------------------------------------------------


@dataclass
class RiccatiSolution:
    """Value ``V = x P x + 2 s . x + c`` on the grid, with feedback reconstruction."""

    grid: TimeGrid
    P: np.ndarray  # (N+1, d, d)
    s: np.ndarray  # (N+1, d)
    B: np.ndarray
    Ninv: list
    v: np.ndarray  # (N+1, k)
    box: ControlBox

    @property
    def r(self) -> np.ndarray:
        return 2 * self.s

    def Y(self, k: int, x) -> np.ndarray:
        """Adjoint ``2 P x + r``."""
        return 2 * np.asarray(x) @ self.P[k].T + 2 * self.s[k]

    def alpha(self, k: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return -(x @ self.P[k].T @ self.B + self.s[k] @ self.B + self.v[k]) @ self.Ninv[k].T

    def control(self) -> FeedbackControl:
        return FeedbackControl(lambda k, t, x, m: self.alpha(k, x), "riccati feedback")

    def assert_interior(self, X) -> None:
        """Raise unless the unconstrained feedback stays inside the box along the bundle ``X``."""
        for k in range(self.grid.n_steps):
            if not self.box.contains(self.alpha(k, X.values[:, :, k, :]), tol=1e-12):
                raise RiccatiError(f"unconstrained feedback leaves the control box at step {k}")


def lq_quadratic_data(params: LQModelParams, t: float, m: np.ndarray):
    """Coefficients ``(A, b0, M, u, N, v)`` of the LQ problem for a frozen summary ``m``.

    Running cost ``x M x + 2 x.u + a N a + 2 a.v`` (up to constants) and
    drift ``b0 + A x + B a``.
    """
    d, k = params.d, params.k
    A = np.asarray(params.b1bar if params.b1bar is not None else np.zeros((d, d)), dtype=float)
    c = np.zeros(d) if params.b0 is None else np.asarray(params.b0, dtype=float).reshape(d)
    P, Q, R = params.mat("P", t), params.mat("Q", t), params.mat("R", t)
    if params.variant == EXAMPLE_1:
        return A, c, P + Q, -Q @ m, R, np.zeros(k)
    n_phi = len(params.phi)
    C = np.zeros((d, n_phi)) if params.b0_C is None else np.asarray(params.b0_C, dtype=float).reshape(d, n_phi)
    mphi, mpsi = m[:n_phi], m[n_phi:]
    return A, c + C @ mphi, np.zeros((d, d)), 0.5 * Q.T @ mphi, R + P, -P @ mpsi


def lq_terminal_data(params: LQModelParams, m: np.ndarray):
    PT, QT = params.mat("P_T", params.T), params.mat("Q_T", params.T)
    if params.variant == EXAMPLE_1:
        return PT + QT, -QT @ m
    n_phi = len(params.phi)
    return np.zeros((params.d, params.d)), 0.5 * QT.T @ m[:n_phi]


def riccati_oracle(params: LQModelParams, grid: TimeGrid, summaries=None, n_sub: int = 20,
                   x_probe=None) -> RiccatiSolution:
    """Integrate the LQ Riccati system backward with RK4.

    ``-P' = P A + A^T P - P B N^-1 B^T P + M``, ``P(T) = G`` and
    ``-s' = A^T s + P b0 - P B N^-1 (B^T s + v) + u``, ``s(T) = w``.

    Args:
        summaries: frozen deterministic summary path ``(n_steps + 1, J)``
            (linearly interpolated between grid times); zeros by default.
        n_sub: RK4 substeps per grid interval.
        x_probe: states at which the unconstrained feedback must lie inside
            a bounded control box.

    Raises:
        RiccatiError: singular control weight, or feedback outside the box.
    """
    d, k = params.d, params.k
    J = len(params.phi) + (len(params.psi) if params.variant != EXAMPLE_1 else 0)
    N = grid.n_steps
    msum = np.zeros((N + 1, J)) if summaries is None else np.asarray(summaries, dtype=float).reshape(N + 1, J)
    B = np.asarray(params.b2 if params.b2 is not None else np.eye(d, k), dtype=float).reshape(d, k)
    times = grid.times
    box = params.box or ControlBox.unbounded(k)

    def m_at(t):
        return np.array([np.interp(t, times, msum[:, j]) for j in range(J)])

    def rhs(t, P, s):
        A, b0, M, u, Nm, v = lq_quadratic_data(params, t, m_at(t))
        try:
            Ninv = np.linalg.inv(Nm)
        except np.linalg.LinAlgError as exc:
            raise RiccatiError(f"control weight singular at t={t}") from exc
        K = B @ Ninv @ B.T
        dP = -(P @ A + A.T @ P - P @ K @ P + M)
        ds = -(A.T @ s + P @ b0 - P @ B @ Ninv @ (B.T @ s + v) + u)
        return dP, ds

    G, w = lq_terminal_data(params, msum[N])
    Ps = np.empty((N + 1, d, d))
    ss = np.empty((N + 1, d))
    Ps[N], ss[N] = G, w
    P, s = G.astype(float), w.astype(float)
    h = grid.dt / n_sub
    for n in range(N, 0, -1):
        t = times[n]
        for j in range(n_sub):
            tt = t - j * h
            k1 = rhs(tt, P, s)
            k2 = rhs(tt - h / 2, P - h / 2 * k1[0], s - h / 2 * k1[1])
            k3 = rhs(tt - h / 2, P - h / 2 * k2[0], s - h / 2 * k2[1])
            k4 = rhs(tt - h, P - h * k3[0], s - h * k3[1])
            P = P - h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            s = s - h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        P = 0.5 * (P + P.T)
        Ps[n - 1], ss[n - 1] = P, s
    Ninv, vs = [], []
    for n in range(N + 1):
        _, _, _, _, Nm, v = lq_quadratic_data(params, times[n], msum[n])
        Ninv.append(np.linalg.inv(Nm))
        vs.append(v)
    sol = RiccatiSolution(grid, Ps, ss, B, Ninv, np.array(vs), box)
    if box.bounded or np.isfinite(box.lower).any() or np.isfinite(box.upper).any():
        probe = np.zeros((1, d)) if x_probe is None else np.asarray(x_probe, dtype=float).reshape(-1, d)
        for n in range(N):
            if not box.contains(sol.alpha(n, probe), tol=1e-12):
                raise RiccatiError(f"unconstrained feedback leaves the control box at step {n}")
    return sol
