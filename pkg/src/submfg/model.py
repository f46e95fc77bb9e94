"""Game coefficients, built-in linear-quadratic families and structural checkers.

Coefficients see the population law only through a finite summary vector
``m`` produced by an :class:`InteractionSpec`.  All evaluators are vectorized:
``x`` is ``(..., d)``, ``a`` is ``(..., k)``, ``m`` is ``(..., J)`` and the
time argument is a scalar.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .coeffexpr import CompiledExpr, Const, Dims, Var, diff_expr, substitute, to_source, variables_of
from .sde import dirac_sampler

LARGE_BOUND = 1e6
SEPARABLE, NONSEPARABLE = "separable", "nonseparable"


# ---------------------------------------------------------------------------
# Control box
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ControlBox:
    """Product of closed intervals ``[lower_i, upper_i]`` (infinite ends allowed)."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be vectors of equal length")
        if np.isnan(lo).any() or np.isnan(hi).any():
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > hi) or np.any(lo == np.inf) or np.any(hi == -np.inf):
            raise ValueError(f"empty control interval in box [{lo}, {hi}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, k: int) -> "ControlBox":
        return cls(np.full(k, -np.inf), np.full(k, np.inf))

    @classmethod
    def symmetric(cls, k: int, radius: float) -> "ControlBox":
        return cls(np.full(k, -radius), np.full(k, radius))

    @property
    def k(self) -> int:
        return self.lower.size

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def project(self, a):
        return np.clip(a, self.lower, self.upper)

    def contains(self, a, tol: float = 0.0) -> bool:
        a = np.asarray(a)
        return bool(np.all(a >= self.lower - tol) and np.all(a <= self.upper + tol))

    def finite_bounds(self, large: float = LARGE_BOUND) -> tuple[np.ndarray, np.ndarray]:
        """Bounds with infinite ends replaced by ``-large`` / ``large``."""
        return np.maximum(self.lower, -large), np.minimum(self.upper, large)

    def to_dict(self) -> dict:
        return {"lower": [float(v) for v in self.lower], "upper": [float(v) for v in self.upper]}


# ---------------------------------------------------------------------------
# Interactions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScalarFunction:
    """A test function ``phi: R^d -> R`` with its declared range."""

    fn: Callable
    lower: float = -np.inf
    upper: float = np.inf
    description: str = "phi"

    def __call__(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)

    @property
    def bounded(self) -> bool:
        return bool(np.isfinite(self.lower) and np.isfinite(self.upper))


def coordinate(i: int) -> ScalarFunction:
    """``phi(x) = x_i`` (0-based ``i``)."""
    return ScalarFunction(lambda x: x[..., i], description=f"x{i + 1}")


def clamped(i: int, lo: float, hi: float) -> ScalarFunction:
    """``phi(x) = clamp(x_i, lo, hi)``."""
    if not lo <= hi:
        raise ValueError("clamp bounds must satisfy lo <= hi")
    return ScalarFunction(lambda x: np.clip(x[..., i], lo, hi), float(lo), float(hi),
                          f"clamp(x{i + 1},{lo:g},{hi:g})")


def expression_function(source: str, d: int, lower=-np.inf, upper=np.inf) -> ScalarFunction:
    f = CompiledExpr(source, Dims(d, 0, 0))
    return ScalarFunction(lambda x: f(x=x), float(lower), float(upper), source)


@dataclass(frozen=True, eq=False)
class InteractionSpec:
    """How the law enters the coefficients.

    ``scalar``: ``m_j = <phi_j, mu>``; ``order-1``: ``m = int gamma(x, y) mu(dy)``
    (one summary, depending on the evaluation point); ``none``: ``J = 0``.
    """

    kind: str = "none"
    functions: tuple = ()
    kernel: Callable | None = None
    kernel_bounds: tuple = (-np.inf, np.inf)
    description: str = ""

    def __post_init__(self):
        if self.kind not in ("none", "scalar", "order-1"):
            raise ValueError(f"unknown interaction kind {self.kind!r}")
        if self.kind == "order-1" and self.kernel is None:
            raise ValueError("order-1 interactions need a kernel")
        if self.kind == "scalar" and not self.functions:
            raise ValueError("scalar-type interactions need at least one function")

    @classmethod
    def none(cls) -> "InteractionSpec":
        return cls("none")

    @classmethod
    def scalar(cls, functions: Sequence[ScalarFunction]) -> "InteractionSpec":
        functions = tuple(functions)
        return cls("scalar", functions, description=", ".join(f.description for f in functions))

    @classmethod
    def order1(cls, kernel: Callable, lower=-np.inf, upper=np.inf, description="gamma") -> "InteractionSpec":
        return cls("order-1", (), kernel, (float(lower), float(upper)), description)

    @property
    def J(self) -> int:
        return {"none": 0, "scalar": len(self.functions), "order-1": 1}[self.kind]

    @property
    def lower(self) -> np.ndarray:
        if self.kind == "order-1":
            return np.array([self.kernel_bounds[0]])
        return np.array([f.lower for f in self.functions], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        if self.kind == "order-1":
            return np.array([self.kernel_bounds[1]])
        return np.array([f.upper for f in self.functions], dtype=float)

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def moments(self, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Scalar-type summaries of clouds ``points (..., c, d)`` -> ``(..., J)``."""
        if self.kind == "none":
            return np.zeros(points.shape[:-2] + (0,))
        if self.kind != "scalar":
            raise ValueError("moments are defined for scalar-type interactions only")
        vals = np.stack([f(points) for f in self.functions], axis=-1)
        return np.einsum("...c,...cj->...j", weights, vals)

    def summarize(self, points: np.ndarray, weights: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Summaries seen by states ``x (o, i, d)`` facing clouds ``points (o, c, d)``."""
        if self.kind == "order-1":
            vals = self.kernel(x[:, :, None, :], points[:, None, :, :])
            return np.einsum("oc,oic->oi", weights, vals)[..., None]
        m = self.moments(points, weights)
        return np.broadcast_to(m[:, None, :], x.shape[:2] + (self.J,))

    def for_cloud(self, cloud: np.ndarray, x: np.ndarray, weights=None) -> np.ndarray:
        """Summaries of a single cloud ``(c, d)`` at points ``x (n, d)`` -> ``(n, J)``."""
        cloud = np.asarray(cloud, dtype=float)
        w = np.full(cloud.shape[0], 1.0 / cloud.shape[0]) if weights is None else np.asarray(weights)
        return self.summarize(cloud[None], w[None], np.asarray(x, dtype=float)[None])[0]


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ModelSpec:
    """Coefficients of the controlled dynamics and costs.

    Drift is ``b(t, x, m, a) = b1(t, x, m) + b2(t) a``.

    Attributes:
        Dxb1: Jacobian of ``b1`` in ``x``, ``(..., d, d)``.
        sigma: ``sigma(t, x) -> (..., d, d1)``; row ``i`` may depend on ``x_i`` only.
        sigma0: common-noise loading ``(..., d, d2)``.
        control_quadratic: optional ``(Haa, lin)`` with ``D_a h = a Haa(t)^T + lin(t, x, m)``
            and ``Haa`` constant in ``(x, m, a)``; enables the closed-form minimizer.
        drift_measure_dependent: whether ``b1`` depends on ``m``.
        measure_dependent: whether any coefficient depends on ``m``; when
            false the flow cannot affect a best reply.
        K, kappa, lam: declared growth, coercivity and strong-convexity constants
            (``None`` when not declared).
    """

    d: int
    k: int
    d1: int
    d2: int
    T: float
    control_box: ControlBox
    interaction: InteractionSpec
    regime: str
    b1: Callable
    b2: Callable
    Dxb1: Callable
    sigma: Callable
    sigma0: Callable
    h: Callable
    Dxh: Callable
    Dah: Callable
    g: Callable
    Dxg: Callable
    initial_law: Callable | None = None
    control_quadratic: tuple | None = None
    drift_measure_dependent: bool = False
    measure_dependent: bool = True
    K: float | None = None
    kappa: float | None = None
    lam: float | None = None
    name: str = "model"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.regime not in (SEPARABLE, NONSEPARABLE):
            raise ValueError(f"regime must be {SEPARABLE!r} or {NONSEPARABLE!r}, got {self.regime!r}")
        if self.control_box.k != self.k:
            raise ValueError(f"control box has {self.control_box.k} coordinates, model has k={self.k}")
        if self.lam is not None and not self.lam > 0:
            raise ValueError("strong convexity constant lam must be positive")
        if self.initial_law is None:
            self.initial_law = dirac_sampler(np.zeros(self.d))

    @property
    def J(self) -> int:
        return self.interaction.J

    def drift(self, t, x, m, a):
        return self.b1(t, x, m) + a @ self.b2(t).T

    def summaries_for_cloud(self, cloud, x, weights=None):
        return self.interaction.for_cloud(cloud, x, weights)


# ---------------------------------------------------------------------------
# Built-in linear-quadratic families
# ---------------------------------------------------------------------------

EXAMPLE_1, EXAMPLE_2 = "example-1", "example-2"


def _timed(value):
    """Wrap a constant matrix (or pass through a callable of ``t``)."""
    if callable(value):
        return value
    arr = np.asarray(value, dtype=float)
    return lambda t: arr


@dataclass
class LQModelParams:
    """Linear-quadratic model data.

    Variant ``example-1`` (separable, measure-free drift)::

        h = x P x + (x - m) Q (x - m) + a R a,   g = x P_T x + (x - m) Q_T (x - m)

    with ``m = <phi, mu>`` in ``R^d``.  Variant ``example-2`` (nonseparable)::

        h = m_phi Q x + a R a + (a - m_psi) P (a - m_psi),   g = m_phi Q_T x

    with ``b0 = c + C m_phi``.  ``P``, ``Q``, ``R`` may be constant arrays or
    callables of ``t``; ``P_T``/``Q_T`` default to ``P(T)``/``Q(T)``.
    Diffusion rows are ``sigma_i(x_i) = sigma[i] + sigma_x[i] * x_i``.
    """

    variant: str
    P: object
    Q: object
    R: object
    T: float = 1.0
    P_T: object = None
    Q_T: object = None
    phi: tuple = ()
    psi: tuple = ()
    b0: object = None
    b0_C: object = None
    b1bar: object = None
    b2: object = None
    sigma: object = None
    sigma_x: object = None
    sigma0: object = None
    sigma0_x: object = None
    box: ControlBox | None = None
    initial_law: Callable | None = None
    K: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.variant not in (EXAMPLE_1, EXAMPLE_2):
            raise ValueError(f"unknown LQ variant {self.variant!r}")

    @property
    def d(self) -> int:
        if self.variant == EXAMPLE_1:
            return np.atleast_2d(_timed(self.P)(0.0)).shape[0]
        return np.atleast_2d(_timed(self.Q)(0.0)).shape[1]

    @property
    def k(self) -> int:
        return np.atleast_2d(_timed(self.R)(0.0)).shape[0]

    def mat(self, name: str, t: float) -> np.ndarray:
        """Matrix coefficient at time ``t`` (terminal overrides honored for ``P_T``/``Q_T``)."""
        if name in ("P_T", "Q_T"):
            override = getattr(self, name)
            base = name[0]
            value = override if override is not None else _timed(getattr(self, base))(self.T)
            return np.atleast_2d(np.asarray(value, dtype=float))
        return np.atleast_2d(np.asarray(_timed(getattr(self, name))(t), dtype=float))


@dataclass
class ConditionResult:
    name: str
    passed: bool
    witness: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "witness": self.witness}


@dataclass
class LQConditionReport:
    variant: str
    conditions: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    @property
    def violations(self) -> list:
        return [c for c in self.conditions if not c.passed]

    def to_dict(self) -> dict:
        return {"variant": self.variant, "passed": self.passed,
                "conditions": [c.to_dict() for c in self.conditions]}


class LQConditionError(ValueError):
    def __init__(self, report: LQConditionReport):
        names = ", ".join(c.name for c in report.violations)
        super().__init__(f"LQ {report.variant} conditions violated: {names}")
        self.report = report


def _entry_condition(name, mats, times, test, offdiag_only=False):
    for t, M in zip(times, mats):
        n_r, n_c = M.shape
        for i in range(n_r):
            for j in range(n_c):
                if offdiag_only and i == j:
                    continue
                if not test(M[i, j]):
                    return ConditionResult(name, False, {"t": float(t), "row": i, "col": j,
                                                         "value": float(M[i, j])})
    return ConditionResult(name, True)


def _psd_condition(name, mats, times, tol=1e-12):
    for t, M in zip(times, mats):
        if M.shape[0] != M.shape[1] or np.max(np.abs(M - M.T), initial=0.0) > tol:
            return ConditionResult(name, False, {"t": float(t), "reason": "not symmetric"})
        ev = np.linalg.eigvalsh(M)
        if ev[0] < -tol * max(1.0, np.abs(ev).max()):
            return ConditionResult(name, False, {"t": float(t), "min_eigenvalue": float(ev[0])})
    return ConditionResult(name, True)


def _pd_condition(name, mats, times):
    for t, M in zip(times, mats):
        ev = np.linalg.eigvalsh(0.5 * (M + M.T))
        if ev[0] <= 0:
            return ConditionResult(name, False, {"t": float(t), "min_eigenvalue": float(ev[0])})
    return ConditionResult(name, True)


def _diag_condition(name, mats, times):
    for t, M in zip(times, mats):
        off = M - np.diag(np.diag(M)) if M.shape[0] == M.shape[1] else M
        if M.shape[0] != M.shape[1] or np.any(off != 0):
            return ConditionResult(name, False, {"t": float(t), "reason": "not diagonal"})
    return ConditionResult(name, True)


def lq_condition_report(params: LQModelParams, n_times: int = 11) -> LQConditionReport:
    """Evaluate the structural sign conditions of an LQ family on a time grid."""
    d, k, T = params.d, params.k, params.T
    times = np.linspace(0.0, T, n_times)
    P = [params.mat("P", t) for t in times]
    Q = [params.mat("Q", t) for t in times]
    R = [params.mat("R", t) for t in times]
    tT = [T]
    PT, QT = [params.mat("P_T", T)], [params.mat("Q_T", T)]
    b1bar = np.asarray(params.b1bar if params.b1bar is not None else np.zeros((d, d)), dtype=float)
    b2 = np.asarray(params.b2 if params.b2 is not None else np.eye(d, k), dtype=float).reshape(d, k)
    box = params.box or ControlBox.unbounded(k)
    conds = [_pd_condition("R_positive_definite", R, times)]
    if params.variant == EXAMPLE_1:
        phi_bounded = all(f.bounded for f in params.phi)
        conds += [
            _psd_condition("P_symmetric_psd", P + PT, list(times) + tT),
            _entry_condition("P_plus_Q_offdiag_nonpositive", [p + q for p, q in zip(P, Q)], times,
                             lambda v: v <= 0, offdiag_only=True),
            _entry_condition("P_T_plus_Q_T_offdiag_nonpositive", [PT[0] + QT[0]], tT,
                             lambda v: v <= 0, offdiag_only=True),
            _psd_condition("Q_symmetric_psd", Q + QT, list(times) + tT),
            _entry_condition("Q_entries_nonnegative", Q + QT, list(times) + tT, lambda v: v >= 0),
            ConditionResult("phi_bounded_or_box_compact", phi_bounded or box.bounded,
                            {} if phi_bounded or box.bounded else {"reason": "unbounded phi and box"}),
            ConditionResult("k_equals_d", k == d, {} if k == d else {"d": d, "k": k}),
            _diag_condition("b1bar_diagonal", [b1bar], [0.0]),
            _diag_condition("b2_diagonal", [b2], [0.0]),
            _diag_condition("R_diagonal", R, times),
        ]
    else:
        C = np.asarray(params.b0_C if params.b0_C is not None else np.zeros((d, len(params.phi))), dtype=float)
        bounded = all(f.bounded for f in tuple(params.phi) + tuple(params.psi))
        conds += [
            _psd_condition("P_symmetric_psd", P, times),
            _entry_condition("R_plus_P_offdiag_nonpositive", [r + p for r, p in zip(R, P)], times,
                             lambda v: v <= 0, offdiag_only=True),
            _entry_condition("P_entries_nonnegative", P, times, lambda v: v >= 0),
            _entry_condition("Q_entries_nonpositive", Q + QT, list(times) + tT, lambda v: v <= 0),
            ConditionResult("phi_psi_bounded_or_box_compact", bounded or box.bounded,
                            {} if bounded or box.bounded else {"reason": "unbounded phi/psi and box"}),
            _entry_condition("b0_C_entries_nonnegative", [C], [0.0], lambda v: v >= 0),
            _entry_condition("b1bar_entries_nonnegative", [b1bar], [0.0], lambda v: v >= 0),
            _entry_condition("b2_entries_nonnegative", [b2], [0.0], lambda v: v >= 0),
        ]
    return LQConditionReport(params.variant, conds)


def _check_shapes(params: LQModelParams):
    d, k = params.d, params.k
    t = 0.0
    if params.variant == EXAMPLE_1:
        expect = {"P": (d, d), "Q": (d, d), "R": (k, k), "P_T": (d, d), "Q_T": (d, d)}
        if len(params.phi) != d:
            raise ValueError(f"example-1 needs d={d} interaction functions, got {len(params.phi)}")
    else:
        n_phi = len(params.phi)
        expect = {"P": (k, k), "Q": (n_phi, d), "R": (k, k), "Q_T": (n_phi, d)}
        if len(params.psi) != k:
            raise ValueError(f"example-2 needs k={k} psi functions, got {len(params.psi)}")
        if n_phi == 0:
            raise ValueError("example-2 needs at least one phi function")
    for name, shape in expect.items():
        got = params.mat(name, params.T if name.endswith("_T") else t).shape
        if got != shape:
            raise ValueError(f"{name} has shape {got}, expected {shape}")
    for name, shape in (("b1bar", (d, d)), ("b2", (d, k))):
        val = getattr(params, name)
        if val is not None and np.shape(val) != shape:
            raise ValueError(f"{name} has shape {np.shape(val)}, expected {shape}")
    if params.box is not None and params.box.k != k:
        raise ValueError(f"control box has {params.box.k} coordinates, expected {k}")


def _affine_diffusion(p, q, d, n):
    if n == 0:
        return lambda t, x: np.zeros(np.shape(x)[:-1] + (d, 0))
    p = np.zeros((d, n)) if p is None else np.asarray(p, dtype=float).reshape(d, n)
    q = np.zeros((d, n)) if q is None else np.asarray(q, dtype=float).reshape(d, n)
    if not q.any():
        return lambda t, x: np.broadcast_to(p, np.shape(x)[:-1] + (d, n))
    return lambda t, x: p + q * np.asarray(x)[..., :, None]


def example_params(variant: str = EXAMPLE_1, **overrides) -> LQModelParams:
    """Built-in two-dimensional instance of either LQ family.

    Both use ``A = [-1, 1]^2``, clamped coordinate interactions, ``sigma = 0.3 I``
    and a common-noise loading ``0.3 (1, 1)``.  Keyword arguments replace fields.
    """
    phi = (clamped(0, -1.0, 1.0), clamped(1, -1.0, 1.0))
    common = dict(T=1.0, phi=phi, b1bar=np.zeros((2, 2)), b2=np.eye(2), sigma=0.3 * np.eye(2),
                  sigma0=0.3 * np.ones((2, 1)), box=ControlBox.symmetric(2, 1.0),
                  initial_law=dirac_sampler(np.array([0.5, -0.5])))
    if variant == EXAMPLE_1:
        base = dict(P=np.array([[1.0, -1.0], [-1.0, 1.0]]), Q=0.5 * np.eye(2), R=np.eye(2), name="lq-example-1")
    elif variant == EXAMPLE_2:
        base = dict(P=0.5 * np.eye(2), Q=-0.5 * np.eye(2), R=np.eye(2), psi=phi, b0=np.zeros(2),
                    b0_C=0.2 * np.eye(2), name="lq-example-2")
    else:
        raise ValueError(f"unknown LQ variant {variant!r}")
    base = {**common, **base, **overrides}
    return LQModelParams(variant=variant, **base)


def build_lq_model(params: LQModelParams, strict: bool = True, d1: int | None = None,
                   d2: int | None = None) -> ModelSpec:
    """Build a :class:`ModelSpec` from LQ data.

    Raises:
        ValueError: inconsistent shapes.
        LQConditionError: a sign condition fails and ``strict`` is set; the
            exception carries the full :class:`LQConditionReport`.
    """
    _check_shapes(params)
    report = lq_condition_report(params)
    if strict and not report.passed:
        raise LQConditionError(report)
    d, k, T = params.d, params.k, params.T
    sig = None if params.sigma is None else np.asarray(params.sigma, dtype=float).reshape(d, -1)
    sig0 = None if params.sigma0 is None else np.asarray(params.sigma0, dtype=float).reshape(d, -1)
    d1 = d1 if d1 is not None else (0 if sig is None else sig.shape[1])
    d2 = d2 if d2 is not None else (0 if sig0 is None else sig0.shape[1])
    b1bar = np.asarray(params.b1bar if params.b1bar is not None else np.zeros((d, d)), dtype=float)
    b2 = np.asarray(params.b2 if params.b2 is not None else np.eye(d, k), dtype=float).reshape(d, k)
    box = params.box or ControlBox.unbounded(k)
    mat = params.mat
    P_T, Q_T = mat("P_T", T), mat("Q_T", T)

    if params.variant == EXAMPLE_1:
        interaction = InteractionSpec.scalar(params.phi)
        c = np.zeros(d) if params.b0 is None else np.asarray(params.b0, dtype=float).reshape(d)

        def b1(t, x, m):
            return c + x @ b1bar.T

        def h(t, x, m, a):
            P, Q, R = mat("P", t), mat("Q", t), mat("R", t)
            z = x - m
            return (np.einsum("...i,ij,...j->...", x, P, x) + np.einsum("...i,ij,...j->...", z, Q, z)
                    + np.einsum("...i,ij,...j->...", a, R, a))

        def Dxh(t, x, m, a):
            P, Q = mat("P", t), mat("Q", t)
            return x @ (P + P.T) + (x - m) @ (Q + Q.T) + 0.0 * a[..., :1]

        def Dah(t, x, m, a):
            R = mat("R", t)
            return a @ (R + R.T) + 0.0 * x[..., :1]

        def g(x, m):
            z = x - m
            return np.einsum("...i,ij,...j->...", x, P_T, x) + np.einsum("...i,ij,...j->...", z, Q_T, z)

        def Dxg(x, m):
            return x @ (P_T + P_T.T) + (x - m) @ (Q_T + Q_T.T)

        def Haa(t):
            R = mat("R", t)
            return R + R.T

        def lin(t, x, m):
            return np.zeros(np.shape(x)[:-1] + (k,))

        regime, measure_drift = SEPARABLE, False
    else:
        n_phi = len(params.phi)
        interaction = InteractionSpec.scalar(tuple(params.phi) + tuple(params.psi))
        c = np.zeros(d) if params.b0 is None else np.asarray(params.b0, dtype=float).reshape(d)
        C = np.zeros((d, n_phi)) if params.b0_C is None else np.asarray(params.b0_C, dtype=float).reshape(d, n_phi)

        def b1(t, x, m):
            return c + m[..., :n_phi] @ C.T + x @ b1bar.T

        def h(t, x, m, a):
            Q, R, P = mat("Q", t), mat("R", t), mat("P", t)
            mphi, z = m[..., :n_phi], a - m[..., n_phi:]
            return (np.einsum("...i,ij,...j->...", mphi, Q, x) + np.einsum("...i,ij,...j->...", a, R, a)
                    + np.einsum("...i,ij,...j->...", z, P, z))

        def Dxh(t, x, m, a):
            return m[..., :n_phi] @ mat("Q", t) + 0.0 * x + 0.0 * a[..., :1]

        def Dah(t, x, m, a):
            R, P = mat("R", t), mat("P", t)
            return a @ (R + R.T) + (a - m[..., n_phi:]) @ (P + P.T) + 0.0 * x[..., :1]

        def g(x, m):
            return np.einsum("...i,ij,...j->...", m[..., :n_phi], Q_T, x)

        def Dxg(x, m):
            return m[..., :n_phi] @ Q_T + 0.0 * x

        def Haa(t):
            R, P = mat("R", t), mat("P", t)
            return R + R.T + P + P.T

        def lin(t, x, m):
            P = mat("P", t)
            return -m[..., n_phi:] @ (P + P.T) + np.zeros(np.shape(x)[:-1] + (k,))

        regime, measure_drift = NONSEPARABLE, bool(np.any(C != 0))

    lam = float(min(np.linalg.eigvalsh(0.5 * Haa(t)).min() for t in np.linspace(0, T, 11)))
    return ModelSpec(
        d=d, k=k, d1=d1, d2=d2, T=T, control_box=box, interaction=interaction, regime=regime,
        b1=b1, b2=lambda t: b2,
        Dxb1=lambda t, x, m: np.broadcast_to(b1bar, np.shape(x)[:-1] + (d, d)),
        sigma=_affine_diffusion(params.sigma, params.sigma_x, d, d1),
        sigma0=_affine_diffusion(params.sigma0, params.sigma0_x, d, d2),
        h=h, Dxh=Dxh, Dah=Dah, g=g, Dxg=Dxg,
        initial_law=params.initial_law, control_quadratic=(Haa, lin),
        drift_measure_dependent=measure_drift, K=params.K, lam=lam,
        name=params.name or f"lq-{params.variant}",
        meta={"family": f"lq-{params.variant}", "lq_params": params, "lq_report": report},
    )


# ---------------------------------------------------------------------------
# Expression-defined models
# ---------------------------------------------------------------------------


def _vec_eval(exprs, t, x, m, a, y=()):
    return np.stack([e(t=t, x=x, m=m, a=a, y=y) for e in exprs], axis=-1)


def build_expression_model(*, d: int, k: int, T: float, drift: Sequence[str], h: str, g: str,
                           regime: str, box: ControlBox | None = None, d1: int = 0, d2: int = 0,
                           sigma: Sequence[Sequence[str]] | None = None,
                           sigma0: Sequence[Sequence[str]] | None = None,
                           interaction: InteractionSpec | None = None, initial_law=None,
                           K=None, kappa=None, lam=None, name: str = "expression") -> ModelSpec:
    """Model from expression strings over ``t, x1.., a1.., m1..``.

    The drift must be affine in ``a`` with a loading depending on ``t`` only;
    ``sigma``/``sigma0`` entries may use ``t`` and ``x``.  Derivatives of ``h``
    and ``g`` are obtained symbolically.  When every second ``a``-derivative of
    ``h`` is a constant, the closed-form minimizer is enabled.
    """
    interaction = interaction or InteractionSpec.none()
    J = interaction.J
    dims = Dims(d, k, J)
    if len(drift) != d:
        raise ValueError(f"drift needs {d} components, got {len(drift)}")
    b_full = [CompiledExpr(s, dims) for s in drift]
    a_vars = [Var("a", l + 1) for l in range(k)]
    zero_a = {v: Const(0.0) for v in a_vars}
    b2_exprs = []
    for i, bi in enumerate(b_full):
        row = []
        for v in a_vars:
            dv = diff_expr(bi.ast, v)
            if any(u.kind != "t" for u in variables_of(dv)):
                raise ValueError(f"drift component {i + 1} is not affine in a with a t-only loading: {drift[i]!r}")
            row.append(CompiledExpr(to_source(dv), dims, dv))
        b2_exprs.append(row)
    b1_exprs = [CompiledExpr(to_source(a), dims, a) for a in (substitute(bi.ast, zero_a) for bi in b_full)]
    Dxb1_exprs = [[e.diff(Var("x", j + 1)) for j in range(d)] for e in b1_exprs]
    measure_drift = any(v.kind == "m" for e in b1_exprs for v in variables_of(e.ast))

    def matrix_fn(rows, n_cols):
        compiled = [[CompiledExpr(s, Dims(d, 0, 0)) for s in row] for row in rows]
        if len(compiled) != d or any(len(r) != n_cols for r in compiled):
            raise ValueError(f"diffusion needs a {d}x{n_cols} array of expressions")
        for i, row in enumerate(compiled):
            for e in row:
                if any(v.kind == "x" and v.index != i + 1 for v in variables_of(e.ast)):
                    raise ValueError(f"diffusion row {i + 1} may depend on x{i + 1} only: {e.source!r}")

        def fn(t, x):
            x = np.asarray(x, dtype=float)
            out = np.empty(x.shape[:-1] + (d, n_cols))
            for i, row in enumerate(compiled):
                for j, e in enumerate(row):
                    out[..., i, j] = e(t=t, x=x)
            return out

        return fn

    sig_fn = matrix_fn(sigma, d1) if d1 else (lambda t, x: np.zeros(np.shape(x)[:-1] + (d, 0)))
    sig0_fn = matrix_fn(sigma0, d2) if d2 else (lambda t, x: np.zeros(np.shape(x)[:-1] + (d, 0)))
    h_e = CompiledExpr(h, dims)
    g_e = CompiledExpr(g, dims)
    if any(v.kind == "a" for v in variables_of(g_e.ast)):
        raise ValueError("terminal cost g may not depend on a")
    Dxh_e = [h_e.diff(Var("x", j + 1)) for j in range(d)]
    Dah_e = [h_e.diff(v) for v in a_vars]
    Dxg_e = [g_e.diff(Var("x", j + 1)) for j in range(d)]
    Haa_e = [[e.diff(v) for v in a_vars] for e in Dah_e]
    quad = None
    if k and all(e.is_constant for row in Haa_e for e in row):
        H = np.array([[float(e()) for e in row] for row in Haa_e]).reshape(k, k)
        # kinked costs also have a constant (zero) symbolic Hessian; keep only strictly convex quadratics
        if np.allclose(H, H.T) and np.linalg.eigvalsh(H).min() > 0:
            lin_e = [CompiledExpr(to_source(s), dims, s) for s in (substitute(e.ast, zero_a) for e in Dah_e)]
            quad = (lambda t: H, lambda t, x, m: _vec_eval(lin_e, t, x, m, ()))
            if lam is None:
                lam = float(np.linalg.eigvalsh(0.5 * H).min())

    return ModelSpec(
        d=d, k=k, d1=d1, d2=d2, T=T, control_box=box or ControlBox.unbounded(k), interaction=interaction,
        regime=regime,
        b1=lambda t, x, m: _vec_eval(b1_exprs, t, x, m, ()),
        b2=lambda t: np.array([[float(e(t=t)) for e in row] for row in b2_exprs]).reshape(d, k),
        Dxb1=lambda t, x, m: np.stack([_vec_eval(row, t, x, m, ()) for row in Dxb1_exprs], axis=-2),
        sigma=sig_fn, sigma0=sig0_fn,
        h=lambda t, x, m, a: h_e(t=t, x=x, m=m, a=a),
        Dxh=lambda t, x, m, a: _vec_eval(Dxh_e, t, x, m, a),
        Dah=lambda t, x, m, a: _vec_eval(Dah_e, t, x, m, a),
        g=lambda x, m: g_e(t=T, x=x, m=m),
        Dxg=lambda x, m: _vec_eval(Dxg_e, T, x, m, ()),
        initial_law=initial_law, control_quadratic=quad, drift_measure_dependent=measure_drift,
        measure_dependent=any(v.kind == "m" for e in b1_exprs + [h_e, g_e] for v in variables_of(e.ast)),
        K=K, kappa=kappa, lam=lam, name=name,
        meta={"family": "expression", "drift": list(drift), "h": h, "g": g},
    )


# ---------------------------------------------------------------------------
# Finite-difference checkers
# ---------------------------------------------------------------------------

DEFAULT_TOL_REL = 1e-9
DEFAULT_POINTS_PER_AXIS = 9


def _round(v):
    return float(f"{float(v):.12g}")


def _fmt_point(arr) -> list:
    return [_round(v) for v in np.atleast_1d(arr)]


@dataclass
class DiffReport:
    """Outcome of a finite-difference sign check.

    ``worst_value`` is the largest signed difference found; a check passes
    when every difference is at most its tolerance.
    """

    name: str
    passed: bool
    worst_value: float
    worst_location: dict
    n_probes: int
    n_violations: int
    tol_rel: float
    note: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "worst_value": _round(self.worst_value),
                "worst_location": self.worst_location, "n_probes": self.n_probes,
                "n_violations": self.n_violations, "tol_rel": self.tol_rel, "note": self.note}


def _grid(lo, hi, n, step, max_points, seed):
    lo, hi = np.atleast_1d(np.asarray(lo, dtype=float)), np.atleast_1d(np.asarray(hi, dtype=float))
    axes = [np.linspace(l, max(l, u - step), n) for l, u in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
    if pts.shape[0] > max_points:
        idx = np.sort(np.random.default_rng(seed).choice(pts.shape[0], max_points, replace=False))
        pts = pts[idx]
    return pts


def _collect(name, diffs, scales, tol_rel, locate, note=""):
    """Reduce an array of signed differences into a :class:`DiffReport`."""
    diffs = np.asarray(diffs, dtype=float)
    tol = tol_rel * (1.0 + np.asarray(scales, dtype=float))
    finite = np.isfinite(diffs)
    if not finite.all():
        idx = int(np.flatnonzero(~finite.ravel())[0])
        loc = locate(idx)
        loc["reason"] = "non-finite evaluation"
        return DiffReport(name, False, float("nan"), loc, diffs.size, int((~finite).sum()), tol_rel, note)
    if diffs.size == 0:
        return DiffReport(name, True, 0.0, {}, 0, 0, tol_rel, note or "no probes")
    excess = (diffs - tol).ravel()
    idx = int(np.argmax(excess))
    viol = int((excess > 0).sum())
    return DiffReport(name, viol == 0, float(diffs.ravel()[idx]), locate(idx), diffs.size, viol, tol_rel, note)


def check_decreasing_differences(f: Callable, x_domain, y_domain, step: float = 0.25,
                                 n_per_axis: int = DEFAULT_POINTS_PER_AXIS, tol_rel: float = DEFAULT_TOL_REL,
                                 max_points: int = 4096, seed: int = 0) -> DiffReport:
    """Check ``Delta_{x_i} Delta_{y_j} f <= 0`` on a probe grid.

    Args:
        f: vectorized ``f(x (n, p), y (n, q)) -> (n,)``.
        x_domain, y_domain: ``(lower, upper)`` bounds of each argument.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    p = np.atleast_1d(x_domain[0]).size
    lo = np.concatenate([np.atleast_1d(x_domain[0]), np.atleast_1d(y_domain[0])])
    hi = np.concatenate([np.atleast_1d(x_domain[1]), np.atleast_1d(y_domain[1])])
    pts = _grid(lo, hi, n_per_axis, step, max_points, seed)
    q = lo.size - p
    diffs, scales, meta = [], [], []
    for i in range(p):
        for j in range(q):
            ex = np.zeros(p)
            ey = np.zeros(q)
            ex[i] = ey[j] = step
            x, y = pts[:, :p], pts[:, p:]
            vals = [np.asarray(f(x + ex, y + ey), float), np.asarray(f(x, y + ey), float),
                    np.asarray(f(x + ex, y), float), np.asarray(f(x, y), float)]
            diffs.append(vals[0] - vals[1] - vals[2] + vals[3])
            scales.append(np.max(np.abs(vals), axis=0))
            meta.append((i, j))
    diffs, scales = np.array(diffs), np.array(scales)

    def locate(idx):
        pair, row = divmod(idx, pts.shape[0])
        i, j = meta[pair]
        return {"x": _fmt_point(pts[row, :p]), "y": _fmt_point(pts[row, p:]), "i": i, "j": j,
                "step": step}

    return _collect("decreasing_differences", diffs, scales, tol_rel, locate)


def check_submodularity_x(f: Callable, domain, step: float = 0.25, n_per_axis: int = DEFAULT_POINTS_PER_AXIS,
                          tol_rel: float = DEFAULT_TOL_REL, max_points: int = 4096, seed: int = 0) -> DiffReport:
    """Check ``Delta_{x_i} Delta_{x_j} f <= 0`` for ``i != j``; ``f(x (n, d)) -> (n,)``."""
    if not step > 0:
        raise ValueError("step must be positive")
    lo, hi = np.atleast_1d(domain[0]), np.atleast_1d(domain[1])
    d = lo.size
    if d == 1:
        return DiffReport("submodularity_x", True, 0.0, {}, 0, 0, tol_rel,
                          "vacuous for d = 1: any function of one real variable is submodular")
    pts = _grid(lo, hi, n_per_axis, step, max_points, seed)
    diffs, scales, meta = [], [], []
    for i in range(d):
        for j in range(i + 1, d):
            ei, ej = np.zeros(d), np.zeros(d)
            ei[i] = ej[j] = step
            vals = [np.asarray(f(pts + ei + ej), float), np.asarray(f(pts + ei), float),
                    np.asarray(f(pts + ej), float), np.asarray(f(pts), float)]
            diffs.append(vals[0] - vals[1] - vals[2] + vals[3])
            scales.append(np.max(np.abs(vals), axis=0))
            meta.append((i, j))

    def locate(idx):
        pair, row = divmod(idx, pts.shape[0])
        return {"x": _fmt_point(pts[row]), "i": meta[pair][0], "j": meta[pair][1], "step": step}

    return _collect("submodularity_x", np.array(diffs), np.array(scales), tol_rel, locate)


def check_monotone_fn(f: Callable, domain, step: float = 0.25, n_per_axis: int = DEFAULT_POINTS_PER_AXIS,
                      tol_rel: float = DEFAULT_TOL_REL, max_points: int = 4096, seed: int = 0,
                      name: str = "nondecreasing") -> DiffReport:
    """Check ``f(x + step e_i) >= f(x)`` on a probe grid; ``f(x (n, d)) -> (n,)``."""
    lo, hi = np.atleast_1d(domain[0]), np.atleast_1d(domain[1])
    pts = _grid(lo, hi, n_per_axis, step, max_points, seed)
    base = np.asarray(f(pts), float)
    diffs, scales = [], []
    for i in range(lo.size):
        e = np.zeros(lo.size)
        e[i] = step
        up = np.asarray(f(pts + e), float)
        diffs.append(base - up)
        scales.append(np.maximum(np.abs(base), np.abs(up)))

    def locate(idx):
        i, row = divmod(idx, pts.shape[0])
        return {"x": _fmt_point(pts[row]), "i": i, "step": step}

    return _collect(name, np.array(diffs), np.array(scales), tol_rel, locate)


# ---------------------------------------------------------------------------
# Assumption suite
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    """Probe design for the model checkers.

    Measure arguments are probed with pairs of clouds ``(C, C')`` where ``C'``
    dominates ``C`` particle by particle, so their summaries are ordered for
    any nondecreasing interaction.  By default clouds are built from a seeded
    base cloud and its upward shifts.
    """

    n_per_axis: int = DEFAULT_POINTS_PER_AXIS
    x_range: tuple = (-2.0, 2.0)
    a_range: tuple = (-2.0, 2.0)
    times: tuple | None = None
    step: float = 0.25
    tol_rel: float = DEFAULT_TOL_REL
    max_points: int = 729
    cloud_pairs: list | None = None
    cloud_size: int = 16
    shifts: tuple = (0.25, 1.0)
    seed: int = 0
    large_bound: float = LARGE_BOUND

    def time_points(self, T: float) -> np.ndarray:
        return np.asarray(self.times if self.times is not None else (0.0, 0.5 * T, T), dtype=float)

    def x_points(self, d: int) -> np.ndarray:
        return _grid(np.full(d, self.x_range[0]), np.full(d, self.x_range[1]), self.n_per_axis, self.step,
                     self.max_points, self.seed)

    def a_points(self, box: ControlBox, n: int) -> np.ndarray:
        lo, hi = box.finite_bounds(self.large_bound)
        lo, hi = np.maximum(lo, self.a_range[0]), np.minimum(hi, self.a_range[1])
        grid = _grid(lo, hi, self.n_per_axis, min(self.step, float(np.min(hi - lo)) / 2 or self.step),
                     self.max_points, self.seed + 1)
        idx = np.random.default_rng(self.seed + 2).integers(0, grid.shape[0], n)
        return grid[idx]

    def a_step(self, box: ControlBox) -> float:
        lo, hi = box.finite_bounds(self.large_bound)
        span = float(np.min(np.minimum(hi, self.a_range[1]) - np.maximum(lo, self.a_range[0])))
        return min(self.step, span / 2) if span > 0 else self.step

    def pairs(self, d: int) -> list:
        if self.cloud_pairs is not None:
            return [(np.asarray(a, float).reshape(-1, d), np.asarray(b, float).reshape(-1, d))
                    for a, b in self.cloud_pairs]
        rng = np.random.default_rng(self.seed + 3)
        base = [0.6 * rng.standard_normal((self.cloud_size, d)),
                np.linspace(-1.0, 1.0, self.cloud_size)[:, None] * np.ones(d)]
        out = []
        for c in base:
            for s in self.shifts:
                out.append((c - s / 2, c + s / 2))
                for j in range(d if d > 1 else 0):
                    e = np.zeros(d)
                    e[j] = s
                    out.append((c, c + e))
        return out


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_value: float = 0.0
    witness: dict = field(default_factory=dict)
    n_probes: int = 0
    note: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "worst_value": _round(self.worst_value),
                "witness": self.witness, "n_probes": self.n_probes, "note": self.note}


@dataclass
class AssumptionReport:
    """Per-check outcomes of the structural assumption suite.

    Measure comparisons use dominating cloud pairs only; passing is evidence
    on the probes, not a certificate over all ordered measures.
    """

    model: str
    regime: str
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def n_violations(self) -> int:
        return sum(not c.passed for c in self.checks)

    @property
    def violations(self) -> list:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"model": self.model, "regime": self.regime, "passed": self.passed,
                "n_violations": self.n_violations, "checks": [c.to_dict() for c in self.checks],
                "limitation": "measure order probed on particle-wise dominating cloud pairs only"}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


class _Probes:
    """Evaluation points shared by all checks of one suite run."""

    def __init__(self, model: ModelSpec, cfg: ProbeConfig):
        self.model, self.cfg = model, cfg
        self.times = cfg.time_points(model.T)
        self.x = cfg.x_points(model.d)
        self.a = cfg.a_points(model.control_box, self.x.shape[0])
        self.h = cfg.step
        self.ha = cfg.a_step(model.control_box)
        lo_a, hi_a = model.control_box.finite_bounds(cfg.large_bound)
        self.a = np.clip(self.a, lo_a, hi_a - self.ha)
        self.pairs = cfg.pairs(model.d)

    def m(self, cloud, x):
        return self.model.summaries_for_cloud(cloud, x)

    def m_any(self, x):
        return self.m(self.pairs[0][0], x)


def _result(name, diffs, scales, tol_rel, locs, note=""):
    """Turn stacked differences (each with a witness factory) into a CheckResult."""
    if not diffs:
        return CheckResult(name, True, 0.0, {}, 0, note or "not applicable")
    D = np.concatenate([np.ravel(v) for v in diffs])
    S = np.concatenate([np.ravel(v) for v in scales])
    offsets = np.cumsum([0] + [np.size(v) for v in diffs])

    def locate(idx):
        block = int(np.searchsorted(offsets, idx, side="right") - 1)
        return locs[block](idx - offsets[block])

    rep = _collect(name, D, S, tol_rel, locate, note)
    return CheckResult(name, rep.passed, rep.worst_value, rep.worst_location if not rep.passed else {},
                       rep.n_probes, note)


def _witness(t, x, a=None, pair=None, **extra):
    def make(row):
        out = {"t": _round(t), "x": _fmt_point(x[row])}
        if a is not None:
            out["a"] = _fmt_point(a[row])
        if pair is not None:
            out["measure_pair"] = pair
        out.update(extra)
        return out

    return make


def _unit(n, i, h):
    e = np.zeros(n)
    e[i] = h
    return e


def _diffusion_check(name, fn, pr: _Probes):
    model = pr.model
    diffs, scales, locs = [], [], []
    for t in pr.times:
        base = fn(t, pr.x)
        if base.shape[-1] == 0:
            continue
        for j in range(model.d):
            moved = fn(t, pr.x + _unit(model.d, j, pr.h))
            for i in range(model.d):
                if i == j:
                    continue
                dv = np.abs(moved[:, i, :] - base[:, i, :]).max(axis=-1)
                diffs.append(dv)
                scales.append(np.abs(base[:, i, :]).max(axis=-1))
                locs.append(_witness(t, pr.x, row_index=i, moved_coord=j))
    return _result(name, diffs, scales, pr.cfg.tol_rel, locs)


def _separable_checks(pr: _Probes) -> list:
    model, cfg, h = pr.model, pr.cfg, pr.h
    d, tol = model.d, cfg.tol_rel
    out = [CheckResult("structure.k_equals_d", model.k == d, 0.0,
                       {} if model.k == d else {"d": d, "k": model.k}, 1)]
    if model.k != d:
        return out
    # drift: b1^i depends on x^i only and not on the measure; b2 diagonal
    diffs, scales, locs = [], [], []
    for t in pr.times:
        m0 = pr.m_any(pr.x)
        J = model.Dxb1(t, pr.x, m0)
        off = np.abs(J * (1 - np.eye(d))).reshape(len(pr.x), -1).max(axis=1)
        diffs.append(off)
        scales.append(np.zeros_like(off))
        locs.append(_witness(t, pr.x, reason="b1 couples coordinates"))
        B2 = model.b2(t)
        offb = np.abs(B2 - np.diag(np.diag(B2))).max() if B2.shape[0] == B2.shape[1] else np.inf
        diffs.append(np.array([offb]))
        scales.append(np.zeros(1))
        locs.append(lambda row, t=t: {"t": _round(t), "reason": "b2 not diagonal"})
        for pi, (lo, hi) in enumerate(pr.pairs):
            dv = np.abs(model.b1(t, pr.x, pr.m(hi, pr.x)) - model.b1(t, pr.x, pr.m(lo, pr.x))).max(axis=-1)
            diffs.append(dv)
            scales.append(np.zeros_like(dv))
            locs.append(_witness(t, pr.x, pair=pi, reason="b1 depends on the measure"))
    out.append(_result("structure.drift_coordinatewise", diffs, scales, tol, locs))
    out.append(_diffusion_check("structure.sigma_coordinatewise", model.sigma, pr))
    out.append(_diffusion_check("structure.sigma0_coordinatewise", model.sigma0, pr))
    # cost split h = f(t, x, mu) + sum_i l^i(t, x^i, a^i)
    diffs, scales, locs = [], [], []
    ha = pr.ha
    for t in pr.times:
        m0 = pr.m_any(pr.x)
        for i in range(d):
            ea = _unit(d, i, ha)
            dh = lambda x, m, a: model.h(t, x, m, a + ea) - model.h(t, x, m, a)
            base = dh(pr.x, m0, pr.a)
            for j in range(d):
                if j != i:
                    ex = _unit(d, j, h)
                    diffs.append(np.abs(dh(pr.x + ex, m0, pr.a) - base))
                    scales.append(np.abs(base))
                    locs.append(_witness(t, pr.x, pr.a, a_coord=i, x_coord=j))
                    eaj = _unit(d, j, ha)
                    diffs.append(np.abs(dh(pr.x, m0, pr.a + eaj) - base))
                    scales.append(np.abs(base))
                    locs.append(_witness(t, pr.x, pr.a, a_coord=i, other_a_coord=j))
            for pi, (lo, hi) in enumerate(pr.pairs):
                dv = np.abs(dh(pr.x, pr.m(hi, pr.x), pr.a) - dh(pr.x, pr.m(lo, pr.x), pr.a))
                diffs.append(dv)
                scales.append(np.abs(base))
                locs.append(_witness(t, pr.x, pr.a, pair=pi, a_coord=i))
    out.append(_result("structure.cost_separable", diffs, scales, tol, locs))
    # submodularity in x and decreasing differences in (x, mu) for f and g
    a_ref = np.clip(np.zeros(d), *model.control_box.finite_bounds())
    phis = [("f", lambda t, x, m: model.h(t, x, m, np.broadcast_to(a_ref, x.shape))),
            ("g", lambda t, x, m: model.g(x, m))]
    for label, phi in phis:
        times = pr.times if label == "f" else [model.T]
        diffs, scales, locs = [], [], []
        for t in times:
            for pi, (cloud, _) in enumerate(pr.pairs):
                for i in range(d):
                    for j in range(i + 1, d):
                        ei, ej = _unit(d, i, h), _unit(d, j, h)
                        pts = [pr.x + ei + ej, pr.x + ei, pr.x + ej, pr.x]
                        v = [phi(t, p, pr.m(cloud, p)) for p in pts]
                        diffs.append(v[0] - v[1] - v[2] + v[3])
                        scales.append(np.max(np.abs(v), axis=0))
                        locs.append(_witness(t, pr.x, pair=pi, i=i, j=j))
        note = "vacuous for d = 1" if d == 1 else ""
        out.append(_result(f"submodular_x.{label}", diffs, scales, tol, locs, note))
        diffs, scales, locs = [], [], []
        for t in times:
            for pi, (lo, hi) in enumerate(pr.pairs):
                for i in range(d):
                    ei = _unit(d, i, h)
                    xu = pr.x + ei
                    v = [phi(t, xu, pr.m(hi, xu)), phi(t, pr.x, pr.m(hi, pr.x)),
                         phi(t, xu, pr.m(lo, xu)), phi(t, pr.x, pr.m(lo, pr.x))]
                    diffs.append(v[0] - v[1] - v[2] + v[3])
                    scales.append(np.max(np.abs(v), axis=0))
                    locs.append(_witness(t, pr.x, pair=pi, x_coord=i))
        out.append(_result(f"decreasing_differences_x_mu.{label}", diffs, scales, tol, locs))
    return out


def _nonseparable_checks(pr: _Probes) -> list:
    model, cfg, h, ha = pr.model, pr.cfg, pr.h, pr.ha
    d, k, tol = model.d, model.k, cfg.tol_rel
    out = []
    # affine drift with x-independent Jacobian, monotone b0, sign conditions
    diffs, scales, locs = [], [], []
    for t in pr.times:
        m0 = pr.m_any(pr.x)
        J0 = model.Dxb1(t, pr.x, m0)
        Jc = model.Dxb1(t, np.zeros_like(pr.x), m0)
        diffs.append(np.abs(J0 - Jc).reshape(len(pr.x), -1).max(axis=1))
        scales.append(np.abs(J0).reshape(len(pr.x), -1).max(axis=1))
        locs.append(_witness(t, pr.x, reason="b1 not affine in x"))
    out.append(_result("structure.affine_drift", diffs, scales, tol, locs))
    diffs, scales, locs = [], [], []
    for t in pr.times:
        z = np.zeros((1, d))
        for pi, (lo, hi) in enumerate(pr.pairs):
            blo = model.b1(t, z, pr.m(lo, z))
            bhi = model.b1(t, z, pr.m(hi, z))
            diffs.append(blo - bhi)
            scales.append(np.maximum(np.abs(blo), np.abs(bhi)))
            locs.append(lambda row, t=t, pi=pi: {"t": _round(t), "measure_pair": pi, "coord": int(row)})
    out.append(_result("drift.b0_nondecreasing_in_mu", diffs, scales, tol, locs))
    for label, mats in (("drift.b1bar_entries_nonnegative",
                         [model.Dxb1(t, np.zeros((1, d)), pr.m_any(np.zeros((1, d))))[0] for t in pr.times]),
                        ("drift.b2_entries_nonnegative", [model.b2(t) for t in pr.times])):
        diffs, scales, locs = [], [], []
        for t, M in zip(pr.times, mats):
            diffs.append(-M.ravel())
            scales.append(np.zeros(M.size))
            locs.append(lambda idx, t=t, shape=M.shape: {"t": _round(t), "entry": list(np.unravel_index(idx, shape))})
        res = _result(label, diffs, scales, tol, locs)
        if res.witness:
            res.witness["entry"] = [int(v) for v in res.witness["entry"]]
        out.append(res)
    out.append(_diffusion_check("structure.sigma_coordinatewise", model.sigma, pr))
    out.append(_diffusion_check("structure.sigma0_coordinatewise", model.sigma0, pr))
    # growth of D_x h and D_x g against the declared K
    if model.K is None:
        out.append(CheckResult("growth.Dxh_Dxg", True, 0.0, {}, 0, "growth constant K not declared; skipped"))
    else:
        diffs, scales, locs = [], [], []
        for t in pr.times:
            for pi, (lo, hi) in enumerate(pr.pairs):
                for cloud in (lo, hi):
                    m = pr.m(cloud, pr.x)
                    lhs = (np.linalg.norm(model.Dxh(t, pr.x, m, pr.a), axis=-1)
                           + np.linalg.norm(model.Dxg(pr.x, m), axis=-1))
                    norm1 = float(np.mean(np.linalg.norm(cloud, axis=1)))
                    diffs.append(lhs - model.K * (1 + norm1))
                    scales.append(np.zeros_like(lhs))
                    locs.append(_witness(t, pr.x, pr.a, pair=pi))
        out.append(_result("growth.Dxh_Dxg", diffs, scales, tol, locs))
    # submodularity of h in a
    diffs, scales, locs = [], [], []
    for t in pr.times:
        m0 = pr.m_any(pr.x)
        for i in range(k):
            for j in range(i + 1, k):
                ei, ej = _unit(k, i, ha), _unit(k, j, ha)
                v = [model.h(t, pr.x, m0, pr.a + ei + ej), model.h(t, pr.x, m0, pr.a + ei),
                     model.h(t, pr.x, m0, pr.a + ej), model.h(t, pr.x, m0, pr.a)]
                diffs.append(v[0] - v[1] - v[2] + v[3])
                scales.append(np.max(np.abs(v), axis=0))
                locs.append(_witness(t, pr.x, pr.a, i=i, j=j))
    out.append(_result("submodular_a.h", diffs, scales, tol, locs, "vacuous for k = 1" if k == 1 else ""))
    # decreasing differences of h in a and (x, mu)
    for label in ("x", "mu"):
        diffs, scales, locs = [], [], []
        for t in pr.times:
            for l in range(k):
                el = _unit(k, l, ha)
                if label == "x":
                    m0 = pr.m_any(pr.x)
                    for i in range(d):
                        xu = pr.x + _unit(d, i, h)
                        mu_ = pr.m_any(xu)
                        v = [model.h(t, xu, mu_, pr.a + el), model.h(t, xu, mu_, pr.a),
                             model.h(t, pr.x, m0, pr.a + el), model.h(t, pr.x, m0, pr.a)]
                        diffs.append(v[0] - v[1] - v[2] + v[3])
                        scales.append(np.max(np.abs(v), axis=0))
                        locs.append(_witness(t, pr.x, pr.a, a_coord=l, x_coord=i))
                else:
                    for pi, (lo, hi) in enumerate(pr.pairs):
                        mlo, mhi = pr.m(lo, pr.x), pr.m(hi, pr.x)
                        v = [model.h(t, pr.x, mhi, pr.a + el), model.h(t, pr.x, mhi, pr.a),
                             model.h(t, pr.x, mlo, pr.a + el), model.h(t, pr.x, mlo, pr.a)]
                        diffs.append(v[0] - v[1] - v[2] + v[3])
                        scales.append(np.max(np.abs(v), axis=0))
                        locs.append(_witness(t, pr.x, pr.a, pair=pi, a_coord=l))
        out.append(_result(f"decreasing_differences_a_{label}.h", diffs, scales, tol, locs))
    # D_x h and D_x g nonincreasing in (x, mu, a)
    for label in ("x", "mu", "a"):
        diffs, scales, locs = [], [], []
        for t in pr.times:
            m0 = pr.m_any(pr.x)
            base = model.Dxh(t, pr.x, m0, pr.a)
            moves = []
            if label == "x":
                for i in range(d):
                    xu = pr.x + _unit(d, i, h)
                    moves.append((model.Dxh(t, xu, pr.m_any(xu), pr.a), base, {"x_coord": i}))
            elif label == "a":
                for l in range(k):
                    moves.append((model.Dxh(t, pr.x, m0, pr.a + _unit(k, l, ha)), base, {"a_coord": l}))
            else:
                for pi, (lo, hi) in enumerate(pr.pairs):
                    moves.append((model.Dxh(t, pr.x, pr.m(hi, pr.x), pr.a),
                                  model.Dxh(t, pr.x, pr.m(lo, pr.x), pr.a), {"measure_pair": pi}))
            for up, low, info in moves:
                for c in range(d):
                    diffs.append(up[:, c] - low[:, c])
                    scales.append(np.maximum(np.abs(up[:, c]), np.abs(low[:, c])))
                    locs.append(_witness(t, pr.x, pr.a, component=c, **info))
        out.append(_result(f"Dxh_nonincreasing_in_{label}", diffs, scales, tol, locs))
    for label in ("x", "mu"):
        diffs, scales, locs = [], [], []
        T = model.T
        moves = []
        if label == "x":
            base = model.Dxg(pr.x, pr.m_any(pr.x))
            for i in range(d):
                xu = pr.x + _unit(d, i, h)
                moves.append((model.Dxg(xu, pr.m_any(xu)), base, {"x_coord": i}))
        else:
            for pi, (lo, hi) in enumerate(pr.pairs):
                moves.append((model.Dxg(pr.x, pr.m(hi, pr.x)), model.Dxg(pr.x, pr.m(lo, pr.x)),
                              {"measure_pair": pi}))
        for up, low, info in moves:
            for c in range(d):
                diffs.append(up[:, c] - low[:, c])
                scales.append(np.maximum(np.abs(up[:, c]), np.abs(low[:, c])))
                locs.append(_witness(T, pr.x, component=c, **info))
        out.append(_result(f"Dxg_nonincreasing_in_{label}", diffs, scales, tol, locs))
    return out


def check_assumption_suite(model: ModelSpec, probes: ProbeConfig | None = None) -> AssumptionReport:
    """Probe the submodularity and monotonicity conditions of the model's regime.

    Never raises on a failed condition; failures come back as checks with a
    witness.  Identical inputs give identical reports.
    """
    cfg = probes or ProbeConfig()
    pr = _Probes(model, cfg)
    checks = []
    inter = model.interaction
    if inter.kind == "scalar":
        for j, fn in enumerate(inter.functions):
            rep = check_monotone_fn(fn, (np.full(model.d, cfg.x_range[0]), np.full(model.d, cfg.x_range[1])),
                                    cfg.step, cfg.n_per_axis, cfg.tol_rel, cfg.max_points, cfg.seed)
            checks.append(CheckResult(f"interaction.phi{j + 1}_nondecreasing", rep.passed, rep.worst_value,
                                      rep.worst_location if not rep.passed else {}, rep.n_probes))
    bounded = inter.bounded or model.control_box.bounded
    checks.append(CheckResult("interaction_bounded_or_box_compact", bounded, 0.0,
                              {} if bounded else {"summary_lower": _fmt_point(inter.lower),
                                                  "summary_upper": _fmt_point(inter.upper)}, 1))
    checks += _separable_checks(pr) if model.regime == SEPARABLE else _nonseparable_checks(pr)
    return AssumptionReport(model.name, model.regime, checks)


# ---------------------------------------------------------------------------
# Regularity
# ---------------------------------------------------------------------------


@dataclass
class RegularityReport:
    """Empirical constants measured on probes.

    ``lambda_hat`` is the smallest observed strong-convexity modulus of ``h``
    in ``a``; ``lipschitz`` and ``growth`` map coefficient names to the
    largest observed difference quotient and growth ratio.
    """

    lambda_hat: float
    lipschitz: dict
    growth: dict
    passed: bool
    failures: list

    def to_dict(self) -> dict:
        return {"lambda_hat": _round(self.lambda_hat), "lipschitz": {k: _round(v) for k, v in self.lipschitz.items()},
                "growth": {k: _round(v) for k, v in self.growth.items()}, "passed": self.passed,
                "failures": self.failures}


def validate_regularity(model: ModelSpec, probes: ProbeConfig | None = None) -> RegularityReport:
    """Measure convexity, Lipschitz and growth constants of the coefficients."""
    cfg = probes or ProbeConfig()
    pr = _Probes(model, cfg)
    d, k = model.d, model.k
    failures = []
    lam_hat = np.inf
    lip = {}
    growth = {}

    def note_nonfinite(name, arr, t):
        bad = ~np.isfinite(arr)
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            failures.append({"check": name, "reason": "non-finite value", "t": _round(t),
                             "x": _fmt_point(pr.x[row])})
            return True
        return False

    lo_a, hi_a = model.control_box.finite_bounds(cfg.large_bound)
    for t in pr.times:
        m0 = pr.m_any(pr.x)
        # lambda-convexity along each coordinate and the diagonal, two scales
        for delta in (pr.ha, pr.ha / 4):
            dirs = [_unit(k, l, 1.0) for l in range(k)] + ([np.ones(k)] if k > 1 else [])
            for e in dirs:
                a2 = np.clip(pr.a + delta * e, lo_a, hi_a)
                da = a2 - pr.a
                dist2 = np.sum(da ** 2, axis=-1)
                ok = dist2 > 0
                gap = (model.h(t, pr.x, m0, a2) - model.h(t, pr.x, m0, pr.a)
                       - np.sum(model.Dah(t, pr.x, m0, pr.a) * da, axis=-1))
                if note_nonfinite("lambda_convexity", gap, t):
                    continue
                if ok.any():
                    lam_hat = min(lam_hat, float(np.min(gap[ok] / dist2[ok])))
        # Lipschitz quotients in x (and a for Dah / Dxh)
        fns = {"b1": lambda x, a: model.b1(t, x, m0),
               "sigma": lambda x, a: model.sigma(t, x).reshape(len(x), -1),
               "sigma0": lambda x, a: model.sigma0(t, x).reshape(len(x), -1),
               "Dxh": lambda x, a: model.Dxh(t, x, m0, a),
               "Dah": lambda x, a: model.Dah(t, x, m0, a),
               "Dxg": lambda x, a: model.Dxg(x, m0)}
        for name, fn in fns.items():
            base = np.asarray(fn(pr.x, pr.a), float)
            if base.size == 0 or note_nonfinite(name, base, t):
                continue
            q = 0.0
            for i in range(d):
                moved = np.asarray(fn(pr.x + _unit(d, i, pr.h), pr.a), float)
                q = max(q, float(np.max(np.linalg.norm(moved - base, axis=-1))) / pr.h)
            if name in ("Dxh", "Dah"):
                for l in range(k):
                    moved = np.asarray(fn(pr.x, pr.a + _unit(k, l, pr.ha)), float)
                    q = max(q, float(np.max(np.linalg.norm(moved - base, axis=-1))) / pr.ha)
            lip[name] = max(lip.get(name, 0.0), q)
            size = 1 + np.linalg.norm(pr.x, axis=-1) + np.linalg.norm(pr.a, axis=-1) + np.linalg.norm(m0, axis=-1)
            growth[name] = max(growth.get(name, 0.0), float(np.max(np.linalg.norm(base, axis=-1) / size)))
    if not np.isfinite(lam_hat):
        lam_hat = 0.0
    if not lam_hat > 1e-9:
        failures.append({"check": "lambda_convexity", "reason": "h is not strongly convex in a on the probes",
                         "lambda_hat": _round(lam_hat)})
    elif model.lam is not None and lam_hat < model.lam * (1 - 1e-6):
        failures.append({"check": "lambda_convexity", "reason": "observed modulus below declared lam",
                         "lambda_hat": _round(lam_hat), "declared": model.lam})
    if model.K is not None:
        for name, v in growth.items():
            if v > model.K:
                failures.append({"check": f"growth.{name}", "reason": "exceeds declared K", "value": _round(v)})
    return RegularityReport(lam_hat, lip, growth, not failures, failures)
