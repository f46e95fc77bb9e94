"""Time grids, reproducible noise, Euler-Maruyama simulation and path lattices.

Ensembles are laid out as ``(n_outer, n_inner, n_steps + 1, d)``: outer index
= common-noise scenario, inner index = idiosyncratic particle.  Every inner
particle of one scenario sees the same common-noise increments, so the inner
cloud at a time step is a sample of the state's law conditional on ``B``.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

BLOWUP_BOUND = 1e12


class SimulationError(RuntimeError):
    """State left the finite range during forward simulation."""

    def __init__(self, message: str, step: int | None = None, scenario: int | None = None):
        super().__init__(message)
        self.step = step
        self.scenario = scenario


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")
        if self.n_steps < 1:
            raise ValueError(f"need at least one step, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    @property
    def pi_weights(self) -> np.ndarray:
        """Quadrature weights for ``delta_0 + dt + delta_T`` (total mass ``2 + T``)."""
        w = np.full(self.n_steps + 1, self.dt)
        w[0] = w[-1] = 1.0 + self.dt / 2
        return w


InitialSampler = Callable[[np.random.Generator, int], np.ndarray]


def dirac_sampler(point) -> InitialSampler:
    point = np.atleast_1d(np.asarray(point, dtype=float))

    def sample(rng, n):
        return np.broadcast_to(point, (n, point.size)).copy()

    sample.description = f"dirac({point.tolist()})"
    return sample


def normal_sampler(mean, std) -> InitialSampler:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    std = np.broadcast_to(np.asarray(std, dtype=float), mean.shape)

    def sample(rng, n):
        return mean + std * rng.standard_normal((n, mean.size))

    sample.description = f"normal({mean.tolist()}, {std.tolist()})"
    return sample


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NoisePlan:
    """All randomness of a run: initial states and Brownian increments.

    Attributes:
        dW: ``(n_outer, n_inner, n_steps, d1)`` idiosyncratic increments.
        dB: ``(n_outer, n_steps, d2)`` common-noise increments, shared by the
            inner particles of a scenario.
        xi: ``(n_outer, n_inner, d)`` initial states.
    """

    seed: int
    grid: TimeGrid
    dW: np.ndarray
    dB: np.ndarray
    xi: np.ndarray
    fingerprint: str

    @property
    def n_outer(self) -> int:
        return self.xi.shape[0]

    @property
    def n_inner(self) -> int:
        return self.xi.shape[1]

    @property
    def d(self) -> int:
        return self.xi.shape[2]

    @property
    def d1(self) -> int:
        return self.dW.shape[3]

    @property
    def d2(self) -> int:
        return self.dB.shape[2]

    def coarsen(self, factor: int) -> "NoisePlan":
        """Same Brownian paths on a grid ``factor`` times coarser."""
        n = self.grid.n_steps
        if factor < 1 or n % factor:
            raise ValueError(f"factor {factor} does not divide {n} steps")
        grid = TimeGrid(self.grid.T, n // factor)
        dW = self.dW.reshape(self.n_outer, self.n_inner, n // factor, factor, self.d1).sum(axis=3)
        dB = self.dB.reshape(self.n_outer, n // factor, factor, self.d2).sum(axis=2)
        fp = _fingerprint(self.seed, grid, self.xi.shape, self.d1, self.d2, self.xi, extra=f"coarsen{factor}")
        return NoisePlan(self.seed, grid, _freeze(dW), _freeze(dB), self.xi, fp)


def _fingerprint(seed, grid, xi_shape, d1, d2, xi, extra="") -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(repr((int(seed), float(grid.T), grid.n_steps, tuple(xi_shape), d1, d2, extra)).encode())
    h.update(np.ascontiguousarray(xi, dtype="<f8").tobytes())
    return h.hexdigest()


def generate_noise(seed: int, grid: TimeGrid, n_outer: int, n_inner: int, dims: tuple,
                   initial_sampler: InitialSampler | None = None) -> NoisePlan:
    """Draw a reproducible noise plan.

    Each scenario has its own counter-based stream (Philox keyed by
    ``(seed, scenario)``), so a plan is a pure function of its arguments and
    scenarios can be generated independently.

    Args:
        dims: ``(d, d1, d2)`` state, idiosyncratic and common noise dimensions.
            ``d1``/``d2`` may be 0 (no noise of that kind), ``d`` may not.
        initial_sampler: ``sampler(rng, n) -> (n, d)``; defaults to Dirac at 0.
    """
    d, d1, d2 = dims
    if d < 1:
        raise ValueError("state dimension must be at least 1")
    if d1 < 0 or d2 < 0:
        raise ValueError("noise dimensions must be nonnegative")
    if n_outer < 1 or n_inner < 1:
        raise ValueError("need at least one scenario and one particle")
    sampler = initial_sampler or dirac_sampler(np.zeros(d))
    N, sq = grid.n_steps, np.sqrt(grid.dt)
    xi = np.empty((n_outer, n_inner, d))
    dB = np.empty((n_outer, N, d2))
    dW = np.empty((n_outer, n_inner, N, d1))
    for o in range(n_outer):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), o])))
        sample = np.asarray(sampler(rng, n_inner), dtype=float).reshape(n_inner, -1)
        if sample.shape[1] != d:
            raise ValueError(f"initial sampler returned dimension {sample.shape[1]}, expected {d}")
        xi[o] = sample
        dB[o] = sq * rng.standard_normal((N, d2))
        dW[o] = sq * rng.standard_normal((n_inner, N, d1))
    fp = _fingerprint(seed, grid, xi.shape, d1, d2, xi)
    return NoisePlan(int(seed), grid, _freeze(dW), _freeze(dB), _freeze(xi), fp)


@dataclass(frozen=True, eq=False)
class PathBundle:
    """State paths ``values[outer, inner, step, coord]`` on one noise plan."""

    values: np.ndarray
    grid: TimeGrid
    fingerprint: str

    def __post_init__(self):
        v = self.values
        if v.ndim != 4 or v.shape[2] != self.grid.n_steps + 1:
            raise ValueError(f"bundle shape {v.shape} inconsistent with {self.grid.n_steps} steps")
        if v.flags.writeable:
            object.__setattr__(self, "values", _freeze(v))

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def d(self) -> int:
        return self.values.shape[3]

    def pi_norm2(self) -> float:
        """``E[int |X_t|^2 dpi(t)]`` by quadrature."""
        sq = np.sum(self.values ** 2, axis=3)
        return float(np.mean(sq @ self.grid.pi_weights))

    def state_scale(self) -> float:
        """RMS state size under ``pi``, floored at 1."""
        rms = np.sqrt(self.pi_norm2() / (self.d * (2.0 + self.grid.T)))
        return float(max(1.0, rms))

    def at(self, step: int) -> np.ndarray:
        return self.values[:, :, step, :]

    # -- export -----------------------------------------------------------

    def to_csv(self, path_or_buf, columns_prefix: str = "x", extra: dict | None = None) -> None:
        """Rows ``scenario, particle, step, x1..xd``."""
        o, i, n, d = self.values.shape
        idx = np.indices((o, i, n)).reshape(3, -1).T
        flat = self.values.reshape(-1, d)
        header = ["scenario", "particle", "step"] + [f"{columns_prefix}{j + 1}" for j in range(d)]
        stamp = "".join(f" {k}={v}" for k, v in (extra or {}).items())
        lines = [f"# plan={self.fingerprint}{stamp}", ",".join(header)]
        body = io.StringIO()
        fmt = "%d,%d,%d" + ",%.17g" * d
        np.savetxt(body, np.hstack([idx, flat]), fmt=fmt)
        text = "\n".join(lines) + "\n" + body.getvalue()
        _write_text(path_or_buf, text)

    def to_binary(self, path, extra: dict | None = None) -> None:
        """Little-endian float64 block plus a JSON sidecar ``<path>.json``."""
        with open(path, "wb") as fh:
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        meta = {"shape": list(self.values.shape), "dtype": "<f8", "order": "scenario,particle,step,coord",
                "T": self.grid.T, "n_steps": self.grid.n_steps, "plan": self.fingerprint, **(extra or {})}
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)

    @classmethod
    def from_binary(cls, path) -> "PathBundle":
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
        values = np.fromfile(path, dtype="<f8").reshape(meta["shape"])
        return cls(values, TimeGrid(meta["T"], meta["n_steps"]), meta["plan"])


def _write_text(path_or_buf, text: str) -> None:
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w", newline="") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# Controls
# ---------------------------------------------------------------------------


@dataclass
class FeedbackControl:
    """Control rule ``a = rule(k, t, x, m)`` evaluated on a whole time slice.

    ``x`` is ``(n_outer, n_inner, d)`` and ``m`` the matching summaries
    ``(n_outer, n_inner, J)``; the rule returns ``(n_outer, n_inner, k)``.
    Values are clipped into the control box by the simulator.
    """

    rule: Callable
    description: str = "feedback"

    def __call__(self, k, t, x, m):
        return self.rule(k, t, x, m)

    @classmethod
    def constant(cls, value, k: int | None = None) -> "FeedbackControl":
        value = np.atleast_1d(np.asarray(value, dtype=float))

        def rule(step, t, x, m):
            return np.broadcast_to(value, x.shape[:2] + value.shape)

        return cls(rule, f"constant({value.tolist()})")

    @classmethod
    def open_loop(cls, controls: np.ndarray) -> "FeedbackControl":
        """Replay a stored control process ``(n_outer, n_inner, n_steps, k)``."""
        controls = np.asarray(controls, dtype=float)

        def rule(step, t, x, m):
            return controls[:, :, step, :]

        return cls(rule, "open-loop")


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

SELF_CONSISTENT = "self-consistent"


def _summary_getter(model, flow, n_outer: int, n_steps: int):
    """Return ``get(k, x, cloud)`` producing summaries for time slice ``k``."""
    J = model.interaction.J
    if J == 0:
        return lambda k, x, cloud: np.zeros(x.shape[:2] + (0,))
    if isinstance(flow, str):
        if flow != SELF_CONSISTENT:
            raise ValueError(f"unknown flow mode {flow!r}")
        w = None

        def get(k, x, cloud):
            nonlocal w
            if w is None:
                w = np.full(cloud.shape[:2], 1.0 / cloud.shape[1])
            return model.interaction.summarize(cloud, w, x)

        return get
    if flow is None:
        raise ValueError("model depends on the measure; a flow (or 'self-consistent') is required")
    if isinstance(flow, np.ndarray):
        from .meanfield import SummaryFlow

        flow = SummaryFlow(flow)
    if flow.n_outer != n_outer or flow.n_steps != n_steps:
        raise ValueError(f"flow shape ({flow.n_outer} scenarios, {flow.n_steps} steps) does not match "
                         f"plan ({n_outer}, {n_steps})")
    return lambda k, x, cloud: flow.summaries_at(k, model.interaction, x)


def simulate_forward(model, plan: NoisePlan, control: FeedbackControl, flow=None,
                     return_controls: bool = False):
    """Euler-Maruyama for ``dX = b(t,X,m,a)dt + sigma dW + sigma0 dB``.

    Args:
        flow: where the measure summaries come from.  A ``ConditionalLawFlow``
            or ``SummaryFlow`` (frozen), an ``(n_outer, n_steps+1, J)`` array of
            frozen summaries, or ``"self-consistent"`` to recompute them from
            the running ensemble (conditional McKean-Vlasov particle scheme).
        return_controls: also return the applied controls
            ``(n_outer, n_inner, n_steps, k)``.

    Raises:
        SimulationError: when any state exceeds ``1e12`` or is not finite.
    """
    grid = plan.grid
    N, dt, times = grid.n_steps, grid.dt, grid.times
    n_outer, n_inner = plan.n_outer, plan.n_inner
    get_m = _summary_getter(model, flow, n_outer, N)
    box = model.control_box
    X = np.empty((n_outer, n_inner, N + 1, model.d))
    X[:, :, 0, :] = plan.xi
    controls = np.empty((n_outer, n_inner, N, model.k)) if return_controls else None
    for k in range(N):
        t = times[k]
        x = X[:, :, k, :]
        m = get_m(k, x, x)
        a = box.project(control(k, t, x, m))
        if controls is not None:
            controls[:, :, k, :] = a
        x_next = x + model.drift(t, x, m, a) * dt
        if plan.d1:
            x_next += np.einsum("oidj,oij->oid", model.sigma(t, x), plan.dW[:, :, k, :])
        if plan.d2:
            x_next += np.einsum("oidj,oj->oid", model.sigma0(t, x), plan.dB[:, k, :])
        bad = ~np.isfinite(x_next) | (np.abs(x_next) > BLOWUP_BOUND)
        if bad.any():
            o = int(np.argwhere(bad)[0][0])
            raise SimulationError(f"state blew up at step {k + 1} in scenario {o}", step=k + 1, scenario=o)
        X[:, :, k + 1, :] = x_next
    bundle = PathBundle(X, grid, plan.fingerprint)
    return (bundle, controls) if return_controls else bundle


# ---------------------------------------------------------------------------
# Lattice operations
# ---------------------------------------------------------------------------


def _check_compatible(xa: PathBundle, xb: PathBundle) -> None:
    if xa.fingerprint != xb.fingerprint:
        raise ValueError(f"bundles come from different noise plans ({xa.fingerprint} vs {xb.fingerprint})")
    if xa.values.shape != xb.values.shape:
        raise ValueError(f"bundle shapes differ: {xa.values.shape} vs {xb.values.shape}")


def path_meet(xa: PathBundle, xb: PathBundle) -> PathBundle:
    _check_compatible(xa, xb)
    return PathBundle(np.minimum(xa.values, xb.values), xa.grid, xa.fingerprint)


def path_join(xa: PathBundle, xb: PathBundle) -> PathBundle:
    _check_compatible(xa, xb)
    return PathBundle(np.maximum(xa.values, xb.values), xa.grid, xa.fingerprint)


@dataclass
class LatticeReport:
    meet_deviation: float
    join_deviation: float
    n_steps: int
    fingerprint: str
    details: dict = field(default_factory=dict)

    @property
    def deviation(self) -> float:
        return max(self.meet_deviation, self.join_deviation)

    def to_dict(self) -> dict:
        return {"meet_deviation": self.meet_deviation, "join_deviation": self.join_deviation,
                "deviation": self.deviation, "n_steps": self.n_steps, "plan": self.fingerprint}


def verify_trajectory_lattice(model, plan: NoisePlan, alpha: FeedbackControl, alpha_bar: FeedbackControl,
                              flow=None) -> LatticeReport:
    """Check that meets/joins of controlled trajectories are controlled trajectories.

    Simulates ``X^alpha`` and ``X^alpha_bar`` on shared noise, forms the
    coordinatewise switched controls (take ``alpha^i`` where
    ``X^{i,alpha} < X^{i,alpha_bar}``, else ``alpha_bar^i`` for the meet, and
    the mirror rule for the join), resimulates with them open-loop and
    reports the largest gap to the pointwise min/max of the two originals.
    Where the two paths coincide the switch follows the order at the next step.
    """
    if model.regime != "separable" or model.k != model.d:
        raise ValueError("trajectory lattice check needs the separable regime with k == d")
    xa, ca = simulate_forward(model, plan, alpha, flow, return_controls=True)
    xb, cb = simulate_forward(model, plan, alpha_bar, flow, return_controls=True)
    va, vb = xa.values, xb.values
    # ties (e.g. a shared initial state) follow whichever path is ordered at the next step
    tie = va[:, :, :-1, :] == vb[:, :, :-1, :]
    below = (va[:, :, :-1, :] < vb[:, :, :-1, :]) | (tie & (va[:, :, 1:, :] <= vb[:, :, 1:, :]))
    above = (va[:, :, :-1, :] > vb[:, :, :-1, :]) | (tie & (va[:, :, 1:, :] >= vb[:, :, 1:, :]))
    c_meet = np.where(below, ca, cb)
    c_join = np.where(above, ca, cb)
    x_meet = simulate_forward(model, plan, FeedbackControl.open_loop(c_meet), flow)
    x_join = simulate_forward(model, plan, FeedbackControl.open_loop(c_join), flow)
    dev_meet = float(np.max(np.abs(x_meet.values - path_meet(xa, xb).values)))
    dev_join = float(np.max(np.abs(x_join.values - path_join(xa, xb).values)))
    return LatticeReport(dev_meet, dev_join, plan.grid.n_steps, plan.fingerprint)
