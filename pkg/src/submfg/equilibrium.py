"""Best replies, bracket processes, monotone learning, fictitious play, comparison runs.

Every run shares one noise plan, so iterates are coupled pathwise and
dominance and distances are measured on identical randomness.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .fbsde import BsdeSolution, Decoupling, PicardSettings, RegressionBasis, solve_fbsde_picard
from .meanfield import (SummaryFlow, check_dominance_pathwise, conditional_empirical_law, conditional_w2_gap,
                        mix_flows, pathspace_distance)
from .model import ControlBox, InteractionSpec, ModelSpec
from .sde import FeedbackControl, NoisePlan, PathBundle, SELF_CONSISTENT, SimulationError, simulate_forward

log = logging.getLogger(__name__)

MINIMAL, MAXIMAL = "minimal", "maximal"
EXTREMAL_DRIFT, USER_BRACKET, ZERO_START = "extremal-drift", "user-bracket", "zero-start"
TOL_REACHED, MAX_ITERS, DIVERGENCE = "tol-reached", "max-iters", "divergence"


@dataclass(frozen=True)
class EquilibriumSettings:
    """Solver and outer-loop controls.

    Tolerances are relative to the state scale ``max(1, pi-RMS)`` of the
    starting bracket.

    Attributes:
        tol_rel: path-space Cauchy stopping tolerance.
        mono_tol_rel: allowed monotonicity violation before a run is flagged.
        warm_start: start each Picard solve from the previous decoupling.
        fp_stop: ``"scaled"`` stops fictitious play when ``n * d_n <= tol``
            (``d_n`` the distance between consecutive iterates), ``"plain"``
            when ``d_n <= tol``.
        fp_cap: optional particle cap for pooled mixture clouds.
    """

    picard: PicardSettings = field(default_factory=PicardSettings)
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    tol_rel: float = 1e-4
    mono_tol_rel: float = 1e-3
    max_outer: int = 40
    fp_max_iters: int = 200
    fp_stop: str = "scaled"
    fp_cap: int | None = None
    warm_start: bool = True
    keep_bundles: bool = False

    def __post_init__(self):
        if not self.tol_rel > 0 or not self.mono_tol_rel > 0:
            raise ValueError("tolerances must be positive")
        if self.max_outer < 1 or self.fp_max_iters < 1:
            raise ValueError("iteration caps must be at least 1")
        if self.fp_stop not in ("scaled", "plain"):
            raise ValueError(f"fp_stop must be 'scaled' or 'plain', got {self.fp_stop!r}")


# ---------------------------------------------------------------------------
# Brackets
# ---------------------------------------------------------------------------


class _BracketDynamics:
    """Uncontrolled dynamics with drift ``b~1(t, x) + b~2(t)``."""

    def __init__(self, model: ModelSpec, upper: bool):
        self.model = model
        self.d, self.k = model.d, 0
        self.control_box = ControlBox(np.zeros(0), np.zeros(0))
        self.interaction = InteractionSpec.none()
        self.sigma, self.sigma0 = model.sigma, model.sigma0
        self.pick = np.maximum if upper else np.minimum
        lo_a, hi_a = model.control_box.lower, model.control_box.upper
        self.a_ends = (lo_a, hi_a)
        if model.drift_measure_dependent:
            inter = model.interaction
            if not inter.bounded:
                raise ValueError("extremal-drift bracket needs a bounded summary range when the drift "
                                 "depends on the measure; use a user bracket")
            self.corners = [np.array(c) for c in itertools.product(*zip(inter.lower, inter.upper))]
        else:
            self.corners = [np.clip(np.zeros(model.J), model.interaction.lower, model.interaction.upper)]

    def b2_tilde(self, t):
        B2 = self.model.b2(t)
        lo, hi = self.a_ends
        return self.pick(B2 * lo, B2 * hi).sum(axis=1)

    def drift(self, t, x, m, a):
        vals = [self.model.b1(t, x, np.broadcast_to(c, x.shape[:-1] + c.shape)) for c in self.corners]
        b1 = vals[0]
        for v in vals[1:]:
            b1 = self.pick(b1, v)
        return b1 + self.b2_tilde(t)


def _bracket(model: ModelSpec, plan: NoisePlan, upper: bool, mode: str, bracket=None) -> PathBundle:
    if mode == USER_BRACKET:
        if not isinstance(bracket, PathBundle):
            raise ValueError("user-bracket mode needs a PathBundle")
        if bracket.fingerprint != plan.fingerprint:
            raise ValueError("user bracket was simulated on a different noise plan")
        return bracket
    if mode == ZERO_START:
        zero = np.clip(np.zeros(model.k), model.control_box.lower, model.control_box.upper)
        flow = SELF_CONSISTENT if model.J else None
        return simulate_forward(model, plan, FeedbackControl.constant(zero), flow)
    if mode != EXTREMAL_DRIFT:
        raise ValueError(f"unknown bracket mode {mode!r}")
    if not model.control_box.bounded:
        raise ValueError("extremal-drift bracket needs a bounded control box; use a user bracket")
    dyn = _BracketDynamics(model, upper)
    return simulate_forward(dyn, plan, FeedbackControl.constant(np.zeros(0)))


def lower_bound_process(model: ModelSpec, plan: NoisePlan, mode: str = EXTREMAL_DRIFT, bracket=None) -> PathBundle:
    """Sub-bracket ``M0`` below every best reply.

    ``extremal-drift`` simulates ``dM = (b~1(t, M) + b~2(t)) dt + sigma dW + sigma0 dB``
    with ``b~2_i = sum_l min(b2_il lo_l, b2_il hi_l)`` and ``b~1`` the
    coordinatewise minimum of ``b1`` over the corners of the summary range.
    """
    return _bracket(model, plan, False, mode, bracket)


def upper_bound_process(model: ModelSpec, plan: NoisePlan, mode: str = EXTREMAL_DRIFT, bracket=None) -> PathBundle:
    """Super-bracket; the mirror image of :func:`lower_bound_process`."""
    return _bracket(model, plan, True, mode, bracket)


@dataclass(eq=False)
class BracketInit:
    """Starting bundles for the learning procedures.

    Attributes:
        mode: ``extremal-drift``, ``user-bracket`` or ``zero-start``.
        lower: sub-bracket, or None.
        upper: super-bracket, or None.
        violation: dominance violation of ``lower <= upper`` when both exist.
    """

    mode: str
    lower: PathBundle | None = None
    upper: PathBundle | None = None
    violation: float | None = None


def make_bracket(model: ModelSpec, plan: NoisePlan, mode: str = EXTREMAL_DRIFT, lower: PathBundle | None = None,
                 upper: PathBundle | None = None, which: str = "both", tol: float | None = None) -> BracketInit:
    """Build lower and/or upper brackets and check their order.

    Args:
        which: ``"lower"``, ``"upper"`` or ``"both"``.
        tol: allowed violation of ``lower <= upper``; defaults to
            ``1e-12 * state scale``.

    Raises:
        ValueError: when the brackets are out of order by more than ``tol``.
    """
    lo = lower_bound_process(model, plan, mode, lower) if which in ("lower", "both") else None
    hi = upper_bound_process(model, plan, mode, upper) if which in ("upper", "both") else None
    viol = None
    if lo is not None and hi is not None:
        viol = check_dominance_pathwise(lo, hi).violation
        limit = tol if tol is not None else 1e-12 * max(lo.state_scale(), hi.state_scale())
        if viol > limit:
            raise ValueError(f"lower bracket is not below the upper bracket (violation {viol:.3g})")
    return BracketInit(mode, lo, hi, viol)


# ---------------------------------------------------------------------------
# Best reply
# ---------------------------------------------------------------------------


def project_flow(model: ModelSpec, X: PathBundle):
    """Conditional law of ``X`` given the common noise, in the form the model needs.

    Scalar-type interactions only need the summaries, which are returned as
    a :class:`SummaryFlow`; otherwise the full cloud flow.
    """
    law = conditional_empirical_law(X)
    if model.interaction.kind == "scalar":
        return SummaryFlow(law.summary_path(model.interaction), "single-ensemble")
    return law


def best_reply(model: ModelSpec, plan: NoisePlan, flow, settings: EquilibriumSettings | None = None,
               initial: Decoupling | None = None):
    """``Gamma(mu)``: optimal trajectories against a frozen flow, with their adjoint."""
    settings = settings or EquilibriumSettings()
    return solve_fbsde_picard(model, plan, flow, settings.picard, settings.basis, initial=initial)


def best_reply_process(model: ModelSpec, plan: NoisePlan, M: PathBundle, settings=None, initial=None):
    """``R(M) = Gamma(p(M))``."""
    return best_reply(model, plan, project_flow(model, M), settings, initial)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = ("iter", "distance", "V", "W2_0", "W2_half", "W2_T", "picard_iters")


@dataclass
class IterationRecord:
    iter: int
    distance: float
    V: float
    V_max: float
    W2_0: float
    W2_half: float
    W2_T: float
    picard_iters: int
    picard_converged: bool
    seconds: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"iter": self.iter, "distance": self.distance, "V": self.V, "V_max": self.V_max,
               "W2_0": self.W2_0, "W2_half": self.W2_half, "W2_T": self.W2_T,
               "picard_iters": self.picard_iters, "picard_converged": self.picard_converged,
               "seconds": self.seconds}
        out.update(self.extra)
        return out


@dataclass
class ConvergenceReport:
    """Per-iteration diagnostics of an outer loop.

    ``records[n-1]`` compares iterate ``n`` with iterate ``n-1``;
    ``converged_at`` is the index of the first iterate whose successor lies
    within ``tol`` of it.
    """

    records: list
    stop_reason: str
    converged_at: int | None
    tol: float
    mono_tol: float
    scale: float
    plan: str
    flagged: bool = False
    notes: list = field(default_factory=list)

    @property
    def distances(self) -> list:
        return [r.distance for r in self.records]

    @property
    def violations(self) -> list:
        return [r.V for r in self.records]

    def summary_csv(self, version: str = "") -> str:
        buf = io.StringIO()
        buf.write(f"# plan={self.plan}")
        if version:
            buf.write(f" version={version}")
        buf.write("\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in self.records:
            w.writerow([r.iter] + [f"{v:.17g}" for v in (r.distance, r.V, r.W2_0, r.W2_half, r.W2_T)]
                       + [r.picard_iters])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"stop_reason": self.stop_reason, "converged_at": self.converged_at, "tol": self.tol,
                "mono_tol": self.mono_tol, "scale": self.scale, "plan": self.plan, "flagged": self.flagged,
                "notes": self.notes, "records": [r.to_dict() for r in self.records]}


@dataclass(eq=False)
class EquilibriumRun:
    """Outcome of a learning or fictitious-play run."""

    model: ModelSpec
    plan: NoisePlan
    settings: EquilibriumSettings
    direction: str
    report: ConvergenceReport
    X: PathBundle
    solution: BsdeSolution | None
    X0: PathBundle
    bundles: list = field(default_factory=list)
    flows: list = field(default_factory=list)
    kind: str = "best-reply"

    @property
    def converged(self) -> bool:
        return self.report.stop_reason == TOL_REACHED


def _record(n, X_new, X_old, direction, picard, seconds, extra=None) -> IterationRecord:
    N = X_new.grid.n_steps
    lo, hi = (X_old, X_new) if direction == MINIMAL else (X_new, X_old)
    dom = check_dominance_pathwise(lo, hi)
    return IterationRecord(
        n, pathspace_distance(X_new, X_old), dom.violation, dom.max_violation,
        conditional_w2_gap(X_new, X_old, 0), conditional_w2_gap(X_new, X_old, N // 2),
        conditional_w2_gap(X_new, X_old, N),
        picard.iterations if picard else 0, bool(picard.converged) if picard else True,
        round(seconds, 6), extra or {})


# ---------------------------------------------------------------------------
# Learning procedure
# ---------------------------------------------------------------------------


def _start(model, plan, direction, mode, bracket):
    if isinstance(bracket, BracketInit):
        X0 = bracket.lower if direction == MINIMAL else bracket.upper
        if X0 is None:
            raise ValueError(f"bracket has no {'lower' if direction == MINIMAL else 'upper'} bundle")
        mode, bracket = USER_BRACKET, X0
    return (lower_bound_process if direction == MINIMAL else upper_bound_process)(model, plan, mode, bracket)


def _flow_matters(model) -> bool:
    # a cold solve of a flow-independent problem reproduces the previous reply exactly
    return model.J > 0 and model.measure_dependent


def _check_direction(direction):
    if direction not in (MINIMAL, MAXIMAL):
        raise ValueError(f"direction must be {MINIMAL!r} or {MAXIMAL!r}, got {direction!r}")


def iterate_best_reply(model: ModelSpec, plan: NoisePlan, direction: str = MINIMAL,
                       settings: EquilibriumSettings | None = None, bracket_mode: str = EXTREMAL_DRIFT,
                       bracket: "PathBundle | BracketInit | None" = None) -> EquilibriumRun:
    """Iterate ``X^{n+1} = R(X^n)`` from the lower (minimal) or upper (maximal) bracket.

    Stops at the first ``n`` with ``|X^n - X^{n-1}|_path <= tol``.  A record
    whose monotonicity violation exceeds ``mono_tol`` flags the run; a solver
    failure ends it with stop reason ``divergence``.
    """
    _check_direction(direction)
    settings = settings or EquilibriumSettings()
    X0 = _start(model, plan, direction, bracket_mode, bracket)
    scale = X0.state_scale()
    tol, mono_tol = settings.tol_rel * scale, settings.mono_tol_rel * scale
    warm = settings.warm_start and _flow_matters(model)
    records, bundles = [], [X0] if settings.keep_bundles else []
    X_prev, sol, dec = X0, None, None
    stop, converged_at = MAX_ITERS, None
    notes = []
    for n in range(1, settings.max_outer + 1):
        t0 = time.perf_counter()
        try:
            X, sol_new = best_reply_process(model, plan, X_prev, settings, dec if warm else None)
        except (SimulationError, np.linalg.LinAlgError, ValueError) as exc:
            stop = DIVERGENCE
            notes.append(f"iteration {n}: {exc}")
            break
        sol, dec = sol_new, sol_new.decoupling
        rec = _record(n, X, X_prev, direction, sol.picard, time.perf_counter() - t0)
        records.append(rec)
        log.info("%s iteration %d: distance %.3e, V %.3e, %d Picard sweeps", direction, n, rec.distance, rec.V,
                 rec.picard_iters)
        if settings.keep_bundles:
            bundles.append(X)
        if not np.isfinite(rec.distance):
            stop = DIVERGENCE
            break
        X_prev = X
        if rec.distance <= tol:
            stop, converged_at = TOL_REACHED, n - 1
            break
    flagged = stop != TOL_REACHED or any(r.V > mono_tol for r in records)
    report = ConvergenceReport(records, stop, converged_at, tol, mono_tol, scale, plan.fingerprint, flagged, notes)
    return EquilibriumRun(model, plan, settings, direction, report, X_prev, sol, X0, bundles)


def bundle_residual(model: ModelSpec, plan: NoisePlan, X: PathBundle, settings: EquilibriumSettings | None = None,
                    initial: Decoupling | None = None) -> float:
    """``|R(X) - X|_path`` for any bundle on ``plan``."""
    X_next, _ = best_reply_process(model, plan, X, settings, initial if _flow_matters(model) else None)
    return pathspace_distance(X_next, X)


def equilibrium_residual(model: ModelSpec, run: EquilibriumRun, settings: EquilibriumSettings | None = None) -> float:
    """Fixed-point residual ``|R(X) - X|_path`` of the run's final iterate."""
    settings = settings or run.settings
    dec = run.solution.decoupling if settings.warm_start and run.solution is not None else None
    return bundle_residual(model, run.plan, run.X, settings, dec)


# ---------------------------------------------------------------------------
# Fictitious play
# ---------------------------------------------------------------------------


def _summary_values(model, flow):
    if isinstance(flow, SummaryFlow):
        return flow.values
    if model.interaction.kind == "scalar":
        return flow.summary_path(model.interaction)
    return None


def fictitious_play(model: ModelSpec, plan: NoisePlan, settings: EquilibriumSettings | None = None,
                    start: "str | BracketInit" = EXTREMAL_DRIFT, bracket: PathBundle | None = None,
                    reference: EquilibriumRun | None = None) -> EquilibriumRun:
    """Best replies against the running average of past conditional laws.

    ``X^1`` is the lower bracket and ``mu^1 = p(X^1)``; then
    ``X^{n+1} = Gamma(mu^n)`` and ``mu^{n+1} = (p(X^{n+1}) + n mu^n) / (n + 1)``.
    For scalar-type interactions the average is carried exactly through the
    summaries; otherwise clouds are pooled.  Each record also stores the
    largest decrease of any summary between consecutive averages
    (``summary_drop``), and ``reference_distance`` when a best-reply run is
    given for cross-checking.
    """
    settings = settings or EquilibriumSettings()
    X1 = _start(model, plan, MINIMAL, start, start if isinstance(start, BracketInit) else bracket)
    scale = X1.state_scale()
    tol, mono_tol = settings.tol_rel * scale, settings.mono_tol_rel * scale
    warm = settings.warm_start and _flow_matters(model)
    mu = project_flow(model, X1) if model.J else None
    flows = [mu]
    records, bundles = [], [X1] if settings.keep_bundles else []
    X_prev, sol, dec = X1, None, None
    stop, converged_at, notes = MAX_ITERS, None, []
    for n in range(1, settings.fp_max_iters + 1):
        t0 = time.perf_counter()
        try:
            X, sol_new = best_reply(model, plan, mu, settings, dec if warm else None)
        except (SimulationError, np.linalg.LinAlgError, ValueError) as exc:
            stop = DIVERGENCE
            notes.append(f"iteration {n + 1}: {exc}")
            break
        sol, dec = sol_new, sol_new.decoupling
        extra = {}
        if model.J:
            new_law = project_flow(model, X)
            mu_next = mix_flows([new_law, mu], [1.0 / (n + 1), n / (n + 1.0)], cap=settings.fp_cap)
            before, after = _summary_values(model, mu), _summary_values(model, mu_next)
            if before is not None:
                extra["summary_drop"] = float(max(0.0, np.max(before - after)))
            mu = mu_next
            if settings.keep_bundles:
                flows.append(mu)
        rec = _record(n + 1, X, X_prev, MINIMAL, sol.picard, time.perf_counter() - t0, extra)
        if reference is not None:
            rec.extra["reference_distance"] = pathspace_distance(X, reference.X)
        records.append(rec)
        log.info("fictitious play iterate %d: distance %.3e", n + 1, rec.distance)
        if settings.keep_bundles:
            bundles.append(X)
        X_prev = X
        if not np.isfinite(rec.distance):
            stop = DIVERGENCE
            break
        crit = rec.distance * (n if settings.fp_stop == "scaled" else 1)
        if crit <= tol:
            stop, converged_at = TOL_REACHED, n
            break
    flagged = stop != TOL_REACHED or any(r.V > mono_tol for r in records)
    report = ConvergenceReport(records, stop, converged_at, tol, mono_tol, scale, plan.fingerprint, flagged, notes)
    return EquilibriumRun(model, plan, settings, MINIMAL, report, X_prev, sol, X1, bundles, flows,
                          kind="fictitious-play")


# ---------------------------------------------------------------------------
# Comparison harness
# ---------------------------------------------------------------------------


@dataclass
class ComparisonReport:
    """Dominance of the best replies to two ordered flows.

    ``V_X`` measures the violation of ``X^A <= X^B``; ``V_Y`` (nonseparable
    regime only) that of ``Y^B <= Y^A``.
    """

    V_X: float
    V_X_max: float
    V_Y: float | None
    scale: float
    tol: float
    distance: float
    plan: str

    @property
    def passed(self) -> bool:
        return self.V_X <= self.tol and (self.V_Y is None or self.V_Y <= self.tol)

    def to_dict(self) -> dict:
        return {"V_X": self.V_X, "V_X_max": self.V_X_max, "V_Y": self.V_Y, "scale": self.scale,
                "tol": self.tol, "distance": self.distance, "passed": self.passed, "plan": self.plan}


def comparison_harness(model: ModelSpec, plan: NoisePlan, flow_a, flow_b,
                       settings: EquilibriumSettings | None = None):
    """Solve against ``flow_a <= flow_b`` on shared noise and report dominance.

    Returns:
        ``(report, (X_a, sol_a), (X_b, sol_b))``.
    """
    settings = settings or EquilibriumSettings()
    Xa, sa = best_reply(model, plan, flow_a, settings)
    Xb, sb = best_reply(model, plan, flow_b, settings)
    scale = max(Xa.state_scale(), Xb.state_scale())
    dom = check_dominance_pathwise(Xa, Xb)
    V_Y = None
    if model.regime == "nonseparable":
        Ya = PathBundle(sa.Y, sa.grid, sa.fingerprint)
        Yb = PathBundle(sb.Y, sb.grid, sb.fingerprint)
        V_Y = check_dominance_pathwise(Yb, Ya).violation
    rep = ComparisonReport(dom.violation, dom.max_violation, V_Y, scale, settings.mono_tol_rel * scale,
                           pathspace_distance(Xa, Xb), plan.fingerprint)
    return rep, (Xa, sa), (Xb, sb)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def write_run_artifacts(run: EquilibriumRun, directory, version: str = "", formats=("binary",),
                        prefix: str = "") -> dict:
    """Write the report, summary table, timings and final bundle of a run."""
    os.makedirs(directory, exist_ok=True)
    paths = {}
    rep = run.report
    p = os.path.join(directory, f"{prefix}iterations.jsonl")
    with open(p, "w") as fh:
        for r in rep.records:
            fh.write(json.dumps({"plan": rep.plan, "version": version, **r.to_dict()}, sort_keys=True) + "\n")
    paths["iterations"] = p
    p = os.path.join(directory, f"{prefix}summary.csv")
    with open(p, "w", newline="") as fh:
        fh.write(rep.summary_csv(version))
    paths["summary"] = p
    p = os.path.join(directory, f"{prefix}timings.csv")
    with open(p, "w", newline="") as fh:
        fh.write(f"# plan={rep.plan}" + (f" version={version}" if version else "") + "\n")
        fh.write("iter,seconds\n" + "".join(f"{r.iter},{r.seconds}\n" for r in rep.records))
    paths["timings"] = p
    p = os.path.join(directory, f"{prefix}report.json")
    meta = rep.to_dict()
    meta.update(kind=run.kind, direction=run.direction, version=version)
    with open(p, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    paths["report"] = p
    if "binary" in formats:
        p = os.path.join(directory, f"{prefix}final_X.bin")
        run.X.to_binary(p, {"version": version} if version else None)
        paths["final_X"] = p
    if "csv" in formats:
        p = os.path.join(directory, f"{prefix}final_X.csv")
        run.X.to_csv(p, extra={"version": version} if version else None)
        paths["final_X_csv"] = p
        if run.solution is not None:
            p = os.path.join(directory, f"{prefix}final_Y.csv")
            run.solution.to_csv(p, {"version": version} if version else None)
            paths["final_Y_csv"] = p
    return paths
