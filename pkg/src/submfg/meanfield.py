"""Conditional empirical laws, interaction summaries, dominance and distances.

A flow holds, for every common-noise scenario and time step, a weighted
particle cloud standing for the conditional law of the state given ``B``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .sde import PathBundle, TimeGrid, _write_text

WEIGHT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ConditionalLawFlow:
    """Weighted clouds ``points[outer, step, particle, coord]``.

    Attributes:
        weights: ``(n_outer, n_steps + 1, n_cloud)``, positive, summing to 1
            over the particle axis.
        provenance: ``"single-ensemble"`` or ``"mixture(n)"``.
    """

    points: np.ndarray
    weights: np.ndarray
    grid: TimeGrid
    fingerprint: str
    provenance: str = "single-ensemble"

    def __post_init__(self):
        if self.points.shape[:3] != self.weights.shape:
            raise ValueError(f"points {self.points.shape} and weights {self.weights.shape} disagree")
        if self.points.shape[1] != self.grid.n_steps + 1:
            raise ValueError("flow length does not match the time grid")
        total = self.weights.sum(axis=2)
        if np.max(np.abs(total - 1.0)) > WEIGHT_TOL * max(1, self.weights.shape[2]):
            raise ValueError("cloud weights must sum to one")

    @property
    def n_outer(self) -> int:
        return self.points.shape[0]

    @property
    def n_steps(self) -> int:
        return self.points.shape[1] - 1

    @property
    def d(self) -> int:
        return self.points.shape[3]

    @property
    def cloud_size(self) -> int:
        return self.points.shape[2]

    def cloud(self, step: int, outer: int) -> tuple[np.ndarray, np.ndarray]:
        return self.points[outer, step], self.weights[outer, step]

    def summaries_at(self, k: int, interaction, x: np.ndarray) -> np.ndarray:
        return interaction.summarize(self.points[:, k], self.weights[:, k], x)

    def summary_path(self, interaction) -> np.ndarray:
        """Scalar-type summaries ``(n_outer, n_steps + 1, J)``."""
        if interaction.kind != "scalar":
            raise ValueError("summary paths exist only for scalar-type interactions")
        return np.stack([interaction.moments(self.points[:, k], self.weights[:, k])
                         for k in range(self.n_steps + 1)], axis=1)

    def shifted(self, delta) -> "ConditionalLawFlow":
        """Every particle moved by ``delta``; dominates ``self`` when ``delta >= 0``."""
        delta = np.broadcast_to(np.asarray(delta, dtype=float), (self.d,))
        return ConditionalLawFlow(self.points + delta, self.weights, self.grid, self.fingerprint,
                                  f"{self.provenance}+shift")

    def to_csv(self, path_or_buf) -> None:
        """Rows ``scenario, step, particle, x1..xd, weight``."""
        o, n, c, d = self.points.shape
        idx = np.indices((o, n, c)).reshape(3, -1).T
        data = np.hstack([idx, self.points.reshape(-1, d), self.weights.reshape(-1, 1)])
        body = io.StringIO()
        np.savetxt(body, data, fmt="%d,%d,%d" + ",%.17g" * (d + 1))
        header = ",".join(["scenario", "step", "particle"] + [f"x{j + 1}" for j in range(d)] + ["weight"])
        _write_text(path_or_buf, f"# plan={self.fingerprint}\n# provenance={self.provenance}\n"
                    f"{header}\n{body.getvalue()}")


@dataclass(frozen=True, eq=False)
class SummaryFlow:
    """A flow known only through its scalar-type summaries.

    Exact stand-in for a ``ConditionalLawFlow`` whenever the model sees the
    measure through moments ``<phi_j, mu>`` only; mixtures of such flows are
    the weighted averages of their summaries.
    """

    values: np.ndarray  # (n_outer, n_steps + 1, J)
    provenance: str = "summaries"

    @property
    def n_outer(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1] - 1

    def summaries_at(self, k: int, interaction, x: np.ndarray) -> np.ndarray:
        if interaction.kind != "scalar":
            raise ValueError("summary-only flows cannot serve order-1 interactions")
        return np.broadcast_to(self.values[:, k, None, :], x.shape[:2] + (self.values.shape[2],))

    def summary_path(self, interaction=None) -> np.ndarray:
        return self.values


@dataclass
class MeasureSummary:
    m: np.ndarray
    norm1: float
    norm2: float


def conditional_empirical_law(X: PathBundle) -> ConditionalLawFlow:
    """Uniform-weight cloud of the inner particles per (scenario, step)."""
    points = np.ascontiguousarray(X.values.transpose(0, 2, 1, 3))
    n_outer, n_t, n_inner, _ = points.shape
    weights = np.full((n_outer, n_t, n_inner), 1.0 / n_inner)
    return ConditionalLawFlow(points, weights, X.grid, X.fingerprint)


def summaries(flow: ConditionalLawFlow, interaction, t_index: int, outer: int, x=None) -> MeasureSummary:
    """Interaction summary of one cloud, with its first two absolute moments.

    For order-1 interactions ``x`` (the evaluation point) is required.
    """
    pts, w = flow.cloud(t_index, outer)
    if interaction.kind == "scalar":
        m = interaction.moments(pts[None], w[None])[0]
    else:
        if x is None:
            raise ValueError("order-1 summaries need an evaluation point x")
        xq = np.asarray(x, dtype=float).reshape(1, 1, -1)
        m = interaction.summarize(pts[None], w[None], xq)[0, 0]
    norms = np.linalg.norm(pts, axis=1)
    return MeasureSummary(np.asarray(m, dtype=float), float(w @ norms), float(np.sqrt(w @ norms ** 2)))


def mix_flows(flows, weights=None, cap: int | None = None):
    """Mixture of flows on the same plan.

    ``weights`` default to ``1/n`` each.  ``SummaryFlow`` inputs are mixed by
    averaging summaries.  With ``cap`` the pooled clouds are thinned by
    deterministic systematic resampling to at most ``cap`` particles.
    """
    flows = list(flows)
    if not flows:
        raise ValueError("nothing to mix")
    n = len(flows)
    lam = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    if lam.shape != (n,) or np.any(lam < 0) or abs(lam.sum() - 1) > 1e-12:
        raise ValueError("mixture weights must be nonnegative and sum to one")
    provenance = f"mixture({n})"
    if all(isinstance(f, SummaryFlow) for f in flows):
        shape = flows[0].values.shape
        if any(f.values.shape != shape for f in flows):
            raise ValueError("summary flows have different shapes")
        return SummaryFlow(np.tensordot(lam, np.stack([f.values for f in flows]), axes=1), provenance)
    if not all(isinstance(f, ConditionalLawFlow) for f in flows):
        raise TypeError("cannot mix cloud flows with summary-only flows")
    ref = flows[0]
    for f in flows[1:]:
        if f.fingerprint != ref.fingerprint or f.points.shape[:2] != ref.points.shape[:2] or f.d != ref.d:
            raise ValueError("flows are on different plans or grids")
    points = np.concatenate([f.points for f in flows], axis=2)
    w = np.concatenate([lam[i] * f.weights for i, f in enumerate(flows)], axis=2)
    if cap is not None and points.shape[2] > cap:
        points, w = _systematic_thin(points, w, cap)
    return ConditionalLawFlow(points, w, ref.grid, ref.fingerprint, provenance)


def _systematic_thin(points, weights, cap):
    n_o, n_t, _, d = points.shape
    u = (np.arange(cap) + 0.5) / cap
    cdf = np.cumsum(weights, axis=2)
    cdf[..., -1] = 1.0
    idx = np.empty((n_o, n_t, cap), dtype=int)
    for o in range(n_o):
        for k in range(n_t):
            idx[o, k] = np.searchsorted(cdf[o, k], u)
    new_pts = np.take_along_axis(points, idx[..., None], axis=2)
    return new_pts, np.full((n_o, n_t, cap), 1.0 / cap)


# ---------------------------------------------------------------------------
# Dominance
# ---------------------------------------------------------------------------


@dataclass
class DominanceReport:
    """Violation of ``Xa <= Xb``.

    ``violation`` is ``E[int sum_i (Xa^i - Xb^i)^+ dpi] / d``; ``normalized``
    divides it by the mass ``2 + T`` of ``pi``.
    """

    violation: float
    max_violation: float
    normalized: float
    tol: float
    passed: bool
    witness: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"violation": self.violation, "max_violation": self.max_violation,
                "normalized": self.normalized, "tol": self.tol, "passed": self.passed,
                "witness": self.witness}


def check_dominance_pathwise(Xa: PathBundle, Xb: PathBundle, tol: float = 0.0) -> DominanceReport:
    if Xa.fingerprint != Xb.fingerprint or Xa.shape != Xb.shape:
        raise ValueError("pathwise dominance needs bundles on the same plan")
    pos = np.maximum(Xa.values - Xb.values, 0.0)
    per_path = pos.mean(axis=3) @ Xa.grid.pi_weights
    v = float(per_path.mean())
    worst = float(pos.max())
    witness = {}
    if worst > 0:
        o, i, k, c = (int(j) for j in np.unravel_index(np.argmax(pos), pos.shape))
        witness = {"scenario": o, "particle": i, "step": k, "coord": c, "gap": worst}
    return DominanceReport(v, worst, v / (2.0 + Xa.grid.T), tol, v <= tol, witness)


A_LE_B, B_LE_A, EQUAL, INCOMPARABLE = "A<=stB", "B<=stA", "equal", "incomparable"


def _as_cloud(cloud, weights):
    pts = np.asarray(cloud, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] == 0:
        raise ValueError("empty cloud")
    w = np.full(pts.shape[0], 1.0 / pts.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    return pts, w


def _cdf(values, weights, at):
    order = np.argsort(values, kind="stable")
    v, cw = values[order], np.cumsum(weights[order])
    idx = np.searchsorted(v, at, side="right")
    return np.where(idx > 0, cw[np.maximum(idx - 1, 0)], 0.0)


def check_dominance_1d_cdf(cloud_a, cloud_b, weights_a=None, weights_b=None, tol: float = 1e-12) -> str:
    """Compare clouds through their coordinate marginals.

    ``A <=st B`` on a coordinate iff ``F_A >= F_B`` at every pooled support
    point.  Exact for ``d = 1``; for ``d > 1`` agreement on every marginal is
    only a necessary condition for multivariate dominance.
    """
    a, wa = _as_cloud(cloud_a, weights_a)
    b, wb = _as_cloud(cloud_b, weights_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("clouds have different dimensions")
    verdicts = []
    for j in range(a.shape[1]):
        s = np.union1d(a[:, j], b[:, j])
        diff = _cdf(a[:, j], wa, s) - _cdf(b[:, j], wb, s)
        a_le = bool(np.all(diff >= -tol))
        b_le = bool(np.all(diff <= tol))
        verdicts.append(EQUAL if a_le and b_le else A_LE_B if a_le else B_LE_A if b_le else INCOMPARABLE)
    if all(v == EQUAL for v in verdicts):
        return EQUAL
    if all(v in (EQUAL, A_LE_B) for v in verdicts):
        return A_LE_B
    if all(v in (EQUAL, B_LE_A) for v in verdicts):
        return B_LE_A
    return INCOMPARABLE


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def wasserstein2_empirical_1d(cloud_a, cloud_b, weights_a=None, weights_b=None) -> float:
    """Exact ``W2`` between two weighted 1-d empirical measures.

    Integrates ``(F_A^{-1}(u) - F_B^{-1}(u))^2`` over ``u`` in ``(0, 1)``;
    both quantile functions are step functions, so the integral is a finite
    sum over the merged breakpoints.
    """
    a, wa = _as_cloud(cloud_a, weights_a)
    b, wb = _as_cloud(cloud_b, weights_b)
    if a.shape[1] != 1 or b.shape[1] != 1:
        raise ValueError("wasserstein2_empirical_1d takes 1-d clouds")
    a, b = a[:, 0], b[:, 0]
    ia, ib = np.argsort(a, kind="stable"), np.argsort(b, kind="stable")
    a, wa, b, wb = a[ia], wa[ia] / wa.sum(), b[ib], wb[ib] / wb.sum()
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    u = np.union1d(ca, cb)
    du = np.diff(np.concatenate([[0.0], u]))
    mid = u - du / 2
    qa = a[np.minimum(np.searchsorted(ca, mid, side="left"), a.size - 1)]
    qb = b[np.minimum(np.searchsorted(cb, mid, side="left"), b.size - 1)]
    return float(np.sqrt(np.sum(du * (qa - qb) ** 2)))


def pathspace_distance(Xa: PathBundle, Xb: PathBundle) -> float:
    """``(E[sup_k |Xa_k - Xb_k|^2])^{1/2}`` under the shared-noise coupling.

    An upper bound on the path-space Wasserstein distance between the two
    (conditional) laws.
    """
    if Xa.shape != Xb.shape:
        raise ValueError(f"bundle shapes differ: {Xa.shape} vs {Xb.shape}")
    if Xa.fingerprint != Xb.fingerprint:
        raise ValueError("path-space distance needs bundles on the same plan")
    sup = np.max(np.sum((Xa.values - Xb.values) ** 2, axis=3), axis=2)
    return float(np.sqrt(np.mean(sup)))


def conditional_w2_gap(Xa: PathBundle, Xb: PathBundle, step: int) -> float:
    """Mean over scenarios of the root-sum-square of marginal ``W2`` gaps at ``step``."""
    total = 0.0
    for o in range(Xa.shape[0]):
        sq = sum(wasserstein2_empirical_1d(Xa.values[o, :, step, j], Xb.values[o, :, step, j]) ** 2
                 for j in range(Xa.d))
        total += np.sqrt(sq)
    return float(total / Xa.shape[0])
