"""Acceptance battery: one test per criterion, each recording a PASS/FAIL line.

The pipeline criteria run the shipped configs in ``configs/acceptance`` through
the command-line runner, so criterion 9 can rerun the identical battery and
compare the emitted CSV summaries byte for byte.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from expr_corpus import DIMS, ERRORS, VALID, context, random_smooth_source
from helpers import scalar_model
from submfg.cli import EXIT_OK, main
from submfg.coeffexpr import CompiledExpr, EvalContext, ExprSyntaxError, eval_expr, parse_expr
from submfg.fbsde import hamiltonian_eval, minimize_hamiltonian
from submfg.model import (EXAMPLE_1, EXAMPLE_2, build_lq_model, check_assumption_suite, example_params,
                          lq_condition_report)
from submfg.sde import FeedbackControl, TimeGrid, generate_noise, verify_trajectory_lattice

BATTERY_DIR = Path(__file__).resolve().parent.parent / "configs" / "acceptance"
BATTERY = {
    "bench": ("bench", "riccati-bench.yaml"),
    "compare": ("compare", "ex1-compare.yaml"),
    "iterate": ("iterate", "ex1-iterate.yaml"),
    "fp": ("fp", "ex1-fictitious-play.yaml"),
    "check-ex1": ("check", "ex1-check.yaml"),
    "check-ex2": ("check", "ex2-check.yaml"),
}


class Battery:
    """Runs each battery entry once into ``root`` and caches exit code and wall time."""

    def __init__(self, root: Path):
        self.root = root
        self.results = {}

    def run(self, name):
        if name not in self.results:
            sub, cfg = BATTERY[name]
            t0 = time.perf_counter()
            code = main([sub, str(BATTERY_DIR / cfg), "-o", str(self.root / name)])
            self.results[name] = (code, time.perf_counter() - t0)
        return self.root / name, *self.results[name]

    def run_all(self):
        for name in BATTERY:
            self.run(name)
        return self


@pytest.fixture(scope="session")
def battery(tmp_path_factory):
    return Battery(tmp_path_factory.mktemp("battery-first"))


def _json(path):
    return json.loads(Path(path).read_text())


def _jsonl(path):
    return [json.loads(s) for s in Path(path).read_text().splitlines()]


# -- 1 ---------------------------------------------------------------------------


def test_criterion_1_riccati_oracle(battery, acceptance_line):
    out, code, _ = battery.run("bench")
    cases = _json(out / "bench_report.json")["cases"]
    base, fine = cases["base"], cases["refined"]
    passed = (base["rel_error"] <= 0.02 and base["seconds"] <= 60
              and fine["rel_error"] < base["rel_error"] and code == EXIT_OK)
    acceptance_line(1, passed, f"relative Y0 error {base['rel_error']:.3g} in {base['seconds']:.1f}s; "
                               f"refined {fine['rel_error']:.3g}")
    assert passed


# -- 2 ---------------------------------------------------------------------------


def _grid_argmin(model, t, x, m, y, step=1e-3, coarse=0.05, window=0.1):
    """Grid search over the box: a coarse pass over all of ``A``, then the ``step`` lattice near its minimum."""
    lo, hi = model.control_box.lower, model.control_box.upper

    def search(axes):
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.k)
        vals = hamiltonian_eval(model, t, x[None], m[None], y[None], mesh)
        return mesh[np.argmin(vals)]

    a0 = search([np.linspace(l, h, int(round((h - l) / coarse)) + 1) for l, h in zip(lo, hi)])
    fine = []
    for j in range(model.k):
        n_lo = int(np.floor((max(lo[j], a0[j] - window) - lo[j]) / step + 1e-9))
        n_hi = int(np.ceil((min(hi[j], a0[j] + window) - lo[j]) / step - 1e-9))
        fine.append(lo[j] + step * np.arange(n_lo, n_hi + 1))
    return search(fine)


def test_criterion_2_hamiltonian_minimizer(acceptance_line):
    worst, seconds = 0.0, 0.0
    for variant in (EXAMPLE_1, EXAMPLE_2):
        model = build_lq_model(example_params(variant))
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            t = rng.uniform(0, model.T)
            x, y = rng.uniform(-2, 2, model.d), rng.uniform(-3, 3, model.d)
            m = rng.uniform(-1, 1, model.J)
            t0 = time.perf_counter()
            a = minimize_hamiltonian(model, t, x, m, y)
            seconds += time.perf_counter() - t0
            worst = max(worst, float(np.max(np.abs(a - _grid_argmin(model, t, x, m, y)))))
    passed = worst <= 2e-3 and seconds <= 10
    acceptance_line(2, passed, f"largest gap to grid search {worst:.2g} over 2000 probes; solver {seconds:.2f}s")
    assert passed


# -- 3 ---------------------------------------------------------------------------


def test_criterion_3_comparison_principle(battery, acceptance_line):
    out, code, seconds = battery.run("compare")
    rep = _json(out / "compare_report.json")
    passed = rep["V_X"] <= 1e-3 * rep["scale"] and seconds <= 120 and code == EXIT_OK
    acceptance_line(3, passed, f"V = {rep['V_X']:.3g} (limit {1e-3 * rep['scale']:.3g}) in {seconds:.1f}s")
    assert passed


# -- 4 and 5 ---------------------------------------------------------------------


def test_criterion_4_monotone_learning(battery, acceptance_line):
    out, code, _ = battery.run("iterate")
    rep = _json(out / "minimal" / "report.json")
    recs = rep["records"]
    d = [r["distance"] for r in recs]
    V = [r["V"] for r in recs]
    seconds = sum(r["seconds"] for r in _jsonl(out / "minimal" / "iterations.jsonl"))
    decreasing = all(b < a for a, b in zip(d[1:], d[2:]))
    passed = (rep["stop_reason"] == "tol-reached" and rep["converged_at"] <= 15 and max(V) <= 1e-3 * rep["scale"]
              and decreasing and seconds <= 600)
    acceptance_line(4, passed, f"converged at {rep['converged_at']}, max V {max(V):.3g}, "
                               f"distances decreasing after 2: {decreasing}, {seconds:.1f}s")
    assert passed


def test_criterion_5_minimal_below_maximal(battery, acceptance_line):
    out, code, _ = battery.run("iterate")
    rep = _json(out / "iterate_report.json")
    scale = _json(out / "minimal" / "report.json")["scale"]
    order = rep["ordering"]
    passed = order["V"] <= 1e-3 * scale and rep["maximal"]["stop_reason"] == "tol-reached"
    acceptance_line(5, passed, f"ordering violation {order['V']:.3g}, gap {order['gap']:.3g}")
    assert passed


# -- 6 ---------------------------------------------------------------------------


def test_criterion_6_fictitious_play(battery, acceptance_line):
    out, code, seconds = battery.run("fp")
    rep = _json(out / "fp_report.json")
    fp = _json(out / "fictitious-play" / "report.json")
    ref = _json(out / "minimal" / "report.json")
    passed = (rep["stop_reason"] == "tol-reached" and ref["stop_reason"] == "tol-reached"
              and rep["max_summary_drop"] <= fp["mono_tol"] and rep["reference_distance"] <= 3 * rep["tol"]
              and code == EXIT_OK)
    acceptance_line(6, passed, f"{rep['iterations']} iterates, largest summary decrease "
                               f"{rep['max_summary_drop']:.2g}, distance to minimal limit "
                               f"{rep['reference_distance']:.3g} (3 x tol {3 * rep['tol']:.3g}), {seconds:.0f}s")
    assert passed


# -- 7 ---------------------------------------------------------------------------


def test_criterion_7_trajectory_lattice(acceptance_line):
    model = scalar_model(drift="-x1 + a1", sigma="0.5")
    devs = []
    for N in (50, 100, 200, 400):
        reps = [verify_trajectory_lattice(model, generate_noise(s, TimeGrid(1.0, N), 4, 64, (1, 1, 0)),
                                          FeedbackControl(lambda k, t, x, m: -2 * x),
                                          FeedbackControl.constant(0.3)) for s in range(4)]
        devs.append(float(np.mean([r.deviation for r in reps])))
    passed = all(b <= 1.1 * a for a, b in zip(devs, devs[1:]))
    acceptance_line(7, passed, "deviations " + ", ".join(f"{v:.3g}" for v in devs) + " at N = 50..400")
    assert passed


# -- 8 ---------------------------------------------------------------------------

PERTURBATIONS = {
    EXAMPLE_1: {
        "Q off-diagonal negative": dict(Q=np.array([[0.5, -0.1], [-0.1, 0.5]])),
        "Q negative": dict(Q=-0.5 * np.eye(2)),
        "P + Q off-diagonal positive": dict(P=np.eye(2), Q=np.array([[0.5, 0.2], [0.2, 0.5]])),
        "P_T + Q_T off-diagonal positive": dict(P_T=np.array([[1.0, 0.6], [0.6, 1.0]])),
    },
    EXAMPLE_2: {
        "Q positive entry": dict(Q=np.array([[-0.5, 0.1], [0.0, -0.5]])),
        "P negative entry": dict(P=np.array([[0.5, -0.1], [-0.1, 0.5]])),
        "R + P off-diagonal positive": dict(R=np.array([[1.0, 0.6], [0.6, 1.0]])),
        "C negative entry": dict(b0_C=np.array([[0.2, -0.1], [0.0, 0.2]])),
        "b1bar negative entry": dict(b1bar=np.array([[0.0, -0.1], [0.0, 0.0]])),
        "b2 negative entry": dict(b2=np.array([[1.0, -0.1], [0.0, 1.0]])),
    },
}


def test_criterion_8_assumption_checkers(battery, acceptance_line):
    clean = []
    for name, variant in (("check-ex1", EXAMPLE_1), ("check-ex2", EXAMPLE_2)):
        out, code, _ = battery.run(name)
        clean.append(code == EXIT_OK and check_assumption_suite(build_lq_model(example_params(variant))).passed)
    missed = []
    for variant, cases in PERTURBATIONS.items():
        for label, override in cases.items():
            params = example_params(variant, **override)
            lq = [c for c in lq_condition_report(params).violations if c.witness]
            suite = [c for c in check_assumption_suite(build_lq_model(params, strict=False)).violations if c.witness]
            if not lq or not suite:
                missed.append(f"{variant}: {label}")
    n = sum(len(c) for c in PERTURBATIONS.values())
    passed = all(clean) and not missed
    acceptance_line(8, passed, f"built-in families clean: {all(clean)}; {n - len(missed)}/{n} perturbations "
                               f"flagged with witnesses" + (f"; missed {missed}" if missed else ""))
    assert passed


# -- 9 ---------------------------------------------------------------------------


def test_criterion_9_determinism(battery, tmp_path_factory, acceptance_line):
    first = battery.run_all()
    second = Battery(tmp_path_factory.mktemp("battery-second")).run_all()
    # wall-clock timings are excluded from the summaries by design
    names = sorted(p.relative_to(first.root) for p in first.root.rglob("*.csv") if p.name != "timings.csv")
    differ = [str(p) for p in names if (first.root / p).read_bytes() != (second.root / p).read_bytes()]
    passed = bool(names) and not differ
    acceptance_line(9, passed, f"{len(names) - len(differ)}/{len(names)} summary CSVs byte-identical on rerun"
                               + (f"; differing {differ}" if differ else ""))
    assert passed


# -- 10 --------------------------------------------------------------------------


def test_criterion_10_expression_engine(acceptance_line):
    ok = 0
    for source, expected in VALID:
        value = eval_expr(parse_expr(source, DIMS), EvalContext(**context()))
        ok += bool(np.isclose(value, expected, rtol=1e-15, atol=1e-15))
    for source, line, column, fragment in ERRORS:
        try:
            parse_expr(source, DIMS)
        except ExprSyntaxError as exc:
            ok += (exc.line, exc.column) == (line, column) and fragment in str(exc)
    n_corpus = len(VALID) + len(ERRORS)
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        f = CompiledExpr(random_smooth_source(rng), DIMS)
        var = str(rng.choice(["t", "x1", "x2", "a1", "m1", "y1"]))
        ctx = {k: rng.uniform(-1, 1, 2) for k in "xamy"}
        ctx["t"] = rng.uniform(0, 1)
        sym = float(f.diff(var)(**ctx))
        h = 1e-6

        def at(delta):
            c = {k: (np.array(v, copy=True) if k != "t" else v) for k, v in ctx.items()}
            if var == "t":
                c["t"] += delta
            else:
                c[var[0]][int(var[1]) - 1] += delta
            return float(f(**c))

        fd = (at(h) - at(-h)) / (2 * h)
        worst = max(worst, abs(sym - fd) / (1 + abs(sym)))
    passed = n_corpus >= 50 and ok == n_corpus and worst <= 1e-6
    acceptance_line(10, passed, f"corpus {ok}/{n_corpus}; worst derivative gap {worst:.2g} on 100 probes")
    assert passed
