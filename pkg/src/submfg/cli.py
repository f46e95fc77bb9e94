"""Config-driven runner: ``submfg <check|solve|iterate|fp|compare|bench> CONFIG``.

Exit status: 0 all asserted properties hold, 2 invalid config, 3 numerical
divergence (artifacts kept), 4 an asserted property failed.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .equilibrium import (DIVERGENCE, EXTREMAL_DRIFT, MAXIMAL, MINIMAL, TOL_REACHED, ZERO_START, EquilibriumSettings,
                          comparison_harness, equilibrium_residual,
                          fictitious_play, iterate_best_reply, lower_bound_process, upper_bound_process,
                          write_run_artifacts)
from .fbsde import (HamiltonianMinimizationError, PicardSettings, RegressionBasis, RiccatiError,
                    feedback_monotonicity_probe, riccati_oracle, solve_fbsde_picard)
from .meanfield import SummaryFlow, check_dominance_pathwise, conditional_empirical_law, pathspace_distance
from .model import (EXAMPLE_1, EXAMPLE_2, NONSEPARABLE, SEPARABLE, ControlBox, InteractionSpec, LQConditionError,
                    ProbeConfig, ScalarFunction, build_expression_model, build_lq_model, check_assumption_suite,
                    clamped, coordinate, example_params, expression_function, lq_condition_report,
                    validate_regularity)
from .sde import PathBundle, SimulationError, TimeGrid, dirac_sampler, generate_noise, normal_sampler, simulate_forward

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_ASSERTION = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "SUBMFG_OUTPUT_ROOT"
SUBCOMMANDS = ("check", "solve", "iterate", "fp", "compare", "bench")
FAMILIES = ("lq-example-1", "lq-example-2", "expression")
FLOW_KINDS = ("bracket-lower", "bracket-upper", "zero", "constant")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted location of the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def build_hash() -> str:
    """Short digest of the installed package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def version_string() -> str:
    return f"submfg {__version__} (build {build_hash()})"


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

_REQUIRED = object()


def _num(path, v, positive=False, nonneg=False, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, f"expected a number, got {v!r}")
    if integer and (not float(v).is_integer()):
        raise ConfigError(path, f"expected an integer, got {v!r}")
    if not np.isfinite(v):
        raise ConfigError(path, "must be finite")
    if positive and v <= 0:
        raise ConfigError(path, f"must be positive, got {v!r}")
    if nonneg and v < 0:
        raise ConfigError(path, f"must be nonnegative, got {v!r}")
    return int(v) if integer else float(v)


def _t_float(**kw):
    return lambda p, v: _num(p, v, **kw)


def _t_int(**kw):
    return lambda p, v: _num(p, v, integer=True, **kw)


def _t_enum(*choices):
    def check(p, v):
        if v not in choices:
            raise ConfigError(p, f"expected one of {', '.join(map(str, choices))}; got {v!r}")
        return v
    return check


def _t_bool(p, v):
    if not isinstance(v, bool):
        raise ConfigError(p, f"expected true or false, got {v!r}")
    return v


def _t_str(p, v):
    if not isinstance(v, str):
        raise ConfigError(p, f"expected a string, got {v!r}")
    return v


def _t_opt(check):
    return lambda p, v: None if v is None else check(p, v)


def _t_array(p, v):
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(p, f"expected a number or nested list of numbers, got {v!r}") from None
    if not np.all(np.isfinite(arr)):
        raise ConfigError(p, "entries must be finite")
    return v


def _t_list(p, v):
    if not isinstance(v, list):
        raise ConfigError(p, f"expected a list, got {v!r}")
    return v


def _t_any(p, v):
    return v


SCHEMA = {
    "grid": {"T": (_t_float(positive=True), _REQUIRED), "n_steps": (_t_int(positive=True), 50)},
    "ensemble": {"n_outer": (_t_int(positive=True), 16), "n_inner": (_t_int(positive=True), 256),
                 "seed": (_t_int(nonneg=True), 0)},
    "solver": {"degree": (_t_int(nonneg=True), 2), "ridge": (_t_float(nonneg=True), 1e-10),
               "picard_max_iters": (_t_int(positive=True), 50), "picard_tol": (_t_float(positive=True), 1e-6),
               "damping": (_t_float(positive=True), 1.0), "use_measure": (_t_bool, True)},
    "equilibrium": {"direction": (_t_enum(MINIMAL, MAXIMAL, "both"), MINIMAL),
                    "tol_rel": (_t_float(positive=True), 1e-4), "mono_tol_rel": (_t_float(positive=True), 1e-3),
                    "max_outer": (_t_int(positive=True), 40),
                    "bracket": (_t_enum(EXTREMAL_DRIFT, ZERO_START), EXTREMAL_DRIFT),
                    "fp_max_iters": (_t_int(positive=True), 200), "fp_stop": (_t_enum("scaled", "plain"), "scaled"),
                    "fp_cap": (_t_opt(_t_int(positive=True)), None), "fp_reference": (_t_bool, True),
                    "warm_start": (_t_bool, True)},
    "flow": {"kind": (_t_enum(*FLOW_KINDS), "bracket-lower"), "value": (_t_opt(_t_array), None)},
    "compare": {"base": (_t_enum(*FLOW_KINDS), "bracket-lower"), "shift": (_t_float(nonneg=True), 0.5)},
    "check": {"n_per_axis": (_t_int(positive=True), 9), "x_range": (_t_array, [-2.0, 2.0]),
              "seed": (_t_int(nonneg=True), 0), "probes": (_t_int(positive=True), 1000)},
    "bench": {"tol": (_t_float(positive=True), 0.02), "refine": (_t_bool, True), "summary": (_t_opt(_t_array), None)},
    "outputs": {"directory": (_t_str, "runs"), "formats": (_t_list, ["csv", "binary"])},
}

MODEL_COMMON = {"family": (_t_enum(*FAMILIES), _REQUIRED), "name": (_t_str, ""), "strict": (_t_bool, True),
                "x0": (_t_opt(_t_array), None), "initial": (_t_opt(_t_any), None), "box": (_t_opt(_t_any), None)}
MODEL_LQ = {k: (_t_opt(_t_array), None) for k in
            ("P", "Q", "R", "P_T", "Q_T", "c", "C", "b1bar", "b2", "sigma", "sigma_x", "sigma0", "sigma0_x")}
MODEL_LQ.update(phi=(_t_opt(_t_list), None), psi=(_t_opt(_t_list), None), K=(_t_opt(_t_float(nonneg=True)), None))
MODEL_EXPR = {"d": (_t_int(positive=True), _REQUIRED), "k": (_t_int(positive=True), _REQUIRED),
              "regime": (_t_enum(SEPARABLE, NONSEPARABLE), _REQUIRED), "drift": (_t_list, _REQUIRED),
              "h": (_t_str, _REQUIRED), "g": (_t_str, _REQUIRED), "sigma": (_t_opt(_t_list), None),
              "sigma0": (_t_opt(_t_list), None), "interaction": (_t_opt(_t_list), None),
              "K": (_t_opt(_t_float(nonneg=True)), None), "kappa": (_t_opt(_t_float(nonneg=True)), None),
              "lam": (_t_opt(_t_float(nonneg=True)), None)}


def _section(raw, path: str, schema: dict) -> dict:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    for key in raw:
        if key not in schema:
            raise ConfigError(f"{path}.{key}", "unknown key")
    out = {}
    for key, (check, default) in schema.items():
        if key in raw:
            out[key] = check(f"{path}.{key}", raw[key])
        elif default is _REQUIRED:
            raise ConfigError(f"{path}.{key}", "required key missing")
        else:
            out[key] = copy.deepcopy(default)
    return out


@dataclass
class RunConfig:
    """Validated run configuration with defaults filled in."""

    model: dict
    grid: dict
    ensemble: dict
    solver: dict
    equilibrium: dict
    flow: dict
    compare: dict
    check: dict
    bench: dict
    outputs: dict
    threads: int = 0

    @classmethod
    def from_dict(cls, raw) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a mapping")
        allowed = set(SCHEMA) | {"model", "threads"}
        for key in raw:
            if key not in allowed:
                raise ConfigError(key, "unknown key")
        if "model" not in raw:
            raise ConfigError("model", "required section missing")
        sections = {name: _section(raw.get(name), name, schema) for name, schema in SCHEMA.items()}
        threads = _num("threads", raw.get("threads", 0), nonneg=True, integer=True)
        cfg = cls(model=_model_section(raw["model"]), threads=threads, **sections)
        cfg._validate_cross()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"invalid YAML: {exc}") from None
        return cls.from_dict(raw)

    def _validate_cross(self):
        fmts = self.outputs["formats"]
        for i, f in enumerate(fmts):
            if f not in ("csv", "binary"):
                raise ConfigError(f"outputs.formats[{i}]", f"expected csv or binary, got {f!r}")
        xr = np.asarray(self.check["x_range"], dtype=float)
        if xr.shape != (2,) or not xr[0] < xr[1]:
            raise ConfigError("check.x_range", "expected [lo, hi] with lo < hi")
        if self.flow["kind"] == "constant" and self.flow["value"] is None:
            raise ConfigError("flow.value", "required when flow.kind is constant")

    def to_dict(self) -> dict:
        return {"model": self.model, "grid": self.grid, "ensemble": self.ensemble, "solver": self.solver,
                "equilibrium": self.equilibrium, "flow": self.flow, "compare": self.compare, "check": self.check,
                "bench": self.bench, "outputs": self.outputs, "threads": self.threads}

    # -- builders ----------------------------------------------------------

    def settings(self) -> EquilibriumSettings:
        s, e = self.solver, self.equilibrium
        return EquilibriumSettings(
            picard=PicardSettings(max_iters=s["picard_max_iters"], tol=s["picard_tol"], theta=s["damping"]),
            basis=RegressionBasis(degree=s["degree"], ridge=s["ridge"], use_measure=s["use_measure"]),
            tol_rel=e["tol_rel"], mono_tol_rel=e["mono_tol_rel"], max_outer=e["max_outer"],
            fp_max_iters=e["fp_max_iters"], fp_stop=e["fp_stop"], fp_cap=e["fp_cap"], warm_start=e["warm_start"])

    def grid_obj(self) -> TimeGrid:
        return TimeGrid(self.grid["T"], self.grid["n_steps"])


def _model_section(raw) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("model", "expected a mapping")
    family = raw.get("family")
    if family is None:
        raise ConfigError("model.family", "required key missing")
    _t_enum(*FAMILIES)("model.family", family)
    schema = dict(MODEL_COMMON)
    schema.update(MODEL_EXPR if family == "expression" else MODEL_LQ)
    return _section(raw, "model", schema)


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------


def _interaction_fn(path, entry, d) -> ScalarFunction:
    try:
        if isinstance(entry, str):
            return expression_function(entry, d)
        if isinstance(entry, dict):
            keys = set(entry)
            if "clamp" in entry:
                if keys - {"clamp", "lower", "upper"}:
                    raise ConfigError(path, f"unknown keys {sorted(keys - {'clamp', 'lower', 'upper'})}")
                i = _num(f"{path}.clamp", entry["clamp"], integer=True, positive=True)
                return clamped(i - 1, float(entry.get("lower", -1.0)), float(entry.get("upper", 1.0)))
            if "coord" in entry:
                if keys - {"coord"}:
                    raise ConfigError(path, "coord entries take no other keys")
                return coordinate(_num(f"{path}.coord", entry["coord"], integer=True, positive=True) - 1)
            if "expr" in entry:
                if keys - {"expr", "lower", "upper"}:
                    raise ConfigError(path, f"unknown keys {sorted(keys - {'expr', 'lower', 'upper'})}")
                return expression_function(entry["expr"], d, float(entry.get("lower", -np.inf)),
                                           float(entry.get("upper", np.inf)))
        raise ConfigError(path, "expected an expression string or a mapping with clamp, coord or expr")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _box(path, raw, k):
    if raw is None:
        return None
    if not isinstance(raw, dict) or set(raw) - {"lower", "upper"}:
        raise ConfigError(path, "expected a mapping with lower and upper")
    lo = np.broadcast_to(np.asarray(raw.get("lower", -np.inf), dtype=float), (k,)).copy()
    hi = np.broadcast_to(np.asarray(raw.get("upper", np.inf), dtype=float), (k,)).copy()
    try:
        return ControlBox(lo, hi)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _initial(mcfg, d):
    if mcfg["x0"] is not None and mcfg["initial"] is not None:
        raise ConfigError("model.initial", "give either x0 or initial, not both")
    if mcfg["x0"] is not None:
        x0 = np.atleast_1d(np.asarray(mcfg["x0"], dtype=float))
        if x0.shape != (d,):
            raise ConfigError("model.x0", f"expected {d} entries")
        return dirac_sampler(x0)
    ini = mcfg["initial"]
    if ini is None:
        return None
    if not isinstance(ini, dict) or ini.get("kind") not in ("dirac", "normal"):
        raise ConfigError("model.initial.kind", "expected dirac or normal")
    if set(ini) - {"kind", "mean", "std"}:
        raise ConfigError("model.initial", "allowed keys are kind, mean, std")
    mean = np.broadcast_to(np.asarray(ini.get("mean", 0.0), dtype=float), (d,))
    if ini["kind"] == "dirac":
        return dirac_sampler(mean)
    return normal_sampler(mean, _num("model.initial.std", ini.get("std", 1.0), nonneg=True))


def lq_params_from_config(cfg: RunConfig):
    m = cfg.model
    variant = EXAMPLE_1 if m["family"] == "lq-example-1" else EXAMPLE_2
    over = {"T": cfg.grid["T"]}
    rename = {"c": "b0", "C": "b0_C"}
    for key in ("P", "Q", "R", "P_T", "Q_T", "c", "C", "b1bar", "b2", "sigma", "sigma_x", "sigma0", "sigma0_x", "K"):
        if m[key] is not None:
            over[rename.get(key, key)] = np.atleast_2d(np.asarray(m[key], dtype=float)) if key in (
                "P", "Q", "R", "P_T", "Q_T", "C", "b1bar", "b2") else (np.asarray(m[key], dtype=float)
                                                                        if key != "K" else m[key])
    if m["name"]:
        over["name"] = m["name"]
    base = example_params(variant)
    d = np.atleast_2d(over.get("Q", base.Q)).shape[-1]
    custom_dim = d != base.d
    if custom_dim:
        # built-in vectors are two-dimensional; every dimension-bearing field must then be given
        for key in ("b1bar", "b2", "sigma", "sigma0"):
            over.setdefault(key, None)
        over.setdefault("phi", tuple(clamped(i, -1.0, 1.0) for i in range(d)))
        if variant == EXAMPLE_2:
            over.setdefault("b0", np.zeros(d))
            over.setdefault("b0_C", np.zeros((d, d)))
        over.setdefault("initial_law", dirac_sampler(np.zeros(d)))
    for key in ("phi", "psi"):
        if m[key] is not None:
            over[key] = tuple(_interaction_fn(f"model.{key}[{i}]", e, d) for i, e in enumerate(m[key]))
    k = np.atleast_2d(over.get("R", base.R)).shape[0]
    box = _box("model.box", m["box"], k)
    if box is not None:
        over["box"] = box
    elif custom_dim and m["box"] is None:
        over["box"] = ControlBox.symmetric(k, 1.0)
    ini = _initial(m, d)
    if ini is not None:
        over["initial_law"] = ini
    return example_params(variant, **over)


def build_model(cfg: RunConfig, strict: bool | None = None):
    """Model for ``cfg``; LQ families also return their parameters."""
    m = cfg.model
    strict = m["strict"] if strict is None else strict
    try:
        if m["family"] == "expression":
            d, k = m["d"], m["k"]
            fns = tuple(_interaction_fn(f"model.interaction[{i}]", e, d) for i, e in enumerate(m["interaction"] or []))
            inter = InteractionSpec.scalar(fns) if fns else InteractionSpec.none()
            str_mat = lambda rows: None if rows is None else [[str(v) for v in r] for r in rows]  # noqa: E731
            model = build_expression_model(
                d=d, k=k, T=cfg.grid["T"], drift=[str(s) for s in m["drift"]], h=m["h"], g=m["g"],
                regime=m["regime"], box=_box("model.box", m["box"], k),
                d1=len(m["sigma"][0]) if m["sigma"] else 0, d2=len(m["sigma0"][0]) if m["sigma0"] else 0,
                sigma=str_mat(m["sigma"]), sigma0=str_mat(m["sigma0"]), interaction=inter,
                initial_law=_initial(m, d) or dirac_sampler(np.zeros(d)), K=m["K"], kappa=m["kappa"],
                lam=m["lam"], name=m["name"] or "expression")
            return model, None
        params = lq_params_from_config(cfg)
        return build_lq_model(params, strict=strict), params
    except ConfigError:
        raise
    except LQConditionError as exc:
        names = ", ".join(c.name for c in exc.report.violations)
        raise ConfigError("model", f"sign conditions violated: {names} (set strict: false to proceed)") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError("model", str(exc)) from None


def make_plan(cfg: RunConfig, model):
    e = cfg.ensemble
    return generate_noise(e["seed"], cfg.grid_obj(), e["n_outer"], e["n_inner"], dims=(model.d, model.d1, model.d2),
                          initial_sampler=model.initial_law)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


class RunContext:
    def __init__(self, cfg: RunConfig, subcommand: str, out_dir: Path):
        self.cfg, self.sub, self.dir = cfg, subcommand, out_dir
        self.version = __version__
        self.build = build_hash()
        out_dir.mkdir(parents=True, exist_ok=True)

    def stamp(self, plan_fp: str) -> dict:
        return {"plan": plan_fp, "version": self.version}

    def write_header(self, plan_fp: str):
        snap = {"submfg": {"version": self.version, "build": self.build, "plan": plan_fp, "subcommand": self.sub},
                **self.cfg.to_dict()}
        with open(self.dir / "config.snapshot.yaml", "w") as fh:
            yaml.safe_dump(snap, fh, sort_keys=True, default_flow_style=None)
        with open(self.dir / "fingerprint.txt", "w") as fh:
            fh.write(f"plan={plan_fp}\nversion={self.version}\nbuild={self.build}\n")

    def write_json(self, name, obj, plan_fp):
        with open(self.dir / name, "w") as fh:
            json.dump({**self.stamp(plan_fp), **obj}, fh, indent=1, sort_keys=True, default=_json_default)

    def write_csv(self, name, header, rows, plan_fp):
        buf = io.StringIO()
        buf.write(f"# plan={plan_fp} version={self.version}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in r])
        with open(self.dir / name, "w", newline="") as fh:
            fh.write(buf.getvalue())


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return str(o)


def _out(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _flow(cfg, model, plan, kind, value=None):
    if model.J == 0:
        return None
    if kind in ("bracket-lower", "bracket-upper"):
        mode = cfg.equilibrium["bracket"]
        fn = lower_bound_process if kind == "bracket-lower" else upper_bound_process
        return conditional_empirical_law(fn(model, plan, mode))
    v = np.zeros(model.J) if kind == "zero" else np.atleast_1d(np.asarray(value, dtype=float))
    if v.shape != (model.J,):
        raise ConfigError("flow.value", f"expected {model.J} summary values")
    if model.interaction.kind != "scalar":
        raise ConfigError("flow.kind", "constant flows need a scalar-type interaction")
    return SummaryFlow(np.broadcast_to(v, (plan.n_outer, plan.grid.n_steps + 1, model.J)).copy(), f"constant{v.tolist()}")


def _shift(flow, delta):
    if isinstance(flow, SummaryFlow):
        return SummaryFlow(flow.values + delta, flow.provenance + "+shift")
    return flow.shifted(delta)


def cmd_check(ctx: RunContext) -> int:
    cfg = ctx.cfg
    model, params = build_model(cfg, strict=False)
    plan = make_plan(cfg, model)
    ctx.write_header(plan.fingerprint)
    c = cfg.check
    probes = ProbeConfig(n_per_axis=c["n_per_axis"], x_range=tuple(c["x_range"]), seed=c["seed"])
    rows, ok = [], True
    out = {"model": model.name, "regime": model.regime}
    if params is not None:
        lq = lq_condition_report(params)
        out["lq_conditions"] = lq.to_dict()
        for r in lq.conditions:
            rows.append(("lq." + r.name, r.passed, "", 1))
            ok &= r.passed
    suite = check_assumption_suite(model, probes)
    out["assumptions"] = suite.to_dict()
    for r in suite.checks:
        rows.append((r.name, r.passed, float(r.worst_value), r.n_probes))
        ok &= r.passed
    reg = validate_regularity(model, probes)
    out["regularity"] = reg.to_dict()
    rows.append(("regularity", reg.passed, float(reg.lambda_hat), 1))
    ok &= reg.passed
    mono = feedback_monotonicity_probe(model, n=c["probes"], seed=c["seed"])
    out["feedback_monotonicity"] = {"n_probes": mono.n_probes, "n_violations": mono.n_violations,
                                    "worst_violation": mono.worst_violation, "witness": mono.witness}
    rows.append(("feedback_monotonicity", mono.n_violations == 0, float(mono.worst_violation), mono.n_probes))
    ok &= mono.n_violations == 0
    ctx.write_json("check_report.json", out, plan.fingerprint)
    ctx.write_csv("check_summary.csv", ("check", "passed", "worst_value", "n_probes"), rows, plan.fingerprint)
    for name, passed, worst, _ in rows:
        _out(f"{'PASS' if passed else 'FAIL'} {name}" + (f" (worst {worst:.3g})" if worst != "" else ""))
    return EXIT_OK if ok else EXIT_ASSERTION


def cmd_solve(ctx: RunContext) -> int:
    cfg = ctx.cfg
    model, _ = build_model(cfg)
    plan = make_plan(cfg, model)
    ctx.write_header(plan.fingerprint)
    flow = _flow(cfg, model, plan, cfg.flow["kind"], cfg.flow["value"])
    s = cfg.settings()
    X, sol = solve_fbsde_picard(model, plan, flow, s.picard, s.basis)
    if "binary" in cfg.outputs["formats"]:
        X.to_binary(ctx.dir / "X.bin", {"version": ctx.version})
        PathBundle(sol.Y, sol.grid, sol.fingerprint).to_binary(ctx.dir / "Y.bin", {"version": ctx.version})
    if "csv" in cfg.outputs["formats"]:
        X.to_csv(ctx.dir / "X.csv", extra={"version": ctx.version})
        sol.to_csv(ctx.dir / "Y.csv", extra={"version": ctx.version})
    rep = sol.picard
    ctx.write_csv("picard.csv", ("iter", "y_change"), [(h["iter"], h["y_change"]) for h in rep.history],
                  plan.fingerprint)
    y0 = sol.Y[:, :, 0, :].mean(axis=(0, 1))
    ctx.write_json("solve_report.json", {"picard_converged": rep.converged, "picard_iterations": rep.iterations,
                                         "Y0_mean": y0, "pi_rms_Y": sol.pi_rms(), "state_scale": X.state_scale()},
                    plan.fingerprint)
    _out(f"picard {'converged' if rep.converged else 'did not converge'} after {rep.iterations} sweeps; "
         f"mean Y0 = {np.array2string(y0, precision=6)}")
    return EXIT_OK if rep.converged else EXIT_ASSERTION


def _iterate_one(ctx, model, plan, direction, settings):
    run = iterate_best_reply(model, plan, direction, settings, bracket_mode=ctx.cfg.equilibrium["bracket"])
    sub = ctx.dir / direction
    write_run_artifacts(run, sub, ctx.version, tuple(ctx.cfg.outputs["formats"]))
    r = run.report
    _out(f"{direction}: {r.stop_reason} after {len(r.records)} best replies"
         + (f", converged at iteration {r.converged_at}" if r.converged_at is not None else "")
         + f"; max V = {max(r.violations, default=0.0):.3g} (tol {r.mono_tol:.3g})")
    return run


def cmd_iterate(ctx: RunContext) -> int:
    cfg = ctx.cfg
    model, _ = build_model(cfg)
    plan = make_plan(cfg, model)
    ctx.write_header(plan.fingerprint)
    settings = cfg.settings()
    dirs = (MINIMAL, MAXIMAL) if cfg.equilibrium["direction"] == "both" else (cfg.equilibrium["direction"],)
    runs = {dn: _iterate_one(ctx, model, plan, dn, settings) for dn in dirs}
    if any(r.report.stop_reason == DIVERGENCE for r in runs.values()):
        return EXIT_DIVERGENCE
    summary = {}
    ok = True
    for dn, run in runs.items():
        res = equilibrium_residual(model, run)
        summary[dn] = {"stop_reason": run.report.stop_reason, "converged_at": run.report.converged_at,
                       "residual": res, "flagged": run.report.flagged, "tol": run.report.tol}
        ok &= not run.report.flagged
        _out(f"{dn}: fixed-point residual {res:.3g}")
    if len(runs) == 2:
        lo, hi = runs[MINIMAL], runs[MAXIMAL]
        order = check_dominance_pathwise(lo.X, hi.X)
        gap = pathspace_distance(lo.X, hi.X)
        passed = order.violation <= lo.report.mono_tol
        summary["ordering"] = {"V": order.violation, "gap": gap, "passed": passed}
        ok &= passed
        _out(f"minimal <= maximal: V = {order.violation:.3g}; path-space gap {gap:.3g}")
    ctx.write_json("iterate_report.json", summary, plan.fingerprint)
    return EXIT_OK if ok else EXIT_ASSERTION


def cmd_fp(ctx: RunContext) -> int:
    cfg = ctx.cfg
    model, _ = build_model(cfg)
    plan = make_plan(cfg, model)
    ctx.write_header(plan.fingerprint)
    settings = cfg.settings()
    mode = cfg.equilibrium["bracket"]
    ref = None
    if cfg.equilibrium["fp_reference"]:
        ref = _iterate_one(ctx, model, plan, MINIMAL, settings)
        if ref.report.stop_reason == DIVERGENCE:
            return EXIT_DIVERGENCE
    run = fictitious_play(model, plan, settings, start=mode, reference=ref)
    write_run_artifacts(run, ctx.dir / "fictitious-play", ctx.version, tuple(cfg.outputs["formats"]))
    r = run.report
    if r.stop_reason == DIVERGENCE:
        return EXIT_DIVERGENCE
    drops = [rec.extra.get("summary_drop", 0.0) for rec in r.records]
    out = {"stop_reason": r.stop_reason, "iterations": len(r.records) + 1, "max_summary_drop": max(drops, default=0.0),
           "tol": r.tol}
    ok = r.stop_reason == TOL_REACHED and out["max_summary_drop"] <= r.mono_tol and not r.flagged
    if ref is not None:
        dist = pathspace_distance(run.X, ref.X)
        out["reference_distance"] = dist
        ok &= dist <= 3 * r.tol and ref.report.stop_reason == TOL_REACHED
        _out(f"distance to best-reply minimal limit: {dist:.3g} (3 x tol = {3 * r.tol:.3g})")
    ctx.write_json("fp_report.json", out, plan.fingerprint)
    _out(f"fictitious play: {r.stop_reason} after {len(r.records) + 1} iterates; "
         f"largest summary decrease {out['max_summary_drop']:.3g}")
    return EXIT_OK if ok else EXIT_ASSERTION


def cmd_compare(ctx: RunContext) -> int:
    cfg = ctx.cfg
    model, _ = build_model(cfg)
    plan = make_plan(cfg, model)
    ctx.write_header(plan.fingerprint)
    if model.J == 0:
        raise ConfigError("model", "compare needs a measure-dependent model")
    flow_a = _flow(cfg, model, plan, cfg.compare["base"], cfg.flow["value"])
    flow_b = _shift(flow_a, cfg.compare["shift"])
    rep, (Xa, sa), (Xb, sb) = comparison_harness(model, plan, flow_a, flow_b, cfg.settings())
    if "binary" in cfg.outputs["formats"]:
        Xa.to_binary(ctx.dir / "X_A.bin", {"version": ctx.version})
        Xb.to_binary(ctx.dir / "X_B.bin", {"version": ctx.version})
    ctx.write_json("compare_report.json", rep.to_dict(), plan.fingerprint)
    rows = [("V_X", rep.V_X), ("V_X_max", rep.V_X_max), ("tol", rep.tol), ("distance", rep.distance)]
    if rep.V_Y is not None:
        rows.insert(2, ("V_Y", rep.V_Y))
    ctx.write_csv("compare_summary.csv", ("quantity", "value"), rows, plan.fingerprint)
    _out(f"comparison: V_X = {rep.V_X:.3g}" + (f", V_Y = {rep.V_Y:.3g}" if rep.V_Y is not None else "")
         + f" (tol {rep.tol:.3g}) -> {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_ASSERTION


def bench_case(model, params, plan, summary, settings):
    """Picard against the Riccati oracle for a frozen deterministic flow."""
    grid = plan.grid
    J = model.J
    path = np.broadcast_to(summary, (grid.n_steps + 1, J)).copy() if J else None
    flow = SummaryFlow(np.broadcast_to(path, (plan.n_outer,) + path.shape).copy(), "bench") if J else None
    X, sol = solve_fbsde_picard(model, plan, flow, settings.picard, settings.basis)
    ric = riccati_oracle(params, grid, path)
    ric.assert_interior(X)
    y_mc = sol.Y[:, :, 0, :].mean(axis=(0, 1))
    y_or = ric.Y(0, plan.xi).mean(axis=(0, 1))
    rel = float(np.linalg.norm(y_mc - y_or) / max(np.linalg.norm(y_or), 1e-300))
    X_ric = simulate_forward(model, plan, ric.control(), flow)
    dist = pathspace_distance(X, X_ric) / max(X.state_scale(), X_ric.state_scale())
    return {"n_steps": grid.n_steps, "n_inner": plan.n_inner, "y0_picard": y_mc, "y0_oracle": y_or,
            "rel_error": rel, "path_distance": dist, "picard_iterations": sol.picard.iterations}


def cmd_bench(ctx: RunContext) -> int:
    cfg = ctx.cfg
    if cfg.model["family"] == "expression":
        raise ConfigError("model.family", "bench needs an LQ family")
    model, params = build_model(cfg)
    plan = make_plan(cfg, model)
    ctx.write_header(plan.fingerprint)
    summ = np.zeros(model.J) if cfg.bench["summary"] is None else np.atleast_1d(np.asarray(cfg.bench["summary"], float))
    if summ.shape != (model.J,):
        raise ConfigError("bench.summary", f"expected {model.J} values")
    settings = cfg.settings()
    cases = [("base", plan)]
    if cfg.bench["refine"]:
        e = cfg.ensemble
        fine = generate_noise(e["seed"], TimeGrid(cfg.grid["T"], 2 * cfg.grid["n_steps"]), e["n_outer"],
                              4 * e["n_inner"], dims=(model.d, model.d1, model.d2), initial_sampler=model.initial_law)
        cases.append(("refined", fine))
    results = []
    for name, p in cases:
        t0 = time.perf_counter()
        try:
            res = bench_case(model, params, p, summ, settings)
            res["seconds"] = round(time.perf_counter() - t0, 3)
        except RiccatiError as exc:
            _out(f"FAIL {name}: {exc}")
            return EXIT_ASSERTION
        results.append((name, res))
        _out(f"{name}: N={res['n_steps']} n_inner={res['n_inner']} relative Y0 error {res['rel_error']:.3g}, "
             f"path distance {res['path_distance']:.3g}")
    rows = [(n, r["n_steps"], r["n_inner"], r["rel_error"], r["path_distance"], r["picard_iterations"])
            for n, r in results]
    ctx.write_csv("bench_summary.csv", ("case", "n_steps", "n_inner", "rel_error", "path_distance", "picard_iters"),
                  rows, plan.fingerprint)
    ctx.write_json("bench_report.json", {"cases": dict(results), "tol": cfg.bench["tol"]}, plan.fingerprint)
    ok = results[0][1]["rel_error"] <= cfg.bench["tol"]
    return EXIT_OK if ok else EXIT_ASSERTION


COMMANDS = {"check": cmd_check, "solve": cmd_solve, "iterate": cmd_iterate, "fp": cmd_fp, "compare": cmd_compare,
            "bench": cmd_bench}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def output_dir(cfg: RunConfig, subcommand: str, override: str | None = None) -> Path:
    if override:
        return Path(override)
    base = Path(cfg.outputs["directory"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not base.is_absolute():
        base = Path(root) / base
    return base / subcommand


def run(config_path, subcommand: str, output: str | None = None) -> int:
    """Run one subcommand; returns the exit status."""
    try:
        cfg = RunConfig.load(config_path)
        ctx = RunContext(cfg, subcommand, output_dir(cfg, subcommand, output))
        return COMMANDS[subcommand](ctx)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, HamiltonianMinimizationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="submfg", description="Submodular mean field game solvers.")
    parser.add_argument("--version", action="version", version=version_string())
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("config", help="YAML run configuration")
    parser.add_argument("-o", "--output", help="output directory (overrides outputs.directory)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    return run(args.config, args.subcommand, args.output)


if __name__ == "__main__":
    sys.exit(main())
