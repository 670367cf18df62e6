"""Scenario runs: simulate, verification suites, shell tables and sweeps."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, Scenario
from .dynamics import ControlSet, FieldError, VectorField, c3_constant, drift_difference_norm
from .lyapunov import (
    BallSampler,
    CLPError,
    ControlLyapunovPair,
    builtin_quadratic_clp,
    clp_condition4_check,
    moduli_table,
)
from .measures import EmpiricalMeasure, optimal_plan, plan_cost, w2_distance
from .proximal import (
    InfConvergenceError,
    InfConvOptions,
    ekeland_probes,
    ekeland_verify,
    gamma_subgradient,
    inf_convolution,
    minimizer_bound_margins,
    moreau_closed_form,
    proximal_subgradient_verify,
    subgradient_probes,
    taylor_bound_verify,
)
from .report import (
    EXIT_CONFIG,
    EXIT_NONCONVERGENCE,
    Check,
    RunReport,
    knot_decrease_margins,
    margin_check,
)
from .stabilize import (
    InfeasibleParameters,
    OutOfRange,
    SelectedParameters,
    ShellTable,
    StabilizeError,
    TrajectoryError,
    TrajectoryLog,
    TrajectoryOptions,
    build_shells,
    constant_policy,
    global_feedback,
    local_feedback,
    make_partition,
    parameters_at,
    run_theta_trajectory,
    s_stabilization_check,
    select_parameters,
)

__all__ = ["Setup", "build_setup", "simulate", "verify", "shells", "sweep", "SUITES", "SWEEP_AXES"]

log = logging.getLogger("stab")

SUITES = ("transport", "proximal", "lemmas", "all")
SWEEP_AXES = {"N": "n", "kappa": "overrides.kappa", "eps": "overrides.eps", "delta": "partition.delta"}
SEED_NAMES = ("calibration", "initial", "partition", "infconv", "transport", "proximal")


@dataclass
class Setup:
    scenario: Scenario
    f: VectorField
    U: ControlSet
    clp: ControlLyapunovPair
    m0: EmpiricalMeasure
    opts: InfConvOptions
    traj: TrajectoryOptions


def build_setup(sc: Scenario) -> Setup:
    """Instantiate field, controls, CLP and start measure; CLP problems are configuration errors."""
    f = sc.field()
    U = sc.controls()
    target = sc.target()
    if U.dim != sc["dim"] or target.dim != sc["dim"]:
        raise ConfigError("dim disagrees with the controls or the target")
    c = sc["clp"]
    try:
        clp = builtin_quadratic_clp(target, U, f.label, c["eps0"], c["calibrate"], rng=sc.seed_for("calibration"))
    except CLPError as exc:
        raise ConfigError(f"clp: {exc}") from None
    m0 = sc.initial()
    if m0.dim != sc["dim"]:
        raise ConfigError("initial measure dimension disagrees with dim")
    ic = sc["infconv"]
    opts = InfConvOptions(probes=ic["probes"], repair_every=ic["repair_every"], max_iter=ic["max_iter"],
                          seed=sc.seed_for("infconv"))
    ig = sc["integrator"]
    return Setup(sc, f, U, clp, m0, opts, TrajectoryOptions(ig["substeps"], ig["max_dt"]))


def _new_report(command: str, sc: Scenario) -> RunReport:
    seeds = {name: sc.seed_for(name) for name in SEED_NAMES}
    seeds["derivation"] = "SeedSequence([seed, crc32(name)]).generate_state(1)[0]"
    return RunReport(command, sc.data, sc.hash, seeds=seeds)


def local_parameters(st: Setup) -> SelectedParameters:
    sc = st.scenario
    ov = sc["overrides"]
    if (ov["kappa"] is None) != (ov["eps"] is None):
        raise ConfigError("overrides: set both kappa and eps or neither")
    if ov["kappa"] is not None:
        if not ov["kappa"] <= 1:
            raise ConfigError("overrides.kappa must lie in (0, 1]")
        return parameters_at(st.clp, st.f, st.U, sc.r, sc.R, float(ov["kappa"]), float(ov["eps"]))
    return select_parameters(st.clp, st.f, st.U, sc.r, sc.R)


def shell_table(st: Setup) -> ShellTable:
    sh = st.scenario["shells"]
    return build_shells(
        st.clp, sh["Q0"], sh["i_min"], sh["i_max"],
        lambda i, q, Q: select_parameters(st.clp, st.f, st.U, q, Q),
    )


def _analytic_reach_time(sc: Scenario) -> float:
    """Open-loop decay of the linear model from W2 = R to r, plus one unit of slack."""
    return math.log(sc.R / sc.r) + 1.0


def _drift_margins(lg: TrajectoryLog, f, U, params_of, delta: float) -> np.ndarray:
    """C3 (t - t_i) - ||f(X_t, m_t, u) - f(x, m_ti, u)||_{L2(m_ti)} along each segment started in B_R."""
    out = []
    k0 = None
    for k, rec in enumerate(lg.records):
        if k0 is not None:
            p = params_of(lg.records[k0])
            if p is not None and lg.records[k0].w2_to_target <= p["R"]:
                c3 = c3_constant(p["R"], delta, p["C0"], p["C1"], p["sigma_target"])
                u = U[lg.records[k0].control_id]
                out.append(c3 * (rec.t - lg.records[k0].t) - drift_difference_norm(f, lg.states[k0], lg.states[k], u))
        if rec.knot:
            k0 = k
    return np.array(out, dtype=float)


def _trajectory_checks(rep: RunReport, lg: TrajectoryLog, st: Setup, params_of, delta: float, tol: float,
                       above: int | None) -> None:
    recs = [r for r in lg.records if above is None or r.shell_index is None or r.shell_index > above]
    detail = {} if above is None else {"shells_above": above}
    rep.add(margin_check("pairing_bound", [r.lemma52_margin for r in recs], tol, detail))
    rep.add(margin_check("phi_kappa_decrease", [r.lemma53_margin for r in recs], tol, detail))
    rep.add(margin_check("step_bound", lg.column("prop26_margin"), tol))
    rep.add(margin_check("drift_variation", _drift_margins(lg, st.f, st.U, params_of, delta), tol))
    dec = knot_decrease_margins(lg.records, above)
    rep.add(Check("knot_decrease", int(dec.size), float(dec.min()) if dec.size else float("nan"),
                  bool(np.all(dec > 0)), {"strict": True}))


def _run(st: Setup, rep: RunReport, out: Path, with_verdicts: bool) -> None:
    """Shared body of simulate and the lemmas suite."""
    sc = st.scenario
    tol = float(sc["tolerance"])
    t0 = time.perf_counter()
    pc = sc["partition"]
    if sc.mode == "local":
        params = local_parameters(st)
        rep.parameters = params.to_dict()
        rep.moduli = params.to_dict()["moduli"]
        rep.constants = params.constants.to_dict()
        sel = {k: v["ok"] for k, v in params.checks.items()}
        rep.add(Check("selector_conditions", len(sel), float("nan"), all(sel.values()), {"conditions": sel}))
        delta = float(pc["delta"] or params.delta_max)
        sp = params.shell_params()
        if sc["policy"]["kind"] == "feedback":
            policy = local_feedback(st.clp, st.f, st.U, params.kappa, params.eps, st.opts, sp)
        else:
            policy = constant_policy(st.U, int(sc["policy"]["index"]), st.clp, params.kappa, params.eps, st.opts, sp)
        params_of = lambda rec: sp  # noqa: E731
        theory_T = params.T_bound
        shells = above = None
        if delta > params.delta_max:
            rep.notes.append(f"partition step {delta:g} exceeds the selector bound {params.delta_max:.3g}; "
                             "decrease and step bounds are checked empirically at the larger step")
    else:
        shells = shell_table(st)
        (out / "shells").mkdir(parents=True, exist_ok=True)
        shells.to_csv(out / "shells" / "shells.csv")
        rep.parameters = {"shells": shells.rows()}
        rep.moduli = {str(i): shells.params[i].to_dict()["moduli"] for i in shells.indices}
        rep.constants = {str(i): shells.params[i].constants.to_dict() for i in shells.indices}
        delta = float(pc["delta"] or min(shells.params[i].delta_max for i in shells.indices))
        policy = global_feedback(shells, st.clp, st.f, st.U, opts=st.opts)
        sps = {i: shells.params[i].shell_params() for i in shells.indices}
        params_of = lambda rec: sps.get(rec.shell_index)  # noqa: E731
        theory_T = None
        # shells inside B_r are not needed to reach it; their decrease is not checked
        above = shells.inner_index(sc.r)
        rep.parameters["checked_shells_above"] = above
    rep.timings["parameters"] = time.perf_counter() - t0
    dmin = float(pc["delta_min"] or delta / 2.0)
    rep.parameters["partition"] = {"delta_max": delta, "delta_min": dmin, "rule": pc["rule"]}
    partition = make_partition(dmin, delta, float(sc["horizon"]), pc["rule"], sc.seed_for("partition"))

    t1 = time.perf_counter()
    try:
        lg = run_theta_trajectory(st.m0, partition, policy, st.f, st.traj)
    except TrajectoryError as exc:
        exc.log.scenario_hash = sc.hash
        exc.log.to_csv(out / "trajectory.csv")
        rep.artifacts.append("trajectory.csv")
        rep.timings["trajectory"] = time.perf_counter() - t1
        raise
    lg.scenario_hash = sc.hash
    lg.seed = sc.seed
    rep.timings["trajectory"] = time.perf_counter() - t1
    lg.to_csv(out / "trajectory.csv")
    rep.artifacts.append("trajectory.csv")
    stride = int(sc["outputs"]["snapshot_stride"])
    if stride > 0:
        lg.write_snapshots(out / "snapshots", stride)
        rep.artifacts.append("snapshots/")

    _trajectory_checks(rep, lg, st, params_of, delta, tol, above)
    if with_verdicts:
        rt = sc["reach_time"]
        if rt == "analytic":
            T = _analytic_reach_time(sc)
        elif rt == "theory":
            T = theory_T
        else:
            T = float(rt)
        v = s_stabilization_check(lg, sc.r, sc.R, shells=shells, clp=st.clp if shells else None, T=T, delta=delta)
        rep.verdicts = v.to_dict()
        if sc["outputs"]["figures"]:
            from .plots import trajectory_figures

            for p in trajectory_figures(lg, out, r=sc.r, R=sc.R, T=v.get("reach").detail.get("T")):
                rep.artifacts.append(p.name)
    rep.timings["total"] = time.perf_counter() - t0


def _guarded(command: str, sc: Scenario, out_dir, body) -> RunReport:
    """Run ``body(setup, report, out)``; map module errors to exit codes, always write the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = _new_report(command, sc)
    t0 = time.perf_counter()
    try:
        st = build_setup(sc)
        body(st, rep, out)
    except (ConfigError, InfeasibleParameters, OutOfRange, CLPError, FieldError) as exc:
        rep.error = f"{type(exc).__name__}: {exc}"
        rep.exit_code = EXIT_CONFIG
    except (TrajectoryError, InfConvergenceError, FloatingPointError) as exc:
        rep.error = f"{type(exc).__name__}: {exc}"
        rep.exit_code = EXIT_NONCONVERGENCE
    except StabilizeError as exc:
        rep.error = f"{type(exc).__name__}: {exc}"
        rep.exit_code = EXIT_CONFIG
    rep.timings.setdefault("total", time.perf_counter() - t0)
    rep.finalize()
    rep.write(out / "report.json")
    if rep.error:
        log.error("%s", rep.error)
    return rep


def simulate(sc: Scenario, out_dir) -> RunReport:
    """Select parameters (or shells), run the sample-and-hold trajectory, write CSV, JSON and figures."""
    return _guarded("simulate", sc, out_dir, lambda st, rep, out: _run(st, rep, out, True))


# -------------------------------------------------------------- verify suites


def _brute_w2_squared(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    c = np.sum((a.points[:, None, :] - b.points[None, :, :]) ** 2, axis=2)
    idx = np.arange(a.n)
    return min(float(c[idx, list(p)].mean()) for p in itertools.permutations(range(a.n)))


def _transport_suite(st: Setup, rep: RunReport, out: Path) -> None:
    rng = np.random.default_rng(st.scenario.seed_for("transport"))
    worst = 0.0
    hits = 0
    for _ in range(50):
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        a, b = EmpiricalMeasure(rng.normal(size=(n, d))), EmpiricalMeasure(rng.normal(size=(n, d)))
        err = abs(w2_distance(a, b) - math.sqrt(_brute_w2_squared(a, b)))
        worst = max(worst, err)
        hits += err <= 1e-9
    rep.add(Check("permutation_oracle", 50, 1e-9 - worst, hits == 50, {"agree": hits}))
    sym, tri = 0.0, math.inf
    for _ in range(200):
        m1, m2, m3 = (EmpiricalMeasure(rng.normal(size=(20, 2)) + rng.normal(size=2)) for _ in range(3))
        d12, d21 = w2_distance(m1, m2), w2_distance(m2, m1)
        sym = max(sym, abs(d12 - d21))
        tri = min(tri, w2_distance(m1, m2) + w2_distance(m2, m3) - w2_distance(m1, m3))
    rep.add(Check("symmetry", 200, -sym if sym else 0.0, sym == 0.0))
    rep.add(Check("triangle", 200, tri, tri >= -1e-9))
    worst_marg = 0.0
    for _ in range(30):
        a = EmpiricalMeasure(rng.normal(size=(int(rng.integers(1, 9)), 2)))
        b = EmpiricalMeasure(rng.normal(size=(int(rng.integers(1, 9)), 2)))
        plan = optimal_plan(a, b)
        worst_marg = max(worst_marg, *plan.marginal_errors())
        cost = plan_cost(plan, a, b)
        worst_marg = max(worst_marg, abs(cost.squared_cost - w2_distance(a, b) ** 2))
    rep.add(Check("plan_marginals", 30, 1e-9 - worst_marg, worst_marg <= 1e-9))


def _proximal_suite(st: Setup, rep: RunReport, out: Path) -> None:
    sc = st.scenario
    rng = np.random.default_rng(sc.seed_for("proximal"))
    trials = int(sc["verify"]["trials"])
    n_probe = int(sc["verify"]["probes"])
    clp, R = st.clp, sc.R
    n = min(int(sc["n"]), 50)
    sampler = BallSampler(clp.target, n)
    moduli = moduli_table(clp, R)
    eke, bounds, sub, neg, tay, cond4, moreau = [], {}, [], [], [], [], []
    for k in range(trials):
        kappa = (0.25, 0.5, 1.0)[k % 3]
        eps = min(1e-3, 0.5 * clp.eps0)
        m = sampler.inside(rng, R, 1, boundary_fraction=0.25 if k % 4 == 0 else 0.0)[0]
        opts = InfConvOptions(probes=n_probe, seed=int(rng.integers(2**31)))
        res = inf_convolution(clp, kappa, eps, m, opts)
        probes = ekeland_probes(clp, kappa, m, res.minimizer, n_probe, rng)
        eke.append(ekeland_verify(clp, kappa, res.eps_used, m, res.minimizer, probes).worst_margin)
        for name, v in minimizer_bound_margins(clp, res, m, moduli).items():
            bounds.setdefault(name, []).append(v)
        if clp.quadratic:
            val, mu = moreau_closed_form(m, kappa)
            moreau.append(abs(res.value - val) / max(val, 1e-300))
        alpha = gamma_subgradient(res, kappa)
        sigma = 1.0 / (2.0 * kappa * kappa)
        sp = subgradient_probes(res.minimizer, alpha, 1.0, 100, rng, kappa)
        sub.append(proximal_subgradient_verify(clp, res.minimizer, alpha, res.eps_used, sigma, 1.0, sp).worst_margin)
        neg_rep = proximal_subgradient_verify(clp, res.minimizer, alpha.scaled(2.0), res.eps_used, sigma, 1.0,
                                              subgradient_probes(res.minimizer, alpha.scaled(2.0), 1.0, 100, rng, kappa))
        neg.append(not neg_rep.ok)
        b = rng.normal(size=m.points.shape)
        tau = (1e-3, 1e-2, 1e-1)[k % 3]
        tay.append(taylor_bound_verify(clp, kappa, eps, m, b, tau, R, opts, base=res).slack)
        e4 = 0.5 * clp.eps0
        r4 = inf_convolution(clp, kappa, e4, m, opts)
        cond4.append(clp_condition4_check(clp, st.f, st.U, r4.minimizer, e4, [gamma_subgradient(r4, kappa)]).worst_margin)
    rep.add(margin_check("ekeland", eke, 0.0))
    for name, vals in bounds.items():
        rep.add(margin_check(f"bound_{name}", vals, 1e-9))
    if moreau:
        worst = max(moreau)
        rep.add(Check("moreau_closed_form", len(moreau), 1e-4 - worst, worst <= 1e-4))
    rep.add(margin_check("subgradient", sub, 0.0))
    rep.add(Check("subgradient_negative_control", len(neg), float("nan"), any(neg), {"rejected": int(sum(neg))}))
    rep.add(margin_check("taylor_bound", tay, 0.0))
    rep.add(Check("clp_decrease_condition", len(cond4), float(min(cond4)), min(cond4) > 0))


def _lemmas_suite(st: Setup, rep: RunReport, out: Path) -> None:
    _run(st, rep, out, False)


def verify(sc: Scenario, suite: str, out_dir) -> RunReport:
    """Run randomized property suites; every check lists trials and its worst margin."""
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")
    parts = {"transport": _transport_suite, "proximal": _proximal_suite, "lemmas": _lemmas_suite}
    chosen = list(parts) if suite == "all" else [suite]

    def body(st, rep, out):
        for name in chosen:
            t0 = time.perf_counter()
            parts[name](st, rep, out)
            rep.timings[name] = time.perf_counter() - t0

    return _guarded(f"verify:{suite}", sc, out_dir, body)


def shells(sc: Scenario, out_dir) -> RunReport:
    """Build and dump the shell table as CSV and JSON."""

    def body(st, rep, out):
        tab = shell_table(st)
        tab.to_csv(out / "shells.csv")
        rep.parameters = tab.to_json()
        rep.add(Check("shell_radii_invariant", len(tab.indices), float("nan"), tab.invariant_ok()))
        rep.artifacts += ["shells.csv", "report.json"]

    return _guarded("shells", sc, out_dir, body)


# --------------------------------------------------------------------- sweep

SWEEP_COLUMNS = ("axis", "value", "exit_code", "time_to_ball", "min_pairing_margin", "min_decrease_margin",
                 "min_step_margin", "error")


def _sweep_job(args):
    sc, out, axis, value = args
    try:
        job = sc.replace(**{SWEEP_AXES[axis]: value})
    except ConfigError as exc:
        return {"axis": axis, "value": value, "exit_code": EXIT_CONFIG, "error": str(exc)}
    rep = simulate(job, out)
    row = {"axis": axis, "value": value, "exit_code": rep.exit_code, "error": rep.error or ""}
    names = {"pairing_bound": "min_pairing_margin", "phi_kappa_decrease": "min_decrease_margin",
             "step_bound": "min_step_margin"}
    for c in rep.checks:
        if c.name in names:
            row[names[c.name]] = c.worst_margin
    if rep.verdicts:
        row["time_to_ball"] = rep.verdicts["first_entry_time"]
    return row


def sweep(sc: Scenario, axis: str, values, out_dir, jobs: int = 1) -> list[dict]:
    """One simulate per value (disjoint output dirs); failures are recorded and the sweep continues."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    if axis in ("kappa", "eps") and sc.mode != "local":
        raise ConfigError(f"axis {axis} applies to local scenarios only")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    values = [int(v) if axis == "N" else float(v) for v in values]
    tasks = [(sc, out / f"{axis}_{v}", axis, v) for v in values]
    if axis in ("kappa", "eps"):
        # the override needs both keys; fill the other from the selector
        if sc["overrides"]["kappa"] is None or sc["overrides"]["eps"] is None:
            p = local_parameters(build_setup(sc))
            base = sc.replace(**{"overrides.kappa": p.kappa, "overrides.eps": p.eps})
            tasks = [(base, t[1], axis, t[3]) for t in tasks]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_job, tasks))
    else:
        rows = [_sweep_job(t) for t in tasks]
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in SWEEP_COLUMNS})
    return rows
