"""Sample-and-hold feedback synthesis, parameter selection, shells and verdicts."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np

from .dynamics import (
    ControlSet,
    FieldError,
    FlowBlowUp,
    VectorField,
    c2_constant,
    c3_constant,
    default_substeps,
    eval_field,
    flow_segment,
    sublinear_bound,
)
from .lyapunov import (
    ControlLyapunovPair,
    DerivedConstants,
    ModuliTable,
    derived_constants,
    modulus_i,
    modulus_s,
    moduli_table,
    radius_rcal,
    radius_rcal_inverse,
)
from .measures import EmpiricalMeasure, TransportPlan, second_moment_sqrt, w2_distance, write_measure_csv
from .proximal import InfConvOptions, InfConvResult, InfConvergenceError, inf_convolution

__all__ = [
    "StabilizeError",
    "InfeasibleParameters",
    "OutOfRange",
    "TrajectoryError",
    "Partition",
    "make_partition",
    "ShiftChoice",
    "extremal_shift_control",
    "FeedbackDecision",
    "FeedbackPolicy",
    "local_feedback",
    "constant_policy",
    "SelectedParameters",
    "select_parameters",
    "parameters_at",
    "check_parameters",
    "TrajectoryRecord",
    "TrajectoryLog",
    "TrajectoryOptions",
    "run_theta_trajectory",
    "ShellTable",
    "build_shells",
    "global_feedback",
    "Verdict",
    "StabilizationReport",
    "s_stabilization_check",
    "CSV_COLUMNS",
]


class StabilizeError(ValueError):
    """Invalid stabilization request."""


class InfeasibleParameters(StabilizeError):
    def __init__(self, message: str, last_failed: str | None):
        super().__init__(message)
        self.last_failed = last_failed


class OutOfRange(StabilizeError):
    """Measure lies outside the outermost shell."""


class TrajectoryError(RuntimeError):
    """Simulation failure; ``log`` holds everything recorded before it."""

    def __init__(self, message: str, log: "TrajectoryLog"):
        super().__init__(message)
        self.log = log


# ---------------------------------------------------------------- partitions


@dataclass(frozen=True, eq=False)
class Partition:
    times: np.ndarray
    delta_min: float
    delta_max: float

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        if t.ndim != 1 or len(t) < 2 or t[0] != 0.0:
            raise StabilizeError("partition must start at 0 and have at least one step")
        steps = np.diff(t)
        slack = 1e-9 * max(1.0, float(t[-1]))
        if np.any(steps < self.delta_min - slack) or np.any(steps > self.delta_max + slack):
            raise StabilizeError("partition step outside [delta_min, delta_max]")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])


def make_partition(delta_min: float, delta_max: float, horizon: float, rule: str = "uniform", seed: int | None = None) -> Partition:
    """Partition of [0, horizon] with steps in [delta_min, delta_max].

    ``uniform`` uses the fewest equal steps no longer than delta_max;
    ``jittered`` draws steps uniformly from [delta_min, delta_max] and
    rescales the tail so the last knot lands on the horizon when possible.
    """
    if not (0 < delta_min <= delta_max):
        raise StabilizeError("need 0 < delta_min <= delta_max")
    if not horizon > 0:
        raise StabilizeError("horizon must be positive")
    if delta_min > horizon:
        raise StabilizeError("delta_min exceeds the horizon")
    if rule == "uniform":
        n = int(math.ceil(horizon / delta_max - 1e-9))
        h = horizon / n
        if h < delta_min * (1 - 1e-12):
            raise StabilizeError("no uniform partition fits the step bounds")
        times = np.arange(n + 1) * h
        times[-1] = horizon
        return Partition(times, delta_min, delta_max)
    if rule == "jittered":
        rng = np.random.default_rng(seed)
        times = [0.0]
        while times[-1] < horizon:
            left = horizon - times[-1]
            if left <= delta_max:
                step = left if left >= delta_min else delta_min
            else:
                step = float(rng.uniform(delta_min, delta_max))
                if left - step < delta_min:
                    step = max(delta_min, min(delta_max, left - delta_min)) if left - delta_min >= delta_min else delta_min
            times.append(times[-1] + step)
        return Partition(np.array(times), delta_min, delta_max)
    raise StabilizeError(f"unknown partition rule {rule!r}")


# ------------------------------------------------------------------ feedback


@dataclass(frozen=True)
class ShiftChoice:
    index: int
    control: np.ndarray
    objectives: np.ndarray

    @property
    def value(self) -> float:
        return float(self.objectives[self.index])


def extremal_shift_control(
    m: EmpiricalMeasure,
    plan: TransportPlan,
    minimizer: EmpiricalMeasure,
    f: VectorField,
    U: ControlSet,
    kappa: float,
    covectors: np.ndarray | None = None,
) -> ShiftChoice:
    """argmin_u sum over plan pairs of mass * ((x - y)/kappa^2) . f(x, m, u).

    ``covectors`` (one per plan pair) overrides (x - y)/kappa^2 when given.
    Ties go to the first control in U's stored order.
    """
    if len(U) == 0:
        raise StabilizeError("empty control set")
    xs = m.points[plan.source]
    if covectors is None:
        covectors = (xs - minimizer.points[plan.target]) / (kappa * kappa)
    w = plan.mass
    objectives = np.empty(len(U))
    for k, u in enumerate(U):
        drift = eval_field(f, xs, m, u)
        objectives[k] = float(np.sum(w * np.einsum("ij,ij->i", covectors, drift)))
    lo = float(objectives.min())
    tie = 1e-12 * max(1.0, float(np.max(np.abs(objectives))))
    index = int(np.flatnonzero(objectives <= lo + tie)[0])
    return ShiftChoice(index, U[index], objectives)


@dataclass(frozen=True)
class FeedbackDecision:
    control_index: int
    control: np.ndarray
    objective: float
    phi_kappa: float
    kappa: float
    eps: float
    shell_index: int | None = None
    infconv: InfConvResult | None = None
    params: dict = field(default_factory=dict)


@dataclass
class FeedbackPolicy:
    kind: str
    decide: Callable[[EmpiricalMeasure], FeedbackDecision]
    U: ControlSet
    clp: ControlLyapunovPair | None = None
    params: dict = field(default_factory=dict)
    infconv_options: InfConvOptions | None = None

    def control_of(self, m: EmpiricalMeasure) -> np.ndarray:
        return self.U[self.decide(m).control_index]

    def phi_kappa(self, m: EmpiricalMeasure, kappa: float, eps: float) -> float:
        return inf_convolution(self.clp, kappa, eps, m, self.infconv_options).value


def _decide_local(clp, f, U, kappa, eps, opts, params, m, shell=None, res=None) -> FeedbackDecision:
    if res is None:
        res = inf_convolution(clp, kappa, eps, m, opts)
    choice = extremal_shift_control(m, res.plan, res.minimizer, f, U, kappa, res.covectors)
    return FeedbackDecision(choice.index, choice.control, choice.value, res.value, kappa, eps, shell, res, params)


def local_feedback(
    clp: ControlLyapunovPair,
    f: VectorField,
    U: ControlSet,
    kappa: float,
    eps: float,
    opts: InfConvOptions | None = None,
    params: dict | None = None,
) -> FeedbackPolicy:
    """Extremal-shift feedback for one (kappa, eps); recomputed at every call."""
    if not (0 < kappa <= 1) or not eps > 0:
        raise StabilizeError("need 0 < kappa <= 1 and eps > 0")
    params = dict(params or {})
    params.setdefault("kappa", kappa)
    params.setdefault("eps", eps)

    def decide(m):
        return _decide_local(clp, f, U, kappa, eps, opts, params, m)

    return FeedbackPolicy("local", decide, U, clp, params, opts)


def constant_policy(
    U: ControlSet, index: int, clp: ControlLyapunovPair | None = None, kappa: float = 1.0, eps: float = 0.1,
    opts=None, params: dict | None = None,
) -> FeedbackPolicy:
    """Open-loop policy always returning U[index]; phi_kappa still recorded when a CLP is given."""
    params = dict(params or {})

    def decide(m):
        val = inf_convolution(clp, kappa, eps, m, opts).value if clp is not None else float("nan")
        return FeedbackDecision(index, U[index], float("nan"), val, kappa, eps, None, None, params)

    return FeedbackPolicy("constant", decide, U, clp, {"kappa": kappa, "eps": eps}, opts)


# ------------------------------------------------------- parameter selection


@dataclass
class SelectedParameters:
    kappa: float
    eps: float
    delta_max: float
    delta_min: float
    T_bound: float
    n_steps_bound: int
    r: float
    R: float
    C0: float
    C1: float
    C2: float
    C3: float
    I_R: float
    I_r: float
    sigma_target: float
    constants: DerivedConstants
    moduli: ModuliTable = field(repr=False)
    checks: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("constants", "moduli", "checks")}
        out["constants"] = self.constants.to_dict()
        out["moduli"] = self.moduli.to_dict(self.eps)
        out["checks"] = self.checks
        return out

    def shell_params(self) -> dict:
        c = self.constants
        return {
            "kappa": self.kappa, "eps": self.eps, "R": self.R, "r": self.r, "Rcal_r": c.Rcal_r,
            "Delta": c.Delta, "N_ke": c.N_ke, "C1": self.C1, "C0": self.C0, "sigma_target": self.sigma_target,
            "I_R": self.I_R, "T": self.T_bound, "delta_max": self.delta_max,
        }


def _linear_growth_term(C1: float, kappa: float, sigma: float, R: float) -> float:
    s = sigma + R
    return C1 * C1 / (2.0 * kappa * kappa) * (1.0 + 4.0 * s + 4.0 * s * s)


def _inequalities(dc: DerivedConstants, clp, C0: float, I_R: float, I_r: float) -> dict[str, tuple[float, float]]:
    """The five (lhs, rhs) pairs that must satisfy lhs < rhs."""
    return {
        "level_set_inside_ball": (dc.omega_M + dc.N_ke, 0.5 * I_R),
        "minimizer_near": (dc.M_ke, 0.5 * dc.Rcal_r),
        "drift_mismatch": (2.0 * C0 * dc.K_ke**2 / dc.kappa**2, dc.Delta),
        "small_ball_level": (dc.omega_M + dc.N_ke, 0.25 * I_r),
        "eps_below_eps0": (dc.eps, clp.eps0),
    }


def _delta_bound(dc: DerivedConstants, moduli: ModuliTable, C0, C1, sigma, R, I_r, margin, headroom) -> float:
    delta = 1.0
    for _ in range(100):
        c3 = c3_constant(R, delta, C0, C1, sigma)
        dprime = dc.Delta / (dc.M_ke * c3 + _linear_growth_term(C1, dc.kappa, sigma, R))
        target = headroom * dprime
        if delta <= target:
            break
        delta = target
    while moduli.omega(dc.eps, c2_constant(R, delta, C1, sigma) * delta) >= (1 - margin) * 0.25 * I_r:
        delta *= 0.5
    return delta


class _Selector:
    """Shared state for evaluating the selector conditions at given (kappa, eps)."""

    def __init__(self, clp, f, U, r, R, sampler, margin, headroom, delta_min, eps_floor_ratio, C0):
        if not (0 < r < R):
            raise StabilizeError("need 0 < r < R")
        if C0 is None:
            C0 = f.C0
        if C0 is None:
            raise StabilizeError("field has no Lipschitz constant; declare C0")
        self.clp, self.r, self.R, self.sampler = clp, r, R, sampler
        self.margin, self.headroom, self.delta_min, self.eps_floor_ratio = margin, headroom, delta_min, eps_floor_ratio
        self.C0 = float(C0)
        self.C1 = sublinear_bound(f, self.C0, U)
        self.sigma = second_moment_sqrt(clp.target)
        self.moduli = moduli_table(clp, R, sampler)
        self.I_r = modulus_i(clp, r, sampler)
        self.Rcal_r = radius_rcal(clp, r, sampler)

    def evaluate(self, kappa: float, eps: float) -> tuple[SelectedParameters, list[str]]:
        """Parameters at (kappa, eps) and the names of the conditions that fail."""
        keep = 1.0 - self.margin
        dc = derived_constants(self.clp, self.moduli, kappa, eps, self.r, self.R, self.sampler,
                               self.eps_floor_ratio, Rcal_r=self.Rcal_r)
        checks = _inequalities(dc, self.clp, self.C0, self.moduli.I, self.I_r)
        failed = [name for name, (lhs, rhs) in checks.items() if not lhs < keep * rhs]
        report = {name: {"lhs": lhs, "rhs": rhs, "ok": lhs < keep * rhs} for name, (lhs, rhs) in checks.items()}
        delta_max = _delta_bound(dc, self.moduli, self.C0, self.C1, self.sigma, self.R, self.I_r, self.margin, self.headroom)
        dmin = delta_max / 2.0 if self.delta_min is None else self.delta_min
        strict = dc.N_ke < keep * dc.Delta * dmin
        report["strict_decrease"] = {"lhs": dc.N_ke, "rhs": dc.Delta * dmin, "ok": strict}
        if not strict:
            failed.append("strict_decrease")
        rate = dc.Delta - dc.N_ke / dmin
        T = self.moduli.I / (2.0 * rate) + delta_max if rate > 0 else math.inf
        params = SelectedParameters(
            kappa, eps, delta_max, dmin, T, int(math.ceil(T / dmin)) if math.isfinite(T) else -1,
            self.r, self.R, self.C0, self.C1,
            c2_constant(self.R, delta_max, self.C1, self.sigma), c3_constant(self.R, delta_max, self.C0, self.C1, self.sigma),
            self.moduli.I, self.I_r, self.sigma, dc, self.moduli, report,
        )
        return params, failed


def select_parameters(
    clp: ControlLyapunovPair,
    f: VectorField,
    U: ControlSet,
    r: float,
    R: float,
    *,
    sampler=None,
    margin: float = 0.05,
    headroom: float = 0.5,
    kappa_ratio: float = 0.7,
    eps_ratio: float = 0.5,
    max_k: int = 80,
    max_j: int = 80,
    delta_min: float | None = None,
    eps_floor_ratio: float = 1e-6,
    C0: float | None = None,
) -> SelectedParameters:
    """First (kappa, eps) on the descending grids meeting all five conditions.

    kappa runs over kappa_ratio^k; for each kappa, eps runs over
    kappa^2 * eps_ratio^j. After the five conditions, delta_max is fixed
    from the decrease condition (with ``headroom``) and the small-ball
    condition; the decrease threshold on eps is made explicit by
    requiring N < Delta * delta_min (delta_min defaults to delta_max / 2).
    """
    sel = _Selector(clp, f, U, r, R, sampler, margin, headroom, delta_min, eps_floor_ratio, C0)
    last_failed = None
    for k in range(max_k):
        kappa = kappa_ratio**k
        for j in range(max_j):
            params, failed = sel.evaluate(kappa, kappa * kappa * eps_ratio**j)
            if not failed:
                return params
            last_failed = failed[0]
            # these two barely move with eps; go to the next kappa
            if failed[0] in ("minimizer_near", "drift_mismatch") and j > 4:
                break
    raise InfeasibleParameters(f"parameter grid exhausted; last failing condition: {last_failed}", last_failed)


def parameters_at(
    clp: ControlLyapunovPair, f: VectorField, U: ControlSet, r: float, R: float, kappa: float, eps: float, **kw
) -> SelectedParameters:
    """Constants and checks at a user-chosen (kappa, eps); failures are reported, not raised."""
    sel = _Selector(clp, f, U, r, R, kw.get("sampler"), kw.get("margin", 0.05), kw.get("headroom", 0.5),
                    kw.get("delta_min"), kw.get("eps_floor_ratio", 1e-6), kw.get("C0"))
    return sel.evaluate(kappa, eps)[0]


def check_parameters(clp: ControlLyapunovPair, params: SelectedParameters, delta: float | None = None) -> dict[str, bool]:
    """Re-evaluate every selector condition from scratch (no margin)."""
    moduli = moduli_table(clp, params.R)
    dc = derived_constants(clp, moduli, params.kappa, params.eps, params.r, params.R)
    out = {name: lhs < rhs for name, (lhs, rhs) in _inequalities(dc, clp, params.C0, moduli.I, modulus_i(clp, params.r)).items()}
    d = params.delta_max if delta is None else delta
    c3 = c3_constant(params.R, d, params.C0, params.C1, params.sigma_target)
    out["decrease_step"] = dc.Delta > d * (dc.M_ke * c3 + _linear_growth_term(params.C1, dc.kappa, params.sigma_target, params.R))
    c2 = c2_constant(params.R, d, params.C1, params.sigma_target)
    out["small_ball_step"] = moduli.omega(dc.eps, c2 * d) < 0.25 * modulus_i(clp, params.r)
    out["strict_decrease"] = dc.N_ke < dc.Delta * params.delta_min
    return out


# ---------------------------------------------------------------- trajectory

CSV_COLUMNS = (
    "t", "control_id", "phi", "phi_kappa", "w2_to_target", "shell_index",
    "lemma52_margin", "lemma53_margin", "prop26_margin",
)


@dataclass
class TrajectoryRecord:
    t: float
    control_id: int
    phi: float
    phi_kappa: float
    w2_to_target: float
    shell_index: int | None
    lemma52_margin: float
    lemma53_margin: float
    prop26_margin: float
    knot: bool = False

    def row(self) -> list[str]:
        def num(v):
            return f"{v:.17g}"

        return [
            num(self.t), str(self.control_id), num(self.phi), num(self.phi_kappa), num(self.w2_to_target),
            "" if self.shell_index is None else str(self.shell_index),
            num(self.lemma52_margin), num(self.lemma53_margin), num(self.prop26_margin),
        ]


@dataclass
class TrajectoryLog:
    records: list[TrajectoryRecord] = field(default_factory=list)
    states: list[EmpiricalMeasure] = field(default_factory=list, repr=False)
    partition: Partition | None = None
    seed: int | None = None
    scenario_hash: str = ""
    extras: list[dict] = field(default_factory=list, repr=False)

    def append(self, rec: TrajectoryRecord, state: EmpiricalMeasure, extra: dict | None = None):
        self.records.append(rec)
        self.states.append(state)
        self.extras.append(extra or {})

    def column(self, name: str) -> np.ndarray:
        vals = [getattr(r, name) for r in self.records]
        if name == "shell_index":
            return np.array([np.nan if v is None else v for v in vals], dtype=float)
        return np.array(vals, dtype=float)

    def knots(self) -> list[int]:
        return [k for k, r in enumerate(self.records) if r.knot]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for rec in self.records:
                w.writerow(rec.row())

    @staticmethod
    def read_csv(path) -> list[TrajectoryRecord]:
        out = []
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise StabilizeError(f"{path}: unexpected trajectory columns {reader.fieldnames}")
            for row in reader:
                out.append(TrajectoryRecord(
                    float(row["t"]), int(row["control_id"]), float(row["phi"]), float(row["phi_kappa"]),
                    float(row["w2_to_target"]), None if row["shell_index"] == "" else int(row["shell_index"]),
                    float(row["lemma52_margin"]), float(row["lemma53_margin"]), float(row["prop26_margin"]),
                    knot=not math.isnan(float(row["phi_kappa"])),
                ))
        return out

    def write_snapshots(self, directory, stride: int = 1) -> list[Path]:
        """Knot states every ``stride`` knots as step_XXXXX.csv."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for n, k in enumerate(self.knots()):
            if n % max(1, stride):
                continue
            p = d / f"step_{n:05d}.csv"
            write_measure_csv(self.states[k], p)
            paths.append(p)
        return paths


@dataclass(frozen=True)
class TrajectoryOptions:
    substeps: int | None = None
    max_dt: float = 0.01


def _region_params(dec: FeedbackDecision) -> dict:
    return dec.params or {}


def run_theta_trajectory(
    m_star: EmpiricalMeasure,
    partition: Partition,
    policy: FeedbackPolicy,
    f: VectorField,
    opts: TrajectoryOptions | None = None,
    target: EmpiricalMeasure | None = None,
) -> TrajectoryLog:
    """Evaluate the policy at each knot, hold the control, integrate, record diagnostics.

    Margins (positive = bound satisfied; NaN = not applicable), by CSV column:
    lemma52 (pairing bound) = -2 Delta - pairing at the chosen control, at knots with
    Rcal(r) < W2 <= R; lemma53 (phi_kappa decrease) = (-Delta (t_{i+1} - t_i) + N) - (phi_kappa
    change over the segment), recorded at t_{i+1} for segments starting in
    that region; prop26 (step bound) = C2 (t - t_i) - W2(m_t, m_{t_i}) for segments
    starting inside B_R.
    """
    opts = opts or TrajectoryOptions()
    if target is None:
        if policy.clp is None:
            raise StabilizeError("need a target measure")
        target = policy.clp.target
    center = target.points[0] if np.all(target.points == target.points[0]) else None
    clp = policy.clp

    def dist(m):
        if center is not None:
            return second_moment_sqrt(m, center)
        return w2_distance(m, target)

    def phi(m):
        return clp.phi(m) if clp is not None else float("nan")

    log = TrajectoryLog(partition=partition)
    nan = float("nan")
    m = m_star
    times = partition.times
    prev = None  # (decision, start measure, start time, w2 at start)
    try:
        for i, t in enumerate(times):
            t = float(t)
            dec = policy.decide(m)
            w = dist(m)
            p = _region_params(dec)
            l52 = nan
            if "Delta" in p and p["Rcal_r"] < w <= p["R"] and not math.isnan(dec.objective):
                l52 = -2.0 * p["Delta"] - dec.objective
            l53 = p26 = nan
            if prev is not None:
                pdec, pm, pt, pw = prev
                pp = _region_params(pdec)
                if "Delta" in pp and pp["Rcal_r"] < pw <= pp["R"]:
                    if (pdec.kappa, pdec.eps) == (dec.kappa, dec.eps):
                        now = dec.phi_kappa
                    else:
                        now = policy.phi_kappa(m, pdec.kappa, pdec.eps)
                    l53 = (-pp["Delta"] * (t - pt) + pp["N_ke"]) - (now - pdec.phi_kappa)
                p26 = _prop26(pp, pw, partition, t - pt, m, pm)
            log.append(
                TrajectoryRecord(t, dec.control_index, phi(m), dec.phi_kappa, w, dec.shell_index, l52, l53, p26, knot=True),
                m,
                {"objective": dec.objective},
            )
            if i == len(times) - 1:
                break
            t_next = float(times[i + 1])
            sub = opts.substeps or default_substeps(t, t_next, opts.max_dt)
            seg = flow_segment(m, f, dec.control, t, t_next, sub)
            for s in range(1, len(seg.times) - 1):
                ms = seg.states[s]
                ts = float(seg.times[s])
                log.append(
                    TrajectoryRecord(ts, dec.control_index, phi(ms), nan, dist(ms), dec.shell_index, nan, nan,
                                     _prop26(p, w, partition, ts - t, ms, m)),
                    ms,
                )
            prev = (dec, m, t, w)
            m = seg.final
    except (FlowBlowUp, InfConvergenceError, FieldError, OutOfRange) as exc:
        raise TrajectoryError(f"trajectory failed at t={log.records[-1].t if log.records else 0.0}: {exc}", log) from exc
    return log


def _prop26(p: dict, w_start: float, partition: Partition, elapsed: float, m_t, m_start) -> float:
    if "C1" not in p or w_start > p["R"]:
        return float("nan")
    c2 = c2_constant(p["R"], partition.delta_max, p["C1"], p.get("sigma_target", 0.0))
    return c2 * elapsed - w2_distance(m_t, m_start)


# -------------------------------------------------------------------- shells


@dataclass
class ShellTable:
    indices: list[int]
    Q: dict[int, float]
    q: dict[int, float]
    Rcal: dict[int, float]
    params: dict[int, SelectedParameters | None] = field(default_factory=dict, repr=False)

    COLUMNS = ("i", "Q", "q", "Rcal_Q", "twoQ_le_Rcal_next", "kappa", "eps", "delta", "T")

    def rows(self) -> list[dict]:
        out = []
        for i in self.indices:
            p = self.params.get(i)
            nxt = self.Rcal.get(i + 1)
            out.append({
                "i": i, "Q": self.Q[i], "q": self.q[i], "Rcal_Q": self.Rcal[i],
                "twoQ_le_Rcal_next": "" if nxt is None else str(2.0 * self.Q[i] <= nxt * (1 + 1e-12)).lower(),
                "kappa": p.kappa if p else "", "eps": p.eps if p else "",
                "delta": p.delta_max if p else "", "T": p.T_bound if p else "",
            })
        return out

    def invariant_ok(self) -> bool:
        for i in self.indices:
            if i + 1 in self.Rcal and not 2.0 * self.Q[i] <= self.Rcal[i + 1] * (1 + 1e-12):
                return False
            if i + 1 in self.q and not self.q[i + 1] < self.Q[i]:
                return False
        return all(self.Q[a] < self.Q[b] for a, b in zip(self.indices, self.indices[1:]))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})

    def to_json(self) -> dict:
        return {"shells": self.rows()}

    @classmethod
    def from_csv(cls, path) -> "ShellTable":
        idx, Q, q, rc = [], {}, {}, {}
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                i = int(row["i"])
                idx.append(i)
                Q[i], q[i], rc[i] = float(row["Q"]), float(row["q"]), float(row["Rcal_Q"])
        return cls(idx, Q, q, rc)

    def same_radii(self, other: "ShellTable") -> bool:
        return self.indices == other.indices and all(
            self.Q[i] == other.Q[i] and self.q[i] == other.q[i] and self.Rcal[i] == other.Rcal[i] for i in self.indices
        )

    def outer_index(self, R: float, clp: ControlLyapunovPair) -> int:
        """N(R): smallest stored j with B_R inside the level set G_{Q_j}."""
        s = modulus_s(clp, R)
        for i in self.indices:
            if s <= 0.5 * modulus_i(clp, self.Q[i]) * (1 + 1e-12):
                return i
        raise OutOfRange(f"radius {R} exceeds the shell table; raise i_max")

    def inner_index(self, r: float) -> int | None:
        """K(r): largest stored j with Q_j <= r (so G_{Q_j}^kappa lies in B_r)."""
        hits = [i for i in self.indices if self.Q[i] <= r]
        return max(hits) if hits else None


def build_shells(
    clp: ControlLyapunovPair,
    Q0: float,
    i_min: int,
    i_max: int,
    per_shell_params: Callable[[int, float, float], SelectedParameters] | None = None,
    sampler=None,
) -> ShellTable:
    """Radii with 2 Q_i <= Rcal(Q_{i+1}) and q_i = Rcal(Q_{i-1}) / 2."""
    if not Q0 > 0:
        raise StabilizeError("Q0 must be positive")
    if not i_min < 0 < i_max:
        raise StabilizeError("need i_min < 0 < i_max")
    Q = {0: float(Q0)}
    if clp.quadratic:
        for i in range(i_min - 1, i_max + 2):
            Q[i] = float(Q0) * 8.0 ** (i / 2.0)
    else:
        for i in range(0, i_max + 1):
            Q[i + 1] = radius_rcal_inverse(clp, 2.0 * Q[i], sampler)
        for i in range(0, i_min - 1, -1):
            Q[i - 1] = 0.5 * radius_rcal(clp, Q[i], sampler)
    Rc = {i: radius_rcal(clp, Q[i], sampler) for i in Q}
    indices = list(range(i_min, i_max + 1))
    table = ShellTable(
        indices,
        {i: Q[i] for i in indices},
        {i: 0.5 * Rc[i - 1] for i in indices},
        {i: Rc[i] for i in indices},
    )
    table.Rcal[i_max + 1] = Rc[i_max + 1]
    if not table.invariant_ok():
        raise StabilizeError("shell radii violate 2 Q_i <= Rcal(Q_{i+1})")
    if per_shell_params is not None:
        for i in indices:
            try:
                table.params[i] = per_shell_params(i, table.q[i], table.Q[i])
            except InfeasibleParameters as exc:
                raise InfeasibleParameters(f"shell {i}: {exc}", exc.last_failed) from exc
    return table


def global_feedback(
    shells: ShellTable,
    clp: ControlLyapunovPair,
    f: VectorField,
    U: ControlSet,
    fallback_control: int | None = None,
    opts: InfConvOptions | None = None,
    tol: float = 1e-9,
    at_target_tol: float = 1e-12,
) -> FeedbackPolicy:
    """Dispatch to the local feedback of the shell H_{i-1} containing m.

    Membership in G_{Q_j}^{kappa_j} is phi_{kappa_j}(m) <= I(Q_j)/2 + tol,
    scanned from the outermost shell inward; the shell index is the
    smallest j that still contains m.
    """
    if any(shells.params.get(i) is None for i in shells.indices):
        raise StabilizeError("every shell needs selected parameters")
    u0 = U.neutral_index() if fallback_control is None else int(fallback_control)
    levels = {i: 0.5 * modulus_i(clp, shells.Q[i]) for i in shells.indices}
    sp = {i: shells.params[i].shell_params() for i in shells.indices}
    top = max(shells.indices)

    def decide(m):
        if clp.distance_to_target(m) <= at_target_tol:
            return FeedbackDecision(u0, U[u0], float("nan"), 0.0, float("nan"), float("nan"), None, None, {})
        memo: dict[tuple[float, float], InfConvResult] = {}

        def phik(i):
            key = (sp[i]["kappa"], sp[i]["eps"])
            if key not in memo:
                memo[key] = inf_convolution(clp, key[0], key[1], m, opts)
            return memo[key]

        if phik(top).value > levels[top] + tol:
            raise OutOfRange(f"measure outside the outermost shell (phi_kappa={phik(top).value:.6g}); raise i_max")
        idx = top
        for j in sorted(shells.indices, reverse=True)[1:]:
            if phik(j).value <= levels[j] + tol:
                idx = j
            else:
                break
        p = sp[idx]
        return _decide_local(clp, f, U, p["kappa"], p["eps"], opts, p, m, shell=idx, res=phik(idx))

    return FeedbackPolicy("global", decide, U, clp, {"shells": shells.indices}, opts)


# ------------------------------------------------------------------ verdicts


@dataclass
class Verdict:
    name: str
    status: str  # pass | fail | insufficient-data
    margin: float
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "pass"


@dataclass
class StabilizationReport:
    verdicts: list[Verdict]
    first_entry_time: float | None

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def get(self, name: str) -> Verdict:
        for v in self.verdicts:
            if v.name == name:
                return v
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "first_entry_time": self.first_entry_time,
                "verdicts": [asdict(v) for v in self.verdicts]}


def _status(ok: bool) -> str:
    return "pass" if ok else "fail"


def s_stabilization_check(
    log: TrajectoryLog | list[TrajectoryRecord],
    r: float,
    R: float,
    shells: ShellTable | None = None,
    clp: ControlLyapunovPair | None = None,
    T: float | None = None,
    R_sweep=(4.0, 2.0, 1.0, 0.5),
    delta: float | None = None,
    tol: float = 1e-9,
) -> StabilizationReport:
    """Reach B_r by T, stay within M(R), and M(R) nonincreasing as R shrinks.

    Without shells M(R) = R (the local stabilization ball). ``T`` defaults to the
    theoretical bound assembled from the shells' T_i.
    """
    records = log.records if isinstance(log, TrajectoryLog) else list(log)
    if not records:
        raise StabilizeError("trajectory log has no records")
    t = np.array([rec.t for rec in records])
    w = np.array([rec.w2_to_target for rec in records])
    verdicts = []
    inside = np.flatnonzero(w <= r)
    first = float(t[inside[0]]) if len(inside) else None

    if shells is not None and clp is None:
        raise StabilizeError("shell verdicts need the CLP")
    if T is None:
        if shells is None:
            raise StabilizeError("no reach time given")
        T = _theory_time(shells, clp, r, R, delta)
    after = t >= T
    if not np.any(after):
        verdicts.append(Verdict("reach", "insufficient-data", float("nan"), {"T": T}))
    else:
        verdicts.append(Verdict("reach", _status(bool(np.all(w[after] <= r + tol))), float(r - w[after].max()), {"T": T}))

    M = (lambda rad: shells.Q[shells.outer_index(rad, clp)]) if shells is not None else (lambda rad: rad)
    bound = M(R)
    verdicts.append(Verdict("bounded", _status(bool(w.max() <= bound + tol)), float(bound - w.max()), {"M": bound}))
    ms = [M(rad) for rad in R_sweep]
    ok = all(a >= b for a, b in zip(ms, ms[1:]))
    verdicts.append(Verdict("shrinking", _status(ok), float(min((a - b for a, b in zip(ms, ms[1:])), default=0.0)),
                            {"R": list(R_sweep), "M": ms}))

    if shells is not None:
        idx = [rec.shell_index for rec in records if rec.knot]
        kt = [rec.t for rec in records if rec.knot]
        known = [i for i in idx if i is not None]
        start = known[0] if known else None
        stay = start is None or all(i <= start for i in known)
        verdicts.append(Verdict("start_level_invariant", _status(stay), float(start - max(known)) if known else 0.0,
                                {"start_index": start}))
        worst = 0
        for a, (ia, ta) in enumerate(zip(idx, kt)):
            if ia is None:
                continue
            Ti = shells.params[ia].T_bound if shells.params.get(ia) else 0.0
            for ib, tb in zip(idx[a:], kt[a:]):
                if ib is not None and tb >= ta + Ti and ib > ia:
                    worst = max(worst, ib - ia)
        verdicts.append(Verdict("shell_descent", _status(worst == 0), float(-worst)))
    return StabilizationReport(verdicts, first)


def _theory_time(shells: ShellTable, clp, r: float, R: float, delta: float | None) -> float:
    n = shells.outer_index(R, clp)
    k = shells.inner_index(r)
    if k is None:
        raise OutOfRange("no shell fits inside B_r; lower i_min")
    d = delta if delta is not None else min(shells.params[i].delta_max for i in shells.indices if shells.params.get(i))
    return float(sum(shells.params[i].T_bound + d for i in range(k + 1, n + 1)))
