"""Run reports: structured results, JSON persistence and re-validation from disk."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .stabilize import TrajectoryLog

__all__ = [
    "EXIT_OK",
    "EXIT_PROPERTY",
    "EXIT_CONFIG",
    "EXIT_NONCONVERGENCE",
    "Check",
    "RunReport",
    "margin_check",
    "revalidate",
]

EXIT_OK = 0
EXIT_PROPERTY = 2
EXIT_CONFIG = 3
EXIT_NONCONVERGENCE = 4

# trajectory CSV column -> check name
MARGIN_COLUMNS = {
    "lemma52_margin": "pairing_bound",
    "lemma53_margin": "phi_kappa_decrease",
    "prop26_margin": "step_bound",
}


def _clean(x):
    """JSON-safe floats: NaN and infinities become strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class Check:
    name: str
    trials: int
    worst_margin: float
    passed: bool
    detail: dict = field(default_factory=dict)


def margin_check(name: str, margins, tol: float, detail: dict | None = None) -> Check:
    """Pass iff every non-NaN margin is >= -tol. No applicable samples counts as a pass with 0 trials."""
    arr = np.asarray(margins, dtype=float)
    arr = arr[~np.isnan(arr)]
    worst = float(arr.min()) if arr.size else float("nan")
    return Check(name, int(arr.size), worst, bool(arr.size == 0 or worst >= -tol), dict(detail or {}, tolerance=tol))


@dataclass
class RunReport:
    command: str
    scenario: dict
    scenario_hash: str
    seeds: dict = field(default_factory=dict)
    parameters: dict = field(default_factory=dict)
    moduli: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    verdicts: dict | None = None
    timings: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    error: str | None = None
    exit_code: int = EXIT_OK

    def add(self, check: Check) -> None:
        if any(c.name == check.name for c in self.checks):
            raise ValueError(f"check {check.name!r} recorded twice")
        self.checks.append(check)

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def passed(self) -> bool:
        ok = all(c.passed for c in self.checks)
        if self.verdicts is not None:
            ok = ok and bool(self.verdicts.get("passed", False))
        return ok and self.error is None

    def finalize(self) -> int:
        """Set the exit code from the checks unless an error code is already set."""
        if self.exit_code == EXIT_OK and not self.passed:
            self.exit_code = EXIT_PROPERTY
        return self.exit_code

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = "pass" if self.exit_code == EXIT_OK else "fail"
        return _clean(d)

    def write(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n")
        return p

    @staticmethod
    def read(path) -> dict:
        return json.loads(Path(path).read_text())


def _num(v) -> float:
    return float(v)  # also parses the 'nan' / 'inf' strings written by _clean


def revalidate(out_dir, tol: float | None = None) -> tuple[bool, list[str]]:
    """Re-check a simulate run from report.json and trajectory.csv alone.

    Recomputes the margin minima, the knot decrease and the reach/bounded
    verdicts from the CSV, and compares them with what the report claims.
    Returns (consistent, problems).
    """
    out = Path(out_dir)
    rep = RunReport.read(out / "report.json")
    records = TrajectoryLog.read_csv(out / "trajectory.csv")
    tol = float(rep["scenario"]["tolerance"]) if tol is None else tol
    problems = []
    claimed = {c["name"]: c for c in rep["checks"]}
    above = rep["parameters"].get("checked_shells_above")
    for col, name in MARGIN_COLUMNS.items():
        if name not in claimed:
            continue
        recs = records
        if name != "step_bound" and above is not None:
            recs = [r for r in records if r.shell_index is None or r.shell_index > above]
        chk = margin_check(name, [getattr(r, col) for r in recs], tol)
        c = claimed[name]
        if chk.passed != c["passed"]:
            problems.append(f"{name}: CSV says passed={chk.passed}, report says {c['passed']}")
        if chk.trials and _num(c["worst_margin"]) != chk.worst_margin:
            problems.append(f"{name}: worst margin {chk.worst_margin!r} differs from reported {c['worst_margin']!r}")
    if "knot_decrease" in claimed:
        ok = knot_decrease_margins(records, above)
        passed = bool(np.all(ok > 0))
        if passed != claimed["knot_decrease"]["passed"]:
            problems.append("knot_decrease: CSV disagrees with report")
    v = rep.get("verdicts")
    if v:
        r, R = float(rep["scenario"]["r"]), float(rep["scenario"]["R"])
        t = np.array([rec.t for rec in records])
        w = np.array([rec.w2_to_target for rec in records])
        for item in v["verdicts"]:
            if item["name"] == "reach" and item["status"] != "insufficient-data":
                T = _num(item["detail"]["T"])
                ok = bool(np.all(w[t >= T] <= r + 1e-9))
                if ok != (item["status"] == "pass"):
                    problems.append("reach verdict disagrees with CSV")
            if item["name"] == "bounded":
                ok = bool(w.max() <= _num(item["detail"]["M"]) + 1e-9)
                if ok != (item["status"] == "pass"):
                    problems.append("bounded verdict disagrees with CSV")
        if rep["status"] == "pass" and not v["passed"]:
            problems.append("report claims pass but verdicts fail")
    if rep["status"] == "pass" and not all(c["passed"] for c in rep["checks"]):
        problems.append("report claims pass but a check failed")
    return not problems, problems


def knot_decrease_margins(records, above: int | None = None) -> np.ndarray:
    """phi_kappa(t_i) - phi_kappa(t_{i+1}) over consecutive knots in the decrease region.

    A segment is in the region exactly when its end knot carries a decrease
    margin; segments that switch shells (and hence kappa) are skipped, as
    are shells with index <= ``above`` when given.
    """
    knots = [r for r in records if r.knot]
    out = []
    for a, b in zip(knots, knots[1:]):
        if math.isnan(b.lemma53_margin) or a.shell_index != b.shell_index:
            continue
        if above is not None and a.shell_index is not None and a.shell_index <= above:
            continue
        out.append(a.phi_kappa - b.phi_kappa)
    return np.array(out, dtype=float)
