"""Uniform empirical measures and exact discrete optimal transport.

A measure is N equally weighted points in R^d. Equal-N couplings are solved
as assignment problems (exact, cubic time); unequal-N couplings as a dense
transportation linear program.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

__all__ = [
    "EmpiricalMeasure",
    "TransportPlan",
    "PlanCostReport",
    "MeasureError",
    "push_forward",
    "second_moment_sqrt",
    "optimal_plan",
    "w2_distance",
    "w2_squared",
    "plan_cost",
    "disintegrate_plan",
    "read_measure_csv",
    "write_measure_csv",
]

# relative tolerance for "equal cost" when breaking ties between optimal plans
TIE_RTOL = 1e-12


class MeasureError(ValueError):
    """Invalid measure, map or plan."""


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """N points in R^d, each carrying mass 1/N."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise MeasureError(f"points must have shape (N, d) with N, d >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise MeasureError("points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def same_points(self, other: "EmpiricalMeasure") -> bool:
        return self.points.shape == other.points.shape and bool(np.array_equal(self.points, other.points))

    @classmethod
    def dirac(cls, x, n: int = 1) -> "EmpiricalMeasure":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(np.tile(x, (n, 1)))

    def __repr__(self):
        return f"EmpiricalMeasure(n={self.n}, dim={self.dim})"


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Coupling between two uniform empirical measures.

    ``source``/``target`` hold particle indices and ``mass`` the mass on each
    pair. Equal-N optimal plans are permutations with mass 1/N per pair.
    """

    source: np.ndarray
    target: np.ndarray
    mass: np.ndarray
    source_n: int
    target_n: int

    def __post_init__(self):
        for name in ("source", "target", "mass"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(w)) for i, j, w in zip(self.source, self.target, self.mass)]

    def is_permutation(self) -> bool:
        return (
            self.source_n == self.target_n
            and len(self.source) == self.source_n
            and np.array_equal(np.sort(self.source), np.arange(self.source_n))
            and np.array_equal(np.sort(self.target), np.arange(self.target_n))
        )

    def as_permutation(self) -> np.ndarray:
        """Target index for each source index (permutation plans only)."""
        if not self.is_permutation():
            raise MeasureError("plan is not a permutation")
        perm = np.empty(self.source_n, dtype=int)
        perm[self.source] = self.target
        return perm

    def marginal_errors(self) -> tuple[float, float, float]:
        """Max deviation of (total mass, source marginal, target marginal)."""
        src = np.bincount(self.source, weights=self.mass, minlength=self.source_n)
        tgt = np.bincount(self.target, weights=self.mass, minlength=self.target_n)
        return (
            abs(float(self.mass.sum()) - 1.0),
            float(np.max(np.abs(src - 1.0 / self.source_n))),
            float(np.max(np.abs(tgt - 1.0 / self.target_n))),
        )

    def check(self, tol: float = 1e-12) -> None:
        if len(self.mass) == 0:
            raise MeasureError("empty plan")
        if np.any(self.mass <= 0):
            raise MeasureError("plan masses must be positive")
        if max(self.marginal_errors()) > tol:
            raise MeasureError(f"plan marginals violated: {self.marginal_errors()}")

    @classmethod
    def from_permutation(cls, perm) -> "TransportPlan":
        perm = np.asarray(perm, dtype=int)
        n = len(perm)
        return cls(np.arange(n), perm, np.full(n, 1.0 / n), n, n)

    @classmethod
    def identity(cls, n: int) -> "TransportPlan":
        return cls.from_permutation(np.arange(n))


@dataclass(frozen=True)
class PlanCostReport:
    squared_cost: float
    is_optimal: bool


def _check_same_dim(m: EmpiricalMeasure, nu: EmpiricalMeasure) -> None:
    if m.dim != nu.dim:
        raise MeasureError(f"dimension mismatch: {m.dim} vs {nu.dim}")


def _cost_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def push_forward(m: EmpiricalMeasure, mapping: Callable[[np.ndarray], np.ndarray]) -> EmpiricalMeasure:
    """Image of ``m`` under a point-to-point map."""
    out = []
    for x in m.points:
        y = np.atleast_1d(np.asarray(mapping(x.copy()), dtype=float))
        if y.shape != (m.dim,):
            raise MeasureError(f"map output has shape {y.shape}, expected ({m.dim},)")
        out.append(y)
    try:
        return EmpiricalMeasure(np.array(out))
    except MeasureError as exc:
        raise MeasureError(f"invalid map: {exc}") from exc


def second_moment_sqrt(m: EmpiricalMeasure, base=None) -> float:
    """Root mean squared distance of the particles to ``base`` (origin by default)."""
    if base is None:
        base = np.zeros(m.dim)
    base = np.atleast_1d(np.asarray(base, dtype=float))
    if base.shape != (m.dim,):
        raise MeasureError("base point has wrong dimension")
    return float(np.sqrt(np.mean(np.sum((m.points - base) ** 2, axis=1))))


def _trivial_plan(m: EmpiricalMeasure, nu: EmpiricalMeasure) -> TransportPlan | None:
    if nu.n == 1:
        return TransportPlan(np.arange(m.n), np.zeros(m.n, dtype=int), np.full(m.n, 1.0 / m.n), m.n, 1)
    if m.n == 1:
        return TransportPlan(np.zeros(nu.n, dtype=int), np.arange(nu.n), np.full(nu.n, 1.0 / nu.n), 1, nu.n)
    return None


def _lexicographic_optimum(cost: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Lexicographically smallest optimal permutation, given one optimum ``perm``.

    Dual potentials recovered by Bellman-Ford on the residual graph define the
    set of tight edges; every perfect matching inside it is optimal. Rows are
    then fixed greedily to their smallest feasible tight column.
    """
    n = len(perm)
    scale = max(float(np.max(np.abs(cost))), 1e-300)
    tol = TIE_RTOL * scale
    row_of = np.empty(n, dtype=int)
    row_of[perm] = np.arange(n)
    # arc j -> j' : row row_of[j] leaves column j for column j'
    own = cost[row_of, np.arange(n)]
    w = cost[row_of, :] - own[:, None]
    dist = np.zeros(n)
    for _ in range(n):
        new = np.minimum(dist, np.min(dist[:, None] + w, axis=0))
        if np.all(new >= dist - tol * 1e-3):
            break
        dist = new
    v = -dist
    u = cost[np.arange(n), perm] + v[perm]
    reduced = cost + v[None, :] - u[:, None]
    tight = reduced <= tol
    if int(tight.sum()) == n:
        return perm

    match = perm.copy()
    mate = row_of.copy()
    fixed_col = np.zeros(n, dtype=bool)
    for i in range(n):
        cur = match[i]
        for j in np.flatnonzero(tight[i]):
            if j >= cur:
                break
            if fixed_col[j]:
                continue
            # alternating path: row mate[j] must move, ending at column cur
            start = mate[j]
            parent = {start: (None, None)}
            queue = deque([start])
            found = None
            while queue and found is None:
                r = queue.popleft()
                for c in np.flatnonzero(tight[r]):
                    if fixed_col[c] or c == j or c == match[r]:
                        continue
                    if c == cur:
                        found = (r, c)
                        break
                    nr = mate[c]
                    if nr <= i or nr in parent:
                        continue
                    parent[nr] = (r, c)
                    queue.append(nr)
            if found is None:
                continue
            r, c = found
            while r is not None:
                prev_r, prev_c = parent[r]
                match[r] = c
                mate[c] = r
                r, c = prev_r, prev_c
            match[i] = j
            mate[j] = i
            break
        fixed_col[match[i]] = True
    return match


def optimal_plan(m: EmpiricalMeasure, nu: EmpiricalMeasure) -> TransportPlan:
    """Optimal W2 coupling; ties resolved to the lexicographically smallest pairing."""
    _check_same_dim(m, nu)
    trivial = _trivial_plan(m, nu)
    if trivial is not None:
        return trivial
    cost = _cost_matrix(m.points, nu.points)
    if m.n == nu.n:
        _, cols = linear_sum_assignment(cost)
        return TransportPlan.from_permutation(_lexicographic_optimum(cost, cols))
    return _lp_plan(cost, m.n, nu.n)


def _lp_plan(cost: np.ndarray, n: int, k: int) -> TransportPlan:
    a_eq = np.zeros((n + k, n * k))
    for i in range(n):
        a_eq[i, i * k:(i + 1) * k] = 1.0
    for j in range(k):
        a_eq[n + j, j::k] = 1.0
    b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(k, 1.0 / k)])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise MeasureError(f"transport LP failed: {res.message}")
    flat = res.x
    keep = np.flatnonzero(flat > 1e-14)
    src, tgt = np.divmod(keep, k)
    mass = flat[keep]
    # project the tiny LP residuals back onto the marginal constraints
    for _ in range(3):
        row = np.bincount(src, weights=mass, minlength=n)
        mass = mass * (1.0 / n) / row[src]
        col = np.bincount(tgt, weights=mass, minlength=k)
        mass = mass * (1.0 / k) / col[tgt]
    return TransportPlan(src, tgt, mass, n, k)


def w2_squared(m: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    _check_same_dim(m, nu)
    # fixed argument order makes the value exactly symmetric
    if (nu.n, nu.points.tobytes()) < (m.n, m.points.tobytes()):
        m, nu = nu, m
    if nu.n == 1:
        return math.fsum(np.sum((m.points - nu.points[0]) ** 2, axis=1)) / m.n
    if m.n == 1:
        return math.fsum(np.sum((nu.points - m.points[0]) ** 2, axis=1)) / nu.n
    cost = _cost_matrix(m.points, nu.points)
    if m.n == nu.n:
        rows, cols = linear_sum_assignment(cost)
        diff = m.points[rows] - nu.points[cols]
        return math.fsum(np.sum(diff * diff, axis=1)) / m.n
    plan = _lp_plan(cost, m.n, nu.n)
    return float(np.sum(plan.mass * cost[plan.source, plan.target]))


def w2_distance(m: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Quadratic Wasserstein distance between two empirical measures."""
    return float(np.sqrt(max(w2_squared(m, nu), 0.0)))


def plan_cost(plan: TransportPlan, m: EmpiricalMeasure, nu: EmpiricalMeasure) -> PlanCostReport:
    diff = m.points[plan.source] - nu.points[plan.target]
    cost = float(np.sum(plan.mass * np.sum(diff * diff, axis=1)))
    best = w2_squared(m, nu)
    return PlanCostReport(cost, cost <= best + TIE_RTOL * max(1.0, abs(best)) + 1e-15)


def disintegrate_plan(plan: TransportPlan, variable_index: int = 1) -> dict[int, dict[int, float]]:
    """Conditional distributions of a plan given its first (1) or second (2) variable."""
    if len(plan.mass) == 0:
        raise MeasureError("cannot disintegrate an empty plan")
    if variable_index == 1:
        keys, others = plan.source, plan.target
    elif variable_index == 2:
        keys, others = plan.target, plan.source
    else:
        raise MeasureError("variable_index must be 1 or 2")
    totals: dict[int, float] = {}
    for k, w in zip(keys, plan.mass):
        totals[int(k)] = totals.get(int(k), 0.0) + float(w)
    out: dict[int, dict[int, float]] = {}
    for k, o, w in zip(keys, others, plan.mass):
        cond = out.setdefault(int(k), {})
        cond[int(o)] = cond.get(int(o), 0.0) + float(w) / totals[int(k)]
    return out


def read_measure_csv(path) -> EmpiricalMeasure:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != [f"x{k}" for k in range(len(header))]:
            raise MeasureError(f"{path}: header must be x0,...,x{{d-1}}")
        rows = [[float(v) for v in row] for row in reader if row]
    return EmpiricalMeasure(np.array(rows, dtype=float).reshape(len(rows), len(header)))


def write_measure_csv(m: EmpiricalMeasure, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{k}" for k in range(m.dim)])
        for row in m.points:
            writer.writerow([repr(float(v)) for v in row])
