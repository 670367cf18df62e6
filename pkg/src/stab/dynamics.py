"""Vector fields f(x, m, u), control sets and the N-particle mean-field flow."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .measures import EmpiricalMeasure, w2_distance

__all__ = [
    "FieldError",
    "FlowBlowUp",
    "VectorField",
    "ControlSet",
    "FlowSegment",
    "FIELDS",
    "make_field",
    "eval_field",
    "estimate_lipschitz",
    "sublinear_bound",
    "flow_segment",
    "default_substeps",
    "c2_constant",
    "c3_constant",
    "drift_difference_norm",
]


class FieldError(ValueError):
    """Bad field specification or non-finite field value."""


class FlowBlowUp(FloatingPointError):
    """Particle flow produced non-finite positions."""

    def __init__(self, message: str, last_time: float):
        super().__init__(message)
        self.last_time = last_time


@dataclass(frozen=True)
class VectorField:
    """Drift f(x, m, u); ``rhs`` is vectorised over the rows of x.

    ``analytic_C0`` is the Lipschitz constant known in closed form (if any);
    ``declared_C0`` overrides everything downstream and is what the step-size
    constants consume.
    """

    label: str
    rhs: Callable[[np.ndarray, EmpiricalMeasure, np.ndarray], np.ndarray]
    analytic_C0: float | None = None
    declared_C0: float | None = None

    def __call__(self, x, m: EmpiricalMeasure, u) -> np.ndarray:
        return self.rhs(np.asarray(x, dtype=float), m, np.asarray(u, dtype=float))

    def with_declared_C0(self, c0: float | None) -> "VectorField":
        return VectorField(self.label, self.rhs, self.analytic_C0, c0)

    @property
    def C0(self) -> float | None:
        return self.declared_C0 if self.declared_C0 is not None else self.analytic_C0


def _linear_steer(x, m, u):
    return -x + u


def _mean_attract(x, m, u):
    return -(x - m.points.mean(axis=0)) + u


def _mean_drift(x, m, u):
    return np.broadcast_to(m.points.mean(axis=0) + u, x.shape).copy()


def _zero(x, m, u):
    return np.zeros_like(x)


# label -> (rhs, analytic Lipschitz constant)
FIELDS: dict[str, tuple[Callable, float]] = {
    "linear_steer": (_linear_steer, 1.0),
    # |x - y| + |mean(mu) - mean(nu)| <= |x - y| + W2(mu, nu); 2 is the
    # conservative per-term count used throughout
    "mean_attract": (_mean_attract, 2.0),
    "mean_drift": (_mean_drift, 1.0),
    "zero": (_zero, 0.0),
}


def make_field(label: str, declared_C0: float | None = None) -> VectorField:
    try:
        rhs, c0 = FIELDS[label]
    except KeyError:
        raise FieldError(f"unknown field label {label!r}; supported: {sorted(FIELDS)}") from None
    return VectorField(label, rhs, c0, declared_C0)


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Finite stand-in for the compact control set U."""

    controls: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        arr = np.array(self.controls, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.shape[0] == 0:
            raise FieldError("control set is empty")
        if len({tuple(row) for row in arr}) != arr.shape[0]:
            raise FieldError("control set contains duplicates")
        arr.setflags(write=False)
        object.__setattr__(self, "controls", arr)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"u{k}" for k in range(arr.shape[0])))

    def __len__(self):
        return self.controls.shape[0]

    def __getitem__(self, k):
        return self.controls[k]

    def __iter__(self):
        return iter(self.controls)

    @property
    def dim(self) -> int:
        return self.controls.shape[1]

    def neutral_index(self) -> int:
        """Index of the zero control if present, else 0."""
        hits = np.flatnonzero(np.all(self.controls == 0.0, axis=1))
        return int(hits[0]) if len(hits) else 0

    @classmethod
    def axis_grid(cls, dim: int, amplitude: float = 1.0) -> "ControlSet":
        """{0, +-amplitude e_k}, zero first."""
        rows = [np.zeros(dim)]
        labels = ["0"]
        for k in range(dim):
            for sign, tag in ((1.0, "+"), (-1.0, "-")):
                e = np.zeros(dim)
                e[k] = sign * amplitude
                rows.append(e)
                labels.append(f"{tag}e{k}")
        return cls(np.array(rows), tuple(labels))

    @classmethod
    def lattice(cls, dim: int, levels: Sequence[float]) -> "ControlSet":
        """Full product grid levels^dim, ordered with the zero vector first when present."""
        grids = np.meshgrid(*([np.asarray(levels, dtype=float)] * dim), indexing="ij")
        rows = np.stack([g.ravel() for g in grids], axis=1)
        order = np.argsort(np.sum(rows * rows, axis=1), kind="stable")
        return cls(rows[order])


def eval_field(f: VectorField, x, m: EmpiricalMeasure, u) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != m.dim or u.shape[-1] != m.dim:
        raise FieldError("dimension mismatch between x, m and u")
    out = f(x, m, u)
    if not np.all(np.isfinite(out)):
        raise FieldError(f"field {f.label!r} returned non-finite values")
    return out


def estimate_lipschitz(f: VectorField, sampler=None, trials: int = 200, rng=None, inflate: float = 1.2) -> float:
    """Lipschitz constant C0 of f in (x, m), analytic when known.

    ``sampler(rng)`` returns ``(x, mu, y, nu, u)``; the sampled ratio maximum
    is inflated by ``inflate``.
    """
    if f.analytic_C0 is not None and sampler is None:
        return float(f.analytic_C0)
    if sampler is None:
        raise FieldError(f"field {f.label!r} has no analytic constant; a sampler is required")
    rng = np.random.default_rng(rng)
    best = None
    for _ in range(trials):
        x, mu, y, nu, u = sampler(rng)
        denom = float(np.linalg.norm(np.asarray(x) - np.asarray(y))) + w2_distance(mu, nu)
        if denom <= 0.0:
            continue
        ratio = float(np.linalg.norm(eval_field(f, x, mu, u) - eval_field(f, y, nu, u))) / denom
        best = ratio if best is None else max(best, ratio)
    if best is None:
        raise FieldError("all Lipschitz samples had zero denominators")
    return inflate * best


def lipschitz_pair_sampler(dim: int, n: int, radius: float, controls: ControlSet):
    """Sampler for :func:`estimate_lipschitz` drawing from a working ball."""

    def sample(rng):
        def cloud():
            pts = rng.normal(size=(n, dim))
            pts *= rng.uniform(0, radius) / max(np.sqrt(np.mean(np.sum(pts**2, axis=1))), 1e-12)
            return EmpiricalMeasure(pts)

        x = rng.normal(size=dim) * radius
        y = rng.normal(size=dim) * radius
        u = controls[int(rng.integers(len(controls)))]
        return x, cloud(), y, cloud(), u

    return sample


def sublinear_bound(f: VectorField, C0: float, U: ControlSet) -> float:
    """C1 with |f(x, mu, u)| <= C1 (1 + |x| + sigma2(mu))."""
    origin = EmpiricalMeasure(np.zeros((1, U.dim)))
    at_origin = max(float(np.linalg.norm(eval_field(f, np.zeros(U.dim), origin, u))) for u in U)
    return max(float(C0), at_origin, 1e-12)


def default_substeps(t_start: float, t_end: float, max_dt: float = 0.01) -> int:
    return max(1, int(math.ceil((t_end - t_start) / max_dt - 1e-9)))


@dataclass(frozen=True)
class FlowSegment:
    times: np.ndarray
    states: list[EmpiricalMeasure]
    control: np.ndarray
    substeps: int

    @property
    def final(self) -> EmpiricalMeasure:
        return self.states[-1]


def flow_segment(
    m0: EmpiricalMeasure,
    f: VectorField,
    u,
    t_start: float,
    t_end: float,
    substeps: int | None = None,
) -> FlowSegment:
    """Hold ``u`` on [t_start, t_end] and integrate the coupled particle system (RK4)."""
    if not t_end > t_start:
        raise FieldError("t_end must exceed t_start")
    if substeps is None:
        substeps = default_substeps(t_start, t_end)
    if substeps < 1:
        raise FieldError("substeps must be >= 1")
    u = np.asarray(u, dtype=float)
    h = (t_end - t_start) / substeps
    times = t_start + h * np.arange(substeps + 1)
    times[-1] = t_end

    def rhs(x):
        return f(x, _measure_view(x), u)

    x = np.array(m0.points, dtype=float)
    states = [m0]
    for k in range(substeps):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                k1 = rhs(x)
                k2 = rhs(x + 0.5 * h * k1)
                k3 = rhs(x + 0.5 * h * k2)
                k4 = rhs(x + h * k3)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        except FlowBlowUp:
            raise FlowBlowUp(f"non-finite stage state in flow of {f.label!r}", float(times[k])) from None
        if not np.all(np.isfinite(x)):
            raise FlowBlowUp(f"non-finite state in flow of {f.label!r}", float(times[k]))
        states.append(EmpiricalMeasure(x))
    return FlowSegment(times, states, u, substeps)


def _measure_view(x: np.ndarray) -> EmpiricalMeasure:
    if not np.all(np.isfinite(x)):
        raise FlowBlowUp("non-finite stage state", float("nan"))
    return EmpiricalMeasure(x)


def _growth_factor(R: float, delta: float, C1: float, sigma2_target: float) -> float:
    return C1 * math.exp(C1 * delta) * (1.0 + 2.0 * (C1 * delta + sigma2_target + R) * math.exp(2.0 * C1 * delta))


def c2_constant(R: float, delta: float, C1: float, sigma2_target: float = 0.0) -> float:
    """Speed bound: W2(m_t, m_ti) <= C2 (t - t_i) on steps shorter than delta."""
    return _growth_factor(R, delta, C1, sigma2_target)


def c3_constant(R: float, delta: float, C0: float, C1: float, sigma2_target: float = 0.0) -> float:
    """Drift-variation bound in L2(m_ti); algebraically 2 C0 C2."""
    return C0 * (_growth_factor(R, delta, C1, sigma2_target) + c2_constant(R, delta, C1, sigma2_target))


def drift_difference_norm(f: VectorField, m0: EmpiricalMeasure, mt: EmpiricalMeasure, u) -> float:
    """L2(m0) norm of f(X_t(x), m_t, u) - f(x, m0, u) along particle characteristics."""
    diff = f(mt.points, mt, u) - f(m0.points, m0, u)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
