"""Wasserstein inf-convolution, Ekeland certificates and proximal subgradients.

The inner problem is solved in displacement coordinates: the candidate
minimizer is Y = X + kappa^2 Z with particle i of Y paired to particle i of
m. In these coordinates the scaled objective

    G(Z) = phi(mu_Y) / kappa^2 + |Z|^2 / 2          (L2(m) norm)

has gradient phi_grad(Y) + Z and curvature close to the identity, so unit
steps are natural and the covector -Z = (X - Y) / kappa^2 is available
without cancellation even for very small kappa.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .measures import (
    EmpiricalMeasure,
    MeasureError,
    TransportPlan,
    disintegrate_plan,
    optimal_plan,
    w2_distance,
    w2_squared,
)
from .lyapunov import ControlLyapunovPair, ModuliTable, derived_constants, modulus_s, n_kappa_eps

__all__ = [
    "InfConvOptions",
    "InfConvResult",
    "InfConvergenceError",
    "SubgradientMeasure",
    "EkelandReport",
    "SubgradientReport",
    "TaylorReport",
    "inf_convolution",
    "ekeland_probes",
    "ekeland_verify",
    "gamma_subgradient",
    "subgradient_probes",
    "proximal_subgradient_verify",
    "taylor_bound_verify",
    "moreau_closed_form",
    "minimizer_bound_margins",
]

_MACHINE_EPS = np.finfo(float).eps


class InfConvergenceError(RuntimeError):
    """No Ekeland-certified point found within the iteration budget."""

    def __init__(self, message: str, best: "InfConvResult | None" = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class InfConvOptions:
    probes: int = 64
    repair_every: int = 10
    max_iter: int = 10_000
    armijo: float = 1e-4
    shrink: float = 0.5
    tol: float = 1e-9
    seed: int = 0
    retry: bool = True


@dataclass(frozen=True)
class InfConvResult:
    """phi_kappa(m) with its certified pseudo-minimizer.

    ``minimizer`` is ordered so that its i-th particle is paired with the
    i-th particle of m, and ``plan`` (optimal between m and minimizer) is the
    identity permutation. ``covectors[i] = (x_i - y_i) / kappa^2``.
    """

    value: float
    minimizer: EmpiricalMeasure
    plan: TransportPlan
    eps_used: float
    iterations: int
    ekeland_ok: bool
    covectors: np.ndarray
    kappa: float
    grad_norm: float
    ekeland_margin: float
    source: EmpiricalMeasure

    @property
    def displacement(self) -> float:
        """W2(m, minimizer) under the identity pairing."""
        return self.kappa**2 * float(np.sqrt(np.mean(np.sum(self.covectors**2, axis=1))))


def _l2(v: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum(v * v, axis=1))))


def moreau_closed_form(m: EmpiricalMeasure, kappa: float) -> tuple[float, EmpiricalMeasure]:
    """phi_kappa and argmin for phi = sigma2^2 / 2 about the origin."""
    s = float(np.mean(np.sum(m.points**2, axis=1)))
    return s / (2.0 * (1.0 + kappa * kappa)), EmpiricalMeasure(m.points / (1.0 + kappa * kappa))


class _Objective:
    def __init__(self, clp: ControlLyapunovPair, x: np.ndarray, kappa: float):
        self.clp = clp
        self.x = x
        self.k2 = kappa * kappa

    def positions(self, z):
        return self.x + self.k2 * z

    def scaled(self, z) -> float:
        """G(z) = phi(Y)/kappa^2 + |z|^2/2."""
        return self.clp.phi(EmpiricalMeasure(self.positions(z))) / self.k2 + 0.5 * float(np.mean(np.sum(z * z, axis=1)))

    def value(self, z) -> float:
        """F = phi(Y) + W2^2(m, Y)/(2 kappa^2) under the identity pairing."""
        return self.clp.phi(EmpiricalMeasure(self.positions(z))) + 0.5 * self.k2 * float(np.mean(np.sum(z * z, axis=1)))

    def grad(self, z) -> np.ndarray:
        return np.asarray(self.clp.phi_grad(EmpiricalMeasure(self.positions(z))), dtype=float) + z


def _repair(obj: _Objective, m: EmpiricalMeasure, z: np.ndarray) -> tuple[np.ndarray, bool]:
    """Re-pair m with the current candidate if that lowers the coupling cost."""
    y = obj.positions(z)
    perm = optimal_plan(m, EmpiricalMeasure(y)).as_permutation()
    if np.array_equal(perm, np.arange(len(perm))):
        return z, False
    old = float(np.sum(z * z))
    # z for the re-paired candidate, expressed without forming y - x
    znew = z[perm] + (obj.x[perm] - obj.x) / obj.k2
    if float(np.sum(znew * znew)) < old * (1.0 - 1e-12):
        return znew, True
    return z, False


def _cond1_backtrack(obj: _Objective, phi_m: float, eps: float, z: np.ndarray, tol: float) -> np.ndarray:
    """Largest t in [0, 1] on the segment t*z meeting the first Ekeland inequality."""

    def ok(t):
        zt = t * z
        # half the verifier's slack, so roundoff in W2 cannot tip the certificate
        return obj.value(zt) + eps * obj.k2 * _l2(zt) <= phi_m + 0.5 * tol

    if ok(1.0):
        return z
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo * z


def inf_convolution(
    clp: ControlLyapunovPair, kappa: float, eps: float, m: EmpiricalMeasure, opts: InfConvOptions | None = None
) -> InfConvResult:
    """phi_kappa(m) = inf_mu phi(mu) + W2^2(m, mu) / (2 kappa^2), Ekeland-certified.

    On non-convergence eps is halved once (when ``opts.retry``) before the
    error propagates.
    """
    opts = opts or InfConvOptions()
    if not (0 < kappa <= 1):
        raise ValueError("kappa must lie in (0, 1]")
    if not eps > 0:
        raise ValueError("eps must be positive")
    if m.dim != clp.target.dim:
        raise MeasureError("measure dimension does not match the target")
    try:
        return _inf_conv(clp, kappa, eps, m, opts)
    except InfConvergenceError:
        if not opts.retry:
            raise
        return _inf_conv(clp, kappa, 0.5 * eps, m, opts)


def _inf_conv(clp, kappa, eps, m, opts: InfConvOptions) -> InfConvResult:
    obj = _Objective(clp, np.array(m.points), kappa)
    rng = np.random.default_rng(opts.seed)
    phi_m = clp.phi(m)
    z = np.zeros_like(obj.x)
    threshold = 0.5 * eps
    g = obj.grad(z)
    gn = _l2(g)
    g_val = obj.scaled(z)
    best = None
    for it in range(1, opts.max_iter + 1):
        if it % opts.repair_every == 0:
            z, changed = _repair(obj, m, z)
            if changed:
                g, g_val = obj.grad(z), obj.scaled(z)
                gn = _l2(g)
        if gn <= threshold:
            z, changed = _repair(obj, m, z)
            if changed:
                g, g_val = obj.grad(z), obj.scaled(z)
                gn = _l2(g)
                continue
            cand_z = _cond1_backtrack(obj, phi_m, eps, z, opts.tol)
            result = _finish(obj, m, cand_z, eps, it, kappa, opts, rng)
            best = result
            if result.ekeland_ok:
                return result
            # tighten and keep descending from the unprojected iterate
            threshold *= 0.25
            if threshold < 8 * _MACHINE_EPS * max(1.0, _l2(obj.x)):
                break
        # Armijo backtracking in z (unit initial step = kappa^2 in y)
        slack = 4.0 * _MACHINE_EPS * max(1.0, abs(g_val))
        t = 1.0
        while True:
            trial = z - t * g
            val = obj.scaled(trial)
            if val <= g_val - opts.armijo * t * gn * gn + slack:
                break
            t *= opts.shrink
            if t < 1e-16:
                break
        if t < 1e-16:
            # no representable decrease left; certify what we have
            cand_z = _cond1_backtrack(obj, phi_m, eps, z, opts.tol)
            result = _finish(obj, m, cand_z, eps, it, kappa, opts, rng)
            if result.ekeland_ok:
                return result
            best = result
            break
        z = trial
        g_val = val
        g = obj.grad(z)
        gn = _l2(g)
    raise InfConvergenceError(f"inf-convolution did not converge (kappa={kappa}, eps={eps})", best)


def _finish(obj: _Objective, m, z, eps, iterations, kappa, opts: InfConvOptions, rng) -> InfConvResult:
    y = EmpiricalMeasure(obj.positions(z))
    value = obj.value(z)
    probes = ekeland_probes(obj.clp, kappa, m, y, opts.probes, rng)
    rep = ekeland_verify(obj.clp, kappa, eps, m, y, probes, opts.tol)
    gn = _l2(obj.grad(z))
    return InfConvResult(
        value=value,
        minimizer=y,
        plan=TransportPlan.identity(m.n),
        eps_used=eps,
        iterations=iterations,
        ekeland_ok=rep.ok,
        covectors=-z,
        kappa=kappa,
        grad_norm=gn,
        ekeland_margin=rep.worst_margin,
        source=m,
    )


@dataclass(frozen=True)
class EkelandReport:
    ok: bool
    worst_margin: float
    failing_probe: int | None
    cond1_margin: float
    margins: np.ndarray = field(repr=False)


def _F(clp, kappa, m, mu) -> float:
    return clp.phi(mu) + w2_squared(m, mu) / (2.0 * kappa * kappa)


def ekeland_probes(
    clp: ControlLyapunovPair, kappa: float, m: EmpiricalMeasure, candidate: EmpiricalMeasure, count: int = 64, rng=None
) -> list[EmpiricalMeasure]:
    """m itself, segment points, gradient steps, and random kicks at scales kappa^2, kappa, 1."""
    if count < 1:
        raise ValueError("need at least one probe")
    rng = np.random.default_rng(rng)
    x, y = m.points, candidate.points
    probes = [m]
    if candidate.n != m.n:
        return probes
    n_seg = max(1, count // 6) if count > 1 else 0
    n_grad = min(6, max(0, count - 1 - n_seg)) if count > 2 else 0
    for t in np.linspace(0.0, 1.0, n_seg + 2)[1:-1]:
        probes.append(EmpiricalMeasure((1.0 - t) * y + t * x))
    if n_grad:
        k2 = kappa * kappa
        grad = np.asarray(clp.phi_grad(candidate), dtype=float) + (y - x) / k2
        steps = [s * k2 / (1.0 + k2) for s in (1.0, 0.5, 0.1, 2.0, 0.01, 0.25)][: n_grad]
        for s in steps:
            probes.append(EmpiricalMeasure(y - s * grad))
    scales = (kappa * kappa, kappa, 1.0)
    k = 0
    while len(probes) < count:
        xi = rng.normal(size=y.shape)
        xi *= scales[k % 3] * float(rng.uniform(0.05, 1.0)) / max(_l2(xi), 1e-300)
        probes.append(EmpiricalMeasure(y + xi))
        k += 1
    return probes[:count]


def ekeland_verify(
    clp: ControlLyapunovPair,
    kappa: float,
    eps: float,
    m: EmpiricalMeasure,
    candidate: EmpiricalMeasure,
    probes: list[EmpiricalMeasure],
    tol: float = 1e-9,
) -> EkelandReport:
    """Check both Ekeland inequalities for ``candidate`` against every probe."""
    if not probes:
        raise ValueError("probe list is empty")
    f_cand = _F(clp, kappa, m, candidate)
    cond1 = clp.phi(m) - eps * w2_distance(m, candidate) - f_cand + tol
    margins = np.array([_F(clp, kappa, m, mu) + eps * w2_distance(candidate, mu) - f_cand + tol for mu in probes])
    worst = float(min(cond1, margins.min()))
    failing = None
    if margins.min() < 0:
        failing = int(np.argmin(margins))
    ok = cond1 >= 0 and failing is None
    return EkelandReport(ok, worst, failing, float(cond1), margins)


@dataclass(frozen=True)
class SubgradientMeasure:
    """Discrete measure on (position, covector) pairs."""

    positions: np.ndarray
    covectors: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        pos = np.atleast_2d(np.array(self.positions, dtype=float))
        cov = np.atleast_2d(np.array(self.covectors, dtype=float))
        mass = np.array(self.masses, dtype=float).ravel()
        if pos.shape != cov.shape or pos.shape[0] != mass.shape[0]:
            raise ValueError("positions, covectors and masses disagree in shape")
        if np.any(mass <= 0) or abs(float(mass.sum()) - 1.0) > 1e-12:
            raise ValueError("masses must be positive and sum to 1")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(cov))):
            raise ValueError("atoms must be finite")
        for a in (pos, cov, mass):
            a.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "covectors", cov)
        object.__setattr__(self, "masses", mass)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def atoms(self) -> list[tuple[np.ndarray, np.ndarray, float]]:
        return list(zip(self.positions, self.covectors, self.masses.tolist()))

    def second_moments(self) -> tuple[float, float]:
        w = self.masses
        return (
            float(np.sum(w * np.sum(self.positions**2, axis=1))),
            float(np.sum(w * np.sum(self.covectors**2, axis=1))),
        )

    def scaled(self, factor: float) -> "SubgradientMeasure":
        return SubgradientMeasure(self.positions, factor * self.covectors, self.masses)


def gamma_subgradient(result: InfConvResult, kappa: float) -> SubgradientMeasure:
    """Push the pairing (x_i, y_i) through (x, y) -> (y, (x - y)/kappa^2)."""
    if not result.plan.is_permutation():
        raise ValueError("gamma subgradient needs a permutation plan")
    perm = result.plan.as_permutation()
    ys = result.minimizer.points[perm]
    if kappa == result.kappa and np.array_equal(perm, np.arange(len(perm))):
        cov = result.covectors
    else:
        cov = (result.source.points - ys) / (kappa * kappa)
    n = len(perm)
    return SubgradientMeasure(ys, cov, np.full(n, 1.0 / n))


@dataclass(frozen=True)
class SubgradientReport:
    ok: bool
    worst_margin: float
    trials: int
    failing_probe: int | None
    skipped: int


def _conditional_covectors(m0: EmpiricalMeasure, alpha: SubgradientMeasure) -> np.ndarray:
    """Mean covector of alpha conditioned on each particle position of m0."""
    groups: dict[bytes, list[int]] = {}
    for k, p in enumerate(alpha.positions):
        groups.setdefault(np.ascontiguousarray(p).tobytes(), []).append(k)
    # position marginal check: masses per position must match m0's counts
    counts: dict[bytes, int] = {}
    for row in m0.points:
        key = np.ascontiguousarray(row).tobytes()
        counts[key] = counts.get(key, 0) + 1
    if set(counts) != set(groups):
        raise MeasureError("alpha's position marginal does not match m0")
    for key, c in counts.items():
        if abs(float(alpha.masses[groups[key]].sum()) - c / m0.n) > 1e-12:
            raise MeasureError("alpha's position marginal does not match m0")
    out = np.empty_like(m0.points)
    for i, row in enumerate(m0.points):
        idx = groups[np.ascontiguousarray(row).tobytes()]
        w = alpha.masses[idx]
        out[i] = (w[:, None] * alpha.covectors[idx]).sum(axis=0) / w.sum()
    return out


def subgradient_probes(
    m0: EmpiricalMeasure, alpha: SubgradientMeasure, radius: float, count: int = 100, rng=None, kappa: float | None = None
) -> list[EmpiricalMeasure]:
    """Probe measures inside B_radius(m0): m0, +-covector pushes, random fields."""
    rng = np.random.default_rng(rng)
    x = m0.points
    pbar = _conditional_covectors(m0, alpha)
    pn = _l2(pbar)
    probes = [m0]
    if pn > 0:
        hs = list(np.geomspace(1e-4, 1.0, 8) * radius / pn)
        if kappa is not None:
            hs += [s * kappa * kappa for s in (0.1, 0.25, 0.5, 1.0) if s * kappa * kappa * pn <= radius]
        for h in hs:
            probes.append(EmpiricalMeasure(x + h * pbar))
            probes.append(EmpiricalMeasure(x - h * pbar))
    while len(probes) < count:
        xi = rng.normal(size=x.shape)
        if rng.uniform() < 0.3:
            xi[:] = xi[0]
        xi *= radius * 10.0 ** float(rng.uniform(-4, 0)) / max(_l2(xi), 1e-300)
        probes.append(EmpiricalMeasure(x + xi))
    return probes[:count]


def proximal_subgradient_verify(
    clp: ControlLyapunovPair,
    m0: EmpiricalMeasure,
    alpha: SubgradientMeasure,
    eps: float,
    sigma: float,
    radius: float,
    probes: list[EmpiricalMeasure],
    tol: float = 1e-9,
    couplings: tuple[str, ...] = ("optimal", "index"),
) -> SubgradientReport:
    """Check the proximal eps-subgradient inequality on every lifted coupling.

    For each probe mu and each tested plan pi in Pi(m0, mu), beta is the
    lift of pi that draws the covector from alpha's conditional at x1
    independently of x2.
    """
    pbar = _conditional_covectors(m0, alpha)
    phi0 = clp.phi(m0)
    worst, failing, trials, skipped = math.inf, None, 0, 0
    for k, mu in enumerate(probes):
        w = w2_distance(m0, mu)
        if w > radius * (1 + 1e-12) + 1e-15:
            skipped += 1
            continue
        phi_mu = clp.phi(mu)
        plans = []
        if "optimal" in couplings:
            plans.append(optimal_plan(m0, mu))
        if "index" in couplings and mu.n == m0.n:
            plans.append(TransportPlan.identity(m0.n))
        for plan in plans:
            lin = quad = 0.0
            for i, cond in disintegrate_plan(plan, 1).items():
                for j, c in cond.items():
                    d = mu.points[j] - m0.points[i]
                    mass = c / m0.n
                    lin += mass * float(pbar[i] @ d)
                    quad += mass * float(d @ d)
            margin = phi_mu - (phi0 + lin - sigma * quad - eps * w) + tol
            trials += 1
            if margin < worst:
                worst = margin
                if margin < 0 and failing is None:
                    failing = k
    return SubgradientReport(failing is None and trials > 0, float(worst), trials, failing, skipped)


@dataclass(frozen=True)
class TaylorReport:
    ok: bool
    slack: float
    lhs: float
    rhs: float
    N_ke: float


def taylor_bound_verify(
    clp: ControlLyapunovPair,
    kappa: float,
    eps: float,
    m: EmpiricalMeasure,
    b,
    tau: float,
    R: float,
    opts: InfConvOptions | None = None,
    base: InfConvResult | None = None,
    tol: float = 1e-9,
) -> TaylorReport:
    """phi_kappa((Id + tau b)#m) against its first-order expansion plus N(R)."""
    b = np.asarray(b, dtype=float)
    if b.shape != m.points.shape:
        raise MeasureError(f"b has shape {b.shape}, expected {m.points.shape}")
    if not tau > 0:
        raise ValueError("tau must be positive")
    if base is None:
        base = inf_convolution(clp, kappa, eps, m, opts)
    moved = EmpiricalMeasure(m.points + tau * b)
    lhs = inf_convolution(clp, kappa, eps, moved, opts).value
    n_bound = n_kappa_eps(modulus_s(clp, R), kappa, eps)
    first = tau * float(np.mean(np.sum(base.covectors * b, axis=1)))
    second = tau * tau / (2.0 * kappa * kappa) * float(np.mean(np.sum(b * b, axis=1)))
    rhs = base.value + first + second + n_bound
    slack = rhs - lhs + tol
    return TaylorReport(slack >= 0, float(slack), float(lhs), float(rhs), float(n_bound))


def minimizer_bound_margins(
    clp: ControlLyapunovPair, result: InfConvResult, m: EmpiricalMeasure, moduli: ModuliTable, tol: float = 0.0
) -> dict[str, float]:
    """Margins (positive = holds) of the a-priori bounds on an accepted result, m in B_R.

    The reference value of phi_kappa is the closed form for the built-in
    quadratic pair and the returned value otherwise.
    """
    kappa, eps = result.kappa, result.eps_used
    R = moduli.R
    dc = derived_constants(clp, moduli, kappa, eps, 0.5 * R, R, Rcal_r=0.5 * moduli.Rcal)
    mu = result.minimizer
    ref = moreau_closed_form(m, kappa)[0] if clp.quadratic else result.value
    d_m = w2_distance(m, mu)
    d_hat = w2_distance(clp.target, mu)
    f_mu = clp.phi(mu) + d_m * d_m / (2.0 * kappa * kappa)
    return {
        "below_phi": clp.phi(m) - result.value + tol,
        "distance_to_minimizer": dc.M_ke - d_m + tol,
        "distance_to_minimizer_K": dc.K_ke - d_m + tol,
        "minimizer_in_ball": dc.M_e - d_hat + tol,
        "objective_excess": ref + dc.N_ke - f_mu + tol,
        "envelope_gap": dc.omega_M + dc.N_ke - (clp.phi(m) - ref) + tol,
    }
