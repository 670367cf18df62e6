"""Control-Lyapunov pairs on empirical measures and the constants built from them.

The moduli S(R) (sup of phi on a ball), I(R) (inf of phi off an open ball),
Rcal(R) (largest ball inside the half-level set) and the continuity modulus
omega are computed in closed form for the built-in quadratic pair and by
sampling, with safety factors, for anything else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from .measures import EmpiricalMeasure, w2_distance, second_moment_sqrt
from .dynamics import ControlSet, VectorField, eval_field

__all__ = [
    "CLPError",
    "ControlLyapunovPair",
    "BallSampler",
    "ModuliTable",
    "DerivedConstants",
    "Condition4Report",
    "builtin_quadratic_clp",
    "modulus_s",
    "modulus_i",
    "radius_rcal",
    "radius_rcal_inverse",
    "omega_modulus",
    "moduli_table",
    "derived_constants",
    "m_eps",
    "m_kappa_eps",
    "n_kappa_eps",
    "clp_condition4_check",
    "SAFETY",
]

# sampled sup-type moduli are inflated, inf-type deflated
SAFETY = {"S": 1.1, "omega": 1.1, "I": 0.9, "Delta": 0.9}


class CLPError(ValueError):
    """Unsupported or invalid control-Lyapunov pair request."""


@dataclass(frozen=True)
class ControlLyapunovPair:
    """phi, its per-particle Wasserstein gradient, psi(m, eps) and eps0.

    ``phi_grad(m)`` returns an (N, d) array: the gradient of phi at each
    particle in the L2(m) sense (no 1/N factor).
    """

    phi: Callable[[EmpiricalMeasure], float]
    phi_grad: Callable[[EmpiricalMeasure], np.ndarray]
    psi: Callable[[EmpiricalMeasure, float], float]
    eps0: float
    target: EmpiricalMeasure
    label: str = "custom"
    quadratic: bool = False

    def target_point(self) -> np.ndarray | None:
        pts = self.target.points
        return pts[0] if np.all(pts == pts[0]) else None

    def distance_to_target(self, m: EmpiricalMeasure) -> float:
        c = self.target_point()
        if c is not None:
            return second_moment_sqrt(m, c)
        return w2_distance(m, self.target)


def _quadratic_parts(eps0: float):
    def phi(m: EmpiricalMeasure) -> float:
        p = m.points
        return 0.5 * float(np.mean(np.einsum("ij,ij->i", p, p)))

    def phi_grad(m: EmpiricalMeasure) -> np.ndarray:
        return np.array(m.points)

    def psi(m: EmpiricalMeasure, eps: float) -> float:
        return phi(m) * (1.0 + eps / psi.eps0)

    psi.eps0 = eps0
    return phi, phi_grad, psi


def builtin_quadratic_clp(
    target: EmpiricalMeasure,
    U: ControlSet,
    field_tag: str = "linear_steer",
    eps0: float = 1.0,
    calibrate: bool = True,
    rng=0,
    calibration_trials: int = 100,
) -> ControlLyapunovPair:
    """phi = sigma2^2 / 2 about the origin, psi = phi (1 + eps/eps0).

    With ``calibrate``, eps0 is halved until condition 4 holds on a sweep of
    inf-convolution subgradients over annulus measures.
    """
    if not np.all(target.points == 0.0):
        raise CLPError("built-in quadratic pair needs the target at the origin")
    if field_tag != "linear_steer":
        raise CLPError(f"built-in quadratic pair is not a CLP for field {field_tag!r}; supported: ['linear_steer']")
    if U.dim != target.dim:
        raise CLPError("control dimension does not match the target")
    if not np.any(np.all(U.controls == 0.0, axis=1)):
        raise CLPError("built-in quadratic pair needs the zero control in U")

    def build(e0):
        phi, phi_grad, psi = _quadratic_parts(e0)
        return ControlLyapunovPair(phi, phi_grad, psi, e0, target, "quadratic", True)

    clp = build(float(eps0))
    if not calibrate:
        return clp
    from .dynamics import make_field
    from .proximal import InfConvOptions, gamma_subgradient, inf_convolution

    f = make_field(field_tag)
    sampler = BallSampler(target, n=16)
    gen = np.random.default_rng(rng)
    for _ in range(20):
        ok = True
        for m in sampler.annulus(gen, 0.1, 3.0, calibration_trials):
            kappa = float(gen.uniform(0.1, 1.0))
            eps = float(gen.uniform(0.05, 0.9)) * clp.eps0
            res = inf_convolution(clp, kappa, eps, m, InfConvOptions(probes=8, seed=int(gen.integers(2**31))))
            alpha = gamma_subgradient(res, kappa)
            rep = clp_condition4_check(clp, f, U, res.minimizer, eps, [alpha])
            if not rep.passed:
                ok = False
                break
        if ok:
            return clp
        clp = build(clp.eps0 / 2.0)
    raise CLPError("eps0 calibration failed")


class BallSampler:
    """Random measures at prescribed W2 distances from a target.

    For a single-point target the distance is hit exactly by scaling a
    displacement field; otherwise by bisection on the scale.
    """

    def __init__(self, target: EmpiricalMeasure, n: int | None = None):
        self.target = target
        self.center = target.points[0] if np.all(target.points == target.points[0]) else None
        self.n = n if n is not None else (target.n if self.center is None else 16)
        if self.center is None and self.n != target.n:
            self.n = target.n

    def _direction(self, rng) -> np.ndarray:
        v = rng.normal(size=(self.n, self.target.dim))
        v *= rng.uniform(0.2, 2.0, size=(self.n, 1))
        v += rng.normal(size=(1, self.target.dim)) * rng.uniform(0, 1.5)
        return v

    def at_distance(self, rng, radius: float) -> EmpiricalMeasure:
        v = self._direction(rng)
        if self.center is not None:
            norm = math.sqrt(float(np.mean(np.sum(v * v, axis=1))))
            return EmpiricalMeasure(self.center + v * (radius / norm))
        base = self.target.points
        lo, hi = 0.0, 1.0
        while w2_distance(EmpiricalMeasure(base + hi * v), self.target) < radius:
            hi *= 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if w2_distance(EmpiricalMeasure(base + mid * v), self.target) < radius:
                lo = mid
            else:
                hi = mid
        return EmpiricalMeasure(base + hi * v)

    def inside(self, rng, radius: float, count: int, boundary_fraction: float = 0.25) -> list[EmpiricalMeasure]:
        out = []
        for k in range(count):
            rho = radius if k < int(boundary_fraction * count) else radius * float(rng.uniform()) ** 0.5
            out.append(self.at_distance(rng, rho))
        return out

    def sphere(self, rng, radius: float, count: int) -> list[EmpiricalMeasure]:
        return [self.at_distance(rng, radius) for _ in range(count)]

    def annulus(self, rng, r_in: float, r_out: float, count: int) -> list[EmpiricalMeasure]:
        return [self.at_distance(rng, float(rng.uniform(r_in, r_out))) for _ in range(count)]

    def close_pairs(self, rng, radius: float, delta: float, count: int):
        """Pairs (nu1, nu2) inside B_radius with W2(nu1, nu2) <= delta."""
        pairs = []
        while len(pairs) < count:
            nu1 = self.inside(rng, radius, 1, boundary_fraction=0.5 if len(pairs) % 2 else 0.0)[0]
            w = rng.normal(size=nu1.points.shape)
            w *= delta * float(rng.uniform(0.5, 1.0)) / math.sqrt(float(np.mean(np.sum(w * w, axis=1))))
            nu2 = EmpiricalMeasure(nu1.points + w)
            if self._dist(nu2) <= radius:
                pairs.append((nu1, nu2))
        return pairs

    def _dist(self, m):
        if self.center is not None:
            return second_moment_sqrt(m, self.center)
        return w2_distance(m, self.target)


def _default_sampler(clp: ControlLyapunovPair, sampler):
    return sampler if sampler is not None else BallSampler(clp.target)


def sampled_phi_range(clp, R: float, sampler=None, count: int = 64, rng=0, where: str = "inside") -> tuple[float, float]:
    """(min, max) of phi over sampled measures (no safety factor)."""
    sampler = _default_sampler(clp, sampler)
    gen = np.random.default_rng(rng)
    if where == "inside":
        ms = sampler.inside(gen, R, count)
    elif where == "outside":
        ms = sampler.sphere(gen, R, count // 2) + sampler.annulus(gen, R, 3.0 * R, count - count // 2)
    else:
        raise CLPError(f"unknown region {where!r}")
    if not ms:
        raise CLPError("no samples")
    vals = [clp.phi(m) for m in ms]
    return min(vals), max(vals)


def modulus_s(clp: ControlLyapunovPair, R: float, sampler=None, count: int = 64, rng=0) -> float:
    """sup of phi over the closed W2 ball of radius R around the target."""
    if R < 0:
        raise CLPError("R must be nonnegative")
    if clp.quadratic:
        return 0.5 * R * R
    return SAFETY["S"] * sampled_phi_range(clp, R, sampler, count, rng, "inside")[1]


def modulus_i(clp: ControlLyapunovPair, R: float, sampler=None, count: int = 64, rng=0) -> float:
    """inf of phi outside the open W2 ball of radius R."""
    if R < 0:
        raise CLPError("R must be nonnegative")
    if clp.quadratic:
        return 0.5 * R * R
    return SAFETY["I"] * sampled_phi_range(clp, R, sampler, count, rng, "outside")[0]


def radius_rcal(clp: ControlLyapunovPair, R: float, sampler=None, rng=0, tol: float = 1e-10) -> float:
    """Largest r with sup_{B_r} phi <= I(R) / 2."""
    if R <= 0:
        raise CLPError("R must be positive")
    if clp.quadratic:
        return R / math.sqrt(2.0)
    level = 0.5 * modulus_i(clp, R, sampler, rng=rng)
    lo, hi = 0.0, R
    if modulus_s(clp, hi, sampler, rng=rng) <= level:
        raise CLPError("Rcal bisection does not bracket: sup over B_R already below I(R)/2")
    while hi - lo > tol * R:
        mid = 0.5 * (lo + hi)
        if modulus_s(clp, mid, sampler, rng=rng) <= level:
            lo = mid
        else:
            hi = mid
    return lo


def radius_rcal_inverse(clp: ControlLyapunovPair, s: float, sampler=None, rng=0) -> float:
    """Smallest Q with Rcal(Q) >= s."""
    if clp.quadratic:
        return math.sqrt(2.0) * s
    lo, hi = s, 2.0 * s
    while radius_rcal(clp, hi, sampler, rng) < s:
        lo, hi = hi, 2.0 * hi
        if hi > 1e12 * s:
            raise CLPError("Rcal search failed to bracket")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if radius_rcal(clp, mid, sampler, rng) >= s:
            hi = mid
        else:
            lo = mid
    return hi


def m_kappa_eps(S: float, kappa: float, eps: float) -> float:
    """Bound on W2(m, pseudo-minimizer): kappa sqrt(2 S + eps^2 kappa^2) - eps kappa^2."""
    return kappa * math.sqrt(2.0 * S + eps * eps * kappa * kappa) - eps * kappa * kappa


def n_kappa_eps(S: float, kappa: float, eps: float) -> float:
    """Ekeland excess bound, with phi_kappa(m) replaced by its uniform bound S."""
    return eps * math.sqrt(2.0 * kappa * kappa * S) + eps * m_kappa_eps(S, kappa, eps)


def m_eps(S: float, R: float, eps: float) -> float:
    """Radius of the ball containing every pseudo-minimizer: R + sqrt(2 S + eps^2)."""
    return R + math.sqrt(2.0 * S + eps * eps)


def omega_modulus(
    clp: ControlLyapunovPair, R: float, eps: float, delta: float, sampler=None, count: int = 64, rng=0, S: float | None = None
) -> float:
    """Continuity modulus of phi on the ball of radius M^eps(R) at scale delta."""
    if delta < 0:
        raise CLPError("delta must be nonnegative")
    if delta == 0:
        return 0.0
    if S is None:
        S = modulus_s(clp, R, sampler, rng=rng)
    radius = m_eps(S, R, eps)
    if clp.quadratic:
        return delta * radius + 0.5 * delta * delta
    return SAFETY["omega"] * sampled_omega(clp, radius, delta, sampler, count, rng)


def sampled_omega(clp, radius: float, delta: float, sampler=None, count: int = 64, rng=0) -> float:
    sampler = _default_sampler(clp, sampler)
    gen = np.random.default_rng(rng)
    return max(abs(clp.phi(a) - clp.phi(b)) for a, b in sampler.close_pairs(gen, radius, delta, count))


@dataclass
class ModuliTable:
    R: float
    S: float
    I: float
    Rcal: float
    omega: Callable[[float, float], float] = field(repr=False)
    source: str = "closed_form"

    def to_dict(self, eps: float | None = None, deltas=(0.0, 0.01, 0.1, 1.0)) -> dict:
        out = {"R": self.R, "S": self.S, "I": self.I, "Rcal": self.Rcal, "source": self.source}
        if eps is not None:
            out["omega"] = {repr(d): self.omega(eps, d) for d in deltas}
        return out


def moduli_table(clp: ControlLyapunovPair, R: float, sampler=None, rng=0) -> ModuliTable:
    S = modulus_s(clp, R, sampler, rng=rng)
    I = modulus_i(clp, R, sampler, rng=rng)
    rc = radius_rcal(clp, R, sampler, rng=rng)
    return ModuliTable(
        R, S, I, rc,
        lambda eps, delta: omega_modulus(clp, R, eps, delta, sampler, rng=rng, S=S),
        "closed_form" if clp.quadratic else "sampled",
    )


@dataclass(frozen=True)
class DerivedConstants:
    M_ke: float
    M_e: float
    N_ke: float
    K_ke: float
    Delta: float
    kappa: float
    eps: float
    r: float
    R: float
    omega_M: float
    Rcal_r: float
    eps_floor: float

    def to_dict(self) -> dict:
        return asdict(self)


def derived_constants(
    clp: ControlLyapunovPair,
    moduli: ModuliTable,
    kappa: float,
    eps: float,
    r: float,
    R: float,
    sampler=None,
    eps_floor_ratio: float = 1e-6,
    rng=0,
    Rcal_r: float | None = None,
) -> DerivedConstants:
    """Bounds on pseudo-minimizers and the decrease rate Delta(r, R).

    N uses the uniform bound S(R) in place of phi_kappa(m), so it depends on
    R only. Delta evaluates psi at eps_floor = eps_floor_ratio * eps0 over
    the annulus Rcal(r)/2 <= W2 <= M^eps(R).
    """
    if not (0 < kappa <= 1):
        raise CLPError("kappa must lie in (0, 1]")
    if eps < 0:
        raise CLPError("eps must be nonnegative")
    if not (0 < r < R):
        raise CLPError("need 0 < r < R")
    S = moduli.S
    M_ke = m_kappa_eps(S, kappa, eps)
    M_e = m_eps(S, R, eps)
    N_ke = n_kappa_eps(S, kappa, eps)
    omega_M = moduli.omega(eps, M_ke)
    K_ke = eps * kappa * kappa + kappa * math.sqrt(eps * eps * kappa * kappa + 2.0 * omega_M)
    if Rcal_r is None:
        Rcal_r = radius_rcal(clp, r, sampler, rng=rng)
    eps_floor = eps_floor_ratio * clp.eps0
    inner = 0.5 * Rcal_r
    if clp.quadratic:
        # psi increases with W2 to the target, so the inf sits on the inner sphere
        delta = (0.5 * inner * inner) * (1.0 + eps_floor / clp.eps0) / 3.0
    else:
        smp = _default_sampler(clp, sampler)
        gen = np.random.default_rng(rng)
        ms = smp.sphere(gen, inner, 16) + smp.annulus(gen, inner, M_e, 48)
        delta = SAFETY["Delta"] * min(clp.psi(m, eps_floor) for m in ms) / 3.0
    return DerivedConstants(M_ke, M_e, N_ke, K_ke, delta, kappa, eps, r, R, omega_M, Rcal_r, eps_floor)


@dataclass
class Condition4Report:
    pairings: list[float]
    threshold: float
    margins: list[float]
    best_controls: list[int]
    passed: bool
    worst_margin: float

    def to_dict(self) -> dict:
        return asdict(self)


def subgradient_pairings(alpha, f: VectorField, U: ControlSet, m: EmpiricalMeasure) -> np.ndarray:
    """Integral of p . f(x, m, u) d alpha for every u in U."""
    vals = []
    for u in U:
        drift = eval_field(f, alpha.positions, m, u)
        vals.append(float(np.sum(alpha.masses * np.einsum("ij,ij->i", alpha.covectors, drift))))
    return np.array(vals)


def clp_condition4_check(clp, f: VectorField, U: ControlSet, m: EmpiricalMeasure, eps: float, alphas) -> Condition4Report:
    """min_u of the subgradient pairing must not exceed -psi(m, eps)."""
    if len(U) == 0:
        raise CLPError("empty control set")
    if not (0 < eps < clp.eps0):
        raise CLPError("condition 4 is only claimed for 0 < eps < eps0")
    threshold = -clp.psi(m, eps)
    pairings, margins, best = [], [], []
    for alpha in alphas:
        vals = subgradient_pairings(alpha, f, U, m)
        k = int(np.argmin(vals))
        pairings.append(float(vals[k]))
        margins.append(threshold - float(vals[k]))
        best.append(k)
    worst = min(margins) if margins else float("inf")
    return Condition4Report(pairings, threshold, margins, best, worst > 0.0, worst)
