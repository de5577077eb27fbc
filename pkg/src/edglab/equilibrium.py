"""Equilibria of the exchange system.

Product kernels ``K(j,k) = b_j a_k`` have detailed-balance equilibria

    c_j = y * Q_j * z**j,    Q_j = prod_{k=1}^{j} a_{k-1} / b_k,

where the fugacity ``z`` fixes the mass-to-volume ratio and ``y`` the volume.
All ``Q_j`` arithmetic happens in log space. Sum kernels have no closed form;
their equilibria are found by relaxing the dynamics, and cross-checked against
a self-consistent solve of the zero-flux recursion.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

import numpy as np
from scipy import optimize

from .dynamics import IntegratorConfig, integrate, kernel_arrays, make_rhs
from .rates import KernelSpec
from .state import ClusterState, Norm, distance

logger = logging.getLogger(__name__)

__all__ = [
    "Regime",
    "EquilibriumProfile",
    "PartitionSums",
    "RadiusEstimate",
    "RelaxationResult",
    "DivergentSeriesError",
    "NoEquilibriumError",
    "SupercriticalError",
    "IndeterminateRadiusError",
    "q_factors",
    "partition_sums",
    "big_f",
    "radius_of_convergence",
    "critical_density",
    "solve_fugacity",
    "equilibrium_profile",
    "equilibrium_by_relaxation",
    "flux_recursion_equilibrium",
    "monomer_state",
    "geometric_state",
]

HARD_CAP = 10**7
SMALL_RUN = 10
DIVERGENCE_WINDOW = 50


class DivergentSeriesError(ArithmeticError):
    """The partition series diverges at the requested fugacity (``z >= z_s``)."""


class NoEquilibriumError(ValueError):
    pass


class SupercriticalError(ValueError):
    pass


class IndeterminateRadiusError(ArithmeticError):
    pass


class Regime(str, Enum):
    SUBCRITICAL = "subcritical"
    CRITICAL = "critical"
    SUPERCRITICAL = "supercritical"
    NO_EQUILIBRIUM = "no_equilibrium"


# ----------------------------------------------------------------------------
# Q factors

def q_factors(kernel: KernelSpec, N: int) -> np.ndarray:
    """``ln Q_j`` for ``j = 0..N``.

    A zero import rate ``a_{k-1}`` makes ``Q_j = 0`` (``-inf``) for all
    ``j >= k``; a zero export rate ``b_k`` with ``a_{k-1} > 0`` leaves ``Q``
    undefined and raises.
    """
    if not kernel.is_product:
        raise ValueError("Q factors are defined for product kernels")
    a = kernel.a_vec(N)
    b = kernel.b_vec(N)
    a_prev, b_cur = a[:-1], b[1:]
    bad = np.flatnonzero((b_cur <= 0) & (a_prev > 0))
    if bad.size:
        raise ValueError(f"b_{bad[0] + 1} = 0 with a_{bad[0]} > 0: Q undefined")
    with np.errstate(divide="ignore"):
        steps = np.where(a_prev > 0, np.log(a_prev) - np.log(np.where(b_cur > 0, b_cur, 1.0)),
                         -np.inf)
    logq = np.concatenate([[0.0], np.cumsum(steps)])
    if np.isneginf(steps).any():
        k = int(np.flatnonzero(np.isneginf(steps))[0]) + 1
        logger.info("a_%d = 0: Q_j = 0 for j >= %d (absorbing)", k - 1, k)
    return logq


def _logq_source(log_q) -> tuple[Callable[[int], np.ndarray], int]:
    if isinstance(log_q, KernelSpec):
        return (lambda n: q_factors(log_q, n)), HARD_CAP
    if callable(log_q):
        return log_q, HARD_CAP
    arr = np.asarray(log_q, dtype=float)
    return (lambda n: arr[:n + 1]), arr.size - 1


# ----------------------------------------------------------------------------
# partition sums

@dataclass(frozen=True)
class PartitionSums:
    """``S0 = sum Q_j z^j`` and ``S1 = sum j Q_j z^j`` kept as logarithms."""

    log_s0: float
    log_s1: float
    n_terms: int
    converged: bool

    @property
    def s0(self) -> float:
        return math.exp(self.log_s0) if self.log_s0 < 709 else math.inf

    @property
    def s1(self) -> float:
        return math.exp(self.log_s1) if self.log_s1 < 709 else math.inf

    @property
    def mean(self) -> float:
        """``F = S1 / S0``."""
        return math.exp(self.log_s1 - self.log_s0)


def _diverging(log_terms: np.ndarray) -> bool:
    if log_terms.size < DIVERGENCE_WINDOW + 1 or not np.all(np.isfinite(log_terms[-DIVERGENCE_WINDOW - 1:])):
        return False
    w = log_terms[-DIVERGENCE_WINDOW - 1:]
    d = np.diff(w)
    # round-off allowance only for the curvature test
    tol = 4 * np.finfo(float).eps * max(1.0, float(np.abs(w).max()))
    return bool(np.all(d >= 0) and np.all(np.diff(d) >= -tol))


def partition_sums(log_q, z: float, tol: float = 1e-15, cap: int = HARD_CAP) -> PartitionSums:
    """Sum ``Q_j z^j`` and ``j Q_j z^j`` until the ``j``-weighted term stays
    below ``tol * S1`` for 10 consecutive indices.

    ``log_q`` is a vector of ``ln Q_j``, a callable ``n -> ln Q_{0..n}``, or a
    product kernel. Summation stops unconverged at ``cap`` terms (or at the end
    of a finite vector). Raises :class:`DivergentSeriesError` when the terms
    ``Q_j z^j`` are non-decreasing with non-shrinking ratio over a 50-term
    window.
    """
    if z < 0 or not math.isfinite(z):
        raise ValueError("fugacity must be finite and non-negative")
    if tol <= 0:
        raise ValueError("tol must be positive")
    source, limit = _logq_source(log_q)
    limit = min(limit, cap)
    if z == 0:
        lq0 = float(source(0)[0])
        return PartitionSums(lq0, -math.inf, 1, True)
    lz = math.log(z)
    log_tol = math.log(tol)
    n = min(1023, limit)
    while True:
        lq = source(n)
        j = np.arange(lq.size, dtype=float)
        lt = lq + j * lz
        with np.errstate(divide="ignore"):
            l1 = lt + np.log(j)
        cum1 = np.logaddexp.accumulate(l1)
        small = (l1 < log_tol + cum1) & (j >= 1)
        # first index closing a run of SMALL_RUN consecutive small terms
        run = np.convolve(small.astype(np.int64), np.ones(SMALL_RUN, dtype=np.int64), "full")[:small.size]
        hits = np.flatnonzero(run >= SMALL_RUN)
        if hits.size:
            m = int(hits[0])
            return PartitionSums(float(np.logaddexp.reduce(lt[:m + 1])),
                                 float(cum1[m]), m + 1, True)
        if _diverging(lt):
            raise DivergentSeriesError(
                f"partition series diverges at z = {z!r} (terms non-decreasing near j = {n})")
        if n >= limit:
            return PartitionSums(float(np.logaddexp.reduce(lt)), float(cum1[-1]), n + 1, False)
        n = min(2 * n + 1, limit)


def big_f(kernel_or_logq, z: float, tol: float = 1e-15) -> float:
    """Mean cluster index ``F(z) = S1 / S0`` of the equilibrium family."""
    ps = partition_sums(kernel_or_logq, z, tol)
    if not ps.converged:
        raise DivergentSeriesError(f"partition series did not converge at z = {z!r}")
    return 0.0 if ps.log_s1 == -math.inf else ps.mean


# ----------------------------------------------------------------------------
# radius of convergence

@dataclass(frozen=True)
class RadiusEstimate:
    """Estimated radius ``z_s`` of ``sum Q_j z^j``.

    ``status`` is ``finite``, ``infinite``, ``zero`` or ``indeterminate``;
    ``method`` records whether the ratio or root test produced ``z_s``;
    ``period`` is the step ``p`` of the ratio ``(Q_k / Q_{k+p})^{1/p}`` used.
    """

    z_s: float
    status: str
    method: str
    ratio_estimate: float
    root_estimate: float
    loglog_slope: float
    fit_residual: float
    range: int
    period: int = 1


def _lstsq_intercept(x_cols: list[np.ndarray], y: np.ndarray) -> tuple[float, float]:
    X = np.column_stack([np.ones_like(y)] + x_cols)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    scale = max(float(np.abs(y).max()), 1e-300)
    return float(coef[0]), float(np.sqrt(np.mean(resid**2)) / scale)


def radius_of_convergence(kernel: KernelSpec, range: int = 10_000) -> RadiusEstimate:
    """Ratio-test estimate of ``z_s = lim b_{k+1} / a_k``.

    The test runs on the ``p``-step ratios ``(Q_k / Q_{k+p})^{1/p}`` over the
    last 10% of the range, with the smallest ``p <= 12`` that makes them
    monotone there (``p = 1`` is the plain ratio; larger ``p`` absorbs
    periodic rates). Monotone ratios with a log-log slope above 0.02 are
    declared divergent (``z_s = inf``), below -0.02 vanishing (``z_s = 0``);
    otherwise they are extrapolated in ``1/k``. A root-test estimate
    ``1 / lim Q_j^{1/j}`` is the fallback when no step gives monotone ratios.
    """
    if range < 10:
        raise ValueError("range must be at least 10")
    if not kernel.is_product:
        raise ValueError("the radius of convergence is defined for product kernels")
    R = int(range)
    a = kernel.a_vec(R + 1)
    b = kernel.b_vec(R + 1)
    if np.any(a[:R] == 0):
        # Q_j vanishes from some index on: a polynomial
        return RadiusEstimate(math.inf, "infinite", "finite_support", math.inf, math.inf,
                              math.nan, 0.0, R)
    ratio = b[1:R + 1] / a[:R]
    lo = max(1, int(0.9 * R))
    logq = q_factors(kernel, R)
    jw = np.arange(lo, R + 1, dtype=float)
    root_int, root_res = _lstsq_intercept([np.log(jw) / jw, 1 / jw], logq[lo:] / jw)
    root_est = math.exp(-root_int)

    with np.errstate(divide="ignore"):
        log_ratio = np.log(ratio)
    csum = np.concatenate([[0.0], np.cumsum(log_ratio)])
    last = (math.nan, 0.0, math.nan)
    for p in np.arange(1, 13):
        n = R - p + 1
        if n - lo < 10:
            break
        kw = np.arange(lo, n, dtype=float)
        if p == 1:
            rw = ratio[lo:n]
        else:
            with np.errstate(invalid="ignore"):
                rw = np.exp((csum[lo + p:n + p] - csum[lo:n]) / p)
        tol = 1e-13 * p * float(np.abs(rw).max())
        inc = bool(np.all(np.diff(rw) >= -tol))
        dec = bool(np.all(np.diff(rw) <= tol))
        with np.errstate(divide="ignore"):
            slope = float(np.polyfit(np.log(kw), np.log(rw), 1)[0]) if np.all(rw > 0) else -math.inf
        z_ratio, res = _lstsq_intercept([1 / kw, 1 / kw**2], rw)
        last = (z_ratio, res, slope)
        if not (inc or dec):
            continue
        p = int(p)
        if inc and slope > 0.02:
            return RadiusEstimate(math.inf, "infinite", "ratio", math.inf, root_est, slope, 0.0, R, p)
        if dec and slope < -0.02:
            return RadiusEstimate(0.0, "zero", "ratio", 0.0, root_est, slope, 0.0, R, p)
        if float(np.ptp(rw)) <= tol:
            z_const = float(np.median(rw))
            return RadiusEstimate(z_const, "finite", "ratio", z_const, root_est, slope, 0.0, R, p)
        if res < 1e-6:
            return RadiusEstimate(z_ratio, "finite", "ratio", z_ratio, root_est, slope, res, R, p)
        break
    z_ratio, res, slope = last
    if root_res < 1e-3:
        return RadiusEstimate(root_est, "finite", "root", z_ratio, root_est, slope, root_res, R)
    return RadiusEstimate(math.nan, "indeterminate", "none", z_ratio, root_est, slope, res, R)


# ----------------------------------------------------------------------------
# critical density and fugacity

@dataclass(frozen=True)
class CriticalPoint:
    rho_s: float
    z_s: float
    y_s: float
    radius: RadiusEstimate
    direct: float
    richardson: float


def _critical(kernel: KernelSpec, eta: float, sample_range: int = 10_000,
              tol: float = 1e-15) -> CriticalPoint:
    if eta <= 0:
        raise ValueError("eta must be positive")
    rad = radius_of_convergence(kernel, sample_range)
    if rad.status == "indeterminate":
        raise IndeterminateRadiusError(
            f"radius of convergence indeterminate (ratio {rad.ratio_estimate}, root {rad.root_estimate})")
    if rad.status == "zero":
        return CriticalPoint(0.0, 0.0, math.nan, rad, 0.0, 0.0)
    if not math.isfinite(rad.z_s):
        return CriticalPoint(math.inf, math.inf, math.nan, rad, math.inf, math.inf)
    z_s = rad.z_s
    try:
        ps = partition_sums(kernel, z_s, tol)
        ok = ps.converged
    except DivergentSeriesError:
        ok = False
    if not ok:
        return CriticalPoint(math.inf, z_s, math.nan, rad, math.inf, math.inf)
    # cross-check: approach z_s from below along z_s (1 - 2^-m), first-order Richardson
    fm = [big_f(kernel, z_s * (1 - 2.0**-m), tol) for m in (19, 20)]
    richardson = 2 * fm[1] - fm[0]
    direct = ps.mean
    if abs(richardson - direct) > 1e-4 * direct:
        logger.warning("critical density: direct %.10g vs extrapolated %.10g", direct, richardson)
    return CriticalPoint(eta * direct, z_s, eta / ps.s0, rad, direct, richardson)


def critical_density(kernel: KernelSpec, eta: float = 1.0, range: int = 10_000) -> float:
    """``rho_s = eta * sup_{z <= z_s} F(z)``; ``inf`` when ``S1`` diverges at ``z_s``.

    The series is summed directly at the estimated ``z_s``; a Richardson
    extrapolation over ``z_s (1 - 2^-m)`` is kept as a cross-check.
    """
    return _critical(kernel, eta, range).rho_s


def solve_fugacity(kernel: KernelSpec, rho: float, eta: float = 1.0, tol: float = 1e-12,
                   rho_s: float | None = None, z_s: float | None = None) -> float:
    """Bisection for ``F(z) = rho / eta`` on ``(0, z_hi)``; ``F`` is strictly increasing.

    ``z`` is resolved to machine precision; ``tol`` is the relative gap kept
    below a finite ``z_s``.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    if eta <= 0:
        raise ValueError("eta must be positive")
    if rho_s is None or z_s is None:
        cp = _critical(kernel, eta)
        rho_s, z_s = cp.rho_s, cp.z_s
    if rho >= rho_s:
        raise SupercriticalError(f"rho = {rho} >= rho_s = {rho_s}: no equilibrium with this mass")
    target = rho / eta

    def f_upper(z):
        # near z_s the series may need more terms than the cap; a partial mean still brackets
        try:
            return partition_sums(kernel, z).mean
        except DivergentSeriesError:
            return math.inf

    lo = 0.0
    if math.isfinite(z_s):
        # walk towards z_s; the costly near-critical sums only when rho is close to rho_s
        hi = None
        for m in range(1, 41):
            z = z_s * (1 - 2.0**-m)
            if f_upper(z) >= target:
                hi = z
                break
            lo = z
        if hi is None:
            hi = z_s * (1 - tol)
            if f_upper(hi) < target:
                raise SupercriticalError(f"rho = {rho} within tolerance of rho_s = {rho_s}")
    else:
        hi = 1.0
        while big_f(kernel, hi) < target:
            lo, hi = hi, 2.0 * hi
            if hi > 1e300:
                raise ArithmeticError("could not bracket the fugacity")
    # signs only: the infinite values f_upper returns near z_s still bracket
    return float(optimize.bisect(lambda z: f_upper(z) - target, lo, hi,
                                 xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=4000))


# ----------------------------------------------------------------------------
# equilibrium profiles

@dataclass(frozen=True)
class EquilibriumProfile:
    logQ: np.ndarray
    z: float
    y: float
    z_s: float
    rho_s: float
    regime: Regime
    c_e: np.ndarray
    rho: float
    eta: float

    @property
    def N(self) -> int:
        return self.c_e.size - 1

    @property
    def state(self) -> ClusterState:
        return ClusterState(self.c_e)

    def to_json(self) -> dict[str, Any]:
        def num(x):
            return x if math.isfinite(x) else str(x)
        return {"regime": self.regime.value, "rho": self.rho, "eta": self.eta,
                "z": num(self.z), "y": num(self.y), "z_s": num(self.z_s),
                "rho_s": num(self.rho_s), "N": self.N,
                "profile_mass": float(np.arange(self.N + 1) @ self.c_e),
                "profile_volume": float(self.c_e.sum())}


def _assemble(logq: np.ndarray, z: float, log_y: float) -> np.ndarray:
    j = np.arange(logq.size, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        lz = math.log(z) if z > 0 else -math.inf
        lc = logq + np.where(j > 0, j * lz, 0.0) + log_y
    return np.exp(lc)


def equilibrium_profile(kernel: KernelSpec, rho: float, eta: float = 1.0, N: int = 100,
                        tol: float = 1e-12) -> EquilibriumProfile:
    """Detailed-balance equilibrium ``c_j = Q_j z^j eta / sum_k Q_k z^k``, ``j <= N``.

    Above the critical density the critical profile (``z = z_s``) is returned
    with ``regime = supercritical``; it is the weak limit of the dynamics.
    """
    if not kernel.is_product:
        raise ValueError("closed-form equilibria need a product kernel; use relaxation")
    if rho < 0 or eta <= 0:
        raise ValueError("need rho >= 0 and eta > 0")
    cp = _critical(kernel, eta)
    if cp.radius.status == "zero":
        raise NoEquilibriumError("z_s = 0: importing dominates, no equilibrium for any mass")
    logq = q_factors(kernel, N)
    if rho == 0:
        c = np.zeros(N + 1)
        c[0] = eta
        return EquilibriumProfile(logq, 0.0, eta, cp.z_s, cp.rho_s, Regime.SUBCRITICAL, c,
                                  rho, eta)
    if math.isfinite(cp.rho_s) and abs(rho - cp.rho_s) <= 1e-12 * cp.rho_s:
        regime = Regime.CRITICAL
    elif rho > cp.rho_s:
        regime = Regime.SUPERCRITICAL
    else:
        regime = Regime.SUBCRITICAL
    if regime is Regime.SUBCRITICAL:
        z = solve_fugacity(kernel, rho, eta, tol, rho_s=cp.rho_s, z_s=cp.z_s)
    else:
        z = cp.z_s
    ps = partition_sums(kernel, z)
    log_y = math.log(eta) - ps.log_s0
    c = _assemble(logq, z, log_y)
    return EquilibriumProfile(logq, z, math.exp(log_y), cp.z_s, cp.rho_s, regime, c, rho, eta)


# ----------------------------------------------------------------------------
# sum kernels

def monomer_state(rho: float, eta: float, N: int) -> ClusterState:
    """All mass in monomers: ``c_0 = eta - rho``, ``c_1 = rho``."""
    if not 0 <= rho <= eta:
        raise ValueError("monomer-only initial data needs 0 <= rho <= eta")
    c = np.zeros(N + 1)
    c[0] = eta - rho
    c[1] = rho
    return ClusterState(c)


def geometric_state(rho: float, eta: float, N: int, decay: float = 0.5) -> ClusterState:
    """``c_j proportional to decay^(j-1)`` for ``j >= 1``, scaled to mass ``rho``."""
    if not 0 < decay < 1:
        raise ValueError("decay must lie in (0, 1)")
    j = np.arange(1, N + 1, dtype=float)
    w = decay ** (j - 1)
    w *= rho / float(j @ w)
    c0 = eta - w.sum()
    if c0 < 0:
        raise ValueError(f"geometric data with decay {decay} cannot hold mass {rho} in volume {eta}")
    return ClusterState(np.concatenate([[c0], w]))


@dataclass
class RelaxationResult:
    c_e: ClusterState
    residual: float
    weak0_between: float
    t_stall: float
    consistent: bool
    details: dict[str, Any] = field(default_factory=dict)


class RelaxationError(RuntimeError):
    pass


def equilibrium_by_relaxation(kernel: KernelSpec, rho: float, N: int,
                              cfg: IntegratorConfig | None = None,
                              stall_tol: float = 1e-10, t_max: float = 1e4,
                              initials: tuple[ClusterState, ClusterState] | None = None
                              ) -> RelaxationResult:
    """Integrate to stall from two initial conditions with the same ``(rho, 1)``.

    Returns the first terminal state, its residual ``max |dc/dt|`` and the
    weak distance between the two terminal states, which must be below
    ``10 * stall_tol`` for the result to be ``consistent``.
    """
    cfg = cfg or IntegratorConfig(rel_tol=1e-11, abs_tol=1e-16)
    if rho == 0:
        c = np.zeros(N + 1)
        c[0] = 1.0
        return RelaxationResult(ClusterState(c), 0.0, 0.0, 0.0, True)
    if initials is None:
        first = monomer_state(rho, 1.0, N) if rho <= 1 else geometric_state(rho, 1.0, N, 0.3)
        initials = (first, geometric_state(rho, 1.0, N, 0.5 if rho <= 1 else 0.8))
    for s in initials:
        if abs(s.eta - 1.0) > 1e-12 or abs(s.rho - rho) > 1e-12 * max(1.0, rho):
            raise ValueError("relaxation initial data must have volume 1 and mass rho")
    finals = []
    for s in initials:
        tr = integrate(kernel, s, t_max, cfg, observers=2, stall_tol=stall_tol)
        if tr.termination != "stall":
            res = float(np.abs(make_rhs(kernel, N)(np.array(tr.final.c))).max())
            raise RelaxationError(f"no stall before t_max = {t_max} (max |dc/dt| = {res:.3e})")
        finals.append(tr.final)
    f = make_rhs(kernel, N)
    residual = float(np.abs(f(np.array(finals[0].c))).max())
    gap = distance(finals[0], finals[1], Norm.WEAK0)
    return RelaxationResult(finals[0], residual, gap, finals[0].t, gap < 10 * stall_tol,
                            {"t_stall": [s.t for s in finals],
                             "residuals": [float(np.abs(f(np.array(s.c))).max()) for s in finals]})


def flux_recursion_equilibrium(kernel: KernelSpec, rho: float, N: int,
                               eta: float = 1.0) -> ClusterState:
    """Stationary state of the truncated system from the zero-flux recursion.

    Every stationary state of the chain has vanishing fluxes, so
    ``c_{j+1} / c_j = S_in(j) / S_out(j+1)`` with ``S_in``, ``S_out`` built
    from five weighted totals. Those totals are solved self-consistently; mass
    ``rho`` then follows from the zero total flux.
    """
    if kernel.is_product:
        # the product recursion leaves z free; the mass fixes it
        raise ValueError("use equilibrium_profile for product kernels")
    ka = kernel_arrays(kernel, N)
    j, a, b, al, be, eps = ka.j, ka.a, ka.b, ka.alpha, ka.beta, ka.eps
    if rho == 0:
        c = np.zeros(N + 1)
        c[0] = eta
        return ClusterState(c)

    def profile(x):
        A, At, eta_t, B, Bt = x
        s_in = a[:-1] * rho + B + eps * al[:-1] * Bt
        s_out = j[1:] * A + b[1:] * eta_t + eps * be[1:] * At
        with np.errstate(divide="ignore"):
            lr = np.log(s_in) - np.log(s_out)
        lc = np.concatenate([[0.0], np.cumsum(lr)])
        lc -= lc.max()
        c = np.exp(lc)
        return c * (eta / c.sum())

    def totals(c):
        return np.array([a[:-1] @ c[:-1], al[:-1] @ c[:-1], c[:-1].sum(),
                         b[1:] @ c[1:], be[1:] @ c[1:]])

    c_guess = np.array(geometric_state(min(rho, 0.5 * eta), eta, N).c) if rho <= eta \
        else np.array(geometric_state(rho, eta, N, 1 - 1 / (rho + 2)).c)
    x0 = np.log(np.maximum(totals(c_guess), 1e-300))

    def resid(lx):
        x = np.exp(lx)
        return np.log(np.maximum(totals(profile(x)), 1e-300)) - lx

    sol = optimize.root(resid, x0, method="hybr", tol=1e-15)
    c = profile(np.exp(sol.x))
    if not sol.success and float(np.abs(resid(sol.x)).max()) > 1e-10:
        raise ArithmeticError(f"flux recursion did not converge: {sol.message}")
    return ClusterState(c)
