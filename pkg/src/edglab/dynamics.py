"""Right-hand side of the truncated system and its time integration.

The truncated system of order ``N`` written in flux form is

    dc_j/dt = J_{j-1} - J_j,    J_{-1} = J_N = 0,
    J_j = c_j S_in(j) - c_{j+1} S_out(j+1),

with ``S_out(j) = sum_{k=0}^{N-1} K(j,k) c_k`` (a ``j``-cluster exporting to any
cluster that can still grow) and ``S_in(j) = sum_{k=1}^{N} K(k,j) c_k`` (a
``j``-cluster importing from any non-empty cluster). For separable kernels both
sums reduce to a handful of weighted totals, so one evaluation costs O(N).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Sequence

import numpy as np

from .rates import KernelSpec
from .state import ClusterState

logger = logging.getLogger(__name__)

__all__ = [
    "SumCache",
    "IntegratorConfig",
    "Trajectory",
    "IntegrationError",
    "StepSizeUnderflow",
    "NegativityError",
    "sum_cache",
    "make_rhs",
    "rhs",
    "rhs_naive",
    "moment_identity_residual",
    "integrate",
    "sample_times",
]


class IntegrationError(RuntimeError):
    """Integration stopped before ``t_end``; ``partial`` holds the samples so far."""

    def __init__(self, msg: str, partial: "Trajectory | None" = None):
        super().__init__(msg)
        self.partial = partial


class StepSizeUnderflow(IntegrationError):
    pass


class NegativityError(IntegrationError):
    def __init__(self, msg: str, j: int, t: float, partial: "Trajectory | None" = None):
        super().__init__(msg, partial)
        self.j = j
        self.t = t


@dataclass(frozen=True)
class KernelArrays:
    j: np.ndarray
    a: np.ndarray
    b: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    eps: float
    product: bool


@lru_cache(maxsize=64)
def kernel_arrays(kernel: KernelSpec, n: int) -> KernelArrays:
    arrs = [np.arange(n + 1, dtype=float), kernel.a_vec(n), kernel.b_vec(n),
            kernel.alpha_vec(n), kernel.beta_vec(n)]
    for x in arrs:
        x.flags.writeable = False
    return KernelArrays(*arrs, eps=kernel.eps, product=kernel.is_product)


@dataclass(frozen=True)
class SumCache:
    """Weighted totals entering the truncated sums.

    ``A``, ``A_tilde`` and ``eta_trunc`` run over ``0..N-1`` (targets that can
    grow); ``B``, ``B_tilde`` and ``rho`` over ``1..N`` (non-empty sources).
    """

    A: float
    B: float
    A_tilde: float
    B_tilde: float
    rho: float
    eta: float
    eta_trunc: float


def _sums(ka: KernelArrays, c: np.ndarray) -> tuple[float, ...]:
    head, body = c[:-1], c[1:]
    A = float(ka.a[:-1] @ head)
    B = float(ka.b[1:] @ body)
    At = float(ka.alpha[:-1] @ head)
    Bt = float(ka.beta[1:] @ body)
    rho = float(ka.j[1:] @ body)
    eta_t = float(head.sum())
    return A, B, At, Bt, rho, eta_t


def sum_cache(kernel: KernelSpec, state: ClusterState | np.ndarray) -> SumCache:
    c = state.c if isinstance(state, ClusterState) else np.asarray(state, dtype=float)
    ka = kernel_arrays(kernel, c.size - 1)
    A, B, At, Bt, rho, eta_t = _sums(ka, c)
    return SumCache(A, B, At, Bt, rho, float(c.sum()), eta_t)


def make_rhs(kernel: KernelSpec, N: int) -> Callable[[np.ndarray], np.ndarray]:
    """Return ``f(c) -> dc/dt`` for truncation order ``N`` (O(N) per call)."""
    if kernel.form not in ("product", "sum"):
        raise NotImplementedError("only separable kernels have a fast right-hand side")
    ka = kernel_arrays(kernel, N)
    j, a, b, al, be, eps = ka.j, ka.a, ka.b, ka.alpha, ka.beta, ka.eps

    if ka.product:
        def f(c: np.ndarray) -> np.ndarray:
            A = a[:-1] @ c[:-1]
            B = b[1:] @ c[1:]
            flux = c[:-1] * a[:-1] * B - c[1:] * b[1:] * A
            d = np.empty_like(c)
            d[0] = 0.0
            d[1:] = flux
            d[:-1] -= flux
            return d
    else:
        def f(c: np.ndarray) -> np.ndarray:
            head, body = c[:-1], c[1:]
            A = a[:-1] @ head
            At = al[:-1] @ head
            eta_t = head.sum()
            B = b[1:] @ body
            Bt = be[1:] @ body
            rho = j[1:] @ body
            s_in = a[:-1] * rho + B + eps * al[:-1] * Bt
            s_out = j[1:] * A + b[1:] * eta_t + eps * be[1:] * At
            flux = head * s_in - body * s_out
            d = np.empty_like(c)
            d[0] = 0.0
            d[1:] = flux
            d[:-1] -= flux
            return d
    return f


def rhs(kernel: KernelSpec, state: ClusterState | np.ndarray) -> np.ndarray:
    """Time derivative of the truncated system at ``state``."""
    c = state.c if isinstance(state, ClusterState) else np.asarray(state, dtype=float)
    return make_rhs(kernel, c.size - 1)(np.asarray(c, dtype=float))


def rhs_naive(kernel: KernelSpec, state: ClusterState | np.ndarray) -> np.ndarray:
    """Term-by-term O(N^2) evaluation of the truncated equations.

    Test oracle only; every rate comes from :func:`eval_rate` via
    ``kernel.matrix``.
    """
    c = state.c if isinstance(state, ClusterState) else np.asarray(state, dtype=float)
    N = c.size - 1
    if N > 64:
        raise ValueError("naive right-hand side is limited to N <= 64")
    K = kernel.matrix(N)

    def s_out(j):
        return sum(K[j, k] * c[k] for k in range(0, N))

    def s_in(j):
        return sum(K[k, j] * c[k] for k in range(1, N + 1))

    d = np.zeros(N + 1)
    d[0] = c[1] * s_out(1) - c[0] * s_in(0)
    for j in range(1, N):
        d[j] = (c[j + 1] * s_out(j + 1) - c[j] * s_out(j)
                - c[j] * s_in(j) + c[j - 1] * s_in(j - 1))
    d[N] = -c[N] * s_out(N) + c[N - 1] * s_in(N - 1)
    return d


def moment_identity_residual(kernel: KernelSpec, state: ClusterState, g: Sequence[float],
                             relative: bool = False) -> float:
    """``|sum_j g_j dc_j/dt - (double-sum form)|`` for a weight vector ``g``.

    The double-sum side is evaluated from the dense kernel matrix, independently
    of the fast right-hand side. With ``relative=True`` the residual is divided
    by the sum of absolute values of the double-sum terms.
    """
    c = state.c
    N = state.N
    g = np.asarray(g, dtype=float)
    if g.shape != (N + 1,):
        raise ValueError(f"weight vector must have length N+1 = {N + 1}")
    lhs = float(g @ rhs(kernel, state))
    K = kernel.matrix(N)
    out_sum = K[1:, :N] @ c[:N]           # sum_{k=0}^{N-1} K(j,k) c_k, j = 1..N
    in_sum = K[1:, :N].T @ c[1:]          # sum_{k=1}^{N} K(k,j) c_k, j = 0..N-1
    t1 = (g[:-1] - g[1:]) * c[1:] * out_sum
    t2 = (g[1:] - g[:-1]) * c[:-1] * in_sum
    res = abs(lhs - float(t1.sum() + t2.sum()))
    if relative:
        scale = float(np.abs(t1).sum() + np.abs(t2).sum())
        return res / scale if scale > 0 else res
    return res


# ----------------------------------------------------------------------------
# integration

@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk45"
    rel_tol: float = 1e-8
    abs_tol: float = 1e-14
    max_step: float = math.inf
    min_step: float = 1e-12
    negativity_floor: float = 1e-12
    conservation_check_every: int = 100
    first_step: float | None = None
    max_steps: int = 50_000_000

    def __post_init__(self):
        if self.method not in ("rk45", "rk4"):
            raise ValueError(f"method must be 'rk45' or 'rk4', got {self.method!r}")
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if not self.min_step < self.max_step:
            raise ValueError("min_step must be smaller than max_step")
        if self.method == "rk4" and not math.isfinite(self.max_step):
            raise ValueError("fixed-step rk4 uses max_step as its step; set it")
        if self.negativity_floor < 0:
            raise ValueError("negativity_floor must be non-negative")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "IntegratorConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown integrator fields {sorted(extra)}")
        return cls(**d)


@dataclass
class Trajectory:
    samples: list[tuple[ClusterState, Any]] = field(default_factory=list)
    stats: dict[str, int] = field(default_factory=lambda: {
        "steps_accepted": 0, "steps_rejected": 0, "rhs_evals": 0, "clamp_events": 0})
    termination: str = "t_end"
    audit: dict[str, float] = field(default_factory=dict)

    @property
    def states(self) -> list[ClusterState]:
        return [s for s, _ in self.samples]

    @property
    def records(self) -> list[Any]:
        return [r for _, r in self.samples]

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s, _ in self.samples])

    @property
    def final(self) -> ClusterState:
        return self.samples[-1][0]

    def append(self, state: ClusterState, record: Any = None):
        if self.samples and not state.t > self.samples[-1][0].t:
            raise ValueError("trajectory samples must have strictly increasing times")
        self.samples.append((state, record))


def sample_times(t0: float, t_end: float, count: int, log: bool = True,
                 first: float | None = None) -> np.ndarray:
    """Sample grid from ``t0`` to ``t_end`` inclusive.

    Log spacing puts more samples early; ``first`` is the first positive offset
    (default ``(t_end - t0) * 1e-4``).
    """
    if count < 2:
        raise ValueError("need at least two sample times")
    span = t_end - t0
    if span <= 0:
        raise ValueError("t_end must exceed the initial time")
    if not log or count == 2:
        return np.linspace(t0, t_end, count)
    first = span * 1e-4 if first is None else first
    return np.concatenate([[t0], t0 + np.geomspace(first, span, count - 1)])


# Dormand-Prince 5(4)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _dp_step(f, y, k1, h):
    ks = [k1]
    for i in range(1, 7):
        yi = y.copy()
        for aij, kj in zip(_A[i], ks):
            if aij:
                yi += (h * aij) * kj
        ks.append(f(yi))
    # row 6 of A equals B5, so the 7th stage input is the 5th-order solution
    y_new = y.copy()
    for bi, ki in zip(_B5, ks):
        if bi:
            y_new += (h * bi) * ki
    err = np.zeros_like(y)
    for ei, ki in zip(_E, ks):
        if ei:
            err += (h * ei) * ki
    return y_new, err, ks[6]


def _rk4_step(f, y, k1, h):
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(kernel: KernelSpec, state0: ClusterState, t_end: float,
              cfg: IntegratorConfig | None = None,
              observers: Sequence[float] | int | None = None,
              observer: Callable[[ClusterState], Any] | None = None,
              stall_tol: float | None = None) -> Trajectory:
    """Integrate the truncated system from ``state0`` to ``t_end``.

    Parameters
    ----------
    observers:
        Sample times (must lie in ``[state0.t, t_end]``) or a sample count for
        a log-spaced grid. Default: 50 log-spaced samples.
    observer:
        Called on every sampled state; its return value is stored alongside.
    stall_tol:
        Stop early, and record a final sample, once ``max_j |dc_j/dt|`` drops
        below this value.

    Steps that leave any density below ``-negativity_floor`` are rejected and
    retried with half the step. Accepted negatives within the floor are clamped
    to zero and the conservation audit is refreshed.
    """
    cfg = cfg or IntegratorConfig()
    t0 = state0.t
    if not t_end > t0:
        raise ValueError("t_end must exceed the initial time")
    if observers is None:
        observers = 50
    if isinstance(observers, (int, np.integer)):
        times = sample_times(t0, t_end, int(observers))
    else:
        times = np.unique(np.asarray(observers, dtype=float))
        if times[0] < t0 - 1e-15 or times[-1] > t_end * (1 + 1e-15):
            raise ValueError("sample times must lie within [t0, t_end]")
    N = state0.N
    f_raw = make_rhs(kernel, N)
    stats = {"steps_accepted": 0, "steps_rejected": 0, "rhs_evals": 0, "clamp_events": 0}

    def f(y):
        stats["rhs_evals"] += 1
        return f_raw(y)

    traj = Trajectory(stats=stats)
    jw = np.arange(N + 1, dtype=float)
    y = np.array(state0.c, dtype=float)
    m0_init, m1_init = float(y.sum()), float(jw @ y)
    audit = {"M0_initial": m0_init, "M1_initial": m1_init, "max_drift_M0": 0.0,
             "max_drift_M1": 0.0}
    traj.audit = audit

    def do_audit(y):
        audit["max_drift_M0"] = max(audit["max_drift_M0"], abs(float(y.sum()) - m0_init))
        audit["max_drift_M1"] = max(audit["max_drift_M1"], abs(float(jw @ y) - m1_init))

    def record(t, y):
        st = ClusterState(np.maximum(y, 0.0), t)
        traj.append(st, observer(st) if observer else None)

    t = t0
    k1 = f(y)
    si = 0
    if times[0] <= t0:
        record(t, y)
        si = 1
    if stall_tol is not None and np.max(np.abs(k1)) < stall_tol:
        traj.termination = "stall"
        if not traj.samples:
            record(t, y)
        do_audit(y)
        return traj

    fixed = cfg.method == "rk4"
    if fixed:
        h = cfg.max_step
    elif cfg.first_step is not None:
        h = cfg.first_step
    else:
        scale = cfg.abs_tol + cfg.rel_tol * np.abs(y)
        with np.errstate(over="ignore"):
            d0 = np.sqrt(np.mean((y / scale) ** 2))
            d1 = np.sqrt(np.mean((k1 / scale) ** 2))
        h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        h = min(h, cfg.max_step, t_end - t0)
    h = max(h, cfg.min_step)
    steps = 0

    while si < len(times):
        target = times[si]
        h_try = min(h, target - t)
        hit = h_try >= target - t - 1e-12 * max(1.0, abs(target))
        if hit:
            h_try = target - t
        if fixed:
            y_new = _rk4_step(f, y, k1, h_try)
            err_norm = 0.0
            k_new = None
        else:
            y_new, err, k_new = _dp_step(f, y, k1, h_try)
            scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
            with np.errstate(over="ignore", invalid="ignore"):
                err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
            if not np.isfinite(err_norm):
                err_norm = np.inf
        neg = y_new.min() < -cfg.negativity_floor
        if not np.all(np.isfinite(y_new)) or err_norm > 1.0 or neg:
            stats["steps_rejected"] += 1
            if neg and err_norm <= 1.0:
                h = 0.5 * h_try
            elif fixed:
                h = 0.5 * h_try
            else:
                h = h_try * max(0.2, 0.9 * err_norm ** -0.2) if np.isfinite(err_norm) else 0.5 * h_try
            if h < cfg.min_step:
                if neg:
                    jbad = int(np.argmin(y_new))
                    raise NegativityError(
                        f"density c_{jbad} = {y_new[jbad]:.3e} below -floor at t = {t:.6g}",
                        jbad, t, traj)
                raise StepSizeUnderflow(f"step size underflow at t = {t:.6g} (stiffness?)", traj)
            continue

        # accepted
        steps += 1
        stats["steps_accepted"] += 1
        if steps > cfg.max_steps:
            raise IntegrationError(f"exceeded max_steps = {cfg.max_steps}", traj)
        t = target if hit else t + h_try
        clamped = y_new < 0
        if np.any(clamped):
            stats["clamp_events"] += int(clamped.sum())
            y_new[clamped] = 0.0
            k_new = None
            do_audit(y_new)
        y = y_new
        k1 = f(y) if k_new is None else k_new
        if steps % cfg.conservation_check_every == 0:
            do_audit(y)
        if not fixed:
            fac = 5.0 if err_norm == 0 else min(5.0, max(0.2, 0.9 * err_norm ** -0.2))
            h_next = h_try * fac
            # a step shortened to land on a sample should not shrink the next one
            h = max(h, h_next) if hit else h_next
            h = min(h, cfg.max_step)
        if hit:
            record(t, y)
            si += 1
        if stall_tol is not None and float(np.max(np.abs(k1))) < stall_tol:
            traj.termination = "stall"
            if not hit:
                record(t, y)
            break
    do_audit(y)
    return traj
