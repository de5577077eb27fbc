"""Entropy functionals, dissipation, fluxes, pair distances and rate fits."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dynamics import SumCache, kernel_arrays, sum_cache
from .rates import KernelBounds, KernelSpec
from .state import ClusterState, Norm, distance, tail

logger = logging.getLogger(__name__)

__all__ = [
    "TINY",
    "entropy_g",
    "relative_entropy_v",
    "modified_entropy",
    "dissipation_d",
    "dissipation_naive",
    "flux",
    "detailed_balance_residual",
    "PairDistance",
    "pair_tail_distance",
    "RateFit",
    "fit_exponential_rate",
    "m2_bound",
    "DiagnosticsRecord",
    "make_record",
    "DIAGNOSTICS_COLUMNS",
    "records_to_csv",
]

# densities below this count as zero before taking logs
TINY = 1e-300


def _xlogx_terms(c: np.ndarray, log_ref: np.ndarray | float = 0.0) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    pos = c > TINY
    out = np.zeros_like(c)
    ref = np.broadcast_to(np.asarray(log_ref, dtype=float), c.shape)
    with np.errstate(invalid="ignore"):
        out[pos] = c[pos] * (np.log(c[pos]) - ref[pos] - 1.0)
    return out


def entropy_g(state: ClusterState) -> float:
    """``G = sum c_j (ln c_j - 1)`` with ``0 (ln 0 - 1) = 0``."""
    return float(_xlogx_terms(state.c).sum())


def relative_entropy_v(logQ: np.ndarray, state: ClusterState) -> float:
    """``V = sum c_j (ln(c_j / Q_j) - 1)``.

    Returns ``+inf`` (with a log message) when some ``Q_j = 0`` carries
    ``c_j > 0``.
    """
    logQ = np.asarray(logQ, dtype=float)
    if logQ.size < state.c.size:
        raise ValueError("logQ must cover indices 0..N")
    logQ = logQ[:state.c.size]
    bad = np.isneginf(logQ) & (state.c > TINY)
    if bad.any():
        logger.info("relative entropy infinite: c_%d > 0 where Q = 0", int(np.flatnonzero(bad)[0]))
        return math.inf
    return float(_xlogx_terms(state.c, np.where(np.isneginf(logQ), 0.0, logQ)).sum())


def modified_entropy(logQ: np.ndarray, state: ClusterState, z: float, y: float) -> float:
    """``V_{z,y}(c) = V(c) - rho ln z - eta ln y``."""
    if z <= 0 or y <= 0:
        raise ValueError("z and y must be positive")
    return relative_entropy_v(logQ, state) - state.rho * math.log(z) - state.eta * math.log(y)


def _pair_terms(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``(x - y) ln(x / y)`` elementwise; 0 when both vanish, ``+inf`` when one does."""
    x = np.where(x > TINY, x, 0.0)
    y = np.where(y > TINY, y, 0.0)
    out = np.zeros_like(x)
    both = (x > 0) & (y > 0)
    xb, yb = x[both], y[both]
    d = xb - yb
    near = np.abs(d) < 0.5 * yb
    # log1p keeps the near-equilibrium terms accurate
    out[both] = d * np.where(near, np.log1p(np.where(near, d / yb, 0.0)),
                             np.log(xb) - np.log(yb))
    one = (x > 0) ^ (y > 0)
    out[one] = math.inf
    return out


def dissipation_d(kernel: KernelSpec, state: ClusterState, one_sided: str = "inf") -> float:
    """Entropy dissipation for a product kernel.

    Evaluated as ``sum_{j<N} (x_j - y_j) ln(x_j / y_j)`` with
    ``x_j = B a_j c_j`` and ``y_j = A b_{j+1} c_{j+1}`` so every term is
    non-negative. The fluxes sum to zero, so this equals the form with
    ``ln(a_j c_j / (b_{j+1} c_{j+1}))``.

    A term with exactly one vanishing side is ``+inf``. With
    ``one_sided="drop"`` such terms are left out instead; this is the finite
    part used along trajectories, where zeros come from underflow at the edge
    of the occupied range.
    """
    if one_sided not in ("inf", "drop"):
        raise ValueError("one_sided must be 'inf' or 'drop'")
    if not kernel.is_product:
        raise ValueError("dissipation is defined for product kernels")
    c = state.c
    ka = kernel_arrays(kernel, state.N)
    sc = sum_cache(kernel, state)
    x = sc.B * ka.a[:-1] * c[:-1]
    y = sc.A * ka.b[1:] * c[1:]
    terms = _pair_terms(x, y)
    if one_sided == "drop":
        return float(terms[np.isfinite(terms)].sum())
    if np.isinf(terms).any():
        logger.debug("dissipation infinite: one-sided zero at j = %d",
                     int(np.flatnonzero(np.isinf(terms))[0]))
    return float(terms.sum())


def dissipation_naive(kernel: KernelSpec, state: ClusterState) -> float:
    """Literal loop over ``(B a_j c_j - A b_{j+1} c_{j+1}) ln(a_j c_j / (b_{j+1} c_{j+1}))``.

    Test oracle; needs all terms strictly positive.
    """
    c = state.c
    N = state.N
    a, b = kernel.a_vec(N), kernel.b_vec(N)
    A = sum(a[k] * c[k] for k in range(N))
    B = sum(b[k] * c[k] for k in range(1, N + 1))
    total = 0.0
    for j in range(N):
        total += (B * a[j] * c[j] - A * b[j + 1] * c[j + 1]) * math.log(
            a[j] * c[j] / (b[j + 1] * c[j + 1]))
    return total


def flux(kernel: KernelSpec, state: ClusterState) -> np.ndarray:
    """Fluxes ``I_j`` from ``j`` to ``j+1`` for ``j = 0..N-1``.

    For product kernels ``I_j = a_j c_j B - b_{j+1} c_{j+1} A``; for sum
    kernels the same net flux ``c_j S_in(j) - c_{j+1} S_out(j+1)``. In both
    cases ``dc_j/dt = I_{j-1} - I_j``.
    """
    c = state.c
    ka = kernel_arrays(kernel, state.N)
    sc = sum_cache(kernel, state)
    if ka.product:
        return ka.a[:-1] * c[:-1] * sc.B - ka.b[1:] * c[1:] * sc.A
    s_in = ka.a[:-1] * sc.rho + sc.B + ka.eps * ka.alpha[:-1] * sc.B_tilde
    s_out = ka.j[1:] * sc.A + ka.b[1:] * sc.eta_trunc + ka.eps * ka.beta[1:] * sc.A_tilde
    return c[:-1] * s_in - c[1:] * s_out


def detailed_balance_residual(kernel: KernelSpec, state: ClusterState) -> float:
    """``max_j |I_j|``."""
    f = flux(kernel, state)
    return float(np.abs(f).max()) if f.size else 0.0


@dataclass(frozen=True)
class PairDistance:
    tail_l1: float
    weak0: float
    strong1: float
    volume_gap: float

    @property
    def equal_volume(self) -> bool:
        return self.volume_gap <= 1e-9


def pair_tail_distance(a: ClusterState, b: ClusterState, mass_tol: float = 1e-9) -> PairDistance:
    """Tail, weak and strong distances between two equal-mass states.

    ``volume_gap = |E_0|`` flags a volume mismatch; the contraction estimates
    assume it vanishes.
    """
    if a.N != b.N:
        raise ValueError(f"truncation orders differ: {a.N} != {b.N}")
    if abs(a.rho - b.rho) > mass_tol * max(1.0, abs(a.rho)):
        raise ValueError(f"masses differ: {a.rho!r} vs {b.rho!r}")
    gap = abs(a.eta - b.eta)
    if gap > 1e-9:
        logger.warning("paired states differ in volume by %.3e", gap)
    return PairDistance(
        tail_l1=float(np.abs(tail(a) - tail(b)).sum()),
        weak0=distance(a, b, Norm.WEAK0),
        strong1=distance(a, b, Norm.STRONG1),
        volume_gap=gap,
    )


@dataclass(frozen=True)
class RateFit:
    gamma: float
    r_squared: float
    n_used: int
    t_start: float
    t_stop: float
    truncated: bool = False
    intercept: float = 0.0

    def envelope(self, t: np.ndarray | float, amplitude: float) -> np.ndarray:
        return amplitude * np.exp(-self.gamma * np.asarray(t, dtype=float))


def fit_exponential_rate(t: Sequence[float], v: Sequence[float], window: float = 0.5,
                         floor: float = 0.0) -> RateFit:
    """Least-squares fit of ``ln v = c - gamma t`` over the trailing ``window`` fraction.

    Samples at or below ``floor`` (zero by default) end the usable series: the
    fit then runs on the positive prefix and is flagged ``truncated``. The
    window is taken from that prefix.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    if t.shape != v.shape:
        raise ValueError("t and v must have the same length")
    if not 0 < window <= 1:
        raise ValueError("window must lie in (0, 1]")
    ok = v > floor
    truncated = not ok.all()
    n_ok = int(np.argmin(ok)) if truncated else v.size
    start = n_ok - max(int(math.ceil(window * n_ok)), 1)
    ts, vs = t[start:n_ok], v[start:n_ok]
    if ts.size < 10:
        raise ValueError(f"need at least 10 positive samples in the fit window, have {ts.size}")
    lv = np.log(vs)
    slope, icpt = np.polyfit(ts, lv, 1)
    resid = lv - (slope * ts + icpt)
    ss_res = float(resid @ resid)
    ss_tot = float(((lv - lv.mean()) ** 2).sum())
    if ss_tot <= 1e-30 * max(1.0, float(lv @ lv)):
        r2 = 1.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return RateFit(float(-slope), r2, int(ts.size), float(ts[0]), float(ts[-1]), truncated,
                   float(icpt))


def m2_bound(bounds: KernelBounds, rho: float, eps: float) -> float:
    """Long-time second-moment bound for small mass.

    ``rho (2a_0 + 3 a_bar rho + 2 b_bar rho + 2 b_bar + 2 eps beta_bar (alpha_0 + alpha_bar) rho - b_min)``
    divided by ``|2 (a_bar rho + 2 eps alpha_bar beta_bar rho - a_min)|``. The
    printed denominator is negative in the small-mass regime; its absolute
    value is used.
    """
    B = bounds
    num = rho * (2 * B.a0 + 3 * B.a_bar * rho + 2 * B.b_bar * rho + 2 * B.b_bar
                 + 2 * eps * B.beta_bar * (B.alpha0 + B.alpha_bar) * rho - B.b_min)
    den = 2 * (B.a_bar * rho + 2 * eps * B.alpha_bar * B.beta_bar * rho - B.a_min)
    if den >= 0:
        raise ValueError("mass too large: rho must stay below a_min / (a_bar + 2 eps alpha_bar beta_bar)")
    return num / abs(den)


# ----------------------------------------------------------------------------
# per-sample records

DIAGNOSTICS_COLUMNS = ["t", "G", "V", "V_zy", "D", "max|I_j|", "weak0", "strong1", "tail_l1",
                       "M_0", "M_1", "M_2"]


@dataclass
class DiagnosticsRecord:
    t: float
    G: float
    V: float = math.nan
    V_zy: float = math.nan
    D: float = math.nan
    flux: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    sums: SumCache | None = None
    weak0: float = math.nan
    strong1: float = math.nan
    tail_l1: float = math.nan
    M0: float = math.nan
    M1: float = math.nan
    M2: float = math.nan

    @property
    def max_flux(self) -> float:
        return float(np.abs(self.flux).max()) if self.flux.size else 0.0

    def row(self) -> list[float]:
        return [self.t, self.G, self.V, self.V_zy, self.D, self.max_flux, self.weak0,
                self.strong1, self.tail_l1, self.M0, self.M1, self.M2]


def make_record(kernel: KernelSpec, state: ClusterState, logQ: np.ndarray | None = None,
                z: float | None = None, y: float | None = None,
                reference: ClusterState | None = None,
                partner: ClusterState | None = None) -> DiagnosticsRecord:
    """Diagnostics at one sample.

    ``logQ`` (product kernels) enables ``V`` and ``D``; ``z`` and ``y`` enable
    ``V_zy``. Norm distances go to ``reference`` (an equilibrium, say) and the
    tail distance to a paired trajectory's ``partner`` state.
    """
    j = np.arange(state.c.size, dtype=float)
    rec = DiagnosticsRecord(t=state.t, G=entropy_g(state), flux=flux(kernel, state),
                            sums=sum_cache(kernel, state), M0=state.eta, M1=state.rho,
                            M2=float((j * j) @ state.c))
    if logQ is not None and kernel.is_product:
        rec.V = relative_entropy_v(logQ, state)
        rec.D = dissipation_d(kernel, state, one_sided="drop")
        if z is not None and y is not None and z > 0 and y > 0:
            rec.V_zy = modified_entropy(logQ, state, z, y)
    if reference is not None:
        rec.weak0 = distance(state, reference, Norm.WEAK0)
        rec.strong1 = distance(state, reference, Norm.STRONG1)
    if partner is not None:
        rec.tail_l1 = float(np.abs(tail(state) - tail(partner)).sum())
        if reference is None:
            rec.weak0 = distance(state, partner, Norm.WEAK0)
            rec.strong1 = distance(state, partner, Norm.STRONG1)
    return rec


def records_to_csv(records: Iterable[DiagnosticsRecord], fh: io.TextIOBase | None = None) -> str | None:
    own = fh is None
    out = io.StringIO() if own else fh
    w = csv.writer(out, lineterminator="\n")
    w.writerow(DIAGNOSTICS_COLUMNS)
    for r in records:
        w.writerow([repr(float(x)) for x in r.row()])
    return out.getvalue() if own else None
