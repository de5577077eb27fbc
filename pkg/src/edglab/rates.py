"""Rate sequences and exchange kernels.

Two separable kernel families are supported:

``product``
    ``K(j, k) = b_j * a_k``
``sum``
    ``K(j, k) = j * a_k + b_j + eps * beta_j * alpha_k``

``a`` and ``alpha`` are import rates indexed from 0; ``b`` and ``beta`` are
export rates indexed from 1. Export rates evaluate to zero at index 0 so that
``K(0, k) == 0`` for both families.

Kernels are built from a small set of parametric sequence kinds (plus a table
form) so that every kernel can round-trip through a JSON config.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

import numpy as np

__all__ = [
    "RateKind",
    "RateSequence",
    "KernelBounds",
    "KernelSpec",
    "HypothesisResult",
    "HypothesisReport",
    "eval_rate",
    "validate_hypotheses",
    "kernel_from_dict",
]

# largest index we are willing to evaluate; beyond this j**p loses integer exactness
MAX_INDEX = 2**52


class RateKind(str, Enum):
    CONSTANT = "constant"
    POWER = "power"
    LINEAR = "linear"
    LOG_CORRECTED = "log_corrected"
    TELESCOPING = "telescoping"
    TABLE = "table"


_EXTENSIONS = ("constant", "power", "periodic")


@dataclass(frozen=True)
class RateSequence:
    """One rate sequence ``x_j``.

    Parameters
    ----------
    kind:
        Family of the sequence.
    value:
        ``constant``: the value. ``power``/``linear``/``log_corrected``: the
        leading coefficient.
    exponent:
        ``power``: ``x_j = value * j**exponent``. ``telescoping``:
        ``prod_{k<=j} x_k = j**exponent`` i.e. ``x_1 = 1`` and
        ``x_k = (k / (k-1))**exponent``.
    values, extension:
        ``table``: explicit values from the first index of the domain onward,
        continued past the table by a ``constant``, ``power`` or ``periodic``
        tail.
    """

    kind: RateKind
    value: float = 1.0
    exponent: float = 0.0
    values: tuple[float, ...] = ()
    extension: str = "constant"

    def __post_init__(self):
        object.__setattr__(self, "kind", RateKind(self.kind))
        if self.kind is RateKind.TABLE:
            if not self.values:
                raise ValueError("table rate sequence needs at least one value")
            if self.extension not in _EXTENSIONS:
                raise ValueError(
                    f"table extension must be one of {_EXTENSIONS}, got {self.extension!r}")
            if self.extension == "power" and len(self.values) < 2:
                raise ValueError("power-tail extension needs at least two table values")
            vals = np.asarray(self.values, dtype=float)
            if not np.all(np.isfinite(vals)) or np.any(vals < 0):
                raise ValueError("table values must be finite and non-negative")
            if self.extension == "power" and np.any(vals[-2:] <= 0):
                raise ValueError("power-tail extension needs positive trailing values")
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        elif self.kind is not RateKind.TELESCOPING and self.value < 0:
            raise ValueError("rate coefficient must be non-negative")

    # constructors mirroring the config vocabulary
    @classmethod
    def constant(cls, v: float) -> "RateSequence":
        return cls(RateKind.CONSTANT, value=v)

    @classmethod
    def power(cls, coeff: float, exponent: float) -> "RateSequence":
        return cls(RateKind.POWER, value=coeff, exponent=exponent)

    @classmethod
    def linear(cls, coeff: float = 1.0) -> "RateSequence":
        return cls(RateKind.LINEAR, value=coeff)

    @classmethod
    def log_corrected(cls, coeff: float = 1.0) -> "RateSequence":
        return cls(RateKind.LOG_CORRECTED, value=coeff)

    @classmethod
    def telescoping(cls, exponent: float) -> "RateSequence":
        return cls(RateKind.TELESCOPING, exponent=exponent)

    @classmethod
    def table(cls, values: Iterable[float], extension: str = "constant") -> "RateSequence":
        return cls(RateKind.TABLE, values=tuple(values), extension=extension)

    def evaluate(self, idx: np.ndarray | int, start: int = 0) -> np.ndarray:
        """Evaluate at integer indices ``idx``; indices below ``start`` give 0."""
        j = np.asarray(idx, dtype=np.int64)
        if np.any(j < 0):
            raise ValueError("rate index must be non-negative")
        if np.any(j > MAX_INDEX):
            raise OverflowError(f"rate index exceeds representable range ({MAX_INDEX})")
        jf = j.astype(float)
        kind = self.kind
        with np.errstate(divide="ignore", invalid="ignore"):
            if kind is RateKind.CONSTANT:
                out = np.full(jf.shape, float(self.value))
            elif kind is RateKind.POWER:
                out = self.value * np.power(jf, self.exponent)
            elif kind is RateKind.LINEAR:
                out = self.value * jf
            elif kind is RateKind.LOG_CORRECTED:
                out = self.value * jf / np.log(jf + math.e)
            elif kind is RateKind.TELESCOPING:
                out = np.where(jf <= 1, 1.0, np.power(jf / np.maximum(jf - 1, 1), self.exponent))
            else:
                out = self._table(j - start)
        out = np.where(j < start, 0.0, out)
        if np.any(~np.isfinite(out)):
            bad = int(j.ravel()[np.flatnonzero(~np.isfinite(np.ravel(out)))[0]])
            raise OverflowError(f"rate sequence not finite at index {bad}")
        return out

    def _table(self, pos: np.ndarray) -> np.ndarray:
        shape = np.shape(pos)
        return self._table_flat(np.atleast_1d(pos)).reshape(shape)

    def _table_flat(self, pos: np.ndarray) -> np.ndarray:
        vals = np.asarray(self.values, dtype=float)
        n = len(vals)
        pos = np.maximum(pos, 0)
        inside = np.minimum(pos, n - 1)
        out = vals[inside].astype(float)
        past = pos >= n
        if not np.any(past):
            return out
        if self.extension == "constant":
            out[past] = vals[-1]
        elif self.extension == "periodic":
            out[past] = vals[pos[past] % n]
        else:
            # power tail through the last two entries, in 1-based position
            p = math.log(vals[-1] / vals[-2]) / math.log(n / (n - 1)) if n > 1 else 0.0
            out[past] = vals[-1] * ((pos[past] + 1) / n) ** p
        return out

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind.value}
        if self.kind is RateKind.TABLE:
            d["values"] = list(self.values)
            d["extension"] = self.extension
        elif self.kind is RateKind.TELESCOPING:
            d["exponent"] = self.exponent
        elif self.kind is RateKind.POWER:
            d["coeff"] = self.value
            d["exponent"] = self.exponent
        elif self.kind is RateKind.CONSTANT:
            d["value"] = self.value
        else:
            d["coeff"] = self.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RateSequence":
        if "kind" not in d:
            raise ValueError("rate sequence needs a 'kind' field")
        kind = RateKind(d["kind"])
        if kind is RateKind.CONSTANT:
            return cls.constant(float(d.get("value", 1.0)))
        if kind is RateKind.POWER:
            return cls.power(float(d.get("coeff", 1.0)), float(d["exponent"]))
        if kind is RateKind.LINEAR:
            return cls.linear(float(d.get("coeff", 1.0)))
        if kind is RateKind.LOG_CORRECTED:
            return cls.log_corrected(float(d.get("coeff", 1.0)))
        if kind is RateKind.TELESCOPING:
            return cls.telescoping(float(d["exponent"]))
        if "extension" not in d:
            raise ValueError("table rate sequence must declare an 'extension' rule")
        return cls.table(d["values"], d["extension"])


@dataclass(frozen=True)
class KernelBounds:
    """Constants appearing in the growth and contraction hypotheses.

    ``a_min`` is the infimum of ``a_j`` over ``j >= 0`` (the contraction floor);
    the ``*_bar`` values are ``sup x_j / j`` over ``j >= 1``; ``L`` bounds
    ``alpha`` and ``beta`` from above.
    """

    a_min: float
    a_bar: float
    a0: float
    b_min: float
    b_bar: float
    alpha_min: float = 0.0
    alpha_bar: float = 0.0
    alpha0: float = 0.0
    beta_min: float = 0.0
    beta_bar: float = 0.0
    L: float = 0.0
    a_nonincreasing: bool = False
    b_nondecreasing: bool = False
    checked_range: int = 0


@dataclass(frozen=True)
class KernelSpec:
    """Separable exchange kernel.

    Use :meth:`product` or :meth:`sum` rather than the raw constructor.
    ``lam`` is the optional lower-growth exponent for ``b_j`` used by the
    strong-convergence hypothesis H2.
    """

    form: str
    a: RateSequence
    b: RateSequence
    alpha: RateSequence | None = None
    beta: RateSequence | None = None
    eps: float = 0.0
    lam: float | None = None
    declared: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if isinstance(self.declared, Mapping):
            object.__setattr__(self, "declared", tuple(sorted(self.declared.items())))
        if self.form not in ("product", "sum"):
            raise ValueError(f"kernel form must be 'product' or 'sum', got {self.form!r}")
        if self.form == "sum":
            if self.alpha is None or self.beta is None:
                raise ValueError("sum kernel needs alpha and beta sequences")
            if self.eps < 0:
                raise ValueError("eps must be non-negative")

    @classmethod
    def product(cls, a: RateSequence, b: RateSequence, **kw) -> "KernelSpec":
        return cls("product", a, b, **kw)

    @classmethod
    def sum(cls, a: RateSequence, b: RateSequence, alpha: RateSequence | None = None,
            beta: RateSequence | None = None, eps: float = 0.0, **kw) -> "KernelSpec":
        alpha = alpha if alpha is not None else RateSequence.constant(1.0)
        beta = beta if beta is not None else RateSequence.constant(1.0)
        return cls("sum", a, b, alpha, beta, eps, **kw)

    @property
    def is_product(self) -> bool:
        return self.form == "product"

    # vectors over 0..n; export sequences are zero at index 0
    def a_vec(self, n: int) -> np.ndarray:
        return self.a.evaluate(np.arange(n + 1), start=0)

    def b_vec(self, n: int) -> np.ndarray:
        return self.b.evaluate(np.arange(n + 1), start=1)

    def alpha_vec(self, n: int) -> np.ndarray:
        if self.alpha is None:
            return np.zeros(n + 1)
        return self.alpha.evaluate(np.arange(n + 1), start=0)

    def beta_vec(self, n: int) -> np.ndarray:
        if self.beta is None:
            return np.zeros(n + 1)
        return self.beta.evaluate(np.arange(n + 1), start=1)

    def matrix(self, n: int) -> np.ndarray:
        """Dense ``K[j, k]`` for ``0 <= j, k <= n``, built entry by entry."""
        out = np.empty((n + 1, n + 1))
        for j in range(n + 1):
            for k in range(n + 1):
                out[j, k] = eval_rate(self, j, k)
        return out

    def bounds(self, n: int) -> KernelBounds:
        """Hypothesis constants sampled over ``0..n``; declared values are checked."""
        if n < 2:
            raise ValueError("bounds need a range of at least 2")
        j = np.arange(n + 1, dtype=float)
        a, b = self.a_vec(n), self.b_vec(n)
        al, be = self.alpha_vec(n), self.beta_vec(n)
        out = KernelBounds(
            a_min=float(a.min()),
            a_bar=float(np.max(a[1:] / j[1:])),
            a0=float(a[0]),
            b_min=float(b[1:].min()),
            b_bar=float(np.max(b[1:] / j[1:])),
            alpha_min=float(al.min()),
            alpha_bar=float(np.max(al[1:] / j[1:])),
            alpha0=float(al[0]),
            beta_min=float(be[1:].min()),
            beta_bar=float(np.max(be[1:] / j[1:])),
            L=float(max(al.max(), be.max())) if self.form == "sum" else 0.0,
            a_nonincreasing=bool(np.all(np.diff(a) <= 1e-14 * np.abs(a[1:]).max())),
            b_nondecreasing=bool(np.all(np.diff(b[1:]) >= -1e-14 * np.abs(b[1:]).max())),
            checked_range=n,
        )
        for name, val in self.declared:
            sampled = getattr(out, name, None)
            if sampled is None:
                raise ValueError(f"unknown declared bound {name!r}")
            lower = name.endswith("_min")
            ok = sampled >= val * (1 - 1e-12) if lower else sampled <= val * (1 + 1e-12)
            if not ok:
                raise ValueError(
                    f"declared bound {name}={val} inconsistent with sampled value {sampled}")
        return out

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"form": self.form, "a": self.a.to_dict(), "b": self.b.to_dict()}
        if self.form == "sum":
            d["alpha"] = self.alpha.to_dict()
            d["beta"] = self.beta.to_dict()
            d["eps"] = self.eps
        if self.lam is not None:
            d["lambda"] = self.lam
        if self.declared:
            d["bounds"] = dict(self.declared)
        return d


def kernel_from_dict(d: Mapping[str, Any]) -> KernelSpec:
    """Build a kernel from its JSON description."""
    form = d.get("form")
    if form not in ("product", "sum"):
        raise ValueError(f"kernel.form must be 'product' or 'sum', got {form!r}")
    for key in ("a", "b"):
        if key not in d:
            raise ValueError(f"kernel.{key} is required")
    a = RateSequence.from_dict(d["a"])
    b = RateSequence.from_dict(d["b"])
    lam = d.get("lambda")
    declared = dict(d.get("bounds", {}))
    if form == "product":
        return KernelSpec.product(a, b, lam=lam, declared=declared)
    alpha = RateSequence.from_dict(d["alpha"]) if "alpha" in d else None
    beta = RateSequence.from_dict(d["beta"]) if "beta" in d else None
    return KernelSpec.sum(a, b, alpha, beta, eps=float(d.get("eps", 0.0)), lam=lam,
                          declared=declared)


def eval_rate(kernel: KernelSpec, j: int, k: int) -> float:
    """Exchange rate ``K(j, k)`` from a ``j``-cluster to a ``k``-cluster."""
    if j < 0 or k < 0:
        raise ValueError("kernel indices must be non-negative")
    if j == 0:
        return 0.0
    aj = float(kernel.a.evaluate(k, start=0))
    bj = float(kernel.b.evaluate(j, start=1))
    if kernel.is_product:
        return bj * aj
    beta = float(kernel.beta.evaluate(j, start=1))
    alpha = float(kernel.alpha.evaluate(k, start=0))
    return j * aj + bj + kernel.eps * beta * alpha


# ----------------------------------------------------------------------------
# hypothesis checks
#
# Limits cannot be verified numerically. Each check samples the relevant
# quantity over the range and applies a trend test on the last 10% of it; the
# sampled evidence travels with the verdict.

@dataclass
class HypothesisResult:
    name: str
    passed: bool
    witness: int | None = None
    evidence: dict[str, Any] = field(default_factory=dict)
    note: str = ""


@dataclass
class HypothesisReport:
    kernel: dict[str, Any]
    range: int
    bounds: KernelBounds
    results: dict[str, HypothesisResult]

    def __getitem__(self, name: str) -> HypothesisResult:
        return self.results[name]

    def passed(self, name: str) -> bool:
        return self.results[name].passed

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def summary(self) -> dict[str, Any]:
        return {name: {"passed": r.passed, "witness": r.witness, "note": r.note,
                       **{k: v for k, v in r.evidence.items() if np.isscalar(v)}}
                for name, r in self.results.items()}


ALL_HYPOTHESES = ("H1", "H2", "H3", "H4", "growth_O_j", "growth_O_j_over_ln_j")


def _tail_window(n: int) -> slice:
    lo = max(1, int(0.9 * n))
    return slice(lo, n + 1)


def _bounded_ratio(x: np.ndarray, scale: np.ndarray, n: int) -> tuple[bool, int | None, float]:
    """Is ``x_j / scale_j`` bounded?  Heuristic: the last 10% of the range never
    exceeds the max over the preceding indices by more than 1%."""
    r = np.concatenate([[0.0], x[1:] / scale[1:]])
    tail = _tail_window(n)
    ref = r[1:tail.start].max()
    worst = r[tail].max()
    ok = bool(np.isfinite(worst) and worst <= 1.01 * ref + 1e-300)
    witness = None if ok else int(tail.start + np.argmax(r[tail]))
    return ok, witness, float(r[1:].max())


def validate_hypotheses(kernel: KernelSpec, range: int = 1000,
                        which: Iterable[str] = ALL_HYPOTHESES,
                        z_s: float | None = None, h1_tol: float = 0.05) -> HypothesisReport:
    """Check the growth/structure hypotheses on sampled rate values.

    H1 and the ratio limits are assessed by a trend test, not proven. For H2
    the radius ``z_s`` is estimated from the kernel unless supplied.
    """
    if range < 10:
        raise ValueError("hypothesis range must be at least 10")
    which = tuple(which)
    unknown = set(which) - set(ALL_HYPOTHESES)
    if unknown:
        raise ValueError(f"unknown hypotheses {sorted(unknown)}")
    n = int(range)
    bnds = kernel.bounds(n + 1)
    j = np.arange(n + 2, dtype=float)
    a, b = kernel.a_vec(n + 1), kernel.b_vec(n + 1)
    al, be = kernel.alpha_vec(n + 1), kernel.beta_vec(n + 1)
    results: dict[str, HypothesisResult] = {}
    tail = _tail_window(n)

    if "H1" in which:
        with np.errstate(divide="ignore"):
            ratio = np.where(b[1:] > 0, a[:-1] / b[1:], np.inf)   # a_j / b_{j+1}, j = 0..n
        w = ratio[tail]
        mid = ratio[max(1, n // 2)]
        decaying = bool(np.all(np.diff(w) <= 1e-12 * np.abs(w[:-1]).max()))
        ok = bool(decaying and w[-1] <= h1_tol and w[-1] <= 0.75 * mid)
        witness = None if ok else int(tail.start + np.argmax(w))
        results["H1"] = HypothesisResult(
            "H1", ok, witness,
            {"ratio_end": float(w[-1]), "ratio_mid": float(mid), "decaying": decaying},
            "a_j/b_{j+1} -> 0 judged by monotone decay below tolerance over the last 10%")

    if "H2" in which:
        if not kernel.is_product:
            results["H2"] = HypothesisResult("H2", False, None, {}, "H2 applies to product kernels")
        else:
            if z_s is None:
                from .equilibrium import radius_of_convergence
                z_s = radius_of_convergence(kernel, n).z_s
            with np.errstate(divide="ignore"):
                ratio = np.where(a[1:n + 1] > 0, b[1:n + 1] / a[1:n + 1], np.inf)
            # z_s is an extrapolated estimate; allow for its error
            bad = np.flatnonzero(ratio < z_s * (1 - 1e-6))
            ok = bool(np.isfinite(z_s) and bad.size == 0)
            ev: dict[str, Any] = {"z_s": float(z_s), "min_ratio": float(ratio.min())}
            if kernel.lam is not None:
                ev["lambda"] = kernel.lam
                ev["C_fit"] = float(np.min(b[1:n + 1] / j[1:n + 1] ** kernel.lam))
                lam_ok = 0 < kernel.lam < 1 and ev["C_fit"] > 0
                ok = ok and lam_ok
            results["H2"] = HypothesisResult(
                "H2", ok, int(bad[0] + 1) if bad.size else None, ev,
                "b_j/a_j >= z_s for 1 <= j <= range; C in b_j >= C j^lambda is fitted, not asserted")

    if "H3" in which:
        if kernel.is_product:
            results["H3"] = HypothesisResult("H3", False, None, {}, "H3 requires the sum form")
        else:
            ok_a = bnds.a_min > 0
            ok_ab, wit_ab, _ = _bounded_ratio(np.maximum(al, be), np.ones_like(j), n)
            ok = bool(ok_a and ok_ab)
            witness = None if ok else (int(np.argmin(a)) if not ok_a else wit_ab)
            results["H3"] = HypothesisResult(
                "H3", ok, witness, {"a_tilde": bnds.a_min, "L": bnds.L, "eps": kernel.eps},
                "a_j >= a_tilde > 0 and alpha, beta bounded")

    if "H4" in which:
        checks = []
        for name, x in (("a", a), ("b", b), ("alpha", al), ("beta", be)):
            if kernel.is_product and name in ("alpha", "beta"):
                continue
            bounded, wit, _ = _bounded_ratio(x, j, n)
            checks.append((name, bounded, wit))
        positive = bnds.a_min > 0 and bnds.b_min > 0
        ok = positive and all(c[1] for c in checks)
        witness = next((c[2] for c in checks if not c[1]), None)
        if not positive:
            witness = int(np.argmin(a)) if bnds.a_min <= 0 else int(1 + np.argmin(b[1:]))
        # K(j,k) <= c (a_bar k + b_bar j + eps beta_bar alpha_bar j k) on a sampled grid
        grid = np.unique(np.geomspace(1, n, 40).astype(int))
        kgrid = np.concatenate([[0], grid])
        jj, kk = np.meshgrid(grid, kgrid, indexing="ij")
        K = np.vectorize(lambda x, y: eval_rate(kernel, int(x), int(y)))(jj, kk)
        denom = bnds.a_bar * kk + bnds.b_bar * jj + kernel.eps * bnds.beta_bar * bnds.alpha_bar * jj * kk
        with np.errstate(divide="ignore", invalid="ignore"):
            growth_c = float(np.nanmax(np.where(denom > 0, K / denom, np.inf)))
        results["H4"] = HypothesisResult(
            "H4", bool(ok), witness,
            {"a_min": bnds.a_min, "a_bar": bnds.a_bar, "b_min": bnds.b_min, "b_bar": bnds.b_bar,
             "alpha_bar": bnds.alpha_bar, "beta_bar": bnds.beta_bar, "growth_constant": growth_c},
            "a_min <= a_j <= a_bar j, b_min <= b_j <= b_bar j (and alpha, beta) over the range")

    for name, scale in (("growth_O_j", j), ("growth_O_j_over_ln_j", j / np.log(j + math.e))):
        if name not in which:
            continue
        ok_a, wa, ra = _bounded_ratio(a, scale, n)
        ok_b, wb, rb = _bounded_ratio(b, scale, n)
        results[name] = HypothesisResult(
            name, ok_a and ok_b, wa if not ok_a else wb,
            {"sup_a_ratio": ra, "sup_b_ratio": rb},
            "sampled ratio to the growth scale does not trend upward over the last 10%")

    return HypothesisReport(kernel.to_dict(), n, bnds, results)
