"""Experiment recipes, config parsing and output emission.

A run is described by one JSON document (see the README for the schema).
Every run writes ``manifest.json``; simulation-like runs also write
``trajectory.csv`` and ``diagnostics.csv``. A manifest records a pass/fail
verdict for each check the recipe declares.
"""
from __future__ import annotations

import json
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .diagnostics import (DIAGNOSTICS_COLUMNS, dissipation_d, fit_exponential_rate, flux,
                          make_record, m2_bound, pair_tail_distance, records_to_csv)
from .dynamics import (IntegrationError, IntegratorConfig, Trajectory, integrate, make_rhs,
                       moment_identity_residual, rhs, rhs_naive, sample_times)
from .equilibrium import (DivergentSeriesError, EquilibriumProfile, NoEquilibriumError, Regime,
                          RelaxationError, _critical, big_f, equilibrium_by_relaxation,
                          equilibrium_profile, flux_recursion_equilibrium, geometric_state,
                          monomer_state, q_factors)
from .rates import KernelSpec, kernel_from_dict, validate_hypotheses
from .state import ClusterState, Norm, distance, states_to_csv

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "InitialSpec",
    "ExperimentConfig",
    "RunManifest",
    "parse_rho_grid",
    "build_initial",
    "run",
    "simulate",
    "contraction_experiment",
    "phase_transition_experiment",
    "phase_diagram",
    "relaxation_experiment",
    "verify",
]

EXPERIMENTS = ("simulate", "equilibrium", "phase_diagram", "contraction", "relaxation", "verify")
INITIAL_KINDS = ("monomer", "geometric", "equilibrium", "custom")


class ConfigError(ValueError):
    """Schema violation; ``field`` names the offending key path."""

    def __init__(self, msg: str, field: str | None = None, line: int | None = None):
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{' at '.join(where) + ': ' if where else ''}{msg}")
        self.field = field
        self.line = line


# ----------------------------------------------------------------------------
# config

@dataclass(frozen=True)
class InitialSpec:
    kind: str = "monomer"
    rho: float | None = None
    eta: float = 1.0
    decay: float = 0.5
    values: tuple[float, ...] = ()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], where: str = "initial") -> "InitialSpec":
        if not isinstance(d, Mapping):
            raise ConfigError("expected an object", where)
        extra = set(d) - {"kind", "rho", "eta", "decay", "values"}
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", where)
        kind = d.get("kind", "monomer")
        if kind not in INITIAL_KINDS:
            raise ConfigError(f"kind must be one of {INITIAL_KINDS}", f"{where}.kind")
        if kind == "custom":
            if "values" not in d:
                raise ConfigError("custom initial data needs 'values'", f"{where}.values")
            return cls(kind, d.get("rho"), float(d.get("eta", 1.0)),
                       values=tuple(float(x) for x in d["values"]))
        if "rho" not in d:
            raise ConfigError("missing mass", f"{where}.rho")
        return cls(kind, float(d["rho"]), float(d.get("eta", 1.0)), float(d.get("decay", 0.5)))

    def with_rho(self, rho: float) -> "InitialSpec":
        return InitialSpec(self.kind, rho, self.eta, self.decay, self.values)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "eta": self.eta}
        if self.kind == "custom":
            d["values"] = list(self.values)
        else:
            d["rho"] = self.rho
        if self.kind == "geometric":
            d["decay"] = self.decay
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    kernel: KernelSpec
    N: int
    experiment: str = "simulate"
    initial: InitialSpec = InitialSpec()
    initial_b: InitialSpec | None = None
    t_end: float = 100.0
    integrator: IntegratorConfig = IntegratorConfig()
    samples: int = 50
    log_sampling: bool = True
    first_sample: float | None = None
    stall_tol: float | None = None
    seed: int = 0
    rho_grid: tuple[float, ...] = ()
    dynamic: bool = False
    j_probe: int = 20
    target: str = "pair"
    series: str = "tail_l1"
    window: float = 0.5
    floor: float = 1e-9
    slack: float = 0.1
    workers: int = 1
    raw: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, line=exc.lineno) from exc
        return cls.from_dict(d)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("config must be a JSON object")
        known = {"experiment", "kernel", "N", "initial", "initial_b", "t_end", "integrator",
                 "sampling", "stall_tol", "seed", "rho_grid", "phase", "contraction", "workers"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}")
        exp = str(d.get("experiment", "simulate")).replace("-", "_")
        if exp not in EXPERIMENTS:
            raise ConfigError(f"must be one of {EXPERIMENTS}", "experiment")
        if "kernel" not in d:
            raise ConfigError("missing", "kernel")
        try:
            kernel = kernel_from_dict(d["kernel"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc), "kernel") from exc
        if "N" not in d:
            raise ConfigError("missing truncation order", "N")
        N = d["N"]
        if not isinstance(N, int) or N < 2:
            raise ConfigError("must be an integer >= 2", "N")
        try:
            integ = IntegratorConfig.from_dict(dict(d.get("integrator", {})))
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), "integrator") from exc
        samp = d.get("sampling", {})
        ph = d.get("phase", {})
        co = d.get("contraction", {})
        for name, sub, keys in (("sampling", samp, {"count", "log", "first"}),
                                ("phase", ph, {"dynamic", "j_probe"}),
                                ("contraction", co, {"target", "series", "window", "floor", "slack"})):
            if not isinstance(sub, Mapping):
                raise ConfigError("expected an object", name)
            bad = set(sub) - keys
            if bad:
                raise ConfigError(f"unknown keys {sorted(bad)}", name)
        t_end = float(d.get("t_end", 100.0))
        if not t_end > 0:
            raise ConfigError("must be positive", "t_end")
        grid = d.get("rho_grid", ())
        if isinstance(grid, str):
            grid = parse_rho_grid(grid)
        target = co.get("target", "pair")
        if target not in ("pair", "equilibrium"):
            raise ConfigError("must be 'pair' or 'equilibrium'", "contraction.target")
        series = co.get("series", "tail_l1")
        if series not in ("tail_l1", "weak0", "strong1"):
            raise ConfigError("must be tail_l1, weak0 or strong1", "contraction.series")
        cfg = cls(
            kernel=kernel, N=N, experiment=exp,
            initial=InitialSpec.from_dict(d.get("initial", {"kind": "monomer", "rho": 0.0})),
            initial_b=InitialSpec.from_dict(d["initial_b"], "initial_b") if "initial_b" in d else None,
            t_end=t_end, integrator=integ,
            samples=int(samp.get("count", 50)), log_sampling=bool(samp.get("log", True)),
            first_sample=samp.get("first"),
            stall_tol=d.get("stall_tol"), seed=int(d.get("seed", 0)),
            rho_grid=tuple(float(x) for x in grid),
            dynamic=bool(ph.get("dynamic", False)), j_probe=int(ph.get("j_probe", 20)),
            target=target, series=series, window=float(co.get("window", 0.5)),
            floor=float(co.get("floor", 1e-9)), slack=float(co.get("slack", 0.1)),
            workers=int(d.get("workers", 1)), raw=dict(d),
        )
        if cfg.samples < 2:
            raise ConfigError("need at least 2 samples", "sampling.count")
        cfg.check_normalization()
        return cfg

    def check_normalization(self):
        """Contraction and relaxation estimates assume unit volume for sum kernels."""
        if self.kernel.is_product or self.experiment not in ("contraction", "relaxation"):
            return
        for name, spec in (("initial", self.initial), ("initial_b", self.initial_b)):
            if spec is not None and spec.kind != "custom" and abs(spec.eta - 1.0) > 1e-12:
                raise ConfigError(
                    "sum-kernel rate bounds are stated for unit volume (sum_j c_j = 1); "
                    f"got eta = {spec.eta}", f"{name}.eta")

    def replace(self, **kw) -> "ExperimentConfig":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return ExperimentConfig(**d)

    def to_dict(self) -> dict[str, Any]:
        out = dict(self.raw) if self.raw else {}
        out.update({"experiment": self.experiment, "kernel": self.kernel.to_dict(), "N": self.N,
                    "initial": self.initial.to_dict(), "t_end": self.t_end,
                    "integrator": {k: (v if not (isinstance(v, float) and math.isinf(v)) else str(v))
                                   for k, v in asdict(self.integrator).items()},
                    "sampling": {"count": self.samples, "log": self.log_sampling,
                                 "first": self.first_sample},
                    "stall_tol": self.stall_tol, "seed": self.seed})
        if self.initial_b is not None:
            out["initial_b"] = self.initial_b.to_dict()
        if self.rho_grid:
            out["rho_grid"] = list(self.rho_grid)
        return out


def parse_rho_grid(text: str) -> tuple[float, ...]:
    """``"lo:hi:n"`` to ``n`` evenly spaced masses (inclusive)."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError("rho grid must look like lo:hi:n", "rho_grid")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise ConfigError(str(exc), "rho_grid") from exc
    if n < 1 or lo < 0 or hi < lo:
        raise ConfigError("need 0 <= lo <= hi and n >= 1", "rho_grid")
    return tuple(np.linspace(lo, hi, n).tolist()) if n > 1 else (lo,)


def build_initial(spec: InitialSpec, kernel: KernelSpec, N: int) -> ClusterState:
    """Construct initial data and check volume and mass to 1e-12."""
    if spec.kind == "custom":
        c = np.asarray(spec.values, dtype=float)
        if c.size != N + 1:
            raise ConfigError(f"custom data has {c.size} entries, expected N+1 = {N + 1}",
                              "initial.values")
        state = ClusterState(c)
        rho, eta = state.rho, state.eta
        if spec.rho is not None and abs(rho - spec.rho) > 1e-12 * max(1.0, spec.rho):
            raise ConfigError(f"custom data carries mass {rho}, declared {spec.rho}", "initial.rho")
        if abs(eta - spec.eta) > 1e-12 * max(1.0, spec.eta):
            raise ConfigError(f"custom data carries volume {eta}, declared {spec.eta}", "initial.eta")
        return state
    rho, eta = float(spec.rho), spec.eta
    if rho < 0 or eta <= 0:
        raise ConfigError("need rho >= 0 and eta > 0", "initial")
    try:
        if spec.kind == "monomer":
            state = monomer_state(rho, eta, N)
        elif spec.kind == "geometric":
            state = geometric_state(rho, eta, N, spec.decay) if rho > 0 else monomer_state(0, eta, N)
        elif kernel.is_product:
            state = equilibrium_profile(kernel, rho, eta, N).state
        else:
            state = flux_recursion_equilibrium(kernel, rho, N, eta)
    except (ValueError, ArithmeticError) as exc:
        raise ConfigError(str(exc), "initial") from exc
    if abs(state.eta - eta) > 1e-12 * max(1.0, eta) or abs(state.rho - rho) > 1e-12 * max(1.0, rho):
        if spec.kind == "equilibrium":
            # truncating an equilibrium moves a sliver of mass; report, do not fail
            logger.info("truncated equilibrium: mass %.15g, volume %.15g", state.rho, state.eta)
        else:
            raise ConfigError(f"initial data misses (rho, eta) = ({rho}, {eta}) "
                              f"with ({state.rho}, {state.eta})", "initial")
    return state


# ----------------------------------------------------------------------------
# manifest

@dataclass
class Check:
    name: str
    passed: bool
    value: Any = None
    threshold: Any = None
    note: str = ""


@dataclass
class RunManifest:
    config: dict[str, Any]
    experiment: str
    version: str = __version__
    audit: dict[str, Any] = field(default_factory=dict)
    regime: str | None = None
    rates: dict[str, Any] = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    results: dict[str, Any] = field(default_factory=dict)
    error: str | None = None
    outputs: list[str] = field(default_factory=list)

    def check(self, name: str, passed: bool, value=None, threshold=None, note: str = "") -> bool:
        self.checks.append(Check(name, bool(passed), _jsonable(value), _jsonable(threshold), note))
        return bool(passed)

    @property
    def passed(self) -> bool:
        return self.error is None and all(c.passed for c in self.checks)

    def to_dict(self) -> dict[str, Any]:
        return _jsonable({
            "experiment": self.experiment, "version": self.version,
            "python": platform.python_version(), "passed": self.passed,
            "config": self.config, "audit": self.audit, "regime": self.regime,
            "rates": self.rates, "checks": [asdict(c) for c in self.checks],
            "results": self.results, "error": self.error, "outputs": self.outputs})

    def write(self, out_dir: Path):
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, Regime):
        return x.value
    return x


# ----------------------------------------------------------------------------
# helpers

def _times(cfg: ExperimentConfig, t0: float = 0.0) -> np.ndarray:
    return sample_times(t0, cfg.t_end, cfg.samples, cfg.log_sampling, cfg.first_sample)


def _product_reference(kernel: KernelSpec, state: ClusterState) -> EquilibriumProfile | None:
    """Equilibrium with the state's mass and volume, when one is computable."""
    if not kernel.is_product:
        return None
    try:
        return equilibrium_profile(kernel, state.rho, state.eta, state.N)
    except (ValueError, ArithmeticError) as exc:
        logger.info("no equilibrium reference: %s", exc)
        return None


def _observer(kernel: KernelSpec, ref: EquilibriumProfile | ClusterState | None):
    logq = z = y = ref_state = None
    if isinstance(ref, EquilibriumProfile):
        logq, ref_state = ref.logQ, ref.state
        if ref.z > 0:
            z, y = ref.z, ref.y
    elif isinstance(ref, ClusterState):
        ref_state = ref
    cache: dict[int, np.ndarray | None] = {}

    def obs(state: ClusterState):
        lq = logq
        if kernel.is_product and lq is None:
            if state.N not in cache:
                try:
                    cache[state.N] = q_factors(kernel, state.N)
                except ValueError:
                    cache[state.N] = None
            lq = cache[state.N]
        return make_record(kernel, state, lq, z, y, reference=ref_state)
    return obs


def _write_run(out: Path | None, traj: Trajectory, manifest: RunManifest):
    if out is None:
        return
    with open(out / "trajectory.csv", "w", encoding="utf-8", newline="") as fh:
        states_to_csv(traj.states, fh)
    with open(out / "diagnostics.csv", "w", encoding="utf-8", newline="") as fh:
        records_to_csv([r for r in traj.records if r is not None], fh)
    manifest.outputs += ["trajectory.csv", "diagnostics.csv"]


def _conservation_checks(manifest: RunManifest, traj: Trajectory, cfg: ExperimentConfig,
                         tag: str = ""):
    a = traj.audit
    t_span = traj.final.t - traj.states[0].t if traj.samples else cfg.t_end
    allowance = 10 * cfg.integrator.rel_tol * max(t_span, 1.0)
    m0 = a["max_drift_M0"] / max(abs(a["M0_initial"]), 1e-300)
    m1 = a["max_drift_M1"] / max(abs(a["M1_initial"]), 1e-300) if a["M1_initial"] else a["max_drift_M1"]
    manifest.audit[f"{tag}M0_rel_drift"] = m0
    manifest.audit[f"{tag}M1_rel_drift"] = m1
    manifest.audit[f"{tag}stats"] = dict(traj.stats)
    manifest.audit[f"{tag}termination"] = traj.termination
    manifest.check(f"{tag}conservation_M0", m0 <= allowance, m0, allowance)
    manifest.check(f"{tag}conservation_M1", m1 <= allowance, m1, allowance)


# ----------------------------------------------------------------------------
# recipes

def simulate(cfg: ExperimentConfig, out: Path | None = None,
             manifest: RunManifest | None = None) -> tuple[Trajectory, RunManifest]:
    """Integrate from the configured initial data, recording diagnostics."""
    manifest = manifest or RunManifest(cfg.to_dict(), cfg.experiment)
    s0 = build_initial(cfg.initial, cfg.kernel, cfg.N)
    ref = _product_reference(cfg.kernel, s0)
    if ref is not None:
        manifest.regime = ref.regime.value
    try:
        traj = integrate(cfg.kernel, s0, cfg.t_end, cfg.integrator, _times(cfg),
                         observer=_observer(cfg.kernel, ref), stall_tol=cfg.stall_tol)
    except IntegrationError as exc:
        manifest.error = str(exc)
        if exc.partial is not None and exc.partial.samples:
            _write_run(out, exc.partial, manifest)
            manifest.results["partial_t"] = exc.partial.final.t
        raise
    _write_run(out, traj, manifest)
    _conservation_checks(manifest, traj, cfg)
    manifest.results["trigger"] = traj.termination
    manifest.results["t_final"] = traj.final.t
    recs = traj.records
    if cfg.kernel.is_product:
        D = np.array([r.D for r in recs])
        manifest.check("dissipation_nonnegative", bool(np.all(D >= -1e-12)), float(D.min()), -1e-12)
        V = np.array([r.V for r in recs])
        if np.all(np.isfinite(V)):
            jump = float(np.max(np.diff(V))) if V.size > 1 else 0.0
            tol = 10 * cfg.integrator.rel_tol * max(1.0, float(np.abs(V).max()))
            manifest.check("entropy_nonincreasing", jump <= tol, jump, tol)
    if ref is not None and ref.regime is Regime.SUBCRITICAL:
        manifest.results["strong1_to_equilibrium"] = recs[-1].strong1
    return traj, manifest


def _profile_csv(out: Path, logq: np.ndarray | None, c: np.ndarray, name: str = "profile.csv"):
    lines = ["j,logQ,c_e"]
    for j, cj in enumerate(c):
        lq = repr(float(logq[j])) if logq is not None else ""
        lines.append(f"{j},{lq},{float(cj)!r}")
    (out / name).write_text("\n".join(lines) + "\n", encoding="utf-8")


def equilibrium_experiment(cfg: ExperimentConfig, out: Path | None = None) -> RunManifest:
    """Closed-form equilibrium for product kernels, relaxation for sum kernels."""
    manifest = RunManifest(cfg.to_dict(), cfg.experiment)
    rho, eta = float(cfg.initial.rho or 0.0), cfg.initial.eta
    k = cfg.kernel
    if not k.is_product:
        return relaxation_experiment(cfg, out, manifest)
    try:
        prof = equilibrium_profile(k, rho, eta, cfg.N)
    except NoEquilibriumError as exc:
        manifest.regime = Regime.NO_EQUILIBRIUM.value
        manifest.results["reason"] = str(exc)
        return manifest
    manifest.regime = prof.regime.value
    manifest.results.update(prof.to_json())
    st = prof.state
    I = flux(k, st)
    sc_scale = max(float((k.a_vec(cfg.N)[:-1] @ st.c[:-1]) * (k.b_vec(cfg.N)[1:] @ st.c[1:])), 1e-300)
    manifest.check("detailed_balance", float(np.abs(I).max()) <= 1e-10 * sc_scale,
                   float(np.abs(I).max()), 1e-10 * sc_scale)
    if prof.regime is Regime.SUBCRITICAL:
        r = float(np.abs(rhs(k, st)).max())
        manifest.check("stationary", r <= 1e-9, r, 1e-9)
    if out is not None:
        _profile_csv(out, prof.logQ, prof.c_e)
        manifest.outputs.append("profile.csv")
    return manifest


def phase_diagram(kernel: KernelSpec, rho_grid: Sequence[float], eta: float = 1.0,
                  N: int = 100) -> list[dict[str, Any]]:
    """Regime, fugacity and normalization across a mass grid (no dynamics)."""
    rows = []
    for rho in rho_grid:
        try:
            p = equilibrium_profile(kernel, float(rho), eta, N)
            rows.append({"rho": float(rho), "z": p.z, "y": p.y, "regime": p.regime.value,
                         "rho_s": p.rho_s, "z_s": p.z_s})
        except NoEquilibriumError:
            rows.append({"rho": float(rho), "z": math.nan, "y": math.nan,
                         "regime": Regime.NO_EQUILIBRIUM.value, "rho_s": 0.0, "z_s": 0.0})
    return rows


def _phase_point(args) -> dict[str, Any]:
    cfg, rho = args
    k, N = cfg.kernel, cfg.N
    row: dict[str, Any] = {"rho": rho}
    prof = equilibrium_profile(k, rho, 1.0, N)
    row.update(regime=prof.regime.value, z=prof.z, rho_s=prof.rho_s)
    spec = cfg.initial.with_rho(rho)
    s0 = build_initial(spec, k, N)
    if rho == 0:
        traj_final, trig, audit = s0, "fixed_point", {"max_drift_M1": 0.0}
    else:
        tr = integrate(k, s0, cfg.t_end, cfg.integrator, observers=2, stall_tol=cfg.stall_tol)
        traj_final, trig, audit = tr.final, tr.termination, tr.audit
    c = traj_final.c
    jp = min(cfg.j_probe, N)
    err = np.abs(c[:jp + 1] - prof.c_e[:jp + 1])
    j = np.arange(N + 1)
    row.update(
        t_final=traj_final.t, trigger=trig,
        max_component_error=float(err[1:].max()) if jp >= 1 else 0.0,
        strong1=distance(traj_final, prof.state, Norm.STRONG1),
        tail_mass=float(j[N // 2 + 1:] @ c[N // 2 + 1:]),
        M1=traj_final.rho, M1_drift=float(audit["max_drift_M1"]),
    )
    row["final_state"] = c.tolist()
    return row


def _pool_map(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    # map() yields in submission order: results merge by rank, not arrival
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def phase_transition_experiment(cfg: ExperimentConfig, out: Path | None = None,
                                manifest: RunManifest | None = None) -> tuple[list[dict], RunManifest]:
    """Relax each mass in the grid and compare against the matching equilibrium.

    Subcritical masses must converge strongly (``Strong1 <= 1e-4``);
    supercritical ones must match the critical profile componentwise
    (``<= 1e-3`` for ``j <= j_probe``) while the excess mass moves into the
    tail (mass beyond ``N/2`` at least ``rho - rho_s - 0.05``).
    """
    manifest = manifest or RunManifest(cfg.to_dict(), cfg.experiment)
    k = cfg.kernel
    if not k.is_product:
        raise ConfigError("the phase-transition experiment needs a product kernel", "kernel.form")
    cp = _critical(k, 1.0)
    if not math.isfinite(cp.rho_s):
        logger.warning("rho_s is infinite: every mass is subcritical")
    grid = list(cfg.rho_grid) or [float(cfg.initial.rho or 0.0)]
    rows = _pool_map(_phase_point, [(cfg, float(r)) for r in grid], cfg.workers)
    manifest.results["rho_s"] = cp.rho_s
    manifest.results["z_s"] = cp.z_s
    for row in rows:
        rho = row["rho"]
        tag = f"rho={rho:g}:"
        drift_ok = abs(row["M1"] - rho) <= 1e-6
        manifest.check(tag + "mass", drift_ok, row["M1"], f"{rho} +- 1e-6")
        if row["regime"] == Regime.SUBCRITICAL.value or rho == 0:
            manifest.check(tag + "strong_convergence", row["strong1"] <= 1e-4, row["strong1"], 1e-4)
            pile = row["tail_mass"]
            if pile > 1e-8 and rho > 0:
                manifest.check(tag + "truncation", False, pile, 1e-8,
                               "mass piles up beyond N/2 in a subcritical run; raise N")
        else:
            manifest.check(tag + "components", row["max_component_error"] <= 1e-3,
                           row["max_component_error"], 1e-3)
            need = rho - cp.rho_s - 0.05
            manifest.check(tag + "tail_mass", row["tail_mass"] >= need, row["tail_mass"], need)
    if out is not None:
        cols = ["rho", "regime", "z", "t_final", "trigger", "max_component_error", "strong1",
                "tail_mass", "M1"]
        lines = [",".join(cols)] + [",".join(str(r[c]) for c in cols) for r in rows]
        (out / "phase_transition.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        manifest.outputs.append("phase_transition.csv")
    manifest.results["grid"] = [{k2: v for k2, v in r.items() if k2 != "final_state"} for r in rows]
    return rows, manifest


def _contraction_run(args):
    kernel, state, t_end, integ, times = args
    return integrate(kernel, state, t_end, integ, times)


def contraction_experiment(cfg: ExperimentConfig, out: Path | None = None,
                           manifest: RunManifest | None = None) -> tuple[dict[str, Any], RunManifest]:
    """Co-integrate two equal-mass solutions on one sample grid and fit the decay.

    With ``target = "pair"`` the distances are between the two trajectories;
    with ``target = "equilibrium"`` trajectory A is compared to the stationary
    state. The fitted series (``series``) is cut where it falls below
    ``floor`` times its initial value, where integration error dominates.
    """
    manifest = manifest or RunManifest(cfg.to_dict(), cfg.experiment)
    k, N = cfg.kernel, cfg.N
    sa = build_initial(cfg.initial, k, N)
    spec_b = cfg.initial_b or InitialSpec("geometric", cfg.initial.rho, cfg.initial.eta, 0.5)
    sb = build_initial(spec_b, k, N)
    pair_tail_distance(sa, sb)  # raises on mass mismatch
    times = _times(cfg)
    trs = _pool_map(_contraction_run, [(k, sa, cfg.t_end, cfg.integrator, times),
                                       (k, sb, cfg.t_end, cfg.integrator, times)], cfg.workers)
    for tag, tr in zip(("a.", "b."), trs):
        _conservation_checks(manifest, tr, cfg, tag)
    ref = None
    if cfg.target == "equilibrium":
        if k.is_product:
            ref = equilibrium_profile(k, sa.rho, sa.eta, N).state
        else:
            ref = flux_recursion_equilibrium(k, sa.rho, N, sa.eta)
    t = trs[0].times
    series = {"t": t, "tail_l1": [], "weak0": [], "strong1": [], "M2": []}
    jj = np.arange(N + 1, dtype=float) ** 2
    for x, y in zip(trs[0].states, trs[1].states):
        other = ref if ref is not None else y
        d = pair_tail_distance(x, other, mass_tol=1e-8)
        series["tail_l1"].append(d.tail_l1)
        series["weak0"].append(d.weak0)
        series["strong1"].append(d.strong1)
        series["M2"].append(float(jj @ x.c) if ref is not None else max(float(jj @ x.c), float(jj @ y.c)))
    for key in ("tail_l1", "weak0", "strong1", "M2"):
        series[key] = np.array(series[key])
    report: dict[str, Any] = {"series": series}

    v = series[cfg.series]
    floor = cfg.floor * float(v[0]) if v[0] > 0 else 0.0
    if v[0] == 0:
        ok = bool(np.all(v == 0))
        manifest.check("identical_states_stay_identical", ok, float(np.abs(v).max()), 0.0)
        report["fit"] = None
        if out is not None:
            _write_contraction(out, series, manifest)
        return report, manifest
    fit = fit_exponential_rate(t, v, cfg.window, floor=floor)
    report["fit"] = fit
    manifest.rates.update({"series": cfg.series, "gamma_fit": fit.gamma, "r_squared": fit.r_squared,
                           "fit_window": [fit.t_start, fit.t_stop], "n_used": fit.n_used})
    above = v > floor
    idx = np.flatnonzero(above)
    vv = v[: idx[-1] + 1] if idx.size else v
    rises = np.diff(vv)
    worst = float(rises.max()) if rises.size else 0.0
    manifest.check(f"{cfg.series}_nonincreasing", worst <= floor, worst, floor,
                   "checked down to the noise floor")
    manifest.check("fit_r_squared", fit.r_squared >= 0.99, fit.r_squared, 0.99)
    manifest.check("decay_observed", fit.gamma > 0, fit.gamma, 0.0)

    hyp = validate_hypotheses(k, max(10, min(10 * N, 2000)), which=("H3",))
    bnds = hyp.bounds
    if not k.is_product and hyp.passed("H3"):
        theory = bnds.a_min - 8 * bnds.L ** 2 * k.eps
        manifest.rates["theory_floor"] = theory
        if cfg.target == "pair" and bnds.a_nonincreasing and bnds.b_nondecreasing and theory > 0:
            bound = (1 - cfg.slack) * theory
            manifest.check("rate_bound", fit.gamma >= bound, fit.gamma, bound)
        else:
            manifest.results["claim"] = "decay observed (rate bound not asserted)"
    else:
        manifest.results["claim"] = "decay observed (H3 fails; rate bound not asserted)"
    if cfg.target == "equilibrium":
        rho = sa.rho
        env = 2 * rho * np.exp(-fit.gamma * (t - t[0]))
        mask = v > floor
        excess = float(np.max(v[mask] - env[mask])) if mask.any() else 0.0
        manifest.check("envelope_2rho", excess <= 0.0, excess, 0.0)
    if not k.is_product:
        try:
            nb = m2_bound(bnds, sa.rho, k.eps)
            cap = 1.05 * max(nb, float(series["M2"][0]))
            manifest.results["M2_bound"] = nb
            manifest.check("M2_bounded", float(series["M2"].max()) <= cap, float(series["M2"].max()), cap)
        except ValueError:
            pass
    if out is not None:
        _write_contraction(out, series, manifest)
    return report, manifest


def _write_contraction(out: Path, series: dict, manifest: RunManifest):
    cols = ["t", "tail_l1", "weak0", "strong1", "M2"]
    lines = [",".join(cols)]
    for i in range(len(series["t"])):
        lines.append(",".join(repr(float(series[c][i])) for c in cols))
    (out / "contraction.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest.outputs.append("contraction.csv")


def relaxation_experiment(cfg: ExperimentConfig, out: Path | None = None,
                          manifest: RunManifest | None = None) -> RunManifest:
    """Relax from two initial conditions with equal ``(rho, 1)`` and compare."""
    manifest = manifest or RunManifest(cfg.to_dict(), cfg.experiment)
    k, N = cfg.kernel, cfg.N
    rho = float(cfg.initial.rho or 0.0)
    stall = cfg.stall_tol or 1e-10
    inits = None
    if cfg.initial_b is not None:
        inits = (build_initial(cfg.initial, k, N), build_initial(cfg.initial_b, k, N))
    try:
        res = equilibrium_by_relaxation(k, rho, N, cfg.integrator, stall, cfg.t_end, inits)
    except RelaxationError as exc:
        manifest.error = str(exc)
        return manifest
    manifest.results.update({"residual": res.residual, "weak0_between": res.weak0_between,
                             "t_stall": res.details.get("t_stall", [res.t_stall])})
    manifest.check("uniqueness", res.weak0_between <= 10 * stall, res.weak0_between, 10 * stall)
    manifest.check("stalled", res.residual < stall, res.residual, stall)
    if not k.is_product and rho > 0:
        try:
            fr = flux_recursion_equilibrium(k, rho, N)
            gap = distance(fr, res.c_e, Norm.WEAK0)
            manifest.results["weak0_to_flux_recursion"] = gap
        except ArithmeticError as exc:
            manifest.results["flux_recursion"] = str(exc)
    if out is not None:
        _profile_csv(out, None, res.c_e.c)
        manifest.outputs.append("profile.csv")
    return manifest


# ----------------------------------------------------------------------------
# invariant suite

def _random_state(rng: np.random.Generator, N: int, zeros: bool = False) -> ClusterState:
    c = rng.random(N + 1) * rng.random(N + 1) ** 2
    if zeros:
        c[rng.random(N + 1) < 0.2] = 0.0
    c[0] = max(c[0], 1e-3)
    return ClusterState(c / c.sum())


def verify(cfg: ExperimentConfig, manifest: RunManifest | None = None,
           n_states: int = 50) -> RunManifest:
    """Invariant suite on small random states for the configured kernel."""
    manifest = manifest or RunManifest(cfg.to_dict(), cfg.experiment)
    rng = np.random.default_rng(cfg.seed)
    k = cfg.kernel
    N = min(cfg.N, 40)
    worst_moment = worst_oracle = worst_tail = 0.0
    worst_D = math.inf
    for _ in range(n_states):
        s = _random_state(rng, N)
        g = rng.random(N + 1)
        for w in (np.ones(N + 1), np.arange(N + 1.0), np.arange(N + 1.0) ** 2, g):
            worst_moment = max(worst_moment, moment_identity_residual(k, s, w, relative=True))
        fast, slow = rhs(k, s), rhs_naive(k, s)
        scale = max(float(np.abs(slow).max()), 1e-300)
        worst_oracle = max(worst_oracle, float(np.abs(fast - slow).max()) / scale)
        s2 = _random_state(rng, N)
        # rescale s2's tail to match the mass of s, then fix volume through c_0
        c2 = np.array(s2.c)
        c2[1:] *= s.rho / s2.rho
        if c2[1:].sum() < 1.0:
            c2[0] = 1.0 - c2[1:].sum()
            s2 = ClusterState(c2)
            d = pair_tail_distance(s, s2, mass_tol=1e-9)
            worst_tail = max(worst_tail, d.weak0 - 2 * d.tail_l1)
        if k.is_product:
            worst_D = min(worst_D, dissipation_d(k, s))
    manifest.check("moment_identity", worst_moment <= 1e-12, worst_moment, 1e-12)
    manifest.check("rhs_oracle", worst_oracle <= 1e-12, worst_oracle, 1e-12)
    manifest.check("weak0_le_2_tail", worst_tail <= 1e-12, worst_tail, 1e-12)
    if k.is_product:
        manifest.check("dissipation_sign", worst_D >= -1e-12, worst_D, -1e-12)
        try:
            cp = _critical(k, 1.0)
            z_hi = cp.z_s * 0.999 if math.isfinite(cp.z_s) else 5.0
            zs = np.linspace(z_hi / 100, z_hi, 100)
            F = np.array([big_f(k, z) for z in zs])
            h = 1e-6 * z_hi
            dF = np.array([(big_f(k, z + h) - big_f(k, z - h)) / (2 * h) for z in zs[:-1]])
            manifest.check("F_increasing", bool(np.all(np.diff(F) > 0) and np.all(dF > 0)),
                           float(min(np.diff(F).min(), dF.min())), 0.0)
            rho = 0.5 * min(cp.rho_s, 1.0) if math.isfinite(cp.rho_s) else 0.5
            prof = equilibrium_profile(k, rho, 1.0, N)
            I = float(np.abs(flux(k, prof.state)).max())
            sc = make_record(k, prof.state).sums
            manifest.check("detailed_balance", I <= 1e-10 * sc.A * sc.B, I, 1e-10 * sc.A * sc.B)
        except (ArithmeticError, ValueError) as exc:
            manifest.check("equilibrium_checks", False, None, None, str(exc))
    return manifest


# ----------------------------------------------------------------------------
# dispatcher

def run(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunManifest:
    """Run the configured experiment, writing outputs and ``manifest.json``.

    The manifest is written even when the run fails part way.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.to_dict(), cfg.experiment)
    try:
        exp = cfg.experiment
        if exp == "simulate":
            _, manifest = simulate(cfg, out, manifest)
        elif exp == "equilibrium":
            manifest = equilibrium_experiment(cfg, out)
        elif exp == "phase_diagram":
            if cfg.dynamic:
                _, manifest = phase_transition_experiment(cfg, out, manifest)
            else:
                grid = cfg.rho_grid or (float(cfg.initial.rho or 0.0),)
                rows = phase_diagram(cfg.kernel, grid, cfg.initial.eta, cfg.N)
                manifest.results["grid"] = rows
                if out is not None:
                    lines = ["rho,z,y,regime"] + [f"{r['rho']!r},{r['z']!r},{r['y']!r},{r['regime']}"
                                                  for r in rows]
                    (out / "phase_diagram.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
                    manifest.outputs.append("phase_diagram.csv")
        elif exp == "contraction":
            _, manifest = contraction_experiment(cfg, out, manifest)
        elif exp == "relaxation":
            manifest = relaxation_experiment(cfg, out, manifest)
        else:
            manifest = verify(cfg, manifest)
    except IntegrationError as exc:
        manifest.error = manifest.error or str(exc)
    except (ArithmeticError, DivergentSeriesError) as exc:
        manifest.error = str(exc)
    finally:
        if out is not None:
            manifest.write(out)
    return manifest


__all__ += ["equilibrium_experiment", "DIAGNOSTICS_COLUMNS"]
