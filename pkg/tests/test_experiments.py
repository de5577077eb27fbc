import json
import math

import numpy as np
import pytest

from edglab.cli import main
from edglab.experiments import (ConfigError, ExperimentConfig, InitialSpec, build_initial,
                                contraction_experiment, parse_rho_grid, phase_diagram, run)
from edglab.rates import KernelSpec, RateSequence as R

ONES = {"form": "product", "a": {"kind": "constant", "value": 1}, "b": {"kind": "constant", "value": 1}}
TELE4 = {"form": "product", "a": {"kind": "constant"}, "b": {"kind": "telescoping", "exponent": 4}}
SUM = {"form": "sum", "a": {"kind": "constant"}, "b": {"kind": "linear"}, "eps": 0.05}


def cfg(**kw):
    base = {"experiment": "simulate", "kernel": ONES, "N": 100, "t_end": 20.0,
            "initial": {"kind": "monomer", "rho": 0.5, "eta": 1.0},
            "integrator": {"rel_tol": 1e-10}, "sampling": {"count": 30}}
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def test_config_errors():
    with pytest.raises(ConfigError) as e:
        cfg(bogus=1)
    assert "bogus" in str(e.value)
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_dict({"kernel": ONES, "t_end": 1.0, "initial": {"kind": "monomer", "rho": 0.5}})
    assert e.value.field == "N"
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_json('{"kernel": 1,\n  "N": }')
    assert e.value.line == 2
    with pytest.raises(ConfigError):
        cfg(experiment="contraction", kernel=SUM, initial={"kind": "monomer", "rho": 0.3, "eta": 2.0})
    with pytest.raises(ConfigError):
        cfg(N=1)
    with pytest.raises(ConfigError):
        cfg(contraction={"target": "elsewhere"})


def test_rho_grid_parsing():
    assert parse_rho_grid("0:1:3") == (0.0, 0.5, 1.0)
    for bad in ("0:1", "a:b:c", "1:0:3"):
        with pytest.raises(ConfigError):
            parse_rho_grid(bad)


@pytest.mark.parametrize("kind", ["monomer", "geometric", "equilibrium"])
def test_initial_builders_hit_moments(kind):
    k = KernelSpec.product(R.constant(1), R.constant(1))
    s = build_initial(InitialSpec(kind, 0.7, 1.0), k, 200)
    assert abs(s.eta - 1.0) <= 1e-12 and abs(s.rho - 0.7) <= 1e-12


def test_custom_initial_checked():
    k = KernelSpec.product(R.constant(1), R.constant(1))
    with pytest.raises(ConfigError):
        build_initial(InitialSpec("custom", 0.5, 1.0, values=(0.5, 0.5)), k, 3)
    s = build_initial(InitialSpec("custom", 0.5, 1.0, values=(0.5, 0.5)), k, 1)
    assert s.c.tolist() == [0.5, 0.5]


def test_simulate_writes_outputs(tmp_path):
    m = run(cfg(), tmp_path)
    assert m.passed, [c for c in m.checks if not c.passed]
    for name in ("trajectory.csv", "diagnostics.csv", "manifest.json"):
        assert (tmp_path / name).exists()
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["audit"]["M1_rel_drift"] <= 1e-8
    assert man["config"]["N"] == 100 and man["passed"]


def test_equilibrium_supercritical(tmp_path):
    m = run(cfg(experiment="equilibrium", kernel=TELE4, initial={"kind": "monomer", "rho": 0.9}), tmp_path)
    assert m.regime == "supercritical" and m.passed
    assert (tmp_path / "profile.csv").exists()


def test_verify_reports_each_invariant():
    m = run(cfg(experiment="verify", N=30, seed=3))
    names = {c.name.split(":")[0] for c in m.checks}
    assert {"moment_identity", "rhs_oracle", "weak0_le_2_tail", "dissipation_sign", "F_increasing",
            "detailed_balance"} <= names
    assert m.passed


def test_manifest_written_on_failure(tmp_path):
    c = cfg(integrator={"rel_tol": 1e-14, "abs_tol": 1e-300, "min_step": 0.5, "max_step": 1.0})
    m = run(c, tmp_path)
    assert not m.passed and m.error
    assert json.loads((tmp_path / "manifest.json").read_text())["error"]


def test_identical_pair_stays_identical():
    c = cfg(experiment="contraction", kernel=SUM, N=40, t_end=2.0,
            initial={"kind": "geometric", "rho": 0.5}, initial_b={"kind": "geometric", "rho": 0.5},
            sampling={"count": 20, "log": False})
    report, m = contraction_experiment(c)
    series = report["series"]
    assert m.passed
    for key in ("tail_l1", "weak0", "strong1"):
        assert np.all(np.asarray(series[key]) == 0.0)


def test_phase_zero_mass_is_trivial():
    c = cfg(experiment="phase_diagram", kernel=TELE4, N=50, rho_grid=[0.0],
            phase={"dynamic": True})
    m = run(c)
    assert m.passed and m.results["grid"][0]["trigger"] == "fixed_point"


def test_static_phase_diagram():
    k = KernelSpec.product(R.constant(1), R.telescoping(4))
    rows = phase_diagram(k, [0.2, 0.9], N=50)
    assert [r["regime"] for r in rows] == ["subcritical", "supercritical"]


def test_deterministic_output(tmp_path):
    run(cfg(), tmp_path / "a")
    run(cfg(), tmp_path / "b")
    for name in ("trajectory.csv", "diagnostics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_workers_merge_by_rank():
    base = dict(experiment="phase_diagram", kernel=TELE4, N=60, t_end=5.0, rho_grid=[0.1, 0.2, 0.3],
                phase={"dynamic": True}, sampling={"count": 2})
    one = run(cfg(**base, workers=1)).results["grid"]
    two = run(cfg(**base, workers=2)).results["grid"]
    assert one == two


def _write(tmp_path, d):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(d))
    return str(p)


def test_cli_exit_codes(tmp_path, capsys):
    good = {"kernel": ONES, "N": 50, "t_end": 10.0, "initial": {"kind": "monomer", "rho": 0.5},
            "sampling": {"count": 10}}
    assert main(["simulate", "--config", _write(tmp_path, good), "--out", str(tmp_path / "o")]) == 0
    assert "PASS" in capsys.readouterr().out
    bad = dict(good, N="many")
    assert main(["simulate", "--config", _write(tmp_path, bad), "--quiet"]) == 2
    assert main(["bogus", "--config", "x.json"]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "broken.json").write_text("{\n,}")
    assert main(["simulate", "--config", str(tmp_path / "broken.json")]) == 2
    # subcritical run whose truncation is far too small: the pile-up check fails
    fail = {"kernel": ONES, "N": 4, "t_end": 30.0, "initial": {"kind": "monomer", "rho": 0.9},
            "rho_grid": [0.9], "phase": {"dynamic": True}, "sampling": {"count": 2}}
    assert main(["phase-diagram", "--config", _write(tmp_path, fail), "--out",
                 str(tmp_path / "f"), "--quiet"]) == 1
