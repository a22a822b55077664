import csv
import json

import numpy as np
import pytest

from blochpulse import pipeline
from blochpulse.cli import EXIT_INVARIANT, EXIT_OK, EXIT_STAGE, EXIT_USAGE, main
from blochpulse.config import ConfigError, ExperimentConfig
from blochpulse.modes import SyntheticBands

SMALL_SWEEP = {"q": [4, 8, 16], "t_star": 0.25}


def write_config(tmp_path, text):
    path = tmp_path / "exp.toml"
    path.write_text(text)
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# --------------------------------------------------------------------------- config

def test_defaults_validate():
    cfg = ExperimentConfig.from_dict({})
    assert cfg.kappa == 1.0
    assert cfg.lattice().dim == 1
    assert cfg.potential().coefficients[(1,)] == 0.5


def test_toml_loading(tmp_path):
    path = write_config(tmp_path, """
output = "runs"
kappa = -0.5
[potential]
kind = "fourier"
constant = 0.2
cos = [{index = [1], v = 1.0}]
[basis]
n_max = 6
""")
    cfg = ExperimentConfig.load(path)
    pot = cfg.potential()
    assert cfg.kappa == -0.5 and str(cfg.output) == "runs"
    assert pot.coefficients[(0,)] == 0.2 and pot.coefficients[(1,)] == 0.5
    assert cfg.basis().max_index[0] == 6


@pytest.mark.parametrize("override", [
    {"convergence": {"q": [8, 8, 16]}},
    {"convergence": {"q": [16, 8, 32]}},
    {"convergence": {"t_star": 2.0}},
    {"modes": {"list": [{"k": [0.1, 0.2], "band": 1}]}},
    {"modes": {"list": [{"k": [0.1], "band": 0}]}},
    {"amplitude": {"box": [8.0, 8.0]}},
])
def test_config_rejects(override):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(override)


def test_unknown_potential_kind():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"potential": {"kind": "square"}}).potential()


# --------------------------------------------------------------------------- bands

def test_bands_free_are_folded_parabolas(tmp_path):
    cfg = ExperimentConfig.from_dict({"potential": {"kind": "free"}, "output": str(tmp_path),
                                      "bands": {"L": 4, "n_k": 17}})
    out = pipeline.run_bands(cfg)
    rows = read_csv(tmp_path / "bands.csv")
    assert rows[0] == ["k_frac", "E_1", "E_2", "E_3", "E_4"]
    for row in rows[1:]:
        f = float(row[0])
        expected = sorted(0.5 * (2 * np.pi * (f + n)) ** 2 for n in range(-4, 5))[:4]
        assert np.max(np.abs(np.array(row[1:], float) - expected)) < 1e-12
    # zone centre and edges carry degeneracies of the folded parabolas
    assert out.data["degeneracies"]


def test_bands_mathieu_gap(tmp_path):
    cfg = ExperimentConfig.from_dict({"output": str(tmp_path), "bands": {"L": 3, "n_k": 33}})
    out = pipeline.run_bands(cfg)
    rows = np.array(read_csv(tmp_path / "bands.csv")[1:], float)
    edge = rows[np.isclose(np.abs(rows[:, 0]), 0.5)]
    assert np.all(edge[:, 2] - edge[:, 1] > 0.5)
    assert out.data["gaps"][0]["min_gap"] > 0.5
    assert json.loads((tmp_path / "gaps.json").read_text())["degeneracies"] == []


def test_empty_band_request_is_usage_error(tmp_path, capsys):
    path = write_config(tmp_path, "[bands]\nL = 0\n")
    assert main(["bands", "--config", path, "--out", str(tmp_path)]) == EXIT_USAGE
    assert "configuration error" in capsys.readouterr().err


# --------------------------------------------------------------------------- exit codes

def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["scenario", "--name", "nonsense"])
    assert err.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == EXIT_USAGE
    assert main(["bands", "--config", str(tmp_path / "missing.toml")]) == EXIT_USAGE
    assert main(["convergence", "--out", str(tmp_path), "--workers", "0"]) == EXIT_USAGE


def test_invariant_failure_exit_code(tmp_path, capsys):
    # a box too small for the pulse: wrap-around check fails
    path = write_config(tmp_path, """
[amplitude]
box = [2.0]
n = [32]
T = 0.5
""")
    assert main(["amplitudes", "--config", path, "--out", str(tmp_path)]) == EXIT_INVARIANT
    assert "FAIL amplitudes.no_boundary_wrap" in capsys.readouterr().out


def test_flat_band_surfaces_as_stage_failure(tmp_path, monkeypatch, capsys):
    def flat(potential, basis):
        return SyntheticBands(potential.lattice, bands={1: lambda f: 2.0})

    monkeypatch.setattr(pipeline, "BlochBands", flat)
    assert main(["scenario", "--name", "single_band", "--out", str(tmp_path)]) == EXIT_STAGE
    err = capsys.readouterr().err
    assert "stage 'modes'" in err and "FlatBand" in err
    assert "k1=[0.25]" in err and "k2=[0.0]" in err and "k3=[0.5]" not in err


def test_subcommands_write_outputs(tmp_path, capsys):
    out = str(tmp_path)
    for cmd in ("bands", "resonances", "couplings", "amplitudes", "nls"):
        assert main([cmd, "--out", out]) == EXIT_OK, cmd
    names = {p.name for p in tmp_path.iterdir()}
    assert {"bands.csv", "gaps.json", "resonances.json", "couplings.csv", "amplitudes_conserved.csv",
            "amplitudes_final.bin", "amplitudes_final.bin.json", "nls_final.bin", "nls.json"} <= names
    res = json.loads((tmp_path / "resonances.json").read_text())
    assert res["certificate"]["verdict"] == "closed"
    assert len(res["certificate_digest"]) == 16


def test_search_directive(tmp_path):
    path = write_config(tmp_path, "[modes]\nsearch_band = 1\nweak_closure_N = 2\n")
    cfg = ExperimentConfig.load(path)
    cfg.raw["output"] = str(tmp_path)
    out = pipeline.run_resonances(cfg)
    assert out.ok
    assert out.data["weak_closure"]["ok"]
    assert abs(out.data["search"]["mismatch"]) < 1e-10


# --------------------------------------------------------------------------- scenarios

def test_three_pulse_scenario(tmp_path):
    cfg = ExperimentConfig.from_dict({"output": str(tmp_path)})
    out = pipeline.run_scenario(cfg, "three_pulse")
    assert out.ok, out.checks
    assert out.checks["invariant_subsystem"] and out.checks["reduced_system_agrees"]
    assert out.data["subsystem_max_a1"] < 1e-12
    assert out.data["drift"]["H_red"] < 1e-6
    report = json.loads((tmp_path / "three_pulse.json").read_text())
    assert report["certificate"]["verdict"] == "closed"


def test_multi_band_single_k_scenario(tmp_path):
    cfg = ExperimentConfig.from_dict({"output": str(tmp_path)})
    out = pipeline.run_scenario(cfg, "multi_band_single_k")
    assert out.checks["momentum_trivial"]
    # with one wave vector resonance is decided by the energies alone
    E = out.data["energies"]
    quads = {tuple(q) for q in out.data["quadruples"]}
    for p in range(2):
        for q in range(2):
            for r in range(2):
                for m in range(2):
                    hit = abs(E[p] - E[q] + E[r] - E[m]) < 1e-8 * max(1, np.max(np.abs(E)))
                    assert hit == ((p, q, r, m) in quads)
    assert out.ok


def test_single_band_scenario(tmp_path):
    out = pipeline.run_scenario(ExperimentConfig.from_dict({"output": str(tmp_path)}), "single_band")
    assert out.ok, out.checks
    assert out.data["search"]["e_forward"] > 0 > out.data["search"]["e_backward"]


# --------------------------------------------------------------------------- convergence

@pytest.fixture(scope="module")
def small_sweep(tmp_path_factory):
    runs = []
    for workers in (1, 3):
        out = tmp_path_factory.mktemp(f"sweep{workers}")
        cfg = ExperimentConfig.from_dict({"output": str(out), "convergence": SMALL_SWEEP})
        runs.append((out, pipeline.run_convergence(cfg, workers)))
    return runs


def test_convergence_report_contents(small_sweep):
    out, outcome = small_sweep[0]
    report = json.loads((out / "convergence.json").read_text())
    assert [r["q"] for r in report["rows"]] == [4, 8, 16]
    assert len(report["certificate_digest"]) == 16
    assert set(report["tolerances"]) == {"tol_k", "tol_E", "L_max"}
    assert report["rationale"]
    assert report["slope_window"] == [0.75, 1.25]
    assert "seconds" not in (out / "convergence.json").read_text()
    assert json.loads((out / "benchmark.json").read_text())["jobs"][0]["seconds"] > 0
    assert outcome.data["report"].slope == report["slope"]


def test_convergence_bitwise_deterministic(small_sweep):
    (a, _), (b, _) = small_sweep
    for name in ("convergence.json", "convergence.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_halving_t_star_reduces_errors(small_sweep, tmp_path):
    _, full = small_sweep[0]
    cfg = ExperimentConfig.from_dict({"output": str(tmp_path),
                                      "convergence": dict(SMALL_SWEEP, t_star=0.125)})
    half = pipeline.run_convergence(cfg, 1)
    for a, b in zip(half.data["report"].rows, full.data["report"].rows):
        assert a["error_hs"] < b["error_hs"]


def test_slope_fit():
    eps = np.array([1 / 8, 1 / 16, 1 / 32])
    slope, intercept, resid = pipeline.fit_slope(eps, 3.0 * eps)
    assert slope == pytest.approx(1.0) and np.exp(intercept) == pytest.approx(3.0)
    assert resid < 1e-12


def test_partial_table_preserved(tmp_path, monkeypatch):
    real = pipeline.convergence_job

    def flaky(q, ctx):
        if q == 16:
            raise FloatingPointError("synthetic failure")
        return real(q, ctx)

    monkeypatch.setattr(pipeline, "convergence_job", flaky)
    cfg = ExperimentConfig.from_dict({"output": str(tmp_path), "convergence": SMALL_SWEEP})
    with pytest.raises(pipeline.StageError) as err:
        pipeline.run_convergence(cfg, 1)
    assert err.value.stage == "nls sweep"
    partial = json.loads((tmp_path / "convergence_partial.json").read_text())
    assert [r["q"] for r in partial["rows"]] == [4, 8]


def test_convergence_requires_closure(tmp_path, monkeypatch):
    from blochpulse.modes import ClosureCertificate

    monkeypatch.setattr(pipeline, "closure_check",
                        lambda system, order, L_max: ClosureCertificate(order, False, [], 1e-9, 1e-8, L_max))
    cfg = ExperimentConfig.from_dict({"output": str(tmp_path), "convergence": SMALL_SWEEP})
    with pytest.raises(pipeline.StageError) as err:
        pipeline.run_convergence(cfg, 1)
    assert err.value.stage == "closure"
