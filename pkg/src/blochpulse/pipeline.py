"""Experiment pipelines behind the command-line subcommands."""
from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import amplitude as amp
from .approx import TwoScaleAnsatz, residual_norm, solvability_defect
from .bloch import band_energies
from .config import ConfigError, ExperimentConfig
from .coupling import CouplingTable, coupling_table
from .errors import BlochPulseError
from .modes import (BlochBands, ModeSystem, closure_check, momentum_shift, resonant_quadruples,
                    single_band_resonance_search, weak_closure_check)
from .nls import FineGrid, WaveField, energy, evolve, hs_eps_norm, mass, save_checkpoint
from .storage import save_field

MASS_TOL = 1e-8
LEAK_TOL = 1e-10
NLS_MASS_TOL = 1e-10
SUBSYSTEM_TOL = 1e-12
REDUCED_TOL = 1e-8
SLOPE_RATIONALE = ("window absorbs the first-order resonant coefficient frozen at zero "
                   "and the residual time-splitting error")


class StageError(BlochPulseError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


@dataclass
class Outcome:
    name: str
    checks: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    files: list = field(default_factory=list)

    @property
    def ok(self):
        return all(self.checks.values())


class stage:
    """Context manager tagging failures with the pipeline stage."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, (StageError, ConfigError)):
            raise StageError(self.name, exc) from exc
        return False


def _write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"cannot serialise {type(obj)}")


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return path


# ---------------------------------------------------------------------------- building blocks

def build_system(cfg):
    """Band model, mode system and (if searched) the resonance triple."""
    modes_cfg = cfg.section("modes")
    with stage("bloch"):
        model = BlochBands(cfg.potential(), cfg.basis())
    triple = None
    with stage("modes"):
        if "search_band" in modes_cfg:
            triple = single_band_resonance_search(int(modes_cfg["search_band"]), model)
            modes = triple.modes()
        else:
            modes = [(tuple(m["k"]), int(m["band"])) for m in modes_cfg["list"]]
        system = ModeSystem.build(model, modes, tol_k=float(modes_cfg["tol_k"]))
        E_scale = max(1.0, float(np.max(np.abs(system.energies))))
        system.tol_E = float(modes_cfg["tol_E"]) * E_scale
    return model, system, triple


def _L_max(cfg, system):
    return int(cfg.section("modes")["L_max"]) or system.default_L_max()


def macro_grid(cfg):
    a = cfg.section("amplitude")
    return amp.MacroGrid(tuple(a["box"]), tuple(a["n"]))


def initial_fields(cfg, system, grid):
    specs = cfg.section("amplitude")["initial"]
    if len(specs) != system.size:
        raise ConfigError(f"{len(specs)} initial pulses given for {system.size} modes")
    return np.array([amp.gaussian(grid, s["center"], s["width"], s.get("amplitude", 1.0), s.get("phase_k"))
                     for s in specs])


def amplitude_run(system, table, grid, fields, T, dt, checkpoint_every):
    state = amp.AmplitudeState.from_system(system, table, grid, fields)
    return amp.strang_evolve(state, T, dt, checkpoint_every)


def nls_dt(cfg, eps):
    n = cfg.section("nls")
    return float(n["dt_coeff"]) * eps ** float(n["dt_power"])


def fit_slope(eps, err):
    x, y = np.log(eps), np.log(err)
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return float(slope), float(intercept), resid


# ---------------------------------------------------------------------------- subcommands

def run_bands(cfg):
    b = cfg.section("bands")
    L, n_k = int(b["L"]), int(b["n_k"])
    if L < 1 or n_k < 2:
        raise ConfigError("bands needs L >= 1 and n_k >= 2")
    pot, basis = cfg.potential(), cfg.basis()
    lat = pot.lattice
    fracs = np.linspace(-0.5, 0.5, n_k)
    rows, flagged = [], []
    for f in fracs:
        frac = np.zeros(lat.dim)
        frac[0] = f
        k = lat.from_fractional(frac)
        E = band_energies(k, pot, basis)
        rows.append([f, *E[:L]])
        for ell in range(L):
            gaps = [abs(E[ell] - E[ell - 1]) if ell else np.inf, abs(E[ell + 1] - E[ell])]
            if min(gaps) < 1e-8 * max(1.0, abs(E[ell])):
                flagged.append({"k_frac": float(f), "band": ell + 1})
    arr = np.array([r[1:] for r in rows])
    gaps = [{"between": [ell + 1, ell + 2], "min_gap": float(np.min(arr[:, ell + 1] - arr[:, ell]))}
            for ell in range(L - 1)]
    out = cfg.output
    files = [_write_csv(out / "bands.csv", ["k_frac"] + [f"E_{ell + 1}" for ell in range(L)], rows),
             _write_json(out / "gaps.json", {"gaps": gaps, "degeneracies": flagged})]
    return Outcome("bands", {"monotone_bands": bool(np.all(np.diff(arr, axis=1) >= 0))},
                   {"gaps": gaps, "degeneracies": flagged}, files)


def run_resonances(cfg):
    model, system, triple = build_system(cfg)
    modes_cfg = cfg.section("modes")
    L_max = _L_max(cfg, system)
    with stage("closure"):
        cert = closure_check(system, int(modes_cfg["closure_order"]), L_max)
        quads = resonant_quadruples(system)
    data = {"certificate": cert.as_dict(), "certificate_digest": cert.digest(),
            "quadruples": [list(q) for q in quads],
            "modes": [{"k_frac": list(m.frac), "band": m.band, "E": float(E)}
                      for m, E in zip(system.modes, system.energies)]}
    if triple is not None:
        data["search"] = {"k1": triple.k1, "k2": triple.k2, "k3": triple.k3, "mismatch": triple.mismatch,
                          "e_forward": triple.e_forward, "e_backward": triple.e_backward}
    N = int(modes_cfg["weak_closure_N"])
    if N > 0:
        with stage("weak closure"):
            weak = weak_closure_check(system, N, L_max)
        data["weak_closure"] = {"N": N, "ok": weak.ok,
                                "sizes": [len(G) for G in weak.sequence],
                                "violation": None if weak.violation is None else
                                {"condition": weak.violation["condition"], "level": weak.violation["level"],
                                 "sigma": weak.violation["sigma"].as_dict()}}
    files = [_write_json(cfg.output / "resonances.json", data)]
    checks = {"closed": cert.closed}
    if triple is not None:
        checks["search_mismatch"] = abs(triple.mismatch) < 1e-10
    return Outcome("resonances", checks, data, files)


def run_couplings(cfg):
    model, system, _ = build_system(cfg)
    with stage("coupling"):
        table = coupling_table(system, cfg.kappa)
    path = cfg.output / "couplings.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table.to_csv())
    defects = table.symmetry_defects()
    return Outcome("couplings", {"symmetries": True}, {"defects": defects, "size": len(table)}, [path])


def _amplitude_outputs(cfg, name, system, table, traj):
    reports = [amp.conserved_report(s) for s in traj]
    drift = amp.drift(reports)
    out = cfg.output
    files = [_write_csv(out / f"{name}_conserved.csv", reports[0].header(), [r.row() for r in reports])]
    final = traj[-1]
    meta = {"t": final.t, "lengths": list(final.grid.lengths), "shape": list(final.grid.shape),
            "modes": [{"k_frac": list(m.frac), "band": m.band} for m in system.modes]}
    files.append(save_field(out / f"{name}_final.bin", final.fields, meta))
    leak = max(amp.boundary_leakage(s) for s in traj)
    checks = {"mass_conserved": drift["mass"] < MASS_TOL,
              "I_conserved": drift["I"] < MASS_TOL,
              "I_tilde_conserved": all(v < MASS_TOL for k, v in drift.items() if k.startswith("I_tilde")),
              "no_boundary_wrap": leak < LEAK_TOL}
    return checks, {"drift": drift, "boundary_leakage": leak}, files


def run_amplitudes(cfg):
    model, system, _ = build_system(cfg)
    a = cfg.section("amplitude")
    with stage("coupling"):
        table = coupling_table(system, cfg.kappa)
    grid = macro_grid(cfg)
    with stage("amplitude"):
        traj = amplitude_run(system, table, grid, initial_fields(cfg, system, grid),
                             float(a["T"]), float(a["dt"]), int(a["checkpoint_every"]) or None)
    checks, data, files = _amplitude_outputs(cfg, "amplitudes", system, table, traj)
    return Outcome("amplitudes", checks, data, files)


def run_nls(cfg):
    model, system, _ = build_system(cfg)
    n = cfg.section("nls")
    with stage("coupling"):
        table = coupling_table(system, cfg.kappa)
    grid = macro_grid(cfg)
    state = amp.AmplitudeState.from_system(system, table, grid, initial_fields(cfg, system, grid))
    fine = FineGrid(cfg.potential(), tuple(cfg.section("amplitude")["box"]), int(n["q"]), int(n["p_cell"]))
    with stage("ansatz"):
        ansatz = TwoScaleAnsatz(system, table, order=0)
        wf = WaveField(0.0, ansatz.evaluate(state, fine), fine, cfg.kappa)
    dt = nls_dt(cfg, fine.eps)
    T = float(n["T"])
    steps = max(1, int(round(T / dt)))
    every = int(n["checkpoint_every"]) or None
    files = []

    def keep(snap):
        files.append(save_checkpoint(cfg.output / f"nls_t{snap.t:.6f}.bin", snap))

    with stage("nls"):
        traj = evolve(wf, T, T / steps, every, keep if every else None)
    final = traj[-1]
    files.append(save_checkpoint(cfg.output / "nls_final.bin", final))
    mass_drift = abs(mass(final) - wf.mass0) / wf.mass0
    data = {"eps": fine.eps, "steps": steps, "dt": T / steps, "mass_drift": mass_drift,
            "energy": [energy(wf), energy(final)]}
    _write_json(cfg.output / "nls.json", data)
    return Outcome("nls", {"mass_conserved": mass_drift < NLS_MASS_TOL}, data, files)


# ---------------------------------------------------------------------------- convergence

@dataclass
class ConvergenceReport:
    rows: list
    slope: float
    intercept: float
    fit_residual: float
    window: tuple
    max_fit_residual: float
    certificate_digest: str
    tolerances: dict

    @property
    def passed(self):
        lo, hi = self.window
        return lo <= self.slope <= hi and self.fit_residual < self.max_fit_residual

    def as_dict(self):
        return {"rows": self.rows, "slope": self.slope, "intercept": self.intercept,
                "fit_residual": self.fit_residual, "slope_window": list(self.window),
                "max_fit_residual": self.max_fit_residual, "pass": self.passed,
                "certificate_digest": self.certificate_digest, "tolerances": self.tolerances,
                "rationale": SLOPE_RATIONALE}

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True, default=_jsonable) + "\n"

    def to_csv(self):
        keys = ["q", "eps", "n_fine", "steps", "dt", "error_hs", "error_l2"]
        lines = [",".join(keys)]
        for r in self.rows:
            lines.append(",".join(repr(r[k]) for k in keys))
        return "\n".join(lines) + "\n"


def convergence_job(q, ctx):
    """Direct simulation against the leading-order ansatz at ``eps = 1/q``."""
    cfg, ansatz, start, end = ctx["cfg"], ctx["ansatz"], ctx["start"], ctx["end"]
    n = cfg.section("nls")
    fine = FineGrid(ansatz.potential, tuple(cfg.section("amplitude")["box"]), q, int(n["p_cell"]))
    u0 = WaveField(0.0, ansatz.evaluate(start, fine, order=0), fine, ansatz.kappa)
    t_star = ctx["t_star"]
    steps = int(np.ceil(t_star / nls_dt(cfg, fine.eps) - 1e-9))
    tic = time.perf_counter()
    final = evolve(u0, t_star, t_star / steps)[-1]
    elapsed = time.perf_counter() - tic
    diff = final.u - ansatz.evaluate(end, fine, order=0)
    row = {"q": q, "eps": fine.eps, "n_fine": fine.size, "steps": steps, "dt": t_star / steps,
           "error_hs": hs_eps_norm(diff, ctx["s"], fine), "error_l2": hs_eps_norm(diff, 0, fine)}
    return row, {"q": q, "seconds": elapsed, "points": fine.size, "steps": steps}


def run_convergence(cfg, workers=None):
    conv = cfg.section("convergence")
    a = cfg.section("amplitude")
    model, system, _ = build_system(cfg)
    with stage("closure"):
        cert = closure_check(system, 3, _L_max(cfg, system))
        if not cert.closed:
            raise StageError("closure", ValueError("mode system is not closed of order 3"))
    with stage("coupling"):
        table = coupling_table(system, cfg.kappa)
    grid = macro_grid(cfg)
    t_star = float(conv["t_star"])
    with stage("amplitude"):
        traj = amplitude_run(system, table, grid, initial_fields(cfg, system, grid), t_star, float(a["dt"]), None)
    with stage("ansatz"):
        ansatz = TwoScaleAnsatz(system, table, order=0)
    ctx = {"cfg": cfg, "ansatz": ansatz, "start": traj[0], "end": traj[-1], "t_star": t_star,
           "s": float(conv["s"])}
    qs = [int(q) for q in conv["q"]]
    workers = workers or int(conv["workers"])
    rows, timings = [], []
    out = cfg.output
    try:
        with stage("nls sweep"), ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for row, timing in pool.map(lambda q: convergence_job(q, ctx), qs):
                rows.append(row)
                timings.append(timing)
    finally:
        if len(rows) < len(qs):
            _write_json(out / "convergence_partial.json", {"rows": rows})
    if len(rows) < 3:
        raise ConfigError("the slope fit needs at least three eps values")
    slope, intercept, resid = fit_slope([r["eps"] for r in rows], [r["error_hs"] for r in rows])
    report = ConvergenceReport(rows, slope, intercept, resid, tuple(conv["slope_window"]),
                               float(conv["max_fit_residual"]), cert.digest(),
                               {"tol_k": cert.tol_k, "tol_E": cert.tol_E, "L_max": cert.L_max})
    out.mkdir(parents=True, exist_ok=True)
    (out / "convergence.json").write_text(report.to_json())
    (out / "convergence.csv").write_text(report.to_csv())
    _write_json(out / "benchmark.json", {"jobs": timings, "workers": workers})
    leak = max(amp.boundary_leakage(s) for s in traj)
    return Outcome("convergence", {"slope_in_window": report.passed, "no_boundary_wrap": leak < LEAK_TOL},
                   {"report": report, "boundary_leakage": leak},
                   [out / "convergence.json", out / "convergence.csv"])


def run_residual_study(cfg, q):
    """Residual norms of the order-0 and order-1 ansatz and the solvability defect."""
    model, system, _ = build_system(cfg)
    a = cfg.section("amplitude")
    table = coupling_table(system, cfg.kappa)
    grid = macro_grid(cfg)
    every = int(a["checkpoint_every"]) or None
    traj = amplitude_run(system, table, grid, initial_fields(cfg, system, grid), float(a["T"]), float(a["dt"]), every)
    ansatz = TwoScaleAnsatz(system, table, order=1)
    fine = FineGrid(ansatz.potential, tuple(a["box"]), q, int(cfg.section("nls")["p_cell"]))
    final = traj[-1]
    r0, r1 = residual_norm(ansatz, final, fine, 0), residual_norm(ansatz, final, fine, 1)
    defect = max(solvability_defect(ansatz, s) for s in traj)
    return {"residual_0": r0, "residual_1": r1, "ratio": r1 / r0, "solvability": defect}


# ---------------------------------------------------------------------------- scenarios

SCENARIOS = ("three_pulse", "single_band", "multi_band_single_k")

THREE_PULSE_AMPLITUDE = {"box": [32.0], "n": [256], "dt": 1e-3, "T": 1.0, "checkpoint_every": 100,
                         "initial": [{"center": [-2.0], "width": 1.5, "amplitude": 1.0},
                                     {"center": [0.0], "width": 1.5, "amplitude": 0.8},
                                     {"center": [2.0], "width": 1.5, "amplitude": 0.6}]}


def _scenario_cfg(cfg, modes, amplitude):
    raw = dict(cfg.raw)
    user = raw.get("scenario", {})
    base = {k: v for k, v in cfg.section("modes").items() if k != "search_band"}
    raw["modes"] = dict(base, **modes)
    raw["amplitude"] = dict(amplitude, **user.get("amplitude", {}))
    raw["convergence"] = dict(cfg.section("convergence"), t_star=min(cfg.section("convergence")["t_star"],
                                                                    raw["amplitude"]["T"]))
    return ExperimentConfig.from_dict(raw)


def restrict_table(table, keep):
    """Coupling table of the subsystem spanned by the mode indices in ``keep``."""
    index = {old: new for new, old in enumerate(keep)}
    entries = {tuple(index[i] for i in q): v for q, v in table.entries.items() if all(i in index for i in q)}
    return CouplingTable(table.kappa, entries, table.n_per_dim)


def _resonant_pipeline(cfg, name, system):
    out = {}
    checks = {}
    L_max = _L_max(cfg, system)
    with stage("closure"):
        cert = closure_check(system, 3, L_max)
    checks["closed_order_3"] = cert.closed
    out["certificate"] = cert.as_dict()
    out["certificate_digest"] = cert.digest()
    out["quadruples"] = [list(q) for q in resonant_quadruples(system)]
    with stage("coupling"):
        table = coupling_table(system, cfg.kappa)
    (cfg.output / f"{name}_couplings.csv").parent.mkdir(parents=True, exist_ok=True)
    (cfg.output / f"{name}_couplings.csv").write_text(table.to_csv())
    a = cfg.section("amplitude")
    grid = macro_grid(cfg)
    fields = initial_fields(cfg, system, grid)
    with stage("amplitude"):
        traj = amplitude_run(system, table, grid, fields, float(a["T"]), float(a["dt"]),
                             int(a["checkpoint_every"]) or None)
    c, data, files = _amplitude_outputs(cfg, name, system, table, traj)
    checks.update(c)
    out.update(data)
    return checks, out, files, table, traj, fields, grid


def run_scenario(cfg, name):
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    user = cfg.raw.get("scenario", {})
    if name == "three_pulse":
        scfg = _scenario_cfg(cfg, {"search_band": int(user.get("band", 1))}, THREE_PULSE_AMPLITUDE)
        model, system, triple = build_system(scfg)
        checks, data, files, table, traj, fields, grid = _resonant_pipeline(scfg, name, system)
        quads = set(map(tuple, data["quadruples"]))
        checks["pulse_quadruples"] = {(0, 1, 0, 2), (0, 2, 0, 1), (1, 0, 2, 0), (2, 0, 1, 0)} <= quads
        data["search"] = {"k1": triple.k1, "k2": triple.k2, "k3": triple.k3, "mismatch": triple.mismatch}
        a = scfg.section("amplitude")
        # invariant subsystem: without the first pulse it never appears
        sub_fields = fields.copy()
        sub_fields[0] = 0
        with stage("invariant subsystem"):
            sub = amplitude_run(system, table, grid, sub_fields, float(a["T"]), float(a["dt"]),
                                int(a["checkpoint_every"]) or None)
            reduced_sys = _ReducedSystem(system, [1, 2])
            reduced = amplitude_run(reduced_sys, restrict_table(table, [1, 2]), grid, sub_fields[1:],
                                    float(a["T"]), float(a["dt"]), int(a["checkpoint_every"]) or None)
        leak = max(float(np.max(np.abs(s.fields[0]))) for s in sub)
        gap = max(float(np.max(np.abs(s.fields[1:] - r.fields))) for s, r in zip(sub, reduced))
        checks["invariant_subsystem"] = leak < SUBSYSTEM_TOL
        checks["reduced_system_agrees"] = gap < REDUCED_TOL
        data["subsystem_max_a1"] = leak
        data["reduced_system_gap"] = gap
    elif name == "single_band":
        band = int(user.get("band", 1))
        scfg = _scenario_cfg(cfg, {"search_band": band}, THREE_PULSE_AMPLITUDE)
        model, system, triple = build_system(scfg)
        checks, data, files, *_ = _resonant_pipeline(scfg, name, system)
        checks["search_mismatch"] = abs(triple.mismatch) < 1e-10
        checks["sign_pattern"] = triple.e_forward > 0 > triple.e_backward
        data["search"] = {"k1": triple.k1, "k2": triple.k2, "k3": triple.k3, "mismatch": triple.mismatch,
                          "e_forward": triple.e_forward, "e_backward": triple.e_backward}
    else:
        k0 = list(user.get("k", [0.0] * cfg.lattice().dim))
        bands = list(user.get("bands", [1, 2]))
        amp_cfg = dict(THREE_PULSE_AMPLITUDE, initial=[{"center": [0.0] * len(k0), "width": 1.5, "amplitude": 1.0}
                                                       for _ in bands])
        amp_cfg["box"] = [32.0] * len(k0)
        amp_cfg["n"] = [256] * len(k0)
        scfg = _scenario_cfg(cfg, {"list": [{"k": k0, "band": b} for b in bands]}, amp_cfg)
        model, system, _ = build_system(scfg)
        checks, data, files, *_ = _resonant_pipeline(scfg, name, system)
        checks["momentum_trivial"] = all(
            not any(momentum_shift(system, (p, q, r, m)))
            for p in range(system.size) for q in range(system.size)
            for r in range(system.size) for m in range(system.size))
        data["energies"] = system.energies
    files.append(_write_json(cfg.output / f"{name}.json", {"checks": checks, **data}))
    return Outcome(name, checks, data, files)


class _ReducedSystem:
    """View of a mode system restricted to a subset of its modes."""

    def __init__(self, system, keep):
        self.size = len(keep)
        self.velocities = system.velocities[keep]
        self.energies = system.energies[keep]
