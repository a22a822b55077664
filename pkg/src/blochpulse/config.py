"""TOML experiment configuration.

Grammar (all sections optional unless a subcommand needs them)::

    output = "out"                       # output directory
    kappa = 1.0

    [lattice]
    basis = [[1.0]]                      # d x d, row-major basis vectors

    [potential]
    kind = "mathieu"                     # "mathieu" | "free" | "fourier"
    vhat = 0.5                           # mathieu: Vhat(+-2 pi) = vhat
    constant = 0.0                       # fourier: Vhat(0)
    cos = [{index = [1], v = 1.0}]       # fourier: v cos(g.y) terms
    coefficients = [{index = [1], re = 0.5, im = 0.0}]

    [basis]
    n_max = 8                            # plane-wave shells along the shortest dual vector

    [modes]
    list = [{k = [0.25], band = 1}]      # k as fractions of the dual basis
    search_band = 1                      # alternative: single-band resonance search
    tol_k = 1e-9
    tol_E = 1e-8                         # relative to max(1, max |E|)
    closure_order = 3
    weak_closure_N = 0
    L_max = 0                            # 0 selects the default

    [bands]
    L = 4
    n_k = 65

    [amplitude]
    box = [16.0]
    n = [256]
    dt = 1e-3
    T = 0.5
    checkpoint_every = 100
    initial = [{center = [0.0], width = 0.5, amplitude = 1.0, phase_k = [0.0]}]

    [nls]
    p_cell = 16
    q = 8
    dt_coeff = 0.0625
    dt_power = 2
    T = 0.5
    checkpoint_every = 0

    [convergence]
    q = [8, 16, 32]
    t_star = 0.5
    s = 1
    workers = 1
    slope_window = [0.75, 1.25]
    max_fit_residual = 0.1
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bloch import PlaneWaveBasis, PotentialSpec
from .lattice import Lattice

DEFAULTS = {
    "output": "out",
    "kappa": 1.0,
    "lattice": {"basis": [[1.0]]},
    "potential": {"kind": "mathieu", "vhat": 0.5},
    "basis": {"n_max": 8},
    "modes": {"list": [{"k": [0.25], "band": 1}], "tol_k": 1e-9, "tol_E": 1e-8,
              "closure_order": 3, "weak_closure_N": 0, "L_max": 0},
    "bands": {"L": 4, "n_k": 65},
    "amplitude": {"box": [16.0], "n": [256], "dt": 1e-3, "T": 0.5, "checkpoint_every": 100,
                  "initial": [{"center": [0.0], "width": 0.5, "amplitude": 1.0}]},
    "nls": {"p_cell": 16, "q": 8, "dt_coeff": 0.0625, "dt_power": 2, "T": 0.5, "checkpoint_every": 0},
    "convergence": {"q": [8, 16, 32], "t_star": 0.5, "s": 1, "workers": 1,
                    "slope_window": [0.75, 1.25], "max_fit_residual": 0.1},
}


class ConfigError(ValueError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data):
        cfg = cls(_merge(DEFAULTS, data))
        cfg.validate()
        return cfg

    def section(self, name):
        return self.raw[name]

    @property
    def output(self):
        return Path(self.raw["output"])

    @property
    def kappa(self):
        return float(self.raw["kappa"])

    def lattice(self):
        return Lattice(np.array(self.raw["lattice"]["basis"], dtype=float))

    def potential(self):
        spec = self.raw["potential"]
        lat = self.lattice()
        kind = spec.get("kind", "fourier")
        if kind == "free":
            return PotentialSpec.free(lat)
        if kind == "mathieu":
            vhat = float(spec.get("vhat", 0.5))
            terms = [(tuple(int(i == j) for j in range(lat.dim)), 2 * vhat) for i in range(lat.dim)]
            return PotentialSpec.from_cos(lat, terms)
        if kind == "fourier":
            coeffs = {}
            for c in spec.get("coefficients", []):
                idx = tuple(c["index"])
                coeffs[idx] = coeffs.get(idx, 0) + complex(c.get("re", 0.0), c.get("im", 0.0))
            pot = PotentialSpec.from_cos(lat, [(tuple(c["index"]), float(c["v"])) for c in spec.get("cos", [])],
                                         constant=float(spec.get("constant", 0.0)))
            for idx, val in pot.coefficients.items():
                coeffs[idx] = coeffs.get(idx, 0) + val
            return PotentialSpec(lat, coeffs)
        raise ConfigError(f"unknown potential kind {kind!r}")

    def basis(self):
        return PlaneWaveBasis.from_index_cutoff(self.lattice(), int(self.raw["basis"]["n_max"]))

    def validate(self):
        d = self.lattice().dim
        modes = self.raw["modes"]
        if "search_band" not in modes:
            for m in modes["list"]:
                if len(m["k"]) != d or int(m["band"]) < 1:
                    raise ConfigError(f"bad mode entry {m}")
        conv = self.raw["convergence"]
        qs = [int(q) for q in conv["q"]]
        if any(b <= a for a, b in zip(qs, qs[1:])):
            raise ConfigError("eps list must be strictly decreasing (q strictly increasing)")
        if conv["t_star"] > self.raw["amplitude"]["T"] + 1e-12:
            raise ConfigError("t_star exceeds the amplitude trajectory horizon")
        if len(self.raw["amplitude"]["box"]) != d or len(self.raw["amplitude"]["n"]) != d:
            raise ConfigError("amplitude box and n need one entry per dimension")
