"""Split-step Fourier solver for the semiclassically scaled cubic NLS

    i eps u_t = -eps^2/2 Lap u + V(x/eps) u + eps kappa |u|^2 u

on a periodic box tiled exactly by eps-cells (eps = 1/q).

The potential and the cubic term are integrated together: that sub-flow keeps
|u| fixed, so ``u -> exp(-i dt (V/eps + kappa |u|^2)) u`` is exact. All splitting
error comes from the commutator with the kinetic step.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GridIncommensurate, NonFiniteField
from .storage import load_field, save_field

P_CELL = 16


@dataclass(frozen=True)
class FineGrid:
    potential: object          # PotentialSpec
    lengths: tuple             # box length per axis
    q: int                     # eps = 1/q
    p_cell: int = P_CELL

    def __post_init__(self):
        lat = self.potential.lattice
        lengths = tuple(float(x) for x in np.atleast_1d(self.lengths))
        if len(lengths) != lat.dim:
            raise ValueError("box lengths must match the lattice dimension")
        if not lat.is_orthogonal:
            raise GridIncommensurate("fine grids need an orthogonal lattice")
        if self.q < 1 or self.p_cell < 2:
            raise ValueError("q and p_cell must be positive integers")
        cells = []
        for L, a in zip(lengths, np.diag(lat.basis)):
            c = L * self.q / a
            if abs(c - round(c)) > 1e-9 or round(c) < 1:
                raise GridIncommensurate(f"box length {L} is not tiled by eps-cells of size {a / self.q}")
            cells.append(int(round(c)))
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "cells", tuple(cells))

    @property
    def eps(self):
        return 1.0 / self.q

    @property
    def dim(self):
        return len(self.lengths)

    @property
    def shape(self):
        return tuple(c * self.p_cell for c in self.cells)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def volume(self):
        return float(np.prod(self.lengths))

    @property
    def cell(self):
        return self.volume / self.size

    def axes(self):
        return [-L / 2 + np.arange(n) * L / n for L, n in zip(self.lengths, self.shape)]

    def coords(self):
        return np.array(np.meshgrid(*self.axes(), indexing="ij"))

    def wavenumbers(self):
        ks = [2 * np.pi * np.fft.fftfreq(n, L / n) for L, n in zip(self.lengths, self.shape)]
        return np.array(np.meshgrid(*ks, indexing="ij"))

    def p_squared(self):
        return np.sum(self.wavenumbers() ** 2, axis=0)

    def potential_samples(self):
        """``V(x/eps)`` on the grid."""
        x = self.coords().reshape(self.dim, -1).T / self.eps
        return self.potential(x).reshape(self.shape)

    def check_wavevector(self, k):
        """Raise unless ``k/eps`` is an exact grid wavenumber."""
        for kj, L in zip(np.atleast_1d(k), self.lengths):
            j = kj / self.eps * L / (2 * np.pi)
            if abs(j - round(j)) > 1e-8:
                raise GridIncommensurate(f"wave vector component {kj} is not a grid wavenumber at eps={self.eps}")

    def integrate(self, values):
        return self.cell * np.sum(values)

    def meta(self):
        return {"lengths": list(self.lengths), "q": self.q, "eps": self.eps, "p_cell": self.p_cell,
                "shape": list(self.shape), "potential": self.potential.digest()}


@dataclass(frozen=True)
class WaveField:
    t: float
    u: np.ndarray
    grid: FineGrid
    kappa: float
    mass0: float = field(default=None)

    def __post_init__(self):
        u = np.asarray(self.u, dtype=complex)
        if u.shape != self.grid.shape:
            raise ValueError(f"field shape {u.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(u)):
            raise NonFiniteField(0, "initial field has non-finite samples")
        object.__setattr__(self, "u", u)
        if self.mass0 is None:
            object.__setattr__(self, "mass0", mass(self))

    @property
    def eps(self):
        return self.grid.eps


class SplitStepper:
    """Precomputed phase factors for repeated Strang steps with a fixed ``dt``."""

    def __init__(self, grid, kappa, dt):
        self.grid = grid
        self.kappa = kappa
        self.dt = dt
        eps = grid.eps
        p2 = grid.p_squared()
        self.half_kinetic = np.exp(-1j * eps * p2 * (dt / 2) / 2)
        self.full_kinetic = self.half_kinetic ** 2
        self.v_over_eps = grid.potential_samples() / eps

    def phase(self, u):
        return u * np.exp(-1j * self.dt * (self.v_over_eps + self.kappa * np.abs(u) ** 2))

    def kinetic(self, u, factor):
        return np.fft.ifftn(np.fft.fftn(u) * factor)

    def step(self, u):
        u = self.kinetic(u, self.half_kinetic)
        u = self.phase(u)
        return self.kinetic(u, self.half_kinetic)


def split_step(wf, dt):
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = SplitStepper(wf.grid, wf.kappa, dt).step(wf.u)
    if not np.all(np.isfinite(u)):
        raise NonFiniteField(1)
    return replace(wf, t=wf.t + dt, u=u)


def default_dt(grid, c_t=0.1):
    return c_t * grid.eps * min(1.0, 1.0 / max(grid.potential.sup_bound, 1e-300))


def evolve(wf, T, dt, checkpoint_every=None, on_checkpoint=None):
    """Strang-split evolution over ``T``; returns checkpointed fields (first and last included).

    Consecutive kinetic half steps are fused; fields are synchronized only at
    checkpoints.
    """
    n = int(round(T / dt))
    if n < 0 or abs(n * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    stepper = SplitStepper(wf.grid, wf.kappa, dt)
    out = [wf]
    if n == 0:
        return out
    t0 = wf.t
    u = stepper.kinetic(wf.u, stepper.half_kinetic)
    for i in range(1, n + 1):
        u = stepper.phase(u)
        sync = i == n or (checkpoint_every and i % checkpoint_every == 0)
        if sync:
            u_out = stepper.kinetic(u, stepper.half_kinetic)
            if not np.all(np.isfinite(u_out)):
                raise NonFiniteField(i)
            snap = replace(wf, t=t0 + i * dt, u=u_out)
            out.append(snap)
            if on_checkpoint is not None:
                on_checkpoint(snap)
            if i < n:
                u = stepper.kinetic(u_out, stepper.half_kinetic)
        else:
            u = stepper.kinetic(u, stepper.full_kinetic)
            if not np.isfinite(u.flat[0]) or (i % 64 == 0 and not np.all(np.isfinite(u))):
                raise NonFiniteField(i)
    return out


def mass(wf):
    return float(wf.grid.integrate(np.abs(wf.u) ** 2))


def energy(wf):
    g = wf.grid
    eps = g.eps
    uh = np.fft.fftn(wf.u)
    grad2 = sum(np.abs(np.fft.ifftn(1j * xi * uh)) ** 2 for xi in g.wavenumbers())
    dens = np.abs(wf.u) ** 2
    return float(g.integrate(eps ** 2 / 2 * grad2 + g.potential_samples() * dens
                             + eps * wf.kappa / 2 * dens ** 2))


def hs_eps_norm(wf_or_u, s, grid=None):
    """Scaled Sobolev norm with Fourier weight ``(1 + |eps p|^2)^s``."""
    if isinstance(wf_or_u, WaveField):
        u, grid = wf_or_u.u, wf_or_u.grid
    else:
        u = np.asarray(wf_or_u)
    if s < 0:
        raise ValueError("s must be non-negative")
    uh = np.fft.fftn(u) / grid.size
    weight = (1 + grid.eps ** 2 * grid.p_squared()) ** s
    return float(np.sqrt(grid.volume * np.sum(weight * np.abs(uh) ** 2)))


def save_checkpoint(path, wf):
    meta = dict(wf.grid.meta(), t=wf.t, kappa=wf.kappa)
    return save_field(path, wf.u, meta)


def load_checkpoint(path, potential):
    u, meta = load_field(path)
    if meta["potential"] != potential.digest():
        raise ValueError("checkpoint was written for a different potential")
    grid = FineGrid(potential, tuple(meta["lengths"]), meta["q"], meta["p_cell"])
    return WaveField(meta["t"], u, grid, meta["kappa"])

