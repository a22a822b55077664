"""Resonant four-wave amplitude system on a periodic macroscopic box.

    i d_t a_m + i theta_m . grad a_m = sum_{(p,q,r,m) resonant} kappa_pqrm a_p conj(a_q) a_r

Transport is solved exactly in Fourier space, the pointwise cubic flow by RK4,
and the two are combined by Strang splitting.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .errors import NonFiniteField


@dataclass(frozen=True)
class MacroGrid:
    lengths: tuple
    shape: tuple

    def __post_init__(self):
        lengths = tuple(float(x) for x in np.atleast_1d(self.lengths))
        shape = tuple(int(n) for n in np.atleast_1d(self.shape))
        if len(lengths) != len(shape):
            raise ValueError("lengths and shape must have one entry per dimension")
        for n in shape:
            if n < 2 or n & (n - 1):
                raise ValueError(f"grid size {n} is not a power of two")
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self):
        return len(self.shape)

    @property
    def spacing(self):
        return tuple(L / n for L, n in zip(self.lengths, self.shape))

    @property
    def cell(self):
        return float(np.prod(self.spacing))

    @property
    def volume(self):
        return float(np.prod(self.lengths))

    def axes(self):
        return [-L / 2 + np.arange(n) * L / n for L, n in zip(self.lengths, self.shape)]

    def coords(self):
        """Coordinate arrays of shape ``(d, *shape)``."""
        return np.array(np.meshgrid(*self.axes(), indexing="ij"))

    def wavenumbers(self):
        """Fourier wavenumbers of shape ``(d, *shape)`` in FFT order."""
        ks = [2 * np.pi * np.fft.fftfreq(n, L / n) for L, n in zip(self.lengths, self.shape)]
        return np.array(np.meshgrid(*ks, indexing="ij"))

    def integrate(self, values):
        return self.cell * np.sum(values, axis=tuple(range(-self.dim, 0)))

    def gradient(self, f):
        """Spectral gradient, shape ``(d, *f.shape)``."""
        axes = tuple(range(-self.dim, 0))
        fh = np.fft.fftn(f, axes=axes)
        return np.array([np.fft.ifftn(1j * xi * fh, axes=axes) for xi in self.wavenumbers()])


def gaussian(grid, center, width, amplitude=1.0, phase_k=None):
    """``amplitude * exp(-|x-c|^2 / (2 width^2) + i phase_k.(x-c))``."""
    x = grid.coords()
    c = np.reshape(np.atleast_1d(center).astype(float), (-1,) + (1,) * grid.dim)
    r2 = np.sum((x - c) ** 2, axis=0)
    out = amplitude * np.exp(-r2 / (2 * width ** 2)).astype(complex)
    if phase_k is not None:
        pk = np.reshape(np.atleast_1d(phase_k).astype(float), (-1,) + (1,) * grid.dim)
        out = out * np.exp(1j * np.sum(pk * (x - c), axis=0))
    return out


class CubicTerm:
    """Pointwise evaluation of ``N_m(a) = sum kappa_pqrm a_p conj(a_q) a_r``."""

    def __init__(self, table, M):
        self.M = M
        self.terms = [[] for _ in range(M)]
        for (p, q, r, m) in table.quadruples():
            self.terms[m].append((p, q, r, table[(p, q, r, m)]))

    def __call__(self, a):
        out = np.zeros_like(a)
        conj = a.conj()
        for m, terms in enumerate(self.terms):
            acc = out[m]
            for p, q, r, kappa in terms:
                acc += kappa * a[p] * conj[q] * a[r]
        return out


@dataclass(frozen=True)
class AmplitudeState:
    t: float
    fields: np.ndarray
    grid: MacroGrid
    velocities: np.ndarray
    table: object
    energies: np.ndarray | None = None

    def __post_init__(self):
        fields = np.asarray(self.fields, dtype=complex)
        if fields.shape[1:] != self.grid.shape:
            raise ValueError(f"field shape {fields.shape[1:]} does not match grid {self.grid.shape}")
        vel = np.asarray(self.velocities, dtype=float).reshape(len(fields), -1)
        if vel.shape[1] != self.grid.dim:
            raise ValueError("group velocities must have the grid dimension")
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "velocities", vel)

    @classmethod
    def from_system(cls, system, table, grid, fields, t=0.0):
        fields = np.asarray(fields, dtype=complex)
        if len(fields) != system.size:
            raise ValueError(f"expected {system.size} fields, got {len(fields)}")
        return cls(t, fields, grid, system.velocities, table, np.asarray(system.energies))

    @property
    def M(self):
        return len(self.fields)

    @property
    def cubic(self):
        term = self.__dict__.get("_cubic")
        if term is None:
            term = CubicTerm(self.table, self.M)
            object.__setattr__(self, "_cubic", term)
        return term

    def with_fields(self, fields, t):
        new = replace(self, fields=fields, t=t)
        object.__setattr__(new, "_cubic", self.cubic)
        return new


def transport_half_step(state, dt):
    """Exact transport ``a_m(x) -> a_m(x - theta_m dt)`` over a time ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    axes = tuple(range(1, state.grid.dim + 1))
    xi = state.grid.wavenumbers()
    phase = np.exp(-1j * np.tensordot(state.velocities, xi, axes=(1, 0)) * dt)
    fields = np.fft.ifftn(np.fft.fftn(state.fields, axes=axes) * phase, axes=axes)
    return state.with_fields(fields, state.t)


def nonlinear_step(state, dt, step=0):
    """One RK4 step of ``i da/dt = N(a)`` at every grid point."""
    N = state.cubic
    a = state.fields

    def rhs(b):
        return -1j * N(b)

    k1 = rhs(a)
    k2 = rhs(a + 0.5 * dt * k1)
    k3 = rhs(a + 0.5 * dt * k2)
    k4 = rhs(a + dt * k3)
    out = a + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteField(step)
    return state.with_fields(out, state.t)


def strang_step(state, dt, step=0):
    s = transport_half_step(state, dt / 2)
    s = nonlinear_step(s, dt, step)
    s = transport_half_step(s, dt / 2)
    return s.with_fields(s.fields, state.t + dt)


def step_count(T, dt):
    n = int(round(T / dt))
    if n < 0 or abs(n * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    return n


def strang_evolve(state, T, dt, checkpoint_every=None):
    """Evolve to ``state.t + T``; returns the list of checkpointed states (first and last included)."""
    n = step_count(T, dt)
    t0 = state.t
    out = [state]
    for i in range(n):
        state = strang_step(state, dt, i)
        state = state.with_fields(state.fields, t0 + (i + 1) * dt)
        if checkpoint_every and (i + 1) % checkpoint_every == 0 and i + 1 < n:
            out.append(state)
    if n:
        out.append(state)
    return out


def compatible_weights(quadruples, M):
    """Orthonormal basis (rows) of weights with ``w_p - w_q + w_r = w_m`` on every quadruple."""
    rows = []
    for p, q, r, m in quadruples:
        row = np.zeros(M)
        row[p] += 1
        row[q] -= 1
        row[r] += 1
        row[m] -= 1
        if np.any(row):
            rows.append(row)
    if not rows:
        return np.eye(M)
    return scipy.linalg.null_space(np.array(rows)).T


@dataclass
class ConservedReport:
    t: float
    norms: np.ndarray
    mass: float
    I: float
    I_tilde: np.ndarray
    I_tilde_scale: np.ndarray
    H_red: float
    I_trans: np.ndarray

    def row(self):
        return [self.t, self.mass, self.I, self.H_red, *self.I_trans, *self.I_tilde, *self.norms]

    def header(self):
        d, w, M = len(self.I_trans), len(self.I_tilde), len(self.norms)
        return (["t", "mass", "I", "H_red"] + [f"I_trans_{j}" for j in range(d)]
                + [f"I_tilde_{j}" for j in range(w)] + [f"norm_{m}" for m in range(M)])


def conserved_report(state, weights=None):
    grid = state.grid
    a = state.fields
    dens = grid.integrate(np.abs(a) ** 2)
    energies = state.energies if state.energies is not None else np.zeros(state.M)
    if weights is None:
        weights = compatible_weights(state.table.quadruples(), state.M)
    grads = np.array([grid.gradient(f) for f in a])          # (M, d, *shape)
    mom = np.array([grid.integrate(np.imag(a[m].conj() * grads[m])) for m in range(state.M)])
    transport = float(np.sum([state.velocities[m] @ mom[m] for m in range(state.M)]))
    quartic = np.real(np.sum(a.conj() * state.cubic(a), axis=0)) / 2
    return ConservedReport(
        t=state.t,
        norms=np.sqrt(dens),
        mass=float(np.sum(dens)),
        I=float(energies @ dens),
        I_tilde=weights @ dens,
        I_tilde_scale=np.abs(weights) @ dens,
        H_red=transport + float(grid.integrate(quartic)),
        I_trans=np.sum(mom, axis=0),
    )


def drift(series):
    """Largest relative drift of each conserved quantity along a list of reports."""
    first = series[0]

    def rel(get, scale):
        ref = max(abs(scale), 1e-300)
        return max(abs(get(r) - get(first)) for r in series) / ref

    out = {
        "mass": rel(lambda r: r.mass, first.mass),
        "I": rel(lambda r: r.I, abs(first.I)),
        "H_red": rel(lambda r: r.H_red, abs(first.H_red)),
    }
    for j in range(len(first.I_tilde)):
        out[f"I_tilde_{j}"] = rel(lambda r, j=j: r.I_tilde[j], first.I_tilde_scale[j])
    return out


def boundary_leakage(state, margin=0.1):
    """Largest modulus inside the outer ``margin`` fraction of the box (wrap-around indicator)."""
    x = state.grid.coords()
    half = np.reshape(np.array(state.grid.lengths) / 2, (-1,) + (1,) * state.grid.dim)
    edge = np.any(np.abs(x) >= (1 - 2 * margin) * half, axis=0)
    return float(np.max(np.abs(state.fields[:, edge]))) if np.any(edge) else 0.0


def resample(f, shape):
    """Trigonometric interpolation of periodic samples onto a finer grid with the same origin."""
    f = np.asarray(f, dtype=complex)
    d = len(shape)
    axes = tuple(range(f.ndim - d, f.ndim))
    if f.shape[f.ndim - d:] == tuple(shape):
        return f.copy()
    fh = np.fft.fftn(f, axes=axes)
    for ax, n_new in zip(axes, shape):
        n_old = fh.shape[ax]
        if n_new < n_old:
            raise ValueError("resample only refines grids")
        half = n_old // 2
        lower = np.take(fh, range(half), axis=ax)
        upper = np.take(fh, range(half + 1, n_old), axis=ax)
        nyq = np.take(fh, [half], axis=ax) / 2
        pad_shape = list(fh.shape)
        pad_shape[ax] = n_new - n_old - 1
        fh = np.concatenate([lower, nyq, np.zeros(pad_shape, complex), nyq, upper], axis=ax)
    scale = np.prod(shape) / np.prod([f.shape[a] for a in axes])
    return np.fft.ifftn(fh, axes=axes) * scale
