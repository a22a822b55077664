"""Plane-wave solution of the Bloch eigenvalue problem.

A Bloch function is stored as coefficients ``c_g`` of ``chi(y) = sum_g c_g exp(i g.y)``
over a finite set of dual-lattice vectors. The shifted Hamiltonian

    H(k) = 1/2 (-i grad_y + k)^2 + V(y)

has matrix entries ``1/2 |k+g|^2 delta_gg' + Vhat_{g-g'}`` in that basis.
Coefficients are normalized so that the L2 norm over the unit cell is one,
i.e. ``sum |c_g|^2 = 1/|Y|``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from itertools import product

import numpy as np
import scipy.linalg

from .errors import CutoffTooSmall, DegenerateBand, NearResonance
from .lattice import BzPoint, Lattice, cell_grid, wrap_to_bz

DEGENERACY_TOL = 1e-8
RESOLVENT_TOL = 1e-6


@dataclass(frozen=True)
class PotentialSpec:
    """Fourier coefficients ``{dual index tuple: Vhat}`` of a real periodic potential."""

    lattice: Lattice
    coefficients: dict

    def __post_init__(self):
        coeffs = {}
        for idx, val in self.coefficients.items():
            idx = tuple(int(i) for i in np.atleast_1d(idx))
            if len(idx) != self.lattice.dim:
                raise ValueError(f"index {idx} does not match lattice dimension {self.lattice.dim}")
            coeffs[idx] = complex(val)
        for idx, val in coeffs.items():
            partner = coeffs.get(tuple(-i for i in idx))
            if partner is None or abs(partner - np.conj(val)) > 1e-14 * max(1.0, abs(val)):
                raise ValueError(f"coefficients violate Vhat(-g) = conj(Vhat(g)) at {idx}")
        object.__setattr__(self, "coefficients", coeffs)

    @classmethod
    def free(cls, lattice):
        return cls(lattice, {})

    @classmethod
    def from_cos(cls, lattice, terms, constant=0.0):
        """``V(y) = constant + sum v cos(g.y)`` for ``(index, v)`` pairs."""
        coeffs = {}
        zero = (0,) * lattice.dim
        if constant:
            coeffs[zero] = complex(constant)
        for idx, v in terms:
            idx = tuple(int(i) for i in np.atleast_1d(idx))
            neg = tuple(-i for i in idx)
            coeffs[idx] = coeffs.get(idx, 0) + v / 2
            coeffs[neg] = coeffs.get(neg, 0) + v / 2
        return cls(lattice, coeffs)

    @classmethod
    def mathieu(cls, vhat=0.5, d=1):
        """``V(y) = 2 vhat cos(2 pi y)`` on the unit lattice (``Vhat(+-2pi) = vhat``)."""
        lattice = Lattice.cubic(d)
        terms = [(tuple(1 if j == i else 0 for j in range(d)), 2 * vhat) for i in range(d)]
        return cls.from_cos(lattice, terms)

    @property
    def max_index(self):
        if not self.coefficients:
            return np.zeros(self.lattice.dim, dtype=int)
        return np.max(np.abs(np.array(list(self.coefficients))), axis=0)

    @property
    def sup_bound(self):
        """Upper bound for ``max |V|`` (sum of coefficient moduli)."""
        return float(sum(abs(v) for v in self.coefficients.values()))

    def __call__(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        out = np.zeros(y.shape[0], dtype=complex)
        for idx, val in self.coefficients.items():
            out += val * np.exp(1j * y @ self.lattice.dual_vector(idx))
        return out.real

    def digest(self):
        payload = {
            "basis": self.lattice.basis.tolist(),
            "coefficients": sorted([list(k), v.real, v.imag] for k, v in self.coefficients.items()),
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def __hash__(self):
        return hash(self.digest())

    def __eq__(self, other):
        return isinstance(other, PotentialSpec) and self.digest() == other.digest()


@dataclass(frozen=True)
class PlaneWaveBasis:
    lattice: Lattice
    g_max: float
    indices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lat = self.lattice
        bound = np.ceil(self.g_max * np.linalg.norm(lat.basis, axis=1) / (2 * np.pi)).astype(int)
        ranges = [range(-b, b + 1) for b in bound]
        kept = []
        for idx in product(*ranges):  # lexicographic by construction
            if np.linalg.norm(lat.dual_vector(idx)) <= self.g_max * (1 + 1e-12):
                kept.append(idx)
        object.__setattr__(self, "indices", np.array(kept, dtype=int).reshape(-1, lat.dim))

    @classmethod
    def from_index_cutoff(cls, lattice, n_max):
        """Basis containing ``n_max`` shells along the shortest dual vector."""
        g = np.min(np.linalg.norm(lattice.dual, axis=1))
        return cls(lattice, n_max * g)

    @property
    def size(self):
        return len(self.indices)

    @cached_property
    def vectors(self):
        return self.indices @ self.lattice.dual

    @cached_property
    def position(self):
        return {tuple(i): n for n, i in enumerate(self.indices.tolist())}

    @property
    def max_index(self):
        return np.max(np.abs(self.indices), axis=0)

    def zero_position(self):
        return self.position[(0,) * self.lattice.dim]

    def plane_waves(self, points):
        """Matrix ``exp(i g.y)`` of shape ``(len(points), D)``."""
        points = np.atleast_2d(points)
        return np.exp(1j * points @ self.vectors.T)

    def __hash__(self):
        return hash((hash(self.lattice), self.g_max))

    def __eq__(self, other):
        return (isinstance(other, PlaneWaveBasis) and self.lattice == other.lattice
                and self.g_max == other.g_max)


def _as_bz_point(k, lattice):
    if isinstance(k, BzPoint):
        return k
    point, _ = wrap_to_bz(np.atleast_1d(np.asarray(k, dtype=float)), lattice)
    return point


def assemble_hamiltonian(k, pot, basis):
    k = _as_bz_point(k, basis.lattice).k
    diff = basis.indices[:, None, :] - basis.indices[None, :, :]
    reach = {tuple(v) for v in diff.reshape(-1, basis.lattice.dim).tolist()}
    for idx, val in pot.coefficients.items():
        if val != 0 and idx not in reach:
            raise CutoffTooSmall(idx)
    kin = 0.5 * np.sum((k + basis.vectors) ** 2, axis=1)
    H = np.diag(kin).astype(complex)
    for idx, val in pot.coefficients.items():
        mask = np.all(diff == np.array(idx), axis=2)
        H[mask] += val
    return H


@dataclass(frozen=True)
class BlochPair:
    k: BzPoint
    band: int
    energy: float
    coeffs: np.ndarray
    gap_below: float
    gap_above: float
    potential: PotentialSpec = field(repr=False)
    basis: PlaneWaveBasis = field(repr=False)
    group_velocity: np.ndarray | None = None

    @property
    def lattice(self):
        return self.basis.lattice

    @property
    def sigma(self):
        return self.k, self.energy

    def is_degenerate(self, tol=DEGENERACY_TOL):
        scale = tol * max(1.0, abs(self.energy))
        return min(self.gap_below, self.gap_above) < scale


def _fix_gauge(vec):
    mod = np.abs(vec)
    top = np.flatnonzero(mod >= mod.max() * (1 - 1e-10))[0]
    return vec * (np.conj(vec[top]) / mod[top])


def _tie_order(evals, evecs):
    order = np.arange(len(evals))
    i = 0
    while i < len(evals):
        j = i + 1
        while j < len(evals) and abs(evals[j] - evals[i]) <= 1e-12 * (1 + abs(evals[i])):
            j += 1
        if j - i > 1:
            block = list(range(i, j))
            block.sort(key=lambda n: tuple(np.round(-np.abs(evecs[:, n]), 10)))
            order[i:j] = block
        i = j
    return order


def eigensystem(k, pot, basis):
    """All eigenvalues (ascending) and unit eigenvectors of ``H(k)``."""
    H = assemble_hamiltonian(k, pot, basis)
    evals, evecs = np.linalg.eigh(H)
    order = _tie_order(evals, evecs)
    return evals[order], evecs[:, order]


def band_energies(k, pot, basis, L=None):
    evals = np.linalg.eigvalsh(assemble_hamiltonian(k, pot, basis))
    return evals if L is None else evals[:L]


def solve_bands(k, pot, basis, L, degeneracy_tol=DEGENERACY_TOL, check=True):
    """First ``L`` Bloch pairs at ``k``; raises DegenerateBand unless ``check`` is False."""
    if L > basis.size:
        raise ValueError(f"requested {L} bands from a basis of size {basis.size}")
    point = _as_bz_point(k, basis.lattice)
    evals, evecs = eigensystem(point, pot, basis)
    norm = 1.0 / np.sqrt(basis.lattice.cell_volume)
    pairs = []
    for n in range(L):
        below = evals[n] - evals[n - 1] if n > 0 else np.inf
        above = evals[n + 1] - evals[n] if n + 1 < len(evals) else np.inf
        pair = BlochPair(k=point, band=n + 1, energy=float(evals[n]),
                         coeffs=norm * _fix_gauge(evecs[:, n]),
                         gap_below=float(below), gap_above=float(above),
                         potential=pot, basis=basis)
        if check and pair.is_degenerate(degeneracy_tol):
            raise DegenerateBand(n + 1, point.k, min(below, above))
        pairs.append(pair)
    return pairs


def bloch_pair(k, band, pot, basis, degeneracy_tol=DEGENERACY_TOL):
    """Single non-degenerate Bloch pair with its group velocity attached."""
    point = _as_bz_point(k, basis.lattice)
    pair = solve_bands(point, pot, basis, band, check=False)[band - 1]
    if pair.is_degenerate(degeneracy_tol):
        raise DegenerateBand(band, point.k, min(pair.gap_below, pair.gap_above))
    return replace(pair, group_velocity=group_velocity(pair, degeneracy_tol))


def group_velocity(pair, degeneracy_tol=DEGENERACY_TOL):
    """Hellmann-Feynman gradient of the band energy."""
    if pair.is_degenerate(degeneracy_tol):
        raise DegenerateBand(pair.band, pair.k.k, min(pair.gap_below, pair.gap_above))
    weights = np.abs(pair.coeffs) ** 2 * pair.lattice.cell_volume
    return (pair.k.k + pair.basis.vectors).T @ weights


def bloch_realspace(pair, points):
    return pair.basis.plane_waves(points) @ pair.coeffs


def inner(f, g, basis):
    """L2 inner product over the unit cell of two coefficient vectors (conjugate-linear in f)."""
    return basis.lattice.cell_volume * np.vdot(f, g)


def resolvent_apply(k, energy, pot, basis, F, tol=RESOLVENT_TOL):
    """Solve ``(E - H(k)) X = F``; refuses when ``E`` is within ``tol`` of the spectrum."""
    H = assemble_hamiltonian(k, pot, basis)
    evals = np.linalg.eigvalsh(H)
    dist = float(np.min(np.abs(evals - energy)))
    if dist <= tol:
        raise NearResonance(dist)
    A = energy * np.eye(basis.size) - H
    return scipy.linalg.solve(A, np.asarray(F, dtype=complex), assume_a="her")


def deflated_solve(pair, F, degeneracy_tol=DEGENERACY_TOL):
    """Unique ``X`` orthogonal to ``chi`` with ``(E - H) X = (1 - P) F``."""
    if pair.is_degenerate(degeneracy_tol):
        raise DegenerateBand(pair.band, pair.k.k, min(pair.gap_below, pair.gap_above))
    basis = pair.basis
    chi = pair.coeffs
    F = np.asarray(F, dtype=complex)
    rhs = F - inner(chi, F, basis) * chi
    H = assemble_hamiltonian(pair.k, pair.potential, basis)
    unit = chi * np.sqrt(basis.lattice.cell_volume)
    # shifting the kernel direction makes the operator invertible without touching chi-perp
    shift = max(1.0, abs(pair.energy))
    A = pair.energy * np.eye(basis.size) - H + shift * np.outer(unit, unit.conj())
    X = scipy.linalg.solve(A, rhs, assume_a="her")
    return X - inner(chi, X, basis) * chi


class CellTransform:
    """Exact sampling of band-limited cell functions on a uniform cell grid."""

    def __init__(self, basis, n_per_dim):
        self.basis = basis
        self.n = n_per_dim
        self.points, self.weight = cell_grid(basis.lattice, n_per_dim)
        self.waves = basis.plane_waves(self.points)

    def to_cell(self, coeffs):
        return self.waves @ coeffs

    def to_coeffs(self, values):
        return self.waves.conj().T @ values * (self.weight / self.basis.lattice.cell_volume)

    def integrate(self, values):
        return self.weight * np.sum(values)

    def umklapp(self, shift_index):
        """Samples of ``exp(i gamma.y)`` for the dual vector with the given index."""
        gamma = self.basis.lattice.dual_vector(shift_index)
        return np.exp(1j * self.points @ gamma)
