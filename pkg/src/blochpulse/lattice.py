"""Periodicity lattice, its dual, the centered unit cell and the Brillouin zone.

Dual vectors obey ``dual[i] @ basis[j] == 2*pi*delta_ij`` so that plane waves
``exp(1j * g @ y)`` with ``g`` in the dual lattice are exactly periodic.
Internally wave vectors are handled in fractional coordinates with respect to
the dual basis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import SingularBasis

TWO_PI = 2.0 * np.pi
# fractional coordinates this close to +1/2 are treated as the zone-boundary tie
TIE_TOL = 1e-12


def dual_basis(basis):
    """Rows of the returned array are the dual vectors of the rows of ``basis``."""
    basis = np.atleast_2d(np.asarray(basis, dtype=float))
    d = basis.shape[0]
    if basis.shape != (d, d):
        raise SingularBasis(f"basis must be a square d x d array, got shape {basis.shape}")
    scale = max(np.max(np.linalg.norm(basis, axis=1)), 1e-300)
    gram = np.linalg.det(basis @ basis.T)
    if not gram > 1e-12 * scale ** (2 * d):
        raise SingularBasis(f"basis vectors are linearly dependent (Gram determinant {gram:.3e})")
    return TWO_PI * np.linalg.inv(basis).T


@dataclass(frozen=True)
class Lattice:
    basis: np.ndarray
    dual: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        basis = np.atleast_2d(np.asarray(self.basis, dtype=float))
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "dual", dual_basis(basis))

    @classmethod
    def cubic(cls, d=1, a=1.0):
        return cls(a * np.eye(d))

    @property
    def dim(self):
        return self.basis.shape[0]

    @property
    def cell_volume(self):
        return abs(np.linalg.det(self.basis))

    @property
    def is_orthogonal(self):
        off = self.basis - np.diag(np.diag(self.basis))
        return bool(np.all(off == 0.0))

    def to_fractional(self, k):
        """Fractional coordinates of ``k`` with respect to the dual basis."""
        return np.asarray(k, dtype=float) @ self.basis.T / TWO_PI

    def from_fractional(self, f):
        return np.asarray(f, dtype=float) @ self.dual

    def dual_vector(self, index):
        return np.asarray(index, dtype=float) @ self.dual

    def __eq__(self, other):
        return isinstance(other, Lattice) and np.array_equal(self.basis, other.basis)

    def __hash__(self):
        return hash(self.basis.tobytes())


def wrap_fractional(f):
    """Wrap fractional coordinates into ``[-1/2, 1/2)``; returns ``(wrapped, shift)``."""
    f = np.asarray(f, dtype=float)
    shifted = f + 0.5
    shift = np.floor(shifted)
    # snap values a rounding error below an integer (the +1/2 tie) onto it
    near = np.abs(shifted - np.rint(shifted)) < TIE_TOL
    shift = np.where(near, np.rint(shifted), shift)
    wrapped = f - shift
    wrapped = np.where(near, -0.5, wrapped)
    return wrapped, shift.astype(int)


def fractional_distance(f1, f2):
    """Componentwise periodic distance between fractional coordinates."""
    diff = np.asarray(f1, dtype=float) - np.asarray(f2, dtype=float)
    return np.abs(diff - np.rint(diff))


@dataclass(frozen=True)
class BzPoint:
    k: np.ndarray
    frac: np.ndarray
    canonical: bool = True

    def __repr__(self):
        return f"BzPoint(frac={np.round(self.frac, 12).tolist()})"


def wrap_to_bz(k, lattice):
    """Map ``k`` into the centered Brillouin zone.

    Returns ``(point, shift)`` with ``k == point.k + shift @ lattice.dual``.
    """
    frac = np.atleast_1d(lattice.to_fractional(k))
    wrapped, shift = wrap_fractional(frac)
    point = BzPoint(k=lattice.from_fractional(wrapped), frac=wrapped, canonical=True)
    return point, tuple(int(s) for s in shift)


def bz_point_from_fractional(frac, lattice):
    point, _ = wrap_to_bz(lattice.from_fractional(np.atleast_1d(frac)), lattice)
    return point


def cell_grid(lattice, n_per_dim):
    """Uniform sample points of the centered cell and the matching quadrature weight.

    Fractional coordinates run over ``-1/2 + i/n``; points are returned with shape
    ``(n**d, d)`` in C order of the fractional index.
    """
    if n_per_dim < 2:
        raise ValueError("n_per_dim must be at least 2")
    d = lattice.dim
    ticks = -0.5 + np.arange(n_per_dim) / n_per_dim
    frac = np.array(list(product(ticks, repeat=d)), dtype=float).reshape(-1, d)
    points = frac @ lattice.basis
    weight = lattice.cell_volume / n_per_dim ** d
    return points, weight
