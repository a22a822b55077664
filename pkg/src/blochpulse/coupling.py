"""Effective four-wave coupling constants of a mode system.

For a resonant quadruple the wave vectors only add up modulo the dual lattice,
``k_p - k_q + k_r - k_m = gamma``. The projection of the cubic term onto mode
``m`` then carries the phase ``exp(i gamma.y)``:

    kappa_pqrm = kappa * int_Y chi_p conj(chi_q) chi_r conj(chi_m) exp(i gamma.y) dy
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .bloch import CellTransform
from .errors import ResolutionTooLow
from .modes import momentum_shift, resonant_quadruples

CONJ_TOL = 1e-10
EXCHANGE_TOL = 1e-12
REAL_TOL = 1e-10


def required_resolution(basis, shift=None):
    """Smallest grid size per axis that integrates the quartic product without aliasing."""
    shift = np.zeros(basis.lattice.dim, dtype=int) if shift is None else np.abs(shift)
    return int(np.max(4 * basis.max_index + shift)) + 1


def default_resolution(basis, shifts=()):
    need = max([required_resolution(basis, s) for s in shifts] + [required_resolution(basis)])
    return need + 1 + (need + 1) % 2


def _shift_between(pairs):
    p, q, r, m = pairs
    gamma = p.k.k - q.k.k + r.k.k - m.k.k
    frac = p.lattice.to_fractional(gamma)
    idx = np.rint(frac)
    if np.any(np.abs(frac - idx) > 1e-8):
        raise ValueError("wave vectors of the quadruple do not close modulo the dual lattice")
    return idx.astype(int)


def coupling_constant(p, q, r, m, kappa, n_per_dim=None, transform=None):
    """``kappa`` times the cell integral of ``chi_p conj(chi_q) chi_r conj(chi_m) e^{i gamma.y}``."""
    pairs = (p, q, r, m)
    basis = p.basis
    if any(x.basis != basis for x in pairs):
        raise ValueError("all four Bloch pairs must share one plane-wave basis")
    shift = _shift_between(pairs)
    need = required_resolution(basis, shift)
    if transform is None:
        n = n_per_dim or default_resolution(basis, [shift])
        if n < need:
            raise ResolutionTooLow(n, need)
        transform = CellTransform(basis, n)
    elif transform.n < need:
        raise ResolutionTooLow(transform.n, need)
    f = [transform.to_cell(x.coeffs) for x in pairs]
    integrand = f[0] * f[1].conj() * f[2] * f[3].conj()
    if np.any(shift):
        integrand = integrand * transform.umklapp(shift)
    return kappa * transform.integrate(integrand)


@dataclass
class CouplingTable:
    kappa: float
    entries: dict
    n_per_dim: int
    shifts: dict = field(default_factory=dict)

    def __getitem__(self, quad):
        return self.entries[tuple(quad)]

    def __contains__(self, quad):
        return tuple(quad) in self.entries

    def __len__(self):
        return len(self.entries)

    def quadruples(self):
        return sorted(self.entries)

    def symmetry_defects(self):
        """Largest violations of the conjugation, exchange and diagonal-reality symmetries."""
        conj = exch = real = 0.0
        for (p, q, r, m), val in self.entries.items():
            partner = self.entries.get((q, p, m, r))
            if partner is not None:
                conj = max(conj, abs(np.conj(val) - partner))
            swapped = self.entries.get((r, q, p, m))
            if swapped is not None:
                exch = max(exch, abs(val - swapped))
            if p == m and q == r:
                real = max(real, abs(val.imag))
        return {"conjugation": conj, "exchange": exch, "diagonal_imag": real}

    def verify(self):
        defects = self.symmetry_defects()
        limits = {"conjugation": CONJ_TOL, "exchange": EXCHANGE_TOL, "diagonal_imag": REAL_TOL}
        for name, value in defects.items():
            scale = max(1.0, abs(self.kappa))
            if value > limits[name] * scale:
                raise AssertionError(f"coupling table violates {name} symmetry by {value:.3e}")
        return defects

    def W(self, m, a):
        """Real self/cross phase-modulation coefficient ``W_m(a)`` for amplitudes ``a``."""
        a = [np.asarray(x) for x in a]
        out = self.entries[(m, m, m, m)].real * np.abs(a[m]) ** 2
        for j in range(len(a)):
            if j != m:
                out = out + 2 * self.entries[(m, j, j, m)].real * np.abs(a[j]) ** 2
        return out

    def to_csv(self):
        buf = io.StringIO()
        buf.write(f"# kappa={self.kappa!r}\n")
        buf.write("# gauge=largest plane-wave coefficient real positive\n")
        buf.write(f"# n_per_dim={self.n_per_dim}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["p", "q", "r", "m", "Re", "Im"])
        for quad in self.quadruples():
            val = self.entries[quad]
            writer.writerow([*quad, repr(float(val.real)), repr(float(val.imag))])
        return buf.getvalue()


def coupling_table(system, kappa, n_per_dim=None, quadruples=None, verify=True):
    if system.pairs is None:
        raise ValueError("coupling constants need Bloch functions; build the mode system from BlochBands")
    quads = resonant_quadruples(system) if quadruples is None else [tuple(q) for q in quadruples]
    basis = system.pairs[0].basis
    shifts = {q: np.array(momentum_shift(system, q)) for q in quads}
    n = n_per_dim or default_resolution(basis, shifts.values())
    need = max([required_resolution(basis, s) for s in shifts.values()] + [0])
    if n < need:
        raise ResolutionTooLow(n, need)
    transform = CellTransform(basis, n)
    entries = {}
    for quad in quads:
        pairs = [system.pairs[i] for i in quad]
        entries[quad] = complex(coupling_constant(*pairs, kappa, transform=transform))
    table = CouplingTable(kappa, entries, n, {q: tuple(int(x) for x in s) for q, s in shifts.items()})
    if verify:
        table.verify()
    return table
