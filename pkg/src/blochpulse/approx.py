"""Two-scale approximation built from amplitude fields and Bloch waves.

Each oscillating phase ``sigma = (k, E)`` contributes

    exp(i (k.x - E t) / eps) * sum_parts eps^power * M(a)(t, x) * phi(x / eps)

where ``M`` is a monomial in the amplitude fields (``a_m``, ``d_j a_m`` or
``a_p conj(a_q) a_r``) and ``phi`` a periodic cell function stored as plane-wave
coefficients. Leading order has one part ``a_m chi_m`` per mode; the first-order
correction adds the component orthogonal to ``chi_m`` at every mode and the
resolvent terms at the non-resonant phases generated by the cubic term. The
first-order resonant coefficients are kept at zero.

With ``L0 = E - H(k)`` and ``L1 = i d_t + div_x (grad_y + i k)``, the order-eps
equation reads ``L0 A1 = -L1 A0 + kappa [|u0|^2 u0]_sigma``. Eliminating ``d_t a``
by the amplitude equation leaves

    F_m = -sum_j d_j a_m (d_yj + i k_j - i theta_j) chi_m
          - sum_{pqr} a_p conj(a_q) a_r (kappa_pqrm chi_m - kappa chi_p conj(chi_q) chi_r e^{i gamma.y})

which is orthogonal to ``chi_m`` term by term.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve

from .amplitude import resample
from .bloch import CellTransform, deflated_solve, inner, resolvent_apply
from .coupling import default_resolution
from .modes import SigmaPoint, SigmaSet
from .nls import WaveField


@dataclass
class Part:
    power: int
    monomial: tuple        # ("amp", m) | ("grad", m, j) | ("cubic", p, q, r)
    coeffs: np.ndarray     # plane-wave coefficients of the cell function


@dataclass
class PhaseTerm:
    frac: np.ndarray
    k: np.ndarray
    energy: float
    parts: list = field(default_factory=list)
    resonant: bool = True


class MacroFields:
    """Amplitude fields, derivatives and time derivatives on the macro grid."""

    def __init__(self, state):
        self.state = state
        grid = state.grid
        self.a = state.fields
        self.grad = np.array([grid.gradient(f) for f in self.a])                      # (M, d, ...)
        self.hess = np.array([[grid.gradient(g) for g in gm] for gm in self.grad])   # (M, d, d, ...)
        self.N = state.cubic(self.a)
        self.gradN = np.array([grid.gradient(f) for f in self.N])
        vel = state.velocities
        self.at = -np.einsum("mi,mi...->m...", vel, self.grad) - 1j * self.N
        self.grad_at = -np.einsum("mi,mij...->mj...", vel, self.hess) - 1j * self.gradN

    def value(self, mono):
        kind = mono[0]
        if kind == "amp":
            m = mono[1]
            return self.a[m], self.at[m]
        if kind == "grad":
            m, j = mono[1:]
            return self.grad[m, j], self.grad_at[m, j]
        p, q, r = mono[1:]
        a, at = self.a, self.at
        val = a[p] * a[q].conj() * a[r]
        dot = at[p] * a[q].conj() * a[r] + a[p] * at[q].conj() * a[r] + a[p] * a[q].conj() * at[r]
        return val, dot


class TwoScaleAnsatz:
    def __init__(self, system, table, order=1):
        if order not in (0, 1):
            raise ValueError("only orders 0 and 1 are implemented")
        if system.pairs is None:
            raise ValueError("the ansatz needs Bloch functions")
        self.system = system
        self.table = table
        self.order = order
        self.kappa = table.kappa
        self.basis = system.pairs[0].basis
        self.lattice = self.basis.lattice
        self.potential = system.pairs[0].potential
        self.terms = self._leading_terms()
        if order == 1:
            self._add_first_order()

    # ------------------------------------------------------------------ construction
    def _leading_terms(self):
        terms = []
        for m, (mode, pair) in enumerate(zip(self.system.modes, self.system.pairs)):
            terms.append(PhaseTerm(np.array(mode.frac), pair.k.k, pair.energy,
                                   [Part(0, ("amp", m), pair.coeffs)]))
        return terms

    def _shift(self, p, q, r, target_frac):
        modes = self.system.modes
        f = np.array(modes[p].frac) - np.array(modes[q].frac) + np.array(modes[r].frac) - target_frac
        return np.rint(f).astype(int)

    def product_coeffs(self, p, q, r, shift, transform):
        """Basis coefficients of ``chi_p conj(chi_q) chi_r exp(i gamma.y)``."""
        pairs = self.system.pairs
        f = [transform.to_cell(pairs[i].coeffs) for i in (p, q, r)]
        prod = f[0] * f[1].conj() * f[2]
        if np.any(shift):
            prod = prod * transform.umklapp(shift)
        return transform.to_coeffs(prod)

    def _add_first_order(self):
        system, basis = self.system, self.basis
        M = system.size
        triples = [(p, q, r) for p in range(M) for q in range(M) for r in range(M)]
        base = system.sigma_points()
        # wrapped wave vectors keep every umklapp index within [-2, 2]
        transform = CellTransform(basis, default_resolution(basis, [np.full(self.lattice.dim, 2)]))
        self.transform = transform
        dual = self.lattice.dual

        for m, pair in enumerate(system.pairs):
            term = self.terms[m]
            for j in range(self.lattice.dim):
                kg = (pair.k.k + basis.vectors)[:, j]
                f_j = pair.coeffs * 1j * (kg - system.velocities[m][j])
                term.parts.append(Part(1, ("grad", m, j), -deflated_solve(pair, f_j)))
            for (p, q, r, mm) in self.table.quadruples():
                if mm != m:
                    continue
                shift = self._shift(p, q, r, np.array(system.modes[m].frac))
                prod = self.product_coeffs(p, q, r, shift, transform)
                h = self.table[(p, q, r, m)] * pair.coeffs - self.kappa * prod
                term.parts.append(Part(1, ("cubic", p, q, r), -deflated_solve(pair, h)))

        seen = SigmaSet(system.tol_k, system.tol_E)
        for p in base:
            seen.add(p)
        nonres = {}
        for (p, q, r) in triples:
            point = base[p].combine(base[q], base[r])
            idx = seen.find(point)
            if idx is not None and idx < M:
                continue
            if idx is None:
                idx = seen.add(point)
                frac = np.array(point.frac)
                nonres[idx] = PhaseTerm(frac, frac @ dual, point.energy, [], resonant=False)
            term = nonres[idx]
            shift = self._shift(p, q, r, term.frac)
            prod = self.product_coeffs(p, q, r, shift, transform)
            image = resolvent_apply(term.k, term.energy, self.potential, basis, self.kappa * prod)
            term.parts.append(Part(1, ("cubic", p, q, r), image))
        self.terms.extend(nonres[i] for i in sorted(nonres))

    # ------------------------------------------------------------------ evaluation
    def check_grid(self, grid):
        for term in self.terms:
            grid.check_wavevector(term.k)

    def _micro(self, grid, term, coeffs):
        """``phi(x/eps) exp(i k.x/eps)`` on the fine grid for a cell function ``phi``."""
        x = grid.coords().reshape(grid.dim, -1).T / grid.eps
        waves = np.exp(1j * x @ (term.k + self.basis.vectors).T)
        return (waves @ coeffs).reshape(grid.shape)

    def evaluate(self, state, grid, order=None, time_derivative=False, select=None):
        """Field ``u_N`` (and optionally ``d_t u_N``) on the fine grid at time ``state.t``."""
        order = self.order if order is None else order
        if order > self.order:
            raise ValueError(f"ansatz was built to order {self.order}")
        self.check_grid(grid)
        eps, t = grid.eps, state.t
        macro = MacroFields(state)
        u = np.zeros(grid.shape, complex)
        ut = np.zeros(grid.shape, complex) if time_derivative else None
        for term in self.terms:
            phase = np.exp(-1j * term.energy * t / eps)
            for part in term.parts:
                if part.power > order or (select is not None and not select(term, part)):
                    continue
                val, dot = macro.value(part.monomial)
                micro = self._micro(grid, term, part.coeffs) * (phase * eps ** part.power)
                fine_val = resample(val, grid.shape)
                u += fine_val * micro
                if time_derivative:
                    ut += (resample(dot, grid.shape) - 1j * term.energy / eps * fine_val) * micro
        return (u, ut) if time_derivative else u


def leading_order_field(ansatz, state, grid):
    return ansatz.evaluate(state, grid, order=0)


def first_order_perp(ansatz, state, m):
    """Macro-grid plane-wave coefficient fields ``A_perp`` of mode ``m``, shape ``(D, ...)``."""
    macro = MacroFields(state)
    out = 0
    for part in ansatz.terms[m].parts:
        if part.power == 1:
            val, _ = macro.value(part.monomial)
            out = out + np.multiply.outer(part.coeffs, val)
    return out


def first_order_nonresonant(ansatz, state, sigma):
    """Coefficient fields ``A_{1,sigma}`` for a non-resonant phase ``sigma`` (a SigmaPoint)."""
    macro = MacroFields(state)
    for term in ansatz.terms:
        if term.resonant:
            continue
        if SigmaPoint.make(term.frac, term.energy).close(sigma, ansatz.system.tol_k, ansatz.system.tol_E):
            out = 0
            for part in term.parts:
                val, _ = macro.value(part.monomial)
                out = out + np.multiply.outer(part.coeffs, val)
            return out
    raise KeyError(f"{sigma} is not a non-resonant phase of the ansatz")


def nonresonant_phases(ansatz):
    return [SigmaPoint.make(t.frac, t.energy) for t in ansatz.terms if not t.resonant]


def assemble(ansatz, state, grid, order=None):
    return ansatz.evaluate(state, grid, order)


def as_wavefield(ansatz, state, grid, order=None):
    return WaveField(state.t, ansatz.evaluate(state, grid, order), grid, ansatz.kappa)


def nls_residual(ansatz, state, grid, order=None):
    """``i eps u_t + eps^2/2 Lap u - V(x/eps) u - eps kappa |u|^2 u`` for ``u = u_N``."""
    eps = grid.eps
    u, ut = ansatz.evaluate(state, grid, order, time_derivative=True)
    lap = np.fft.ifftn(-grid.p_squared() * np.fft.fftn(u))
    return 1j * eps * ut + eps ** 2 / 2 * lap - grid.potential_samples() * u - eps * ansatz.kappa * np.abs(u) ** 2 * u


def residual_norm(ansatz, state, grid, order=None):
    r = nls_residual(ansatz, state, grid, order)
    return float(np.sqrt(grid.integrate(np.abs(r) ** 2)))


# ---------------------------------------------------------------------------- solvability

def _dense(coeffs, basis, pad):
    """Coefficient vector laid out on a dense index box ``[-J-pad, J+pad]^d``."""
    J = basis.max_index
    shape = tuple(2 * (J + pad) + 1)
    out = np.zeros(shape, complex)
    out[tuple((basis.indices + J + pad).T)] = coeffs
    return out


def solvability_defect(ansatz, state):
    """Largest ``|P_m F_m|`` over modes and macro points, with ``F_m`` in its raw form.

    ``d_t a`` is taken from the amplitude equation; the cubic source is built by
    discrete convolution of plane-wave coefficients (independent of the
    quadrature used for the coupling constants).
    """
    system, basis = ansatz.system, ansatz.basis
    macro = MacroFields(state)
    J = basis.max_index
    pad = 2 * J + 2
    worst = 0.0
    for m, pair in enumerate(system.pairs):
        chi = pair.coeffs
        kg = pair.k.k + basis.vectors
        # -(i a_t chi + sum_j d_j a (d_yj + i k_j) chi), projected
        proj = -1j * macro.at[m] * inner(chi, chi, basis)
        for j in range(ansatz.lattice.dim):
            proj = proj - macro.grad[m, j] * inner(chi, 1j * kg[:, j] * chi, basis)
        chi_dense = _dense(chi, basis, pad).conj()
        for (p, q, r, mm) in ansatz.table.quadruples():
            if mm != m:
                continue
            cp = _dense(system.pairs[p].coeffs, basis, 0)
            cq = _dense(system.pairs[q].coeffs, basis, 0)[tuple(slice(None, None, -1) for _ in J)].conj()
            cr = _dense(system.pairs[r].coeffs, basis, 0)
            prod = convolve(convolve(cp, cq, method="direct"), cr, method="direct")  # box [-3J, 3J]
            shift = ansatz._shift(p, q, r, np.array(system.modes[m].frac))
            # e^{i gamma.y} moves index n to n + shift; overlap with chi on its padded box
            big = np.zeros(tuple(2 * (J + pad) + 1), complex)
            start = pad - 2 * J + shift
            big[tuple(slice(s, s + n) for s, n in zip(start, prod.shape))] = prod
            overlap = basis.lattice.cell_volume * np.sum(chi_dense * big)
            proj = proj + ansatz.kappa * overlap * macro.value(("cubic", p, q, r))[0]
        worst = max(worst, float(np.max(np.abs(proj))))
    return worst
