"""Mode systems: the alternating-sum map, its graphs, resonances and closure.

Wave vectors are carried in fractional coordinates of the dual basis, wrapped
to ``[-1/2, 1/2)``. Mode indices are 0-based; band indices start at 1.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.optimize import minimize, root

from .bloch import DEGENERACY_TOL, band_energies, bloch_pair
from .errors import BudgetExceeded, DegenerateBand, FlatBand, SignSearchFailed
from .lattice import bz_point_from_fractional, fractional_distance, wrap_fractional

TOL_K = 1e-9
TOL_E_REL = 1e-8
TUPLE_BUDGET = 10 ** 7


def _wrap(frac):
    return wrap_fractional(np.atleast_1d(np.asarray(frac, dtype=float)))[0]


@dataclass(frozen=True)
class Mode:
    frac: tuple
    band: int

    def __post_init__(self):
        if self.band < 1:
            raise ValueError("band index must be >= 1")
        object.__setattr__(self, "frac", tuple(float(f) for f in _wrap(self.frac)))


@dataclass(frozen=True)
class SigmaPoint:
    frac: tuple
    energy: float

    @classmethod
    def make(cls, frac, energy):
        return cls(tuple(float(f) for f in _wrap(frac)), float(energy))

    def combine(self, minus, plus):
        """``self - minus + plus`` with the wave vector taken modulo the dual lattice."""
        f = np.array(self.frac) - np.array(minus.frac) + np.array(plus.frac)
        return SigmaPoint.make(f, self.energy - minus.energy + plus.energy)

    def close(self, other, tol_k, tol_E):
        return (abs(self.energy - other.energy) <= tol_E
                and bool(np.all(fractional_distance(self.frac, other.frac) <= tol_k)))

    def as_dict(self):
        return {"k_frac": list(self.frac), "E": self.energy}


class SigmaSet:
    """Tolerance-aware set of sigma points, remembering one generating tuple each."""

    def __init__(self, tol_k, tol_E):
        self.tol_k = tol_k
        self.tol_E = tol_E
        self.points = []
        self.tuples = []
        self.counts = []
        self._bins = {}
        self._period = max(1, int(round(1.0 / tol_k)))

    def _key(self, p):
        kk = tuple(int(np.rint(f / self.tol_k)) % self._period for f in p.frac)
        return kk, int(np.rint(p.energy / self.tol_E))

    def _neighbours(self, key):
        kk, ke = key
        for dk in product((-1, 0, 1), repeat=len(kk)):
            shifted = tuple((a + b) % self._period for a, b in zip(kk, dk))
            for de in (-1, 0, 1):
                yield shifted, ke + de

    def find(self, p):
        for key in self._neighbours(self._key(p)):
            for i in self._bins.get(key, ()):
                if p.close(self.points[i], self.tol_k, self.tol_E):
                    return i
        return None

    def add(self, p, tup=None, count=1):
        i = self.find(p)
        if i is None:
            i = len(self.points)
            self.points.append(p)
            self.tuples.append(tup)
            self.counts.append(count)
            self._bins.setdefault(self._key(p), []).append(i)
        else:
            self.counts[i] += count
        return i

    def __contains__(self, p):
        return self.find(p) is not None

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def copy(self):
        out = SigmaSet(self.tol_k, self.tol_E)
        for p, t, c in zip(self.points, self.tuples, self.counts):
            out.add(p, t, c)
        return out

    def update(self, other):
        for p, t in zip(other.points, other.tuples):
            if p not in self:
                self.add(p, t)
        return self

    def issubset(self, other):
        return all(p in other for p in self.points)

    def sorted(self):
        """Copy in canonical order (energy, then wave vector) for deterministic output."""
        order = sorted(range(len(self)), key=lambda i: (self.points[i].energy, self.points[i].frac))
        out = SigmaSet(self.tol_k, self.tol_E)
        for i in order:
            out.add(self.points[i], self.tuples[i], self.counts[i])
        return out


def combine_sets(a, b, c):
    """All points ``x - y + z`` with ``x, y, z`` from ``a, b, c``."""
    out = SigmaSet(a.tol_k, a.tol_E)
    for x in a:
        for y in b:
            for z in c:
                out.add(x.combine(y, z))
    return out


# --------------------------------------------------------------------------- band models

class BlochBands:
    """Band graph of a periodic potential, with per-k eigenvalue caching."""

    def __init__(self, potential, basis, degeneracy_tol=DEGENERACY_TOL):
        self.potential = potential
        self.basis = basis
        self.degeneracy_tol = degeneracy_tol
        self._cache = {}

    @property
    def lattice(self):
        return self.basis.lattice

    def _key(self, frac):
        return tuple(np.round(_wrap(frac), 13).tolist())

    def energies(self, frac):
        key = self._key(frac)
        if key not in self._cache:
            k = bz_point_from_fractional(frac, self.lattice)
            self._cache[key] = band_energies(k, self.potential, self.basis)
        return self._cache[key]

    def energy(self, frac, band):
        return float(self.energies(frac)[band - 1])

    def band_at(self, frac, energy, L_max, tol_E):
        evals = self.energies(frac)[:L_max]
        hits = np.flatnonzero(np.abs(evals - energy) <= tol_E)
        return int(hits[0]) + 1 if len(hits) else None

    def is_degenerate(self, frac, band):
        evals = self.energies(frac)
        E = evals[band - 1]
        gaps = [abs(E - evals[band - 2]) if band > 1 else np.inf,
                abs(evals[band] - E) if band < len(evals) else np.inf]
        return min(gaps) < self.degeneracy_tol * max(1.0, abs(E))

    def velocity(self, frac, band):
        k = bz_point_from_fractional(frac, self.lattice)
        return bloch_pair(k, band, self.potential, self.basis, self.degeneracy_tol).group_velocity

    def pair(self, frac, band):
        k = bz_point_from_fractional(frac, self.lattice)
        return bloch_pair(k, band, self.potential, self.basis, self.degeneracy_tol)


class SyntheticBands:
    """Explicit band graph for exercising the combinatorics without an eigensolver.

    ``points`` lists isolated graph points ``(k_frac, E, band)``; ``bands`` maps a
    band index to a callable ``E(k_frac)``. ``velocities`` optionally maps
    ``(k_frac tuple, band)`` to a group velocity; ``degenerate`` lists graph points
    whose group velocity does not exist.
    """

    def __init__(self, lattice, points=(), bands=None, velocities=None, degenerate=(),
                 tol_k=TOL_K):
        self.lattice = lattice
        self.points = [(tuple(_wrap(k)), float(E), int(b)) for k, E, b in points]
        self.bands = dict(bands or {})
        self.velocities = {(tuple(_wrap(k)), b): np.atleast_1d(v)
                           for (k, b), v in (velocities or {}).items()}
        self.degenerate = [(tuple(_wrap(k)), int(b)) for k, b in degenerate]
        self.tol_k = tol_k

    def _same_k(self, a, b):
        return bool(np.all(fractional_distance(a, b) <= self.tol_k))

    def energy(self, frac, band):
        if band in self.bands:
            return float(self.bands[band](np.asarray(_wrap(frac))))
        for k, E, b in self.points:
            if b == band and self._same_k(k, _wrap(frac)):
                return E
        raise KeyError(f"no synthetic graph point for band {band} at k={frac}")

    def band_at(self, frac, energy, L_max, tol_E):
        hits = []
        for b, fn in self.bands.items():
            if b <= L_max and abs(float(fn(np.asarray(_wrap(frac)))) - energy) <= tol_E:
                hits.append(b)
        for k, E, b in self.points:
            if b <= L_max and abs(E - energy) <= tol_E and self._same_k(k, _wrap(frac)):
                hits.append(b)
        return min(hits) if hits else None

    def is_degenerate(self, frac, band):
        return any(b == band and self._same_k(k, _wrap(frac)) for k, b in self.degenerate)

    def velocity(self, frac, band):
        if self.is_degenerate(frac, band):
            raise DegenerateBand(band, frac, 0.0)
        for (k, b), v in self.velocities.items():
            if b == band and self._same_k(k, _wrap(frac)):
                return v
        return np.zeros(self.lattice.dim)

    def pair(self, frac, band):
        raise TypeError("synthetic band tables carry no Bloch functions")


# --------------------------------------------------------------------------- mode systems

@dataclass
class ModeSystem:
    model: object
    modes: list
    energies: np.ndarray
    velocities: np.ndarray
    tol_k: float
    tol_E: float
    pairs: list | None = None

    @classmethod
    def build(cls, model, modes, tol_k=TOL_K, tol_E=None, with_pairs=True):
        modes = [m if isinstance(m, Mode) else Mode(*m) for m in modes]
        if not modes:
            raise ValueError("a mode system needs at least one mode")
        pairs = None
        if with_pairs and isinstance(model, BlochBands):
            pairs = [model.pair(m.frac, m.band) for m in modes]
            energies = np.array([p.energy for p in pairs])
            velocities = np.array([p.group_velocity for p in pairs])
        else:
            energies = np.array([model.energy(m.frac, m.band) for m in modes])
            velocities = np.array([model.velocity(m.frac, m.band) for m in modes])
        if tol_E is None:
            tol_E = TOL_E_REL * max(1.0, float(np.max(np.abs(energies))))
        system = cls(model, modes, energies, velocities.reshape(len(modes), -1), tol_k, tol_E, pairs)
        base = system.sigma_points()
        for i in range(len(base)):
            for j in range(i):
                if base[i].close(base[j], tol_k, tol_E):
                    raise ValueError(f"modes {j} and {i} have coinciding sigma points")
        return system

    @property
    def lattice(self):
        return self.model.lattice

    @property
    def size(self):
        return len(self.modes)

    def sigma_points(self):
        return [SigmaPoint.make(m.frac, E) for m, E in zip(self.modes, self.energies)]

    def k_vectors(self):
        return np.array([self.lattice.from_fractional(m.frac) for m in self.modes])

    def default_L_max(self):
        return 2 * max(m.band for m in self.modes) + 4


def sigma(system, tup):
    """Alternating sum of the modes indexed by an odd-length tuple."""
    if len(tup) % 2 != 1:
        raise ValueError("sigma needs an odd number of modes")
    frac = np.zeros(system.lattice.dim)
    E = 0.0
    for pos, m in enumerate(tup):
        sign = 1.0 if pos % 2 == 0 else -1.0
        frac += sign * np.array(system.modes[m].frac)
        E += sign * system.energies[m]
    return SigmaPoint.make(frac, E)


def graph(system, order, budget=TUPLE_BUDGET):
    """All sigma points reachable by tuples of the given odd length.

    Built by appending ``(-mode, +mode)`` pairs to the previous level so each
    point keeps its first generating tuple and the number of tuples hitting it.
    """
    if order < 1 or order % 2 != 1:
        raise ValueError("graph order must be odd and positive")
    M = system.size
    if M ** order > budget:
        raise BudgetExceeded(M ** order, budget)
    base = system.sigma_points()
    level = SigmaSet(system.tol_k, system.tol_E)
    for m, p in enumerate(base):
        level.add(p, (m,))
    for _ in range((order - 1) // 2):
        nxt = SigmaSet(system.tol_k, system.tol_E)
        for p, tup, cnt in zip(level.points, level.tuples, level.counts):
            for a in range(M):
                for b in range(M):
                    nxt.add(p.combine(base[a], base[b]), tup + (a, b), cnt)
        level = nxt
    return level.sorted()


def is_on_graph(point, model, L_max, tol_E):
    """Band index whose energy at ``point.frac`` matches ``point.energy``, else None."""
    return model.band_at(point.frac, point.energy, L_max, tol_E)


@dataclass
class ClosureCertificate:
    order: int
    closed: bool
    violations: list
    tol_k: float
    tol_E: float
    L_max: int

    @property
    def verdict(self):
        return "closed" if self.closed else "violated"

    def as_dict(self):
        return {
            "order": self.order,
            "verdict": self.verdict,
            "tol_k": self.tol_k,
            "tol_E": self.tol_E,
            "L_max": self.L_max,
            "violations": [{"tuple": list(t), "sigma": s.as_dict(), "band": b}
                           for t, s, b in self.violations],
        }

    def digest(self):
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def closure_check(system, order, L_max=None, budget=TUPLE_BUDGET):
    L_max = L_max or system.default_L_max()
    base = SigmaSet(system.tol_k, system.tol_E)
    for p in system.sigma_points():
        base.add(p)
    violations = []
    G = graph(system, order, budget)
    for p, tup in zip(G.points, G.tuples):
        band = is_on_graph(p, system.model, L_max, system.tol_E)
        if band is not None and p not in base:
            violations.append((tup, p, band))
    return ClosureCertificate(order, not violations, violations, system.tol_k, system.tol_E, L_max)


def resonant_quadruples(system):
    """Index quadruples ``(p, q, r, m)`` with ``sigma(p, q, r) == sigma(m)``."""
    base = system.sigma_points()
    M = system.size
    out = []
    for p, q, r in product(range(M), repeat=3):
        s = base[p].combine(base[q], base[r])
        for m in range(M):
            if s.close(base[m], system.tol_k, system.tol_E):
                out.append((p, q, r, m))
    return sorted(out)


def momentum_shift(system, quad):
    """Integer dual-lattice index of ``k_p - k_q + k_r - k_m`` (the umklapp vector)."""
    p, q, r, m = quad
    f = (np.array(system.modes[p].frac) - np.array(system.modes[q].frac)
         + np.array(system.modes[r].frac) - np.array(system.modes[m].frac))
    shift = np.rint(f)
    if np.any(np.abs(f - shift) > 1e-6):
        raise ValueError(f"quadruple {quad} does not conserve momentum modulo the dual lattice")
    return tuple(int(s) for s in shift)


# --------------------------------------------------------------------------- resonance search

@dataclass
class ResonanceTriple:
    k1: np.ndarray
    k2: np.ndarray
    k3: np.ndarray
    band: int
    mismatch: float
    k_min: np.ndarray
    k_max: np.ndarray
    e_forward: float   # e(k_max, k_min)
    e_backward: float  # e(k_min, k_max)
    flat: bool = False

    def modes(self):
        return [Mode(tuple(k), self.band) for k in (self.k1, self.k2, self.k3)]


def _extrema(fn, d, n_grid, grad=None):
    ticks = -0.5 + np.arange(n_grid) / n_grid
    grid = np.array(list(product(ticks, repeat=d)))
    values = np.array([fn(f) for f in grid])
    f_min, f_max = grid[np.argmin(values)], grid[np.argmax(values)]

    def refine(f0, sign):
        res = minimize(lambda f: sign * fn(f), f0, method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-15, "initial_simplex":
                                f0 + np.vstack([np.zeros(d), np.eye(d) / n_grid])})
        f = _wrap(res.x) if sign * fn(res.x) <= sign * fn(f0) else f0
        if grad is not None:
            # the energy is flat at the extremum, so polish on the gradient instead;
            # extrema at band crossings are kinks and are left as found
            try:
                sol = root(grad, f, tol=1e-14)
                if (np.linalg.norm(grad(sol.x)) < np.linalg.norm(grad(f))
                        and np.max(fractional_distance(sol.x, f)) < 1.0 / n_grid):
                    f = _wrap(sol.x)
            except DegenerateBand:
                pass
        return f

    return refine(f_min, 1.0), refine(f_max, -1.0), float(values.max() - values.min())


def single_band_resonance_search(band, model, n_grid=None, tol=1e-10):
    """Find ``k1 != k2`` with ``2E(k1) - E(k2) - E(2k1 - k2) = 0`` inside one band.

    The band's extrema give ``e(k_max, k_min) > 0 > e(k_min, k_max)``. The straight
    segment between these two points crosses zero at the trivial ``k1 == k2``, so
    the root is bracketed instead along ``k2 = k_min``, ``k1`` moving from ``k_max``
    to ``k_min``: ``e`` starts positive and is negative close to a nondegenerate
    minimum.
    """
    d = model.lattice.dim
    n_grid = n_grid or (256 if d == 1 else 32)

    def E(f):
        return model.energy(_wrap(f), band)

    def e(f1, f2):
        return 2 * E(f1) - E(f2) - E(2 * np.asarray(f1) - np.asarray(f2))

    def bloch_grad(f):
        return model.lattice.dual @ model.velocity(_wrap(f), band)

    grad = bloch_grad if isinstance(model, BlochBands) else None
    f_min, f_max, variation = _extrema(E, d, n_grid, grad)
    if variation < 1e-12:
        k1 = _wrap(np.full(d, 0.25))
        k2 = np.zeros(d)
        triple = ResonanceTriple(k1, k2, _wrap(2 * k1 - k2), band, e(k1, k2), f_min, f_max,
                                 0.0, 0.0, flat=True)
        raise FlatBand(triple, variation)
    e_fwd, e_bwd = e(f_max, f_min), e(f_min, f_max)
    if not (e_fwd > 0 > e_bwd):
        raise SignSearchFailed(f"endpoint signs e(kmax,kmin)={e_fwd:.3e}, e(kmin,kmax)={e_bwd:.3e}")

    step = _wrap(f_min - f_max)

    def g(s):
        return e(f_max + s * step, f_min)

    samples = np.linspace(0.0, 1.0, 4 * n_grid + 1)[:-1]
    values = np.array([g(s) for s in samples])
    for i in range(1, len(samples)):
        if not (values[i - 1] > 0 >= values[i]):
            continue
        lo, hi = samples[i - 1], samples[i]
        g_lo = values[i - 1]
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            g_mid = g(mid)
            if abs(g_mid) < tol and hi - lo < 1e-13:
                break
            if (g_mid > 0) == (g_lo > 0):
                lo, g_lo = mid, g_mid
            else:
                hi = mid
        s = lo if abs(g(lo)) <= abs(g(hi)) else hi
        k1 = _wrap(f_max + s * step)
        k2 = _wrap(f_min)
        k3 = _wrap(2 * k1 - k2)
        mismatch = e(k1, k2)
        distinct = min(np.max(fractional_distance(k1, k2)), np.max(fractional_distance(k3, k1)),
                       np.max(fractional_distance(k3, k2))) > 1e-6
        if abs(mismatch) < tol and distinct:
            return ResonanceTriple(k1, k2, k3, band, float(mismatch), f_min, f_max, e_fwd, e_bwd)
    raise SignSearchFailed("no nontrivial sign change found along the search path")


# --------------------------------------------------------------------------- weak closure

@dataclass
class WeakClosureResult:
    N: int
    sequence: list          # G_1, G_3, ..., G_{2N+1}
    generated: list         # [None, check-G_3, ..., check-G_{2N+1}]
    ok: bool
    violation: dict | None = None
    certificate: ClosureCertificate | None = None


def weak_closure_check(system, N, L_max=None, budget=TUPLE_BUDGET):
    """Greedy-minimal admissible sequence for weak closure of order ``2N+1``.

    ``G_{2n+1}`` is ``G_{2n-1}`` plus everything the cubic nonlinearity generates
    from lower orders, plus (for ``n < N``) those points of the plain sigma graph
    of order ``2n+3`` that lie on the band graph but not on the original modes.
    Promoting them one level early gives them a free coefficient before they are
    generated.
    """
    L_max = L_max or system.default_L_max()
    cert = closure_check(system, 3, L_max, budget)
    base = SigmaSet(system.tol_k, system.tol_E)
    for p in system.sigma_points():
        base.add(p)
    if not cert.closed:
        return WeakClosureResult(N, [base], [None], False,
                                 {"condition": "closed of order 3", "level": 1,
                                  "sigma": cert.violations[0][1]}, cert)

    def on_graph(p):
        return is_on_graph(p, system.model, L_max, system.tol_E) is not None

    seq, generated = [base], [None]
    for n in range(1, N + 1):
        check = SigmaSet(system.tol_k, system.tol_E)
        for n1 in range(n):
            for n2 in range(n - n1):
                n3 = n - 1 - n1 - n2
                check.update(combine_sets(seq[n1], seq[n2], seq[n3]))
        current = seq[n - 1].copy().update(check)
        if n < N:
            for p in graph(system, 2 * n + 3, budget):
                if on_graph(p) and p not in base:
                    current.add(p)
        seq.append(current.sorted())
        generated.append(check.sorted())
        for p in current:
            if on_graph(p) and p not in seq[n - 1] and p in check:
                return WeakClosureResult(N, seq, generated, False,
                                         {"condition": "iv", "level": n, "sigma": p}, cert)
    for p in seq[-1]:
        band = is_on_graph(p, system.model, L_max, system.tol_E)
        if band is not None and system.model.is_degenerate(p.frac, band):
            raise DegenerateBand(band, p.frac, 0.0,
                                 f"group velocity missing at {p.as_dict()} (condition v)")
    return WeakClosureResult(N, seq, generated, True, None, cert)
