"""Exception types raised across the package."""


class BlochPulseError(Exception):
    """Base class for all package errors."""


class SingularBasis(BlochPulseError, ValueError):
    pass


class CutoffTooSmall(BlochPulseError, ValueError):
    """A potential coefficient cannot be represented by the plane-wave basis."""

    def __init__(self, index, message=None):
        self.index = tuple(index)
        super().__init__(message or f"potential coefficient at dual index {self.index} "
                                    "lies outside the basis difference set")


class DegenerateBand(BlochPulseError):
    """Eigenvalue is (numerically) not simple; group velocity undefined."""

    def __init__(self, band, k, gap, message=None):
        self.band = band
        self.k = k
        self.gap = gap
        super().__init__(message or f"band {band} is degenerate at k={k} (gap {gap:.3e})")


class NearResonance(BlochPulseError):
    def __init__(self, distance, message=None):
        self.distance = distance
        super().__init__(message or f"energy is within {distance:.3e} of the spectrum")


class BudgetExceeded(BlochPulseError):
    def __init__(self, required, budget):
        self.required = required
        self.budget = budget
        super().__init__(f"enumeration needs {required} tuples, budget is {budget}")


class FlatBand(BlochPulseError):
    """The band has (numerically) no variation; carries a canonical triple."""

    def __init__(self, triple, variation):
        self.triple = triple
        self.variation = variation
        ks = ", ".join(f"k{i}={list(map(float, getattr(triple, f'k{i}')))}" for i in (1, 2, 3))
        super().__init__(f"band variation {variation:.3e} is below threshold; canonical triple {ks}")


class SignSearchFailed(BlochPulseError):
    pass


class ResolutionTooLow(BlochPulseError, ValueError):
    def __init__(self, n, required):
        self.n = n
        self.required = required
        super().__init__(f"quadrature resolution {n} below aliasing bound {required}")


class NonFiniteField(BlochPulseError, FloatingPointError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite field values at step {step}")


class GridIncommensurate(BlochPulseError, ValueError):
    pass
