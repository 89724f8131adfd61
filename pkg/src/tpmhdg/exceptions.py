""" Error and warning classes raised by tpmhdg.
"""
from numpy.linalg import LinAlgError


class NoRootInRange(ValueError):
    """Level-set function does not change sign along a transfer ray."""


class EmptyMesh(ValueError):
    """No background element lies inside the domain."""


class UnsupportedOrder(ValueError):
    """Requested quadrature exactness is not available."""


class ParseError(ValueError):
    """Configuration file is missing or malformed."""


class ValidationError(ValueError):
    """Configuration value violates an invariant."""

    def __init__(self, field, message=None):
        self.field = field
        super().__init__(field if message is None else '{}: {}'.format(field, message))


class StabilizationViolation(ValueError):
    """min(tau1 - beta.n/2) is not positive on a facet."""

    def __init__(self, facet, margin):
        self.facet = facet
        self.margin = margin
        super().__init__('facet {}: min(tau1 - beta.n/2) = {:.6g} <= 0'.format(facet, margin))


class DegenerateRatio(ValueError):
    """Convergence order undefined for the given pair of records."""


class SingularGram(LinAlgError):
    """Element mass matrix is not positive definite."""


class SingularLocalSystem(LinAlgError):
    """Local HDG projection system is singular."""


class SingularLocalBlock(LinAlgError):
    """Element-local block of the static condensation is singular."""

    def __init__(self, element):
        self.element = element
        super().__init__('local block of element {} is singular'.format(element))


class SingularMatrix(LinAlgError):
    """Global sparse factorization failed."""


class NonBijectiveWarning(UserWarning):
    """Two transfer nodes are mapped to (numerically) the same boundary point."""
