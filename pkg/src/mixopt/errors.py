"""Exception hierarchy.

Every error raised on purpose by the toolkit derives from :class:`MixoptError`
so callers (the CLI in particular) can map families of failures to exit codes.
"""


class MixoptError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(MixoptError):
    """Malformed input: bad ids, bad shapes, bad files."""


class InfeasibilityError(MixoptError):
    """A constraint set admits no point."""


class UnknownDomain(ValidationError):
    pass


class IdCollision(ValidationError):
    pass


class PartitionTokenMismatch(ValidationError):
    pass


class EmptyDomainSet(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class SimplexViolation(ValidationError):
    pass


class UnknownDomainColumn(ValidationError):
    pass


class Underdetermined(ValidationError):
    pass


class MissingModel(ValidationError):
    pass


class WrongFamily(ValidationError):
    pass


class WrongUpdateKind(ValidationError):
    pass


class UnsupportedUpdateKind(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class ZeroVariance(ValidationError):
    pass


class NonPositiveMu(ValidationError):
    pass


class AllMassRemoved(ValidationError):
    pass


class SingularKernel(MixoptError):
    pass


class InfeasibleCaps(InfeasibilityError):
    pass


class RejectionExhausted(InfeasibilityError):
    pass


class NoFeasibleCandidate(InfeasibilityError):
    pass
