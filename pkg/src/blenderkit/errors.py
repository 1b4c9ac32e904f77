"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class BlenderKitError(Exception):
    exit_code = 3


class PreconditionError(BlenderKitError):
    """Inputs violate a stated hypothesis or precondition."""

    exit_code = 2


class NumericalFailure(BlenderKitError):
    """A numerical procedure did not reach the requested accuracy."""

    exit_code = 3


class HypothesisViolation(PreconditionError):
    def __init__(self, clause, detail=""):
        self.clause = clause
        super().__init__(f"{clause}: {detail}" if detail else clause)


class InvalidGrid(PreconditionError):
    pass


class BranchExplosion(PreconditionError):
    pass


class NoBranch(PreconditionError):
    pass


class EpsZero(PreconditionError):
    pass


class OutOfDomain(PreconditionError):
    pass


class GeometryUnverified(PreconditionError):
    pass


class NotAttracting(PreconditionError):
    pass


class OutOfViewport(PreconditionError):
    pass


class LoopHitsBand(PreconditionError):
    pass


class ZeroOnLoop(PreconditionError):
    pass


class NonFiniteSample(NumericalFailure):
    pass


class NoConvergence(NumericalFailure):
    def __init__(self, message, node=None):
        self.node = node
        super().__init__(message)


class SlopeBlowup(NumericalFailure):
    pass


class DenominatorNonpositive(NumericalFailure):
    pass


class RootFindingFailure(NumericalFailure):
    pass


class NotContracting(NumericalFailure):
    pass


class Undersampled(NumericalFailure):
    pass


class NoEnteringComponent(NumericalFailure):
    pass


class ConfigError(PreconditionError):
    """Malformed or missing configuration values."""
