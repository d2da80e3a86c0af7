"""Exception hierarchy for the rbsde package."""


class RBSDEError(Exception):
    """Base class for all package errors."""


# geometry
class ParameterSearchFailed(RBSDEError):
    pass


class OutsideUniquenessBand(RBSDEError):
    pass


class NonConvergence(RBSDEError):
    pass


class DegenerateGradient(RBSDEError):
    pass


class VerificationFailed(RBSDEError):
    def __init__(self, message, worst=None):
        super().__init__(message)
        self.worst = worst


class EmptyBoundarySample(RBSDEError):
    pass


class CaseInapplicable(RBSDEError):
    pass


# catalog
class NotStarShaped(RBSDEError):
    pass


class InfeasibleSpec(RBSDEError):
    pass


class AxisDegeneracy(RBSDEError):
    pass


# lattice
class MissingChild(RBSDEError):
    pass


class NotRecombining(RBSDEError):
    pass


# solver
class PicardDivergence(RBSDEError):
    def __init__(self, message, n=None, step=None, node=None):
        super().__init__(message)
        self.n, self.step, self.node = n, step, node


class TerminalOutsideDomain(RBSDEError):
    pass


class LatticeMismatch(RBSDEError):
    pass


class ScheduleExhausted(RBSDEError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class UnsupportedDepth(RBSDEError):
    pass


class ContractionViolated(RBSDEError):
    pass


# validation
class InsufficientData(RBSDEError):
    pass


class ConfigError(RBSDEError):
    pass
