"""Exception hierarchy.

``ValidationError`` subclasses signal bad input (CLI exit code 1),
``NumericalError`` subclasses signal a numerical failure (exit code 2).
"""


class GeohomError(Exception):
    pass


class ValidationError(GeohomError, ValueError):
    pass


class NumericalError(GeohomError, ArithmeticError):
    pass


# mesh
class DegenerateTriangle(ValidationError):
    pass


class DuplicateTriangle(DegenerateTriangle):
    pass


class NonManifoldEdge(ValidationError):
    pass


class BoundaryEdge(ValidationError):
    pass


class CollinearInput(ValidationError):
    pass


class MeshMismatch(ValidationError):
    pass


class IncompleteHinge(ValidationError):
    pass


# fields
class EllipticityViolation(ValidationError):
    pass


class ConvexityViolation(ValidationError):
    pass


class CarrierMismatch(ValidationError):
    pass


class NonInjectiveF(NumericalError):
    pass


class NonPositiveJacobian(NonInjectiveF):
    pass


class PathDependence(NumericalError):
    pass


# solvers
class SolverBreakdown(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class GaugeDeficiency(NumericalError):
    pass


class SingularHessian(NumericalError):
    pass


class SingularStencil(NumericalError):
    pass


class InfeasibleLP(NumericalError):
    def __init__(self, message, constraint=None, violation=None):
        super().__init__(message)
        self.constraint = constraint
        self.violation = violation


class InfeasibleStart(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass


class NonConvergenceWarning(RuntimeWarning):
    pass
