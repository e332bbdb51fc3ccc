# exceptions.py
"""
Error types raised by the toolkit.

Bad input raises subclasses of ValueError; numerical breakdowns raise
subclasses of RuntimeError. Everything derives from ShearStabError so a
sweep can catch one type per point.
"""


class ShearStabError(Exception):
    """Root of all toolkit errors."""


class ValidationError(ShearStabError, ValueError):
    """Input rejected before any numerics ran."""


class InvalidGrid(ValidationError):
    pass


class NotMonotone(ValidationError):
    pass


class MixedConcavity(ValidationError):
    pass


class EndpointCurvatureNonzero(ValidationError):
    pass


class DivisionDegenerate(ValidationError):
    pass


class InvalidProblem(ValidationError):
    pass


class LayerTooWide(ValidationError):
    pass


class DegenerateFit(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class NumericalError(ShearStabError, RuntimeError):
    """A solve or an evolution could not be trusted."""


class NearSingular(NumericalError):
    def __init__(self, condition: float, threshold: float):
        self.condition = condition
        self.threshold = threshold
        super().__init__(f"Condition estimate {condition:.3e} exceeds {threshold:.1e}")


class NonConvergentTail(NumericalError):
    pass


class CFLViolation(NumericalError):
    pass


class NonDecaying(NumericalError):
    pass


class BlowupDetected(NumericalError):
    pass


class InvariantBreach(ShearStabError):
    """A post-condition failed; the CLI exits with status 2."""
