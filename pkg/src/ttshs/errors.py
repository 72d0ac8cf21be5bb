"""Exception hierarchy.  Every error carries a machine-readable ``code``."""


class TtshsError(Exception):
    code = "ttshs_error"


class ShapeMismatchError(TtshsError, ValueError):
    code = "shape_mismatch"


class EigensolverFailure(TtshsError, ArithmeticError):
    code = "eigensolver_failure"


class ExpmOverflowError(TtshsError, OverflowError):
    code = "overflow"


class SurvivalExhaustedError(TtshsError, ValueError):
    code = "survival_exhausted"


class DivergenceDetectedError(TtshsError, ArithmeticError):
    """The weighted integrand does not decay: the expectation does not exist."""

    code = "divergence_detected"


class DivergentMomentError(TtshsError, ArithmeticError):
    code = "divergent_moment"

    def __init__(self, moment, message=None):
        self.moment = moment
        super().__init__(message or f"divergent moment {moment}")


class UnstableModelError(TtshsError, ArithmeticError):
    code = "unstable_model"

    def __init__(self, message, verdict=None):
        self.verdict = verdict
        super().__init__(message)


class SubclassViolationError(TtshsError, ValueError):
    code = "subclass_violation"


class OdeFailureError(TtshsError, RuntimeError):
    code = "ode_failure"


class NoninvertiblePsiError(TtshsError, ArithmeticError):
    code = "noninvertible_psi"


class ModelParseError(TtshsError, ValueError):
    code = "parse_error"

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}, column {column})"
        super().__init__(message + where)


class ModelValidationError(TtshsError, ValueError):
    code = "validation_error"

    def __init__(self, violations):
        self.violations = list(violations)
        text = "; ".join(f"{v.code}: {v.message}" for v in self.violations)
        super().__init__(text or "invalid model")


class ConstraintUnsatisfiableError(TtshsError, ValueError):
    code = "constraint_unsatisfiable"


class InfeasibleMeasurementError(TtshsError, ValueError):
    code = "infeasible_measurement"


class NoClosedFormError(TtshsError, ValueError):
    code = "no_closed_form"
