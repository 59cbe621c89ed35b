"""
Exception hierarchy for the reachability toolkit
"""


class IqcReachError(Exception):
    """Base class for every error raised by iqcreach"""


class PolynomialParseError(IqcReachError):
    """Malformed polynomial text; carries the 1-based line and column"""

    def __init__(self, message, text="", position=0):
        self.text = text
        self.position = position
        self.line = text.count("\n", 0, position) + 1
        last_newline = text.rfind("\n", 0, position)
        self.column = position - last_newline
        super().__init__(f"{message} (line {self.line}, column {self.column})")


class UnboundVariableError(IqcReachError, KeyError):
    def __init__(self, variable):
        self.variable = variable
        super().__init__(f"variable '{variable}' is not bound")

    def __str__(self):
        return self.args[0]


class DimensionMismatchError(IqcReachError, ValueError):
    pass


class BilinearExpressionError(IqcReachError, ValueError):
    """Product of two expressions that both carry decision handles"""


class SosDegreeError(IqcReachError, ValueError):
    pass


class SolverFailure(IqcReachError):
    """The conic backend stalled or returned an unverifiable answer"""

    def __init__(self, message, iteration=None, family=None):
        self.iteration = iteration
        self.family = family
        super().__init__(message)


class InfeasibleInitialization(IqcReachError):
    """The first gamma-step found no feasible gamma"""

    def __init__(self, family, iteration=1):
        self.family = family
        self.iteration = iteration
        super().__init__(
            f"iteration {iteration}: initial iterate infeasible, violated constraint family '{family}'"
        )


class KypScreenError(IqcReachError):
    """The Pi_22 < 0 precondition of the finite-horizon soft IQC bound failed"""


class ConvergenceError(IqcReachError):
    pass


class ConfigError(IqcReachError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        location = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{location}")


class OracleError(IqcReachError):
    """Grid Hamilton-Jacobi oracle misuse (CFL violation, out-of-grid flux)"""
