"""Exception hierarchy.  Each class carries the CLI exit code for its category."""


class EinrelError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(EinrelError, ValueError):
    category = "config"
    exit_code = 2


class SolverError(EinrelError, RuntimeError):
    category = "solver"
    exit_code = 3

    def __init__(self, message, residual_history=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


class BudgetError(EinrelError, RuntimeError):
    category = "budget"
    exit_code = 4


class DataError(EinrelError, ValueError):
    category = "data"
    exit_code = 5


class InsufficientDataError(DataError):
    pass


class GridError(DataError):
    pass


class SimulationError(EinrelError, FloatingPointError):
    category = "simulation"
    exit_code = 6
