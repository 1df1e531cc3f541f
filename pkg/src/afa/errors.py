class AfaError(Exception):
    exit_code = 1


class SchemaError(AfaError, ValueError):
    """Bad schema or configuration."""
    exit_code = 2


class DataError(AfaError, ValueError):
    """Unreadable or invalid data."""
    exit_code = 3


class ConvergenceError(AfaError, RuntimeError):
    exit_code = 4

    def __init__(self, msg, grad_norm=None):
        super().__init__(msg)
        self.grad_norm = grad_norm


class GraphError(AfaError, ValueError):
    """Superstate set or policy graph violates a structural precondition."""
    exit_code = 2


class IllConditioned(AfaError, ArithmeticError):
    """Linear system too ill-conditioned to solve (e.g. ridge=0 with duplicate rows)."""
    exit_code = 3
