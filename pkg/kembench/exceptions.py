class KemBenchError(Exception):
    """Base class for every error raised by kembench."""


class ContractError(KemBenchError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are inconsistent."""


class OracleError(KemBenchError, RuntimeError):
    """The finite-difference oracle could not evaluate the function."""


class OptimizerError(KemBenchError, FloatingPointError):
    """An optimizer step was rejected (non-finite gradient)."""


class ConfigError(KemBenchError):
    """Invalid experiment configuration."""


class CorrectnessGateError(KemBenchError):
    """A correctness gate failed (cost mismatch, gradient check)."""
