"""Exception taxonomy shared by the library and the CLI.

Each CLI-facing failure family carries an ``exit_code`` so the command line
can map exceptions to distinct process exit statuses.
"""
from __future__ import annotations


class BifError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1

    def __reduce__(self):
        # custom __init__ signatures need their original arguments to unpickle
        return (type(self), getattr(self, "_init_args", self.args))


class ValidationError(BifError, ValueError):
    exit_code = 2


class DimensionError(ValidationError):
    """Inputs disagree with the model's declared dimensions."""

    def __init__(self, what: str, expected: int, got: int):
        self._init_args = (what, expected, got)
        self.what = what
        self.expected = expected
        self.got = got
        super().__init__(f"dimension mismatch in {what}: expected {expected}, got {got}")


class ConfigError(ValidationError):
    """Config text failed to validate. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self._init_args = (message, line, key)
        self.line = line
        self.key = key
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class NumericalOverflowError(BifError, OverflowError):
    exit_code = 3


class DivergenceError(NumericalOverflowError):
    """SGLD (or retraining) produced non-finite or exploding values."""

    def __init__(self, step: int, max_abs: float, chain: int | None = None, detail: str = ""):
        self._init_args = (step, max_abs, chain, detail)
        self.step = step
        self.max_abs = max_abs
        self.chain = chain
        self.detail = detail
        where = f"chain {chain}, " if chain is not None else ""
        msg = f"divergence at {where}step {step} (max |value| = {max_abs:.6g})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)

    def with_chain(self, chain: int) -> "DivergenceError":
        return DivergenceError(self.step, self.max_abs, chain, self.detail)


class IncompatibleError(BifError):
    """Artifacts or matrices cannot be combined (labels, shapes)."""

    exit_code = 4


class UnsupportedError(BifError):
    exit_code = 5


class UnsupportedDecompositionError(UnsupportedError):
    """Per-component losses requested for examples without components."""


class HessianCapError(UnsupportedError):
    def __init__(self, d: int, cap: int):
        self._init_args = (d, cap)
        self.d = d
        self.cap = cap
        super().__init__(f"refusing dense Hessian: d={d} exceeds cap={cap}")


class InsufficientDrawsError(BifError, ValueError):
    def __init__(self, draws: int):
        self._init_args = (draws,)
        self.draws = draws
        super().__init__(f"covariance needs at least 2 draws, got {draws}")


class FactorizationError(BifError, ArithmeticError):
    """(H + gamma*I) is not positive definite."""

    exit_code = 3

    def __init__(self, min_eigenvalue: float, gamma: float):
        self._init_args = (min_eigenvalue, gamma)
        self.min_eigenvalue = min_eigenvalue
        self.gamma = gamma
        super().__init__(
            f"dampened Hessian (gamma={gamma:g}) is not positive definite; "
            f"smallest eigenvalue {min_eigenvalue:.6g}"
        )


class ConvergenceError(BifError, ArithmeticError):
    exit_code = 3


class ArtifactIntegrityError(BifError):
    exit_code = 6
