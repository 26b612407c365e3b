"""Exception hierarchy shared by every fp8flow module."""


class Fp8FlowError(Exception):
    """Base class. ``code`` is a stable identifier used in CLI diagnostics."""

    code = "error"


class InvalidValue(Fp8FlowError, ValueError):
    code = "invalid-value"


class ShapeError(Fp8FlowError, ValueError):
    code = "shape"


class ScaleModeError(Fp8FlowError, ValueError):
    code = "scale-mode"


class ConfigError(Fp8FlowError, ValueError):
    code = "config"


class MissingActivations(Fp8FlowError, RuntimeError):
    code = "missing-activations"


class FormatError(Fp8FlowError, ValueError):
    code = "format"


class TruncatedFile(FormatError):
    code = "truncated"


class InvariantViolation(Fp8FlowError, AssertionError):
    """An internal consistency check failed; the CLI maps this to exit status 2."""

    code = "invariant"
