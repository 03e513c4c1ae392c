"""Exception hierarchy shared by all mixstream modules."""


class MixstreamError(Exception):
    pass


class SchemaError(MixstreamError, ValueError):
    """A network or plan document does not match its schema."""


class GeometryError(MixstreamError, ValueError):
    """Layer shapes do not chain."""


class InfeasibleError(MixstreamError):
    """No tiling/boundary satisfies the constraints.

    ``reasons`` maps each boundary (or candidate) to the binding constraint.
    """

    def __init__(self, message, reasons=None):
        super().__init__(message)
        self.reasons = dict(reasons or {})


class CoordinateOverflowError(MixstreamError, ValueError):
    def __init__(self, positions, coord_bits, required_bits):
        super().__init__(
            f"block has {positions} positions but coord_bits={coord_bits} "
            f"addresses only {1 << coord_bits}; use coord_bits={required_bits}"
        )
        self.positions = positions
        self.coord_bits = coord_bits
        self.required_bits = required_bits


class CorruptLayerError(MixstreamError, ValueError):
    def __init__(self, message, block=None):
        if block is not None:
            message = f"block {block}: {message}"
        super().__init__(message)
        self.block = block


class IllConditionedGramError(MixstreamError, ArithmeticError):
    def __init__(self, noise):
        super().__init__(f"Gram matrix not positive definite with noise sigma={noise:g}")
        self.noise = noise


class AccumulatorOverflowError(MixstreamError, OverflowError):
    pass


class ObjectiveError(MixstreamError, RuntimeError):
    """Black-box objective failed; ``trace`` holds the samples gathered so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []
