"""Exception types raised across the package."""


class SplitMCError(Exception):
    """Base class for all package errors."""


class GeneratorError(SplitMCError, ValueError):
    """A matrix violates the rate-matrix (generator) invariants."""


class StochasticMatrixError(SplitMCError, ValueError):
    """A matrix is not row-stochastic."""


class StateSpaceOverflow(SplitMCError, ValueError):
    """The enumerated state space exceeds the configured cap."""


class ReducibleChainError(SplitMCError, ValueError):
    """The chain is reducible or periodic, so its stationary law is not unique."""

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = components


class AbsoluteContinuityError(SplitMCError, ValueError):
    """Q puts mass on a transition that P forbids."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class ConvergenceError(SplitMCError, RuntimeError):
    """An iterative routine did not converge."""


class TheoremInapplicable(SplitMCError, ValueError):
    """The commutator hypothesis of the exponent law fails for this chain."""


class DecompositionError(SplitMCError, ValueError):
    """A lattice decomposition is invalid."""


class ConfigError(SplitMCError, ValueError):
    """A run configuration is malformed."""
