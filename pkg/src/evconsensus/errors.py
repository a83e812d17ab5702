"""Exception hierarchy shared by all modules."""


class EvConsensusError(Exception):
    """Base class for every error raised by this package."""


class InvalidQueryError(EvConsensusError, ValueError):
    """A lookup referenced a node or phase that does not exist."""


class ModelError(EvConsensusError, ValueError):
    """A feeder, thermal or fleet description is structurally invalid."""


class ContractError(EvConsensusError, ValueError):
    """Array dimensions or call preconditions do not match."""


class UnstableDiscretizationError(ModelError):
    """The thermal decay factor falls outside (0, 1)."""


class ImaginaryEquilibriumError(ModelError):
    """Equilibrium core temperature is not above equilibrium ambient."""


class InfeasibleSpecError(ModelError):
    """An EV's battery constraints admit no charge profile."""

    def __init__(self, message, constraint=None):
        super().__init__(message)
        self.constraint = constraint


class ScenarioInfeasibleError(EvConsensusError):
    """The network limits are violated before any EV acts, or no solution exists."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class ConfigurationError(EvConsensusError, ValueError):
    """Run configuration is inconsistent (e.g. isolated agents)."""


class SolverError(EvConsensusError, RuntimeError):
    """An iterative solver hit its iteration cap.

    Carries the best iterate found and its residual.
    """

    def __init__(self, message, best=None, residual=float("nan")):
        super().__init__(message)
        self.best = best
        self.residual = residual


class InfeasibleBaselineWarning(UserWarning):
    """Thermal headroom is already negative with zero EV load."""


class ConvergenceWarning(UserWarning):
    """The distributed run stopped at its iteration cap."""
