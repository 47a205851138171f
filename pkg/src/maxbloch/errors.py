"""Exception types shared across the package."""


class ModelError(Exception):
    """Base class for all maxbloch errors."""


class ValidationError(ModelError):
    """A domain object violates one of its invariants."""


class ResonanceError(ModelError):
    """Resonance structure is ambiguous or a resonant mode was inverted."""


class ProfileError(ModelError):
    """Profile data violates a polarization or liftability constraint."""


class CflError(ModelError):
    """Requested time step exceeds the stability/accuracy bound."""


class SolverDivergedError(ModelError):
    """Non-finite values appeared during time integration."""


class ConfigError(ModelError):
    """Configuration file failed validation.

    Carries the full list of violations, one string per offending field.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
