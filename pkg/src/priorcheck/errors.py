"""Exception and warning types shared across the package."""


class PriorcheckError(Exception):
    """Base class for all errors raised by this package."""


# --- data validation ---

class UnbalancedData(PriorcheckError):
    """Group sizes differ; only balanced designs are supported."""


class NonFiniteValue(PriorcheckError):
    """An observation or parameter is NaN or infinite."""


class TooFewGroups(PriorcheckError):
    """Fewer than two groups in the dataset."""


class InvalidParameter(PriorcheckError):
    """A model, prior, or config parameter violates its constraints."""


# --- sampling ---

class DimensionTooSmall(PriorcheckError):
    """Requested basis dimension is below 2."""


class InfeasibleV(PriorcheckError):
    """(s, q) violates q >= s^2/I beyond the feasibility tolerance."""


class ImproperPriorNotSamplable(PriorcheckError):
    """Operation requires drawing from the hyperprior, which is improper."""


# --- checks ---

class EmptyDraws(PriorcheckError):
    """Monte Carlo p-value requested with no reference draws."""


class NoResidualInformation(PriorcheckError):
    """n = 1: residuals are identically zero, the model check carries no information."""


class DegenerateDiscrepancy(PriorcheckError):
    """The discrepancy is constant over the reference distribution."""


class DegenerateDiscrepancyWarning(UserWarning):
    """Reference draws of the discrepancy have zero sample variance."""


class UnknownDiscrepancy(PriorcheckError):
    """Discrepancy name not present in the registry."""


# --- calibration ---

class EmptySample(PriorcheckError):
    """Uniformity test requested on an empty sample."""


class OutOfRangeValue(PriorcheckError):
    """Uniformity test sample contains values outside [0, 1]."""


# --- io ---

class ConfigError(PriorcheckError):
    """Base class for config-file problems."""


class UnknownKey(ConfigError):
    """Config contains a key outside the schema."""


class TypeMismatch(ConfigError):
    """Config value has the wrong JSON type."""


class MissingRequired(ConfigError):
    """A required config key is absent."""


class MissingHeader(PriorcheckError):
    """CSV file does not start with the exact expected header."""


class BadRow(PriorcheckError):
    """CSV row is malformed."""

    def __init__(self, line: int, detail: str):
        super().__init__(f"line {line}: {detail}")
        self.line = line
