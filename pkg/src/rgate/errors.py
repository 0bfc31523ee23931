"""Exception types shared across the package."""


class RgateError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RgateError):
    """A caller-supplied value violates an operation precondition."""


class ExtractionError(RgateError):
    """No answer mapping could be extracted from a responder output."""


class ParseError(RgateError):
    """Generator output could not be parsed into a challenge."""


class UnknownModelError(RgateError):
    """No backend is registered under the requested model id."""


class TransportError(RgateError):
    """A backend call failed in a way that may succeed on retry."""


class BudgetExceededError(RgateError):
    """The configured output-token budget for a backend is spent."""


class GenerationExhaustedError(RgateError):
    """The per-challenge regeneration bound was hit without a valid candidate."""


class CalibrationExhaustedError(RgateError):
    """A difficulty level could not be calibrated within its trial budget."""

    def __init__(self, level_name: str, trials: int):
        super().__init__(f"calibration exhausted for level {level_name!r} after {trials} evaluations")
        self.level_name = level_name
        self.trials = trials


class ConfigurationError(RgateError):
    """A configuration value is unusable (missing file, empty range, bad key)."""


class BankCorruptionError(RgateError):
    """A bank file failed its integrity check on load."""


class UnsupportedFormatError(RgateError):
    """A bank file declares a format version this build cannot read."""


class BankExhaustedError(RgateError):
    """No unserved challenge remains at the requested difficulty."""


class ProtocolOrderError(RgateError):
    """A session operation was called out of order."""


class SessionExpiredError(RgateError):
    """The session outlived its time-to-live."""


class SessionDecidedError(RgateError):
    """The session already reached a terminal decision."""


class PolicyError(RgateError):
    """A gate policy violates its own invariants."""


class UndefinedRatioError(RgateError):
    """Asymmetry ratio requested with zero generation tokens."""
