"""Exception types shared across the package."""


class FreqsplatError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(FreqsplatError, ValueError):
    """Non-finite or out-of-contract argument."""


class DegenerateCovarianceError(FreqsplatError, ValueError):
    """Covariance too ill-conditioned to invert."""


class DegenerateSpectrumError(FreqsplatError, ValueError):
    """Spectrum carries no energy, cutoff undefined."""


class ConjugateSymmetryError(FreqsplatError, ValueError):
    """Filtering a real image produced a non-real result."""


class InvalidTimestepError(FreqsplatError, ValueError):
    """Timestep outside the noise schedule."""


class ScheduleError(FreqsplatError, ValueError):
    """Noise schedule values out of range for the requested step."""


class EmptyMaskError(FreqsplatError, ValueError):
    """Reference mask selects no pixels."""


class MissingFixtureError(FreqsplatError, KeyError):
    """No recorded response for this score request."""


class ProviderError(FreqsplatError, RuntimeError):
    """A score provider failed; carries the branch tag when raised mid-step."""

    def __init__(self, message: str, branch: str | None = None):
        super().__init__(message if branch is None else f"[{branch}] {message}")
        self.branch = branch


class ProtocolError(FreqsplatError, RuntimeError):
    """Malformed frame on the score wire protocol."""


class ProtocolVersionError(ProtocolError):
    """Peer speaks a different protocol version."""


class ShapeMismatchError(ProtocolError):
    """Response tensor shape does not match the request."""


class BridgeTimeoutError(ProtocolError, TimeoutError):
    """Remote score endpoint did not answer in time."""


class ConfigError(FreqsplatError, ValueError):
    """Bad or missing configuration value."""
