"""Exception types shared across the toolkit."""


class AsrkitError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(AsrkitError):
    """Tensor shapes do not satisfy an operation's contract."""


class ContractError(AsrkitError):
    """An API precondition was violated by the caller."""


class NumericError(AsrkitError):
    """Non-finite values where finite ones are required."""


class WavError(AsrkitError):
    """Malformed or unsupported WAV data.

    Carries the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FeatureError(AsrkitError):
    """Audio cannot be featurized (too short, bad config combination)."""


class ConfigError(AsrkitError):
    """Invalid configuration value or combination."""


class TokenError(AsrkitError):
    """Unknown token symbol or id."""


class LexiconError(AsrkitError):
    """Bad lexicon entry (unknown token in a spelling, malformed line)."""


class TargetError(AsrkitError):
    """A training target violates the active criterion's constraints."""


class InfeasibleTargetError(TargetError):
    """No framewise alignment of the target exists for the given length."""


class ArpaError(AsrkitError):
    """Malformed ARPA language model file.

    Carries the 1-based line number at which parsing failed, when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class OovError(AsrkitError):
    """Word outside the language model vocabulary and no <unk> available."""


class DecodeError(AsrkitError):
    """Beam search cannot produce a valid hypothesis."""


class EmissionsFormatError(AsrkitError):
    """Corrupt or incompatible emissions binary file."""


class ManifestError(AsrkitError):
    """Malformed dataset manifest.

    Carries the 1-based line number at which parsing failed, when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class PipelineError(AsrkitError):
    """A batch failed to build; names the utterance that caused it."""


class ArchError(AsrkitError):
    """Invalid network architecture description."""


class CheckpointError(AsrkitError):
    """Corrupt checkpoint file or checkpoint/architecture mismatch."""


class UsageError(AsrkitError):
    """Inconsistent command line flags."""
