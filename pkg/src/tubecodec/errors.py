"""Exception types shared across the codec."""


class CodecError(Exception):
    """Base class for all tubecodec errors."""


class ConfigurationError(CodecError):
    """Inconsistent or invalid configuration / shape mismatch."""


class DegenerateModulationError(CodecError):
    """Modulation collapsed a nonzero weight tensor to zero RMS."""


class DivergenceError(CodecError):
    """Optimization produced non-finite losses or gradients."""


class BitstreamError(CodecError):
    """Malformed, truncated or corrupt coded data."""


class ChecksumError(BitstreamError):
    """Container payload failed CRC verification."""
