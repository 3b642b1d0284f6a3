"""tubecodec: a neural weight-stream video codec.

Videos are encoded as per-patch-tubelet network weights: shared base
parameters (installed in the decoder) are modulated by per-clip unique tokens,
which travel as quantized, arithmetic-coded residual streams with
temporal-coherence regularization steering the rate.
"""

__version__ = "0.1.0"

from .errors import (
    BitstreamError,
    ChecksumError,
    CodecError,
    ConfigurationError,
    DegenerateModulationError,
    DivergenceError,
)

__all__ = [
    "__version__",
    "BitstreamError",
    "ChecksumError",
    "CodecError",
    "ConfigurationError",
    "DegenerateModulationError",
    "DivergenceError",
]
