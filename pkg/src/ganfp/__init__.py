"""ganfp: train one fingerprinted GAN, instantiate many fingerprinted
generators, decode the fingerprints back out of their images, and
attribute those images to registered users."""

__version__ = "0.1.0"

from .fingerprints import (
    Fingerprint,
    FingerprintSpace,
    capacity_estimate,
    matches,
    matching_bits,
    null_p_value,
)

__all__ = [
    "__version__",
    "Fingerprint",
    "FingerprintSpace",
    "capacity_estimate",
    "matches",
    "matching_bits",
    "null_p_value",
]
