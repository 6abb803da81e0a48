"""2.5D spatial expression imputation: sampling, registration, refinement."""

from stdai._core import (
    ConfigError,
    CoreError,
    align,
    confidence,
    dco,
    grid_mask,
    metrics,
    phantom_bundle,
    run,
    volume,
)

__all__ = [
    "ConfigError",
    "CoreError",
    "align",
    "confidence",
    "dco",
    "grid_mask",
    "metrics",
    "phantom_bundle",
    "run",
    "volume",
]
