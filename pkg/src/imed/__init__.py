"""Instance-aware ensembles of domain-adaptation models, distilled into a single student."""
from __future__ import annotations

from imed.config import MetricsRecord, RunConfig
from imed.errors import ConfigError, NonFiniteError
from imed.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigError", "MetricsRecord", "NonFiniteError", "RunConfig", "__version__"]
