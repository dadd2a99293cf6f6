"""Multirate recurrent video sequence modeling.

A clocked multi-group GRU encoder trained by bidirectional context
reconstruction with attention, plus the downstream pipelines: VLAD-aggregated
event detection and beam-search caption decoding, all over precomputed
per-frame feature files.
"""

from . import tensor
from .data import Corpus, RunConfig
from .errors import ConfigError, DataError, NumericError, UndefinedMetricError
from .optim import ParamStore, glorot_uniform
from .recurrent import (GruCell, MgruConfig, MultirateGru, active_groups,
                        collect_states, recurrent_param_count)
from .rng import RngState

__version__ = "0.1.0"

__all__ = [
    "tensor", "Corpus", "RunConfig", "ConfigError", "DataError",
    "NumericError", "UndefinedMetricError", "ParamStore", "glorot_uniform",
    "GruCell", "MgruConfig", "MultirateGru", "active_groups",
    "collect_states", "recurrent_param_count", "RngState", "__version__",
]
