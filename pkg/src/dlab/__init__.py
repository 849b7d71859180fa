"""Distilling attention language models into state-space students at desk scale.

Submodules: ``tensor`` (float64 reverse-mode autodiff), ``ssm`` (scans and
materialised mixers), ``models``, ``tasks``, ``training``/``optim``,
``distill``, ``sampler``, ``scaling``, ``bench``, ``config`` and ``cli``.
"""

from .errors import ConfigError, ContractError, DataError, DimensionError, DlabError, InputError, NumericError
from .models import Model, ModelSpec

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "DlabError",
    "InputError",
    "Model",
    "ModelSpec",
    "NumericError",
]
