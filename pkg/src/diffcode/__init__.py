"""All-in-one image restoration with task-specific residual codebooks,
latent diffusion retrieval and task-adaptive expert routing."""

from . import codebook, diffusion, metrics, networks, numerics, routing, tasks
from .errors import ConfigError, ContractError, DiffCodeError, DimensionError, NonFiniteError

__version__ = "0.1.0"
