"""Registration of two voxel radiance fields guided by viewshed flows."""

from .errors import (ConfigurationError, ContractError, DegenerateError, DivergenceError, DomainError,
                     GenerationError, NoSolutionError, ParseError, RankError, StageError, ValidationError,
                     ViewshedRegError)
from .lie import Transform, se3_exp, se3_log

__version__ = "0.1.0"
