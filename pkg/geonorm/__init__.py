from .tensor import *
from .sphere import *
from .schedules import *
from .norms import *
from .config import *
from .model import *
from .prenorm import *
from .results import *
from .training import *
from .checks import run_gradchecks, run_geometry_checks
from ._version import __version__
from .cli import cli
from .utils import GeoNormError, DimensionError, DomainError, ContractError, TokenIndexError, CorpusError, CheckFailure
