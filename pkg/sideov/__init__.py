__version__ = '0.1.0'

from sideov.main import config_logger, load  # NOQA
from sideov.system import System  # NOQA
from sideov.core.config import RunConfig  # NOQA

__all__ = ['System', 'RunConfig', 'load', 'config_logger']
