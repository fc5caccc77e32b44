"""
Module for routine base.
"""

import logging

from andes.utils.misc import elapsed

from sideov.core.errors import SideovError

logger = logging.getLogger(__name__)


class RoutineBase:
    """
    Base of the routines attached to a :class:`sideov.system.System`.

    Attributes
    ----------
    system : System
        Owner holding the run config and the detector.
    config : andes.core.Config
        Config section the routine reads.
    info : str
        One-line description.
    exec_time : float
        Seconds spent in the last run.
    exit_code : int
        0 after a successful run, the error's code otherwise.
    """

    section = 'Train'

    def __init__(self, system=None):
        self.system = system
        self.config = system.config.sections[self.section] if system is not None else None
        self.info = None
        self.exec_time = 0.0
        self.exit_code = 0
        self.result = None

    @property
    def class_name(self):
        return self.__class__.__name__

    def _run(self, **kwargs):
        raise NotImplementedError

    def run(self, **kwargs):
        """
        Run the routine and time it.

        Errors of the package propagate after ``exit_code`` is set.
        """
        t0, _ = elapsed()
        try:
            self.result = self._run(**kwargs)
        except SideovError as e:
            self.exit_code = e.exit_code
            raise
        finally:
            _, s = elapsed(t0)
            self.exec_time = float(s.split(' ')[0])
        self.exit_code = 0
        logger.info('<%s> finished in %s.', self.class_name, s)
        return self.result

    def __repr__(self):
        return f'{self.class_name} at {hex(id(self))}'
