"""
Module for system.
"""
import importlib
import logging
from collections import OrderedDict
from typing import Optional

from andes.utils.tab import Tab

from sideov.core.config import RunConfig
from sideov.data.synth import generate_dataset
from sideov.io.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from sideov.routines import all_routines
from sideov.shared import torch

logger = logging.getLogger(__name__)


class System:
    """
    Container of a run: the merged config, the detector and the routines.

    Routines are attached as attributes named after their classes, e.g.,
    ``System.Pretrain`` and ``System.Evaluate``, and collected in
    ``System.routines``.

    Parameters
    ----------
    config : RunConfig or dict, optional
        A ready config, or nested ``{section: {key: value}}`` overrides.
    config_path : str, optional
        rc file to load.
    default_config : bool, optional
        True to ignore any rc file.
    options : list of str, optional
        ``Section.key=value`` overrides.
    seed : int, optional
        Global seed, overriding ``System.seed``.

    Attributes
    ----------
    checkpoint : Checkpoint or None
        Last checkpoint loaded or saved.
    exit_code : int
        Command-line exit code, 0 - normal, others - error.
    """

    def __init__(self,
                 config=None,
                 config_path: Optional[str] = None,
                 default_config: Optional[bool] = False,
                 options=None,
                 seed: Optional[int] = None,
                 name: Optional[str] = None,
                 ):
        self.name = name
        if isinstance(config, RunConfig):
            self.config = config
            if options:
                self.config.update_options(options)
            if seed is not None:
                self.config.set('System.seed', seed)
            if options or seed is not None:
                self.config.validate()
        else:
            self.config = RunConfig(config_path=config_path, default_config=default_config,
                                    options=options, seed=seed, config=config)
        self.routines = OrderedDict()
        self.exit_code = 0
        self.checkpoint = None
        self._model = None

        self._config_torch()
        self.import_routines()

    @classmethod
    def from_checkpoint(cls, path, **kwargs):
        """
        Build a system with the config stored in a checkpoint and load it.
        """
        ckpt = path if isinstance(path, Checkpoint) else load_checkpoint(path)
        system = cls(config=RunConfig.from_dict(ckpt.config), **kwargs)
        system.load_checkpoint(ckpt)
        return system

    @property
    def seed(self):
        return self.config.seed

    def _config_torch(self):
        cfg = self.config.System
        torch.set_num_threads(int(cfg.num_threads))
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)

    def import_routines(self):
        """
        Import routines as defined in ``routines/__init__.py``.

        Routines will be stored as instances with the name as class names.
        All routines will be stored to dictionary ``System.routines``.
        """
        for file, cls_list in all_routines.items():
            module = importlib.import_module('sideov.routines.' + file)
            for cls_name in cls_list:
                the_class = getattr(module, cls_name)
                self.__dict__[cls_name] = the_class(system=self)
                self.routines[cls_name] = self.__dict__[cls_name]

    @property
    def model(self):
        """
        The detector, built on first access.
        """
        if self._model is None:
            from sideov.models.detector import Detector
            self._model = Detector(self.config)
            logger.debug('Detector built with config %s.', self.config.hash()[:12])
        return self._model

    def generate(self, n_images=None):
        """
        Generate the synthetic dataset of this run's seed and ``Data`` config.
        """
        return generate_dataset(self.config.Data, self.seed, n_images)

    def load_checkpoint(self, path):
        """
        Load checkpoint tensors into the detector.

        Parameters
        ----------
        path : str or Checkpoint

        Returns
        -------
        Checkpoint
        """
        ckpt = path if isinstance(path, Checkpoint) else load_checkpoint(path)
        if ckpt.config_hash != self.config.hash():
            logger.warning('Checkpoint config hash %s differs from the run config.', ckpt.config_hash[:12])
        self.model.load_tensors(ckpt.tensors)
        self.checkpoint = ckpt
        return ckpt

    def save_checkpoint(self, path, tags=None, step=0, epoch=0, curve=None, optimizer=None, scheduler=None):
        """
        Write the detector and training state to ``path`` atomically.
        """
        model = self.model
        ckpt = Checkpoint(model.state_dict(), model.frozen_flags(), self.config.as_dict(), self.config.hash(),
                          dict(tags or {}), step, epoch, list(curve or []), optimizer, scheduler)
        save_checkpoint(ckpt, path)
        self.checkpoint = ckpt
        return ckpt

    def summary(self):
        """
        Log the parameter partition of the detector.
        """
        rows = []
        for name, (n_train, n_frozen) in self.model.component_counts().items():
            rows.append((name, f'{n_train:,}', f'{n_frozen:,}'))
        tab = Tab(title='Parameter partition',
                  header=['Component', 'Trainable', 'Frozen'],
                  data=rows,
                  )
        out = [f"-> Config hash {self.config.hash()[:12]}, seed {self.seed}, "
               f"variant {self.config.SideFormer.variant}", tab.draw()]
        out_str = '\n'.join(out)
        logger.info(out_str)
        return out_str

    def supported_routines(self):
        """
        Table of the routines and their descriptions.
        """
        pairs = [(name, rtn.info or '') for name, rtn in self.routines.items()]
        return Tab(title='Supported Routines', header=['Routine', 'Description'], data=pairs).draw()

    def __repr__(self):
        return f'System(seed={self.seed}, config={self.config.hash()[:12]})'
