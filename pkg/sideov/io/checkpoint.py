"""
Single-file checkpoint container.

A checkpoint holds a versioned header, the named tensors of the detector
with their frozen flags, optimizer and scheduler state, the run config and
its hash, phase tags, the step counter and the training curve.
"""

import logging
import os
import pickle
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import torch

from sideov.core.errors import CheckpointError
from sideov.utils.paths import atomic_path

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'sideov-checkpoint'
CHECKPOINT_VERSION = 1

# phase tags recognised by the fine-tuning routines
TAGS = ('pretrain', 'openset_ft', 'grounding_ft')


@dataclass
class Checkpoint:
    """
    In-memory checkpoint.

    Attributes
    ----------
    tensors : OrderedDict
        ``state_dict`` of the whole detector.
    frozen : dict
        Parameter name to True if excluded from training.
    config : dict
        Nested config sections of the producing run.
    config_hash : str
    tags : dict
        Phase name to bool.
    step : int
        Optimizer steps taken in the current phase.
    epoch : int
        Completed epochs of the current phase.
    curve : list of dict
        One row per iteration.
    """
    tensors: OrderedDict
    frozen: dict
    config: dict
    config_hash: str
    tags: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    curve: list = field(default_factory=list)
    optimizer: Optional[dict] = None
    scheduler: Optional[dict] = None

    def tagged(self, name):
        return bool(self.tags.get(name, False))

    def to_dict(self):
        return {'header': {'format': CHECKPOINT_FORMAT, 'version': CHECKPOINT_VERSION},
                'tensors': self.tensors,
                'frozen': dict(self.frozen),
                'config': {k: dict(v) for k, v in self.config.items()},
                'config_hash': self.config_hash,
                'tags': dict(self.tags),
                'step': int(self.step),
                'epoch': int(self.epoch),
                'curve': list(self.curve),
                'optimizer': self.optimizer,
                'scheduler': self.scheduler,
                }


def save_checkpoint(ckpt: Checkpoint, path):
    """
    Write ``ckpt`` to ``path`` through a temp file and rename.
    """
    with atomic_path(path, suffix='.pt') as tmp:
        torch.save(ckpt.to_dict(), tmp)
    logger.info('Checkpoint written to "%s".', path)
    return path


def load_checkpoint(path):
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Raises
    ------
    CheckpointError
        If the file is missing, truncated or of another format or version.
    """
    if not os.path.isfile(path):
        raise CheckpointError(f'Checkpoint "{path}" not found')
    try:
        obj = torch.load(path, map_location='cpu', weights_only=True)
    except (RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as e:
        raise CheckpointError(f'Cannot read checkpoint "{path}": {e}')
    header = obj.get('header', {}) if isinstance(obj, dict) else {}
    if header.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f'"{path}" is not a sideov checkpoint')
    if header.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f'Checkpoint version {header.get("version")} is not supported')
    missing = [k for k in ('tensors', 'frozen', 'config', 'config_hash') if k not in obj]
    if missing:
        raise CheckpointError(f'Checkpoint "{path}" lacks {missing}')
    return Checkpoint(OrderedDict(obj['tensors']), obj['frozen'], obj['config'], obj['config_hash'],
                      obj.get('tags', {}), obj.get('step', 0), obj.get('epoch', 0), obj.get('curve', []),
                      obj.get('optimizer'), obj.get('scheduler'))
