"""
Training routines: pre-training with the vanilla RPN, open-set fine-tuning
and mixed detection/grounding fine-tuning.
"""

import logging
import math
import os
from collections import OrderedDict

import numpy as np
import torch

from sideov.core.errors import CheckpointError, SideovError, TrainingDiverged
from sideov.data.batch import detection_batch, grounding_batch, iter_batches
from sideov.data.vocab import concept_pool
from sideov.models.rpn import ProposalMode
from sideov.routines.routine import RoutineBase
from sideov.shared import pd, sub_seed
from sideov.utils import parse_list
from sideov.utils.paths import atomic_path

logger = logging.getLogger(__name__)

WARMUP_START = 1e-3


def lr_factor(step, warmup, total, schedule='cosine'):
    """
    Learning-rate multiplier at ``step``.

    Linear warm-up from ``1/1000`` to 1 over ``warmup`` steps, then cosine
    annealing to 0 at ``total`` (or constant).
    """
    if warmup > 0 and step < warmup:
        return WARMUP_START + (1.0 - WARMUP_START) * step / warmup
    if schedule == 'constant':
        return 1.0
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(params, lr, weight_decay):
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def make_scheduler(optimizer, warmup, total, schedule='cosine'):
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: lr_factor(step, warmup, total, schedule))


def weighted_total(losses, cfg):
    """
    Weighted sum of the loss terms.
    """
    total = cfg.w_rpn_cls * losses['rpn_cls'] + cfg.w_rpn_reg * losses['rpn_reg'] + \
        cfg.w_align * losses['align']
    for name, value in losses.items():
        if name.startswith('reg'):
            total = total + cfg.w_reg * value
    return total


def curve_path(out):
    stem, _ = os.path.splitext(out)
    return f'{stem}_curve.csv'


class TrainerBase(RoutineBase):
    """
    Shared optimization loop of the training phases.

    Subclasses set the phase tag and the phase-specific schedule through
    :meth:`settings` and :meth:`select`.
    """

    section = 'Train'
    phase = 'pretrain'

    def settings(self):
        """
        Phase-specific optimization settings.
        """
        cfg = self.config
        return OrderedDict(lr=cfg.lr, epochs=cfg.epochs, mode=ProposalMode.RPN_ONLY,
                           grid_n=None, alternate=False)

    def select(self, dataset):
        """
        Training records of this phase.
        """
        return dataset.train

    def make_batch(self, chunk, step, flips, dataset, alternate):
        system = self.system
        model = system.model
        if alternate and step % 2 == 1:
            rng = np.random.default_rng(sub_seed(system.seed, 'sampling', 'concepts', self.phase, step))
            dcfg = system.config.Data
            pool = concept_pool(dataset.vocab, parse_list(dcfg.colors), parse_list(dcfg.shapes))
            return grounding_batch(chunk, pool, model.embedder, dcfg.concept_budget, rng, flips, model.dtype)
        return detection_batch(chunk, dataset.vocab.seen, model.embedder, flips, model.dtype)

    def flips(self, step, n):
        if not self.config.flip:
            return [False] * n
        rng = np.random.default_rng(sub_seed(self.system.seed, 'flip', self.phase, step))
        return [bool(v) for v in rng.random(n) < 0.5]

    def _run(self, dataset, out, resume=None, **kwargs):
        """
        Train and write the checkpoint to ``out``.

        Parameters
        ----------
        dataset : SyntheticDataset
        out : str
            Checkpoint path; the curve goes next to it.
        resume : Checkpoint, optional
            Partial checkpoint of the same phase to continue from.

        Returns
        -------
        Checkpoint
        """
        system = self.system
        cfg = self.config
        seed = system.seed
        model = system.model
        opts = self.settings()
        records = self.select(dataset)
        if len(records) == 0:
            raise SideovError(f'<{self.class_name}> has no training records')

        per_epoch = math.ceil(len(records) / cfg.batch_size)
        total = per_epoch * opts['epochs']
        stop = total if cfg.max_iters <= 0 else min(total, int(cfg.max_iters))

        params = model.trainable_parameters()
        optimizer = make_optimizer(params, opts['lr'], cfg.weight_decay)
        scheduler = make_scheduler(optimizer, cfg.warmup_iters, total, cfg.schedule)
        curve, start = [], 0
        if resume is not None:
            if not resume.tagged(self.phase) or resume.optimizer is None:
                raise CheckpointError(f'Checkpoint cannot resume phase <{self.phase}>')
            optimizer.load_state_dict(resume.optimizer)
            scheduler.load_state_dict(resume.scheduler)
            curve, start = list(resume.curve), int(resume.step)
            logger.info('Resuming <%s> at step %d.', self.phase, start)

        checksum = model.frozen_checksum()
        n_train, n_frozen = model.parameter_partition()
        logger.info('<%s>: %d images, %d steps, lr=%g, %d trainable and %d frozen tensors.',
                    self.class_name, len(records), total, opts['lr'], len(n_train), len(n_frozen))
        model.train()
        step, epoch = 0, 0
        for epoch in range(opts['epochs']):
            order = np.random.default_rng(sub_seed(seed, 'order', self.phase, epoch)).permutation(len(records))
            for chunk in iter_batches(records, cfg.batch_size, order):
                if step >= stop:
                    break
                if step < start:
                    step += 1
                    continue
                batch = self.make_batch(chunk, step, self.flips(step, len(chunk)), dataset, opts['alternate'])
                generator = torch.Generator().manual_seed(sub_seed(seed, 'sampling', self.phase, step))
                flags = set()
                lr = optimizer.param_groups[0]['lr']
                losses = model.forward_train(batch, generator, opts['mode'], opts['grid_n'], flags)
                total_loss = weighted_total(losses, cfg)
                values = OrderedDict((k, float(v.detach())) for k, v in losses.items())
                if not all(math.isfinite(v) for v in values.values()) or not torch.isfinite(total_loss):
                    raise TrainingDiverged(step, values)
                optimizer.zero_grad()
                total_loss.backward()
                torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
                optimizer.step()
                scheduler.step()

                row = OrderedDict(phase=self.phase, step=step, epoch=epoch, lr=lr, base_lr=opts['lr'],
                                  mode=batch.mode.value, loss=float(total_loss.detach()))
                row.update(values)
                curve.append(row)
                logger.debug('step %d: loss=%.6f lr=%.3g flags=%s', step, row['loss'], lr, sorted(flags))
                if cfg.log_every > 0 and step % cfg.log_every == 0:
                    logger.info('<%s> epoch %d step %d/%d loss %.4f lr %.3g', self.class_name, epoch,
                                step, total, row['loss'], lr)
                step += 1
            if step >= stop:
                break

        if model.frozen_checksum() != checksum:
            raise SideovError('Frozen encoder weights changed during training')
        tags = dict(system.checkpoint.tags) if system.checkpoint is not None else {}
        tags[self.phase] = True
        ckpt = system.save_checkpoint(out, tags=tags, step=min(step, stop), epoch=epoch, curve=curve,
                                      optimizer=optimizer.state_dict(), scheduler=scheduler.state_dict())
        self.write_curve(curve, curve_path(out))
        return ckpt

    def write_curve(self, curve, path):
        with atomic_path(path, suffix='.csv') as tmp:
            pd.DataFrame(curve).to_csv(tmp, index=False)
        logger.info('Training curve written to "%s".', path)
        return path


class Pretrain(TrainerBase):
    """
    Pre-training with RPN proposals on the seen vocabulary.
    """
    phase = 'pretrain'

    def __init__(self, system=None):
        TrainerBase.__init__(self, system)
        self.info = 'Pre-training with the vanilla RPN'


class OpensetFinetune(TrainerBase):
    """
    Fine-tuning on a subset with merged RPN and segmenter proposals at a
    reduced learning rate.
    """
    phase = 'openset_ft'

    def __init__(self, system=None):
        TrainerBase.__init__(self, system)
        self.info = 'Open-set proposal fine-tuning'

    def settings(self):
        cfg = self.config
        return OrderedDict(lr=cfg.lr * cfg.ft_lr_ratio, epochs=cfg.ft_epochs, mode=ProposalMode.OPEN_SET,
                           grid_n=cfg.ft_grid_n, alternate=False)

    def select(self, dataset):
        records = dataset.train
        n = max(1, int(round(len(records) * self.config.subset_frac)))
        rng = np.random.default_rng(sub_seed(self.system.seed, 'order', self.phase, 'subset'))
        idx = np.sort(rng.choice(len(records), size=min(n, len(records)), replace=False))
        return [records[i] for i in idx]


class GroundingFinetune(TrainerBase):
    """
    Fine-tuning on alternating detection and grounding batches.
    """
    phase = 'grounding_ft'

    def __init__(self, system=None):
        TrainerBase.__init__(self, system)
        self.info = 'Mixed detection and grounding fine-tuning'

    def settings(self):
        cfg = self.config
        return OrderedDict(lr=cfg.grounding_lr, epochs=cfg.grounding_epochs, mode=ProposalMode.RPN_ONLY,
                           grid_n=None, alternate=True)
