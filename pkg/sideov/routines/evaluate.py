"""
Evaluation routines: box and mask AP with proposal recall, the zero-shot
protocol on held-out compositions and the component ablation report.
"""

import logging
import os
from collections import OrderedDict

import numpy as np
import torch

from sideov.core.errors import CheckpointError
from sideov.core.metrics import area_ranges, average_precision, average_recall
from sideov.data.batch import iter_batches
from sideov.models.rpn import ProposalMode
from sideov.routines.routine import RoutineBase
from sideov.shared import pd, sub_seed
from sideov.utils import parse_list

logger = logging.getLogger(__name__)

SPLITS = ('seen', 'novel', 'all')

# ablation rows and proposal-mode columns
ABLATION_VARIANTS = ('baseline', 'extractor', 'full')
ABLATION_MODES = ('rpn', 'seg', 'open')


def collect(model, records, concepts, mode=ProposalMode.RPN_ONLY, with_masks=False,
            batch_size=16, embeddings=None):
    """
    Run inference over ``records`` in batches.

    Returns
    -------
    list of DetectionResult
        One per record, in order.
    """
    results = []
    model.eval()
    for chunk in iter_batches(records, batch_size):
        np_images = [rec.float_image() for rec in chunk]
        images = torch.as_tensor(np.stack(np_images).transpose(0, 3, 1, 2).copy(), dtype=model.dtype)
        ids = [(rec.split, rec.image_id) for rec in chunk]
        results.extend(model.detect(images, np_images, concepts, mode, with_masks, ids,
                                    embeddings=embeddings))
    return results


def restrict(results, records, concepts):
    """
    Detections and GTs of the given concepts only.
    """
    keep = set(concepts)
    dets = [[d for d in r.detections if d.concept in keep] for r in results]
    gts = [[a for a in rec.annotations if a.concept in keep] for rec in records]
    return dets, gts


def split_concepts(vocab, split):
    if split == 'seen':
        return list(vocab.seen)
    if split == 'novel':
        return list(vocab.novel)
    return vocab.all


class Evaluate(RoutineBase):
    """
    COCO-style AP of one vocabulary split with proposal AR.

    Inference always classifies against the full test vocabulary.
    """

    section = 'Eval'

    def __init__(self, system=None):
        RoutineBase.__init__(self, system)
        self.info = 'Detection evaluation'

    def ranges(self):
        return area_ranges(self.config.small_area, self.config.medium_area)

    def thresholds(self):
        cfg = self.config
        return np.linspace(cfg.iou_lo, cfg.iou_hi, int(cfg.iou_n))

    def score(self, results, records, concepts, split='all', with_masks=False):
        """
        Metrics of precomputed ``results``.

        Returns
        -------
        OrderedDict
            ``bbox`` and, with masks, ``segm`` EvalResults.
        """
        cfg = self.config
        dets, gts = restrict(results, records, concepts)
        out = OrderedDict()
        out['bbox'] = average_precision(dets, gts, concepts, self.thresholds(), self.ranges(),
                                        cfg.max_dets, 'bbox', split)
        all_gts = [rec.annotations for rec in records]
        for k in parse_list(cfg.ar_k, int):
            out['bbox'].ar[k] = average_recall([r.proposals for r in results], all_gts, k, self.thresholds())
        if with_masks:
            out['segm'] = average_precision(dets, gts, concepts, self.thresholds(), self.ranges(),
                                            cfg.max_dets, 'segm', split)
        return out

    def _run(self, dataset, split='all', mode=ProposalMode.RPN_ONLY, with_masks=False, records=None, **kwargs):
        """
        Evaluate the system's model on the validation records.
        """
        model = self.system.model
        records = dataset.val if records is None else records
        results = collect(model, records, dataset.vocab.all, mode, with_masks,
                          self.system.config.Train.batch_size)
        metrics = self.score(results, records, split_concepts(dataset.vocab, split), split, with_masks)
        res = metrics['bbox']
        logger.info('<%s> %s split, %s proposals: AP %.1f AP50 %.1f AR@%s %s', self.class_name, split,
                    ProposalMode(mode).value, 100 * res.ap, 100 * res.ap50, self.config.ar_k,
                    ', '.join(f'{100 * v:.1f}' for v in res.ar.values()))
        return metrics


class ZeroShotEval(Evaluate):
    """
    Seen and novel AP under the full test vocabulary, with a random
    baseline that scores novel concepts with shuffled embeddings.
    """

    def __init__(self, system=None):
        Evaluate.__init__(self, system)
        self.info = 'Zero-shot evaluation'

    def shuffled_embeddings(self, concepts):
        model = self.system.model
        f_t = model.concept_embeddings(concepts)
        rng = np.random.default_rng(sub_seed(self.system.seed, 'sampling', 'shuffle'))
        perm = rng.permutation(len(concepts))
        # a derangement keeps every concept off its own embedding
        while len(concepts) > 1 and np.any(perm == np.arange(len(concepts))):
            perm = rng.permutation(len(concepts))
        return f_t[torch.as_tensor(perm)]

    def _run(self, dataset, mode=ProposalMode.RPN_ONLY, records=None, **kwargs):
        model = self.system.model
        records = dataset.val if records is None else records
        concepts = dataset.vocab.all
        bs = self.system.config.Train.batch_size
        results = collect(model, records, concepts, mode, False, bs)
        out = OrderedDict()
        out['seen'] = self.score(results, records, list(dataset.vocab.seen), 'seen')['bbox']
        out['novel'] = self.score(results, records, list(dataset.vocab.novel), 'novel')['bbox']
        shuffled = collect(model, records, concepts, mode, False, bs, self.shuffled_embeddings(concepts))
        out['novel_random'] = self.score(shuffled, records, list(dataset.vocab.novel), 'novel')['bbox']
        logger.info('<%s> AP seen %.1f, novel %.1f, novel random baseline %.1f', self.class_name,
                    100 * out['seen'].ap, 100 * out['novel'].ap, 100 * out['novel_random'].ap)
        return out


class AblationReport(Evaluate):
    """
    AP and AR of the SideFormer variants under each proposal mode.
    """

    def __init__(self, system=None):
        Evaluate.__init__(self, system)
        self.info = 'Ablation report'

    def _run(self, dataset, checkpoints, modes=ABLATION_MODES, records=None, **kwargs):
        """
        Parameters
        ----------
        checkpoints : dict
            Variant name to checkpoint path; missing files give absent cells.
        modes : tuple of str
            Proposal modes.

        Returns
        -------
        pandas.DataFrame
            One row per variant, ``AP/APs/AR@k`` columns per mode; absent
            cells hold None.
        """
        from sideov.system import System
        records = dataset.val if records is None else records
        ks = parse_list(self.config.ar_k, int)
        rows = []
        for variant, path in checkpoints.items():
            row = OrderedDict(variant=variant)
            system = None
            if path is not None and os.path.isfile(path):
                try:
                    system = System.from_checkpoint(path)
                except CheckpointError as e:
                    logger.warning('Checkpoint of <%s> unusable: %s', variant, e)
            elif path is not None:
                logger.warning('Checkpoint of <%s> not found: "%s".', variant, path)
            for mode in modes:
                cols = [f'AP_{mode}', f'APs_{mode}'] + [f'AR@{k}_{mode}' for k in ks]
                if system is None:
                    row.update((c, None) for c in cols)
                    continue
                res = system.Evaluate.run(dataset=dataset, split='all', mode=ProposalMode(mode),
                                          records=records)['bbox']
                vals = [res.ap, res.ap_s] + [res.ar[k] for k in ks]
                row.update((c, round(100 * v, 2)) for c, v in zip(cols, vals))
            rows.append(row)
        return pd.DataFrame(rows)
