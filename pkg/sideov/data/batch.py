"""
Batching of sample records in the unified concept-set formulation.

Detection batches classify against the fixed training vocabulary with
cached template ensembles; grounding batches classify against the caption
phrases plus sampled negatives, each embedded with one random template.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch

from sideov.core.errors import DataError, PoolExhausted
from sideov.data.records import SampleRecord
from sideov.data.vocab import ConceptMode, ConceptSet, base_concept

logger = logging.getLogger(__name__)


@dataclass
class Batch:
    """
    A training or inference batch.

    Attributes
    ----------
    images : Tensor
        ``(B, 3, H, W)`` pixels in [0, 1].
    np_images : list of array
        The same images as ``(H, W, 3)`` float64 arrays, for the segmenter.
    image_ids : list of int
    gt_boxes : list of Tensor
        ``(G_i, 4)`` float64 boxes.
    gt_labels : list of Tensor
        ``(G_i, M)`` multi-hot concept targets.
    concepts : ConceptSet
    flipped : list of bool
    """
    images: torch.Tensor
    np_images: List[np.ndarray]
    image_ids: List[int]
    gt_boxes: List[torch.Tensor]
    gt_labels: List[torch.Tensor]
    concepts: ConceptSet
    flipped: Optional[List[bool]] = None

    @property
    def mode(self):
        return self.concepts.mode

    @property
    def size(self):
        return self.images.shape[0]

    @property
    def image_size(self):
        return tuple(self.images.shape[-2:])


def _prepare(records: List[SampleRecord], flips):
    if len(records) == 0:
        raise DataError('Cannot batch an empty list of records')
    flips = [False] * len(records) if flips is None else list(flips)
    out = []
    for rec, flip in zip(records, flips):
        if rec.image is None:
            raise DataError(f'Record {rec.image_id} has no pixels loaded', f'/images/{rec.image_id}')
        out.append(rec.hflip() if flip else rec)
    return out, flips


def _stack_images(records, dtype):
    np_images = [rec.float_image() for rec in records]
    shapes = {im.shape for im in np_images}
    if len(shapes) != 1:
        raise DataError(f'Images of one batch differ in size: {sorted(shapes)}')
    images = torch.as_tensor(np.stack(np_images).transpose(0, 3, 1, 2).copy(), dtype=dtype)
    return images, np_images


def _targets(records, names):
    index = {name: i for i, name in enumerate(names)}
    boxes, labels = [], []
    for rec in records:
        b = torch.zeros((len(rec.annotations), 4), dtype=torch.float64)
        lab = torch.zeros((len(rec.annotations), len(names)), dtype=torch.float64)
        for g, ann in enumerate(rec.annotations):
            if ann.concept not in index:
                raise DataError(f'Concept <{ann.concept}> of image {rec.image_id} is not in the concept set',
                                f'/annotations/{ann.id}/category')
            b[g] = torch.as_tensor(ann.box.as_array(), dtype=torch.float64)
            lab[g, index[ann.concept]] = 1.0
        boxes.append(b)
        labels.append(lab)
    return boxes, labels


def detection_batch(records, vocab_names, embedder, flips=None, dtype=torch.float32):
    """
    Batch in DETECTION mode.

    Parameters
    ----------
    records : list of SampleRecord
    vocab_names : list of str
        The fixed concept set, identical for every batch.
    embedder : ConceptEmbedder
        Supplies cached template-ensemble embeddings.
    flips : list of bool, optional
        Per-record horizontal flips.

    Returns
    -------
    Batch
        With one-hot target rows per GT.

    Raises
    ------
    DataError
        If a record holds a concept outside ``vocab_names``.
    """
    records, flips = _prepare(records, flips)
    images, np_images = _stack_images(records, dtype)
    boxes, labels = _targets(records, list(vocab_names))
    concepts = ConceptSet(list(vocab_names), embedder.ensemble(vocab_names, dtype), ConceptMode.DETECTION)
    return Batch(images, np_images, [r.image_id for r in records], boxes, labels, concepts, flips)


def caption_positives(records):
    """
    Caption phrases of a batch in order of first occurrence.
    """
    out = []
    for rec in records:
        if rec.caption is None:
            raise DataError(f'Record {rec.image_id} has no caption', f'/captions/{rec.image_id}')
        for phrase in rec.caption.phrases():
            if phrase not in out:
                out.append(phrase)
    return out


def sample_negatives(positives, pool, budget, rng):
    """
    Draw ``budget - len(positives)`` negatives uniformly without replacement.

    Pool entries naming a positive, with or without a size adjective, are
    not eligible.
    """
    need = budget - len(positives)
    if need < 0:
        raise PoolExhausted(f'{len(positives)} positive phrases exceed the concept budget {budget}')
    taken = set(positives)
    candidates = [c for c in pool if c not in taken and base_concept(c) not in taken]
    if len(candidates) < need:
        raise PoolExhausted(f'Concept pool holds {len(candidates)} negatives, {need} needed')
    idx = rng.choice(len(candidates), size=need, replace=False)
    return [candidates[i] for i in sorted(idx)]


def grounding_batch(records, pool, embedder, budget=150, rng=None, flips=None, dtype=torch.float32):
    """
    Batch in GROUNDING mode.

    The concept set is the caption phrases of the batch followed by sampled
    negatives, exactly ``budget`` concepts in total. Each concept is embedded
    with one randomly chosen template.

    Parameters
    ----------
    records : list of SampleRecord
    pool : list of str
        Negative-concept pool.
    embedder : ConceptEmbedder
    budget : int
        Total number of concepts.
    rng : numpy.random.Generator
        Drives negative sampling and template choice.

    Raises
    ------
    PoolExhausted
        If the pool cannot fill the budget.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    records, flips = _prepare(records, flips)
    images, np_images = _stack_images(records, dtype)
    positives = caption_positives(records)
    names = positives + sample_negatives(positives, pool, budget, rng)
    # annotations link to phrases one-to-one, so targets use the concept names
    for rec in records:
        phrases = {rec.caption.phrase(s): s.annotation_id for s in rec.caption.spans}
        for ann in rec.annotations:
            if ann.concept not in phrases:
                raise DataError(f'Annotation {ann.id} has no caption phrase', f'/captions/{rec.image_id}')
    boxes, labels = _targets(records, names)
    concepts = ConceptSet(names, embedder.single(names, rng, dtype), ConceptMode.GROUNDING)
    logger.debug('Grounding batch: %d positives, %d negatives.', len(positives), len(names) - len(positives))
    return Batch(images, np_images, [r.image_id for r in records], boxes, labels, concepts, flips)


def iter_batches(records, batch_size, order=None):
    """
    Yield record chunks of ``batch_size`` in ``order``.
    """
    order = range(len(records)) if order is None else order
    chunk = []
    for i in order:
        chunk.append(records[i])
        if len(chunk) == batch_size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk
