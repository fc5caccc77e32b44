"""
Deterministic synthetic-shapes dataset.

Each image carries 1 to 5 solid colored shapes, separated by at least one
background pixel, on a gray background with low-amplitude seeded noise.
Every image is a pure function of the seed, its index and the config.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy import ndimage

from sideov.core.errors import ConfigError
from sideov.core.geometry import BinaryMask, iou, mask_to_box
from sideov.data.records import Annotation, Caption, PhraseSpan, SampleRecord
from sideov.data.vocab import VocabularySplit, build_vocabulary
from sideov.shared import sub_seed

logger = logging.getLogger(__name__)

COLOR_RGB = {
    'red': (0.90, 0.10, 0.10),
    'green': (0.10, 0.75, 0.20),
    'blue': (0.10, 0.20, 0.90),
    'yellow': (0.95, 0.90, 0.10),
    'orange': (0.95, 0.55, 0.05),
    'purple': (0.55, 0.15, 0.70),
    'pink': (0.95, 0.50, 0.75),
    'brown': (0.50, 0.30, 0.10),
    'black': (0.05, 0.05, 0.05),
    'white': (0.97, 0.97, 0.97),
    'gray': (0.30, 0.30, 0.30),
    'cyan': (0.10, 0.85, 0.90),
}


def _inside(shape, dx, dy, r):
    if shape == 'circle':
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == 'square':
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == 'diamond':
        return np.abs(dx) + np.abs(dy) <= r
    if shape == 'triangle':
        # apex up, base down
        t = (dy + r) / (2 * r)
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= t * r)
    raise ConfigError('Data.shapes', f'Shape <{shape}> cannot be drawn')


def draw_shape(shape, cx, cy, size, height, width):
    """
    Rasterize a shape of extent ``size`` centred at ``(cx, cy)`` by pixel centres.
    """
    ys, xs = np.mgrid[0:height, 0:width]
    return _inside(shape, xs + 0.5 - cx, ys + 0.5 - cy, size / 2.0)


def make_caption(annotations):
    """
    Chain the objects as ``"a {color} {shape} next to a {color} {shape}"``.

    Every occurrence of a phrase links to its own annotation.
    """
    text, spans = '', []
    for i, ann in enumerate(annotations):
        text += 'a ' if i == 0 else ' next to a '
        spans.append(PhraseSpan(len(text), len(text) + len(ann.concept), ann.id))
        text += ann.concept
    return Caption(text, spans)


@dataclass
class SyntheticDataset:
    """
    Generated records with their vocabulary split and generation settings.
    """
    records: List[SampleRecord]
    vocab: VocabularySplit
    seed: int
    config: dict = field(default_factory=dict)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    @property
    def train(self):
        return self.split('train')

    @property
    def val(self):
        return self.split('val')


class ShapesGenerator:
    """
    Generator of synthetic shape images.

    Parameters
    ----------
    config : andes.core.Config
        The ``Data`` section.
    seed : int
        Global seed.
    """

    def __init__(self, config, seed=0):
        self.config = config
        self.seed = seed
        self.vocab = build_vocabulary(config)
        self.size = int(config.image_size)
        for concept in self.vocab.all:
            color, shape = concept.split()
            if color not in COLOR_RGB:
                raise ConfigError('Data.colors', f'Color <{color}> has no RGB value')
            _inside(shape, np.zeros(1), np.zeros(1), 1.0)

    def background(self, rng):
        cfg = self.config
        noise = rng.uniform(-cfg.noise, cfg.noise, size=(self.size, self.size, 3))
        return np.clip(cfg.background + noise, 0.0, 1.0)

    def _try_image(self, rng, concepts):
        """
        Place shapes by rejection sampling; None if one cannot be placed.
        """
        cfg = self.config
        h = w = self.size
        image = self.background(rng)
        n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        occupied = np.zeros((h, w), dtype=bool)
        boxes, anns = [], []
        for k in range(n_obj):
            concept = concepts[int(rng.integers(len(concepts)))]
            color, shape = concept.split()
            placed = False
            for _ in range(int(cfg.placement_tries)):
                size = float(rng.uniform(cfg.min_size, cfg.max_size))
                cx = float(rng.uniform(size / 2, w - size / 2))
                cy = float(rng.uniform(size / 2, h - size / 2))
                mask = draw_shape(shape, cx, cy, size, h, w)
                if not mask.any():
                    continue
                box = mask_to_box(mask)
                if any(iou(box, b) >= cfg.max_overlap for b in boxes):
                    continue
                if (ndimage.binary_dilation(mask) & occupied).any():
                    continue
                placed = True
                break
            if not placed:
                return None
            occupied |= mask
            image[mask] = COLOR_RGB[color]
            boxes.append(box)
            anns.append((k, box, concept, mask))
        pixels = np.round(image * 255).astype(np.uint8)
        return pixels, anns

    def generate_image(self, index, split):
        """
        Generate one record; a failed placement regenerates with a new sub-seed.
        """
        concepts = self.vocab.seen if split == 'train' else self.vocab.all
        attempt = 0
        while True:
            rng = np.random.default_rng(sub_seed(self.seed, 'data', index, attempt))
            out = self._try_image(rng, concepts)
            if out is not None:
                break
            attempt += 1
            logger.debug('Image %d regenerated (attempt %d).', index, attempt)
        pixels, anns = out
        annotations = [Annotation(index * 100 + k, box, concept, BinaryMask(mask))
                       for k, box, concept, mask in anns]
        return SampleRecord(index, f'{index:06d}.png', self.size, self.size, annotations,
                            make_caption(annotations), split, pixels)

    def split_of(self, index, n_images):
        n_val = int(round(n_images * self.config.val_fraction))
        return 'val' if index >= n_images - n_val else 'train'

    def generate(self, n_images=None):
        """
        Generate the whole dataset.

        Returns
        -------
        SyntheticDataset
        """
        n_images = int(self.config.n_images if n_images is None else n_images)
        records = [self.generate_image(i, self.split_of(i, n_images)) for i in range(n_images)]
        logger.info('Generated %d images (%d val).', n_images, sum(r.split == 'val' for r in records))
        return SyntheticDataset(records, self.vocab, self.seed, {'n_images': n_images})


def generate_dataset(config, seed=0, n_images=None):
    """
    Generate the synthetic dataset of the ``Data`` config section.
    """
    return ShapesGenerator(config, seed).generate(n_images)
