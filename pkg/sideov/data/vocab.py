"""
Vocabulary, concept sets, the negative-concept pool and cached text
embeddings.
"""

import enum
import logging
from dataclasses import dataclass
from typing import List

import numpy as np
import torch

from sideov.core.errors import DataError, InvalidConcept
from sideov.utils import parse_list

logger = logging.getLogger(__name__)

# extra words of the negative-concept pool
POOL_COLORS = ('red', 'green', 'blue', 'yellow', 'orange', 'purple',
               'pink', 'brown', 'black', 'white', 'gray', 'cyan')
POOL_SHAPES = ('circle', 'square', 'triangle', 'diamond', 'star', 'hexagon')
POOL_SIZES = ('', 'small', 'large')


class ConceptMode(enum.Enum):
    DETECTION = 'detection'
    GROUNDING = 'grounding'


@dataclass
class VocabularySplit:
    """
    Disjoint seen and novel concepts.
    """
    seen: List[str]
    novel: List[str]

    def __post_init__(self):
        overlap = set(self.seen) & set(self.novel)
        if overlap:
            raise DataError(f'Seen and novel concepts overlap: {sorted(overlap)}')

    @property
    def all(self):
        return list(self.seen) + list(self.novel)

    def split_of(self, concept):
        if concept in self.seen:
            return 'seen'
        if concept in self.novel:
            return 'novel'
        raise InvalidConcept(f'Concept <{concept}> is not in the vocabulary')

    def to_dict(self):
        return {'seen': list(self.seen), 'novel': list(self.novel)}


def concept_name(color, shape, size=''):
    return ' '.join(w for w in (size, color, shape) if w)


def base_concept(concept):
    """
    Drop a leading size adjective: ``'small red circle'`` -> ``'red circle'``.
    """
    words = concept.split()
    if len(words) > 2 and words[0] in POOL_SIZES:
        words = words[1:]
    return ' '.join(words)


def build_vocabulary(config):
    """
    Shape-by-color vocabulary with the configured held-out compositions.

    Parameters
    ----------
    config : andes.core.Config
        The ``Data`` section.

    Returns
    -------
    VocabularySplit
    """
    colors = parse_list(config.colors)
    shapes = parse_list(config.shapes)
    concepts = [concept_name(c, s) for c in colors for s in shapes]
    novel = parse_list(config.novel)
    for pointer, concept in enumerate(novel):
        if concept not in concepts:
            raise DataError(f'Novel concept <{concept}> is not a color-shape pair', f'/Data/novel/{pointer}')
    seen = [c for c in concepts if c not in novel]
    # every factor of a novel concept must be seen in another composition
    for concept in novel:
        color, shape = concept.split()
        if not any(c.split()[0] == color for c in seen) or not any(c.split()[1] == shape for c in seen):
            raise DataError(f'Novel concept <{concept}> has a factor that is never seen')
    return VocabularySplit(seen, [c for c in concepts if c in novel])


def concept_pool(vocab: VocabularySplit, colors=None, shapes=None):
    """
    Size-color-shape strings used as grounding negatives.

    Compositions of novel concepts, in any size, are excluded.
    """
    colors = list(dict.fromkeys(list(colors or []) + list(POOL_COLORS)))
    shapes = list(dict.fromkeys(list(shapes or []) + list(POOL_SHAPES)))
    novel = set(vocab.novel)
    pool = []
    for size in POOL_SIZES:
        for color in colors:
            for shape in shapes:
                if concept_name(color, shape) in novel:
                    continue
                pool.append(concept_name(color, shape, size))
    return pool


@dataclass
class ConceptSet:
    """
    Concept names with their unit embeddings ``F_T`` row-aligned.
    """
    names: List[str]
    embeddings: torch.Tensor
    mode: ConceptMode = ConceptMode.DETECTION

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError('Concept names are not unique')
        if self.embeddings.shape[0] != len(self.names):
            raise DataError(f'{len(self.names)} concepts but {self.embeddings.shape[0]} embeddings')

    def __len__(self):
        return len(self.names)

    def index(self, concept):
        return self.names.index(concept)


class ConceptEmbedder:
    """
    Text embeddings with a per-concept cache of template ensembles.

    Parameters
    ----------
    text_encoder : TextEncoderStub
        Frozen text encoder.
    """

    def __init__(self, text_encoder):
        self.text = text_encoder
        self.cache = {}

    def ensemble(self, names, dtype=torch.float32):
        """
        ``(M, D)`` template-ensembled embeddings; cached per concept.
        """
        rows = []
        for name in names:
            if name not in self.cache:
                self.cache[name] = self.text.ensemble_embed(name)
            rows.append(self.cache[name])
        return self._stack(rows, dtype)

    def single(self, names, rng, dtype=torch.float32):
        """
        ``(M, D)`` embeddings with one random template per concept, uncached.
        """
        tids = rng.integers(0, self.text.n_templates, size=len(names))
        rows = [self.text.text_embed(name, int(t)) for name, t in zip(names, tids)]
        return self._stack(rows, dtype)

    def _stack(self, rows, dtype):
        if len(rows) == 0:
            return torch.zeros((0, self.text.dim), dtype=dtype)
        return torch.as_tensor(np.stack(rows), dtype=dtype)
