"""
Sample records in the unified detection/grounding formulation.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from sideov.core.geometry import BinaryMask, Box

logger = logging.getLogger(__name__)


@dataclass
class Annotation:
    """
    One object: box, concept name and its exact mask.
    """
    id: int
    box: Box
    concept: str
    mask: Optional[BinaryMask] = None

    def hflip(self, width):
        mask = None if self.mask is None else BinaryMask(self.mask.data[:, ::-1].copy())
        return Annotation(self.id, self.box.hflip(width), self.concept, mask)


@dataclass
class PhraseSpan:
    """
    Character span ``[start, end)`` of a caption linked to an annotation.
    """
    start: int
    end: int
    annotation_id: int


@dataclass
class Caption:
    text: str
    spans: List[PhraseSpan] = field(default_factory=list)

    def phrase(self, span):
        return self.text[span.start:span.end]

    def phrases(self):
        """
        Distinct phrases in order of first occurrence.
        """
        out = []
        for span in self.spans:
            p = self.phrase(span)
            if p not in out:
                out.append(p)
        return out


@dataclass
class SampleRecord:
    """
    An image with its annotations and optional grounding caption.

    ``image`` holds ``(H, W, 3)`` uint8 pixels once generated or loaded.
    """
    image_id: int
    file_name: str
    height: int
    width: int
    annotations: List[Annotation] = field(default_factory=list)
    caption: Optional[Caption] = None
    split: str = 'train'
    image: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def positives(self):
        """
        Concepts present in the image, in annotation order.
        """
        out = []
        for ann in self.annotations:
            if ann.concept not in out:
                out.append(ann.concept)
        return out

    def float_image(self):
        """
        Pixels as float64 in [0, 1].
        """
        return self.image.astype(np.float64) / 255.0

    def annotation(self, ann_id):
        for ann in self.annotations:
            if ann.id == ann_id:
                return ann
        raise KeyError(ann_id)

    def hflip(self):
        """
        Horizontally flipped copy; caption links are unchanged.
        """
        image = None if self.image is None else self.image[:, ::-1].copy()
        return SampleRecord(self.image_id, self.file_name, self.height, self.width,
                            [a.hflip(self.width) for a in self.annotations],
                            self.caption, self.split, image)

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        same_pixels = (self.image is None and other.image is None) or \
            (self.image is not None and other.image is not None and np.array_equal(self.image, other.image))
        return (self.image_id, self.file_name, self.height, self.width, self.annotations,
                self.caption, self.split) == \
            (other.image_id, other.file_name, other.height, other.width, other.annotations,
             other.caption, other.split) and same_pixels
