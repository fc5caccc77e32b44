"""
Exact geometric primitives: boxes, binary masks, IoU, NMS, open-set
proposal fusion, point grids and run-length encoding.

Boxes use continuous image coordinates with the origin at the top-left
corner. Conversions between masks and boxes use the half-open pixel
convention, i.e., ``x2`` and ``y2`` are exclusive.
"""

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from sideov.core.errors import EmptyMask, InvalidBox

logger = logging.getLogger(__name__)


class ProposalSource(enum.Enum):
    """
    Origin of a proposal.
    """
    RPN = 'rpn'
    SEGMENTER = 'segmenter'


@dataclass(frozen=True)
class Box:
    """
    Axis-aligned box ``(x1, y1, x2, y2)`` with strictly positive area.
    """
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBox(f'Non-finite box coordinates {coords}')
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBox(f'Box {coords} has non-positive area')

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def to_xywh(self):
        """
        Return the COCO-style ``[x, y, w, h]`` list.
        """
        return [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]

    @classmethod
    def from_xywh(cls, xywh):
        x, y, w, h = (float(v) for v in xywh)
        return cls(x, y, x + w, y + h)

    @classmethod
    def from_array(cls, arr):
        return cls(*(float(v) for v in arr))

    def clip(self, height, width):
        """
        Clip to the image extent; return None if the clipped box is empty.
        """
        x1, x2 = min(max(self.x1, 0.0), width), min(max(self.x2, 0.0), width)
        y1, y2 = min(max(self.y1, 0.0), height), min(max(self.y2, 0.0), height)
        if x1 < x2 and y1 < y2:
            return Box(x1, y1, x2, y2)
        return None

    def hflip(self, width):
        return Box(width - self.x2, self.y1, width - self.x1, self.y2)


@dataclass
class BinaryMask:
    """
    Boolean ``height x width`` pixel grid.
    """
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 2:
            raise ValueError(f'Mask must be 2-D, got shape {self.data.shape}')

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def area(self):
        return int(self.data.sum())

    def is_empty(self):
        return not self.data.any()

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class Proposal:
    """
    Candidate object box with a score in [0, 1] and its source.
    """
    box: Box
    score: float
    source: ProposalSource = field(default=ProposalSource.RPN)

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f'Proposal score must be finite, got {self.score}')

    def to_json(self):
        return {'x1': self.box.x1, 'y1': self.box.y1,
                'x2': self.box.x2, 'y2': self.box.y2,
                'score': self.score, 'source': self.source.value}

    @classmethod
    def from_json(cls, dct):
        box = Box(float(dct['x1']), float(dct['y1']), float(dct['x2']), float(dct['y2']))
        return cls(box, float(dct['score']), ProposalSource(dct['source']))


def iou(a: Box, b: Box) -> float:
    """
    Intersection over union of two boxes.
    """
    w = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    h = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = w * h
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    return inter / union


def iou_matrix(a, b):
    """
    Pairwise IoU between two ``(N, 4)`` and ``(M, 4)`` box arrays.

    The arithmetic is carried out in the same order as :func:`iou` so that
    both return bit-identical values.

    Returns
    -------
    np.ndarray
        ``(N, M)`` IoU matrix.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    w = np.maximum(0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]))
    h = np.maximum(0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]))
    inter = w * h
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def boxes_to_array(boxes):
    """
    Stack boxes (or proposals) into an ``(N, 4)`` float64 array.
    """
    rows = [(p.box if isinstance(p, Proposal) else p).as_array() for p in boxes]
    if len(rows) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack(rows)


def nms_indices(boxes, scores, threshold):
    """
    Greedy NMS on arrays, returning the kept indices by descending score.

    A box is suppressed only when its IoU with a kept box is strictly
    greater than ``threshold``. Score ties keep the earlier input first.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind='stable')
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        ovr = iou_matrix(boxes[i], boxes[order[1:]])[0]
        order = order[1:][ovr <= threshold]
    return keep


def nms(proposals, threshold):
    """
    Greedy non-maximum suppression.

    Parameters
    ----------
    proposals : list of Proposal
        Input proposals, any order.
    threshold : float
        IoU threshold in (0, 1].

    Returns
    -------
    list of Proposal
        Kept proposals in descending score order.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f'NMS threshold must be in (0, 1], got {threshold}')
    if len(proposals) == 0:
        return []
    scores = np.array([p.score for p in proposals], dtype=np.float64)
    keep = nms_indices(boxes_to_array(proposals), scores, threshold)
    return [proposals[i] for i in keep]


def merge_open_set(rpn, seg, threshold=0.7):
    """
    Fuse RPN proposals with segmenter proposals by reference-based NMS.

    All RPN proposals are kept unchanged. A segmenter proposal survives if
    its IoU with every RPN box is at most ``threshold``; the survivors are
    then de-duplicated among themselves by NMS at the same threshold.
    Scores are never compared across the two sources.

    Parameters
    ----------
    rpn : list of Proposal
        De-duplicated RPN proposals, used as references.
    seg : list of Proposal
        Segmenter proposals.
    threshold : float
        IoU threshold, 0.7 by default.

    Returns
    -------
    list of Proposal
        RPN proposals in input order followed by the kept segmenter
        proposals in descending score order.
    """
    rpn = list(rpn)
    if len(seg) == 0:
        return rpn
    if len(rpn) > 0:
        max_iou = iou_matrix(boxes_to_array(seg), boxes_to_array(rpn)).max(axis=1)
        kept = [p for p, o in zip(seg, max_iou) if o <= threshold]
    else:
        kept = list(seg)
    kept = nms(kept, threshold)
    logger.debug('Open-set merge kept %d of %d segmenter proposals.', len(kept), len(seg))
    return rpn + kept


def mask_to_box(mask: BinaryMask) -> Box:
    """
    Tight bounding box of a mask in the half-open pixel convention.
    """
    data = mask.data if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(data.any(axis=1))
    cols = np.flatnonzero(data.any(axis=0))
    if rows.size == 0:
        raise EmptyMask('Cannot box an empty mask')
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def box_to_mask(box: Box, height, width) -> BinaryMask:
    """
    Rasterize a box: a pixel is inside when its centre is in ``[x1, x2) x [y1, y2)``.
    """
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    in_x = (cols >= box.x1) & (cols < box.x2)
    in_y = (rows >= box.y1) & (rows < box.y2)
    return BinaryMask(in_y[:, None] & in_x[None, :])


def mask_iou(a, b):
    """
    Pixel-count IoU of two masks of the same size.
    """
    a = a.data if isinstance(a, BinaryMask) else np.asarray(a, dtype=bool)
    b = b.data if isinstance(b, BinaryMask) else np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def point_grid(n, height, width):
    """
    ``n x n`` prompt points at cell centres, row-major.

    Returns
    -------
    list of tuple
        ``(x, y)`` pairs.
    """
    if n < 1:
        raise ValueError(f'Grid size must be positive, got {n}')
    xs = [(i + 0.5) * width / n for i in range(n)]
    ys = [(j + 0.5) * height / n for j in range(n)]
    return [(x, y) for y in ys for x in xs]


def mask_to_rle(mask):
    """
    Uncompressed row-major run-length encoding, starting with a run of zeros.

    Returns
    -------
    dict
        ``{'size': [h, w], 'counts': [...]}``.
    """
    data = mask.data if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    flat = data.reshape(-1).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size > 0 and flat[0] == 1:
        counts = [0] + counts
    return {'size': [int(data.shape[0]), int(data.shape[1])], 'counts': [int(c) for c in counts]}


def rle_to_mask(rle):
    """
    Decode :func:`mask_to_rle` output.
    """
    h, w = (int(v) for v in rle['size'])
    counts = [int(c) for c in rle['counts']]
    if sum(counts) != h * w:
        raise ValueError(f'RLE counts sum to {sum(counts)}, expected {h * w}')
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return BinaryMask(flat.reshape(h, w))
