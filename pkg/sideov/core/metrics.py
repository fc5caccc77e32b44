"""
Recall and average-precision metrics.

Detections and ground truths are passed per image as lists of objects with
``box`` and ``concept`` attributes (plus ``score`` for detections and an
optional ``mask``), e.g., ``sideov.models.roi_head.Detection`` and
``sideov.data.records.Annotation``.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from sideov.core.geometry import boxes_to_array, iou_matrix, mask_iou

logger = logging.getLogger(__name__)

# 0.50:0.05:0.95
IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)

# 101 recall points of the interpolated precision
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def area_ranges(small=144, medium=1600):
    """
    Return the named area ranges ``all``, ``small``, ``medium`` and ``large``.
    """
    return OrderedDict((('all', (0.0, np.inf)),
                        ('small', (0.0, float(small))),
                        ('medium', (float(small), float(medium))),
                        ('large', (float(medium), np.inf)),
                        ))


@dataclass
class EvalResult:
    """
    Detection metrics of one split, all in [0, 1].
    """
    ap: float = 0.0
    ap50: float = 0.0
    ap75: float = 0.0
    ap_s: float = 0.0
    ap_m: float = 0.0
    ap_l: float = 0.0
    ar: dict = field(default_factory=dict)
    per_concept: dict = field(default_factory=dict)
    split: str = 'all'
    iou_type: str = 'bbox'

    def to_dict(self):
        out = OrderedDict((('split', self.split), ('iou_type', self.iou_type),
                           ('AP', self.ap), ('AP50', self.ap50), ('AP75', self.ap75),
                           ('APs', self.ap_s), ('APm', self.ap_m), ('APl', self.ap_l)))
        for k, v in sorted(self.ar.items()):
            out[f'AR@{k}'] = v
        out['per_concept'] = OrderedDict(sorted(self.per_concept.items()))
        return out


def _gt_boxes(gts):
    return boxes_to_array([getattr(g, 'box', g) for g in gts])


def _proposal_boxes(proposals, k):
    return boxes_to_array([getattr(p, 'box', p) for p in list(proposals)[:k]])


def greedy_match(ious, threshold):
    """
    One-to-one greedy best-IoU matching of proposals (rows) to GTs (columns).

    Admissible pairs, IoU at or above ``threshold``, are taken in descending
    IoU; ties go to the lower proposal index, then the lower GT index.

    Returns
    -------
    list of tuple
        Matched ``(proposal, gt)`` index pairs in matching order.
    """
    rows, cols = np.nonzero(ious >= threshold)
    if len(rows) == 0:
        return []
    order = np.lexsort((cols, rows, -ious[rows, cols]))
    used_rows, used_cols, pairs = set(), set(), []
    for i in order:
        r, c = int(rows[i]), int(cols[i])
        if r in used_rows or c in used_cols:
            continue
        used_rows.add(r)
        used_cols.add(c)
        pairs.append((r, c))
    return pairs


def recall_at(proposals_per_image, gts_per_image, k, thresholds=IOU_THRESHOLDS):
    """
    Fraction of GT boxes recalled by the top-``k`` proposals, per threshold.

    Proposals are matched to GT boxes with :func:`greedy_match`.

    Returns
    -------
    np.ndarray
        Recall per threshold; NaN-free, zeros when there is no GT.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    matched = np.zeros(len(thresholds), dtype=np.int64)
    total = 0
    for proposals, gts in zip(proposals_per_image, gts_per_image):
        if len(gts) == 0:
            continue
        total += len(gts)
        pb = _proposal_boxes(proposals, k)
        if len(pb) == 0:
            continue
        ious = iou_matrix(pb, _gt_boxes(gts))
        for ti, thr in enumerate(thresholds):
            matched[ti] += len(greedy_match(ious, thr))
    if total == 0:
        return np.zeros(len(thresholds))
    return matched / total


def average_recall(proposals_per_image, gts_per_image, k, thresholds=IOU_THRESHOLDS):
    """
    AR@k: recall of the top-``k`` proposals averaged over IoU thresholds.

    Images without GT are excluded.

    Parameters
    ----------
    proposals_per_image : list of list
        Score-sorted proposals (or boxes) per image.
    gts_per_image : list of list
        Ground-truth annotations (or boxes) per image.
    k : int
        Proposal budget per image.

    Returns
    -------
    float
        Average recall in [0, 1].
    """
    gts_per_image = [[g if hasattr(g, 'box') else _BoxOnly(g) for g in gts] for gts in gts_per_image]
    return float(np.mean(recall_at(proposals_per_image, gts_per_image, k, thresholds)))


class _BoxOnly:
    __slots__ = ('box',)

    def __init__(self, box):
        self.box = box


def interpolated_ap(tp, n_gt):
    """
    101-point interpolated AP from score-sorted TP flags.

    Parameters
    ----------
    tp : array of bool
        True positive flag of each detection, in descending score order.
    n_gt : int
        Number of ground truths.

    Returns
    -------
    float
        AP in [0, 1]; 0 when there is no detection.
    """
    tp = np.asarray(tp, dtype=bool)
    if n_gt == 0:
        return float('nan')
    if tp.size == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    rc = tps / n_gt
    pr = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
    # precision envelope
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    idx = np.searchsorted(rc, RECALL_POINTS, side='left')
    q = np.zeros(len(RECALL_POINTS))
    valid = idx < len(pr)
    q[valid] = pr[idx[valid]]
    return float(q.mean())


def _pairwise_iou(dets, gts, iou_type, shape):
    if iou_type == 'bbox':
        return iou_matrix(boxes_to_array([d.box for d in dets]), _gt_boxes(gts))
    out = np.zeros((len(dets), len(gts)))
    empty = np.zeros(shape, dtype=bool)
    for i, d in enumerate(dets):
        dm = d.mask if getattr(d, 'mask', None) is not None else empty
        for j, g in enumerate(gts):
            gm = g.mask if getattr(g, 'mask', None) is not None else empty
            out[i, j] = mask_iou(dm, gm)
    return out


def _object_area(obj, iou_type):
    if iou_type == 'segm' and getattr(obj, 'mask', None) is not None:
        return float(obj.mask.area)
    return float(obj.box.area)


def _match_image(dets, gts, thr, iou_type, arange, shape, forced_fp):
    """
    COCO-style greedy matching of one concept in one image.

    Returns per-detection (tp, ignore) flags and the number of counted GTs.
    """
    lo, hi = arange
    gt_ignore = np.array([not (lo <= _object_area(g, iou_type) < hi) for g in gts], dtype=bool)
    # counted GTs first so that a detection prefers them
    gorder = np.argsort(gt_ignore, kind='stable')
    gts = [gts[i] for i in gorder]
    gt_ignore = gt_ignore[gorder]

    tp = np.zeros(len(dets), dtype=bool)
    ignore = np.zeros(len(dets), dtype=bool)
    if len(gts) > 0 and len(dets) > 0:
        ious = _pairwise_iou(dets, gts, iou_type, shape)
    gt_taken = np.zeros(len(gts), dtype=bool)
    for di in range(len(dets)):
        if forced_fp[di] or len(gts) == 0:
            continue
        best, best_iou = -1, min(thr, 1 - 1e-10)
        for gi in range(len(gts)):
            if gt_taken[gi]:
                continue
            # stop at ignored GTs once a counted GT is matched
            if best > -1 and not gt_ignore[best] and gt_ignore[gi]:
                break
            if ious[di, gi] < best_iou:
                continue
            best, best_iou = gi, ious[di, gi]
        if best == -1:
            continue
        gt_taken[best] = True
        tp[di] = True
        ignore[di] = gt_ignore[best]
    for di in range(len(dets)):
        if not tp[di]:
            ignore[di] = not (lo <= _object_area(dets[di], iou_type) < hi)
    return tp, ignore, int((~gt_ignore).sum())


def average_precision(dets_per_image, gts_per_image, concepts=None,
                      iou_thresholds=IOU_THRESHOLDS, ranges=None,
                      max_dets=100, iou_type='bbox', split='all'):
    """
    COCO-style AP per concept and threshold, averaged.

    Parameters
    ----------
    dets_per_image : list of list
        Detections per image, each with ``box``, ``concept``, ``score`` and,
        for ``iou_type='segm'``, ``mask``.
    gts_per_image : list of list
        Ground-truth annotations per image with ``box``, ``concept`` and
        optional ``mask``.
    concepts : list of str, optional
        Evaluated vocabulary; defaults to the GT concepts. A detection with a
        concept outside it is a false positive of the concept of the GT it
        overlaps most in its image.
    iou_thresholds : array, optional
        IoU thresholds, ``0.50:0.05:0.95`` by default.
    ranges : OrderedDict, optional
        Area ranges from :func:`area_ranges`.
    max_dets : int, optional
        Top-scored detections kept per image.
    iou_type : {'bbox', 'segm'}
        Box or mask IoU.
    split : str, optional
        Tag stored in the result.

    Returns
    -------
    EvalResult
        Metrics with AR left empty.
    """
    if iou_type not in ('bbox', 'segm'):
        raise ValueError(f'Unknown iou_type <{iou_type}>')
    ranges = area_ranges() if ranges is None else ranges
    iou_thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    if concepts is None:
        concepts = sorted({g.concept for gts in gts_per_image for g in gts})
    vocab = set(concepts)

    # (concept, image) -> dets, forced false-positive flags
    per_cell = {}
    shapes = []
    for img, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
        shape = _image_shape(dets, gts)
        shapes.append(shape)
        dets = sorted(dets, key=lambda d: -d.score)[:max_dets]
        for d in dets:
            concept, forced = d.concept, False
            if concept not in vocab:
                if len(gts) == 0:
                    logger.warning('Dropped a detection of unknown concept <%s> in an image without GT.', concept)
                    continue
                ious = iou_matrix(d.box.as_array(), _gt_boxes(gts))[0]
                concept, forced = gts[int(np.argmax(ious))].concept, True
            per_cell.setdefault((concept, img), []).append((d, forced))

    table = np.full((len(concepts), len(iou_thresholds), len(ranges)), np.nan)
    for ci, concept in enumerate(concepts):
        for ai, arange in enumerate(ranges.values()):
            for ti, thr in enumerate(iou_thresholds):
                scores, tps, ignores = [], [], []
                n_gt = 0
                for img, gts in enumerate(gts_per_image):
                    cgts = [g for g in gts if g.concept == concept]
                    cell = per_cell.get((concept, img), [])
                    cdets = [d for d, _ in cell]
                    forced = [f for _, f in cell]
                    tp, ign, n = _match_image(cdets, cgts, thr, iou_type, arange, shapes[img], forced)
                    n_gt += n
                    scores.extend(d.score for d in cdets)
                    tps.extend(tp.tolist())
                    ignores.extend(ign.tolist())
                if n_gt == 0:
                    continue
                scores = np.asarray(scores, dtype=np.float64)
                order = np.argsort(-scores, kind='stable')
                tps = np.asarray(tps, dtype=bool)[order]
                keep = ~np.asarray(ignores, dtype=bool)[order]
                table[ci, ti, ai] = interpolated_ap(tps[keep], n_gt)

    def _mean(arr):
        arr = arr[~np.isnan(arr)]
        return float(arr.mean()) if arr.size else 0.0

    names = list(ranges.keys())
    result = EvalResult(split=split, iou_type=iou_type)
    a_all = names.index('all')
    result.ap = _mean(table[:, :, a_all])
    idx50 = np.flatnonzero(np.isclose(iou_thresholds, 0.5))
    idx75 = np.flatnonzero(np.isclose(iou_thresholds, 0.75))
    result.ap50 = _mean(table[:, idx50, a_all]) if idx50.size else 0.0
    result.ap75 = _mean(table[:, idx75, a_all]) if idx75.size else 0.0
    for name, attr in (('small', 'ap_s'), ('medium', 'ap_m'), ('large', 'ap_l')):
        if name in names:
            setattr(result, attr, _mean(table[:, :, names.index(name)]))
    for ci, concept in enumerate(concepts):
        row = table[ci, :, a_all]
        if not np.all(np.isnan(row)):
            result.per_concept[concept] = _mean(row)
    return result


def _image_shape(dets, gts):
    for obj in list(gts) + list(dets):
        mask = getattr(obj, 'mask', None)
        if mask is not None:
            return mask.data.shape
    return (1, 1)
