"""
Open-set region proposal network.

Proposals come from a trainable anchor-based RPN over a two-level pyramid
of the SideFormer map, from the promptable segmenter driven by a point
grid, or from both fused by reference-based NMS.
"""

import enum
import logging
from dataclasses import dataclass
from typing import List

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from sideov.core.errors import ShapeError
from sideov.core.geometry import (Box, Proposal, ProposalSource, mask_to_box,
                                  merge_open_set, nms, nms_indices, point_grid)
from sideov.models.boxes import BoxCoder, box_iou, clip_boxes, nonempty, sample_labels
from sideov.models.foundation import FeatureMap, to_hwc

logger = logging.getLogger(__name__)


class ProposalMode(enum.Enum):
    """
    Source of second-stage proposals.
    """
    RPN_ONLY = 'rpn'
    SEG_ONLY = 'seg'
    OPEN_SET = 'open'


@dataclass
class AnchorSet:
    """
    Anchors ordered by level, then cell (row-major), then size.
    """
    boxes: torch.Tensor
    sizes: tuple
    strides: tuple
    counts: tuple

    def __len__(self):
        return self.boxes.shape[0]


@dataclass
class RpnOutput:
    """
    Objectness logits ``(B, A)`` and box deltas ``(B, A, 4)``.
    """
    logits: torch.Tensor
    deltas: torch.Tensor


def make_anchors(grid_h, grid_w, sizes=((12, 20, 32), (48, 64, 96)), strides=(16, 32),
                 dtype=torch.float32):
    """
    Square anchors centred on the cells of each pyramid level.

    Parameters
    ----------
    grid_h, grid_w : int
        Token grid of the stride-16 level.
    sizes : tuple of tuple
        Anchor sides per level.
    strides : tuple
        Level strides in pixels.

    Returns
    -------
    AnchorSet
    """
    boxes, counts = [], []
    h, w = grid_h, grid_w
    for lvl, (lvl_sizes, stride) in enumerate(zip(sizes, strides)):
        if lvl > 0:
            h, w = (h + 1) // 2, (w + 1) // 2
        ys = (torch.arange(h, dtype=torch.float64) + 0.5) * stride
        xs = (torch.arange(w, dtype=torch.float64) + 0.5) * stride
        cy, cx = torch.meshgrid(ys, xs, indexing='ij')
        centers = torch.stack((cx.flatten(), cy.flatten()), dim=1)
        half = torch.tensor(lvl_sizes, dtype=torch.float64) / 2
        x1 = centers[:, None, 0] - half[None, :]
        y1 = centers[:, None, 1] - half[None, :]
        x2 = centers[:, None, 0] + half[None, :]
        y2 = centers[:, None, 1] + half[None, :]
        lvl_boxes = torch.stack((x1, y1, x2, y2), dim=2).reshape(-1, 4)
        boxes.append(lvl_boxes)
        counts.append(lvl_boxes.shape[0])
    return AnchorSet(torch.cat(boxes).to(dtype), tuple(tuple(s) for s in sizes), tuple(strides), tuple(counts))


def segmenter_proposals(image, segmenter, grid_n=32, min_area=16, max_area_frac=0.9):
    """
    Class-agnostic proposals from point-grid prompting of the segmenter.

    Each grid point is segmented and boxed; masks with fewer than
    ``min_area`` pixels or boxes larger than ``max_area_frac`` of the image
    are dropped, and identical boxes keep their best score.

    Parameters
    ----------
    image : array
        ``(H, W, 3)`` image in [0, 1].
    segmenter : FloodFillSegmenter
        Promptable segmenter.
    grid_n : int
        Point grid side.
    min_area : int
        Minimum mask pixels.
    max_area_frac : float
        Maximum box area over image area.

    Returns
    -------
    list of Proposal
        SEGMENTER proposals by descending score.
    """
    image = to_hwc(image)
    h, w = image.shape[:2]
    best = {}
    # seed color -> found components; equal seed colors give equal thresholded sets
    seen = {}
    for x, y in point_grid(grid_n, h, w):
        r, c = int(y), int(x)
        color = image[r, c].tobytes()
        hit = None
        for mask, score in seen.get(color, ()):
            if mask.data[r, c]:
                hit = (mask, score)
                break
        if hit is None:
            hit = segmenter.segment_point(image, (x, y))
            seen.setdefault(color, []).append(hit)
        mask, score = hit
        if mask.area < min_area:
            continue
        box = mask_to_box(mask)
        if box.area > max_area_frac * h * w:
            continue
        key = (box.x1, box.y1, box.x2, box.y2)
        if key not in best or score > best[key].score:
            best[key] = Proposal(box, float(score), ProposalSource.SEGMENTER)
    props = list(best.values())
    order = np.argsort([-p.score for p in props], kind='stable')
    return [props[i] for i in order]


class OpenSetRPN(nn.Module):
    """
    Anchor-based RPN with the segmenter as a second proposal source.

    Parameters
    ----------
    dim : int
        Feature width.
    config : andes.core.Config
        The ``RPN`` config section.
    segmenter : FloodFillSegmenter, optional
        Promptable segmenter for the SEG_ONLY and OPEN_SET modes.
    """

    def __init__(self, dim, config, segmenter=None):
        super().__init__()
        self.dim = dim
        self.config = config
        self.segmenter = segmenter
        sizes = [float(s) for s in str(config.anchor_sizes).split(',')]
        self.sizes = (tuple(sizes[:3]), tuple(sizes[3:]))
        self.num_anchors = 3
        self.coder = BoxCoder()
        self.down = nn.Conv2d(dim, dim, 3, stride=2, padding=1)
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)
        self.cls = nn.Conv2d(dim, self.num_anchors, 1)
        self.reg = nn.Conv2d(dim, 4 * self.num_anchors, 1)
        for layer in (self.conv, self.cls, self.reg):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.constant_(layer.bias, 0.)
        # (image_id, grid_n) -> segmenter proposals
        self.seg_cache = {}

    def pyramid(self, features: FeatureMap):
        """
        Stride-16 identity level and a stride-32 downsampled level.
        """
        p0 = features.to_grid()
        return [p0, self.down(p0)]

    def anchors(self, features: FeatureMap):
        return make_anchors(features.grid_h, features.grid_w, self.sizes, dtype=features.tokens.dtype)

    def forward(self, features: FeatureMap):
        """
        Objectness logits and deltas for every anchor.
        """
        if features.dim != self.dim:
            raise ShapeError(f'RPN expects width {self.dim}, got {features.dim}')
        b = features.batch
        logits, deltas = [], []
        for p in self.pyramid(features):
            t = F.relu(self.conv(p))
            h, w = t.shape[-2:]
            logits.append(self.cls(t).permute(0, 2, 3, 1).reshape(b, -1))
            d = self.reg(t).view(b, self.num_anchors, 4, h, w).permute(0, 3, 4, 1, 2)
            deltas.append(d.reshape(b, -1, 4))
        return RpnOutput(torch.cat(logits, 1), torch.cat(deltas, 1))

    def assign(self, anchors: AnchorSet, gt_boxes):
        """
        Label anchors 1 (positive), 0 (negative) or -1 (ignored).

        Every GT also claims its best-overlapping anchors.

        Returns
        -------
        Tensor, Tensor
            Labels ``(A,)`` and the matched GT index per anchor.
        """
        a = anchors.boxes
        labels = torch.full((a.shape[0],), -1, dtype=torch.long)
        matched = torch.zeros(a.shape[0], dtype=torch.long)
        if gt_boxes.numel() == 0:
            labels[:] = 0
            return labels, matched
        ious = box_iou(a, gt_boxes.to(a.dtype))
        max_iou, matched = ious.max(dim=1)
        labels[max_iou < self.config.neg_iou] = 0
        labels[max_iou >= self.config.pos_iou] = 1
        best_per_gt = ious.max(dim=0).values
        low_quality = ((ious == best_per_gt[None, :]) & (best_per_gt[None, :] > 0)).any(dim=1)
        labels[low_quality] = 1
        return labels, matched

    def loss(self, out: RpnOutput, anchors: AnchorSet, gt_boxes: List[torch.Tensor], generator=None):
        """
        Binary cross-entropy on sampled anchors and SmoothL1 on positives.

        Returns
        -------
        Tensor, Tensor
            Objectness loss and box loss.
        """
        cls_terms, reg_terms, n_sampled = [], [], 0
        for i, gt in enumerate(gt_boxes):
            labels, matched = self.assign(anchors, gt)
            pos, neg = sample_labels(labels, self.config.batch_per_image, self.config.pos_fraction, generator)
            idx = torch.cat((pos, neg))
            target = torch.cat((torch.ones(len(pos)), torch.zeros(len(neg)))).to(out.logits.dtype)
            cls_terms.append(F.binary_cross_entropy_with_logits(out.logits[i, idx], target, reduction='sum'))
            if len(pos) > 0:
                tgt = self.coder.encode(gt[matched[pos]].to(anchors.boxes.dtype), anchors.boxes[pos])
                reg_terms.append(F.smooth_l1_loss(out.deltas[i, pos], tgt.to(out.deltas.dtype),
                                                  beta=1.0 / 9, reduction='sum'))
            n_sampled += len(idx)
        n_sampled = max(n_sampled, 1)
        zero = out.logits.sum() * 0.0
        cls_loss = sum(cls_terms, zero) / n_sampled
        reg_loss = sum(reg_terms, zero) / n_sampled
        return cls_loss, reg_loss

    @torch.no_grad()
    def propose(self, out: RpnOutput, anchors: AnchorSet, image_size, pre_nms_k=None, post_nms_k=None):
        """
        RPN proposals per image.

        Top ``pre_nms_k`` anchors by logit are decoded, clipped, filtered for
        positive area, de-duplicated by NMS and capped at ``post_nms_k``.

        Returns
        -------
        list of list of Proposal
        """
        pre_nms_k = self.config.pre_nms_k if pre_nms_k is None else pre_nms_k
        post_nms_k = self.config.post_nms_k if post_nms_k is None else post_nms_k
        if pre_nms_k < 1 or post_nms_k < 1:
            raise ValueError('pre_nms_k and post_nms_k must be positive')
        h, w = image_size
        results = []
        for i in range(out.logits.shape[0]):
            logits = out.logits[i].detach().double()
            k = min(pre_nms_k, logits.numel())
            top = torch.argsort(-logits, stable=True)[:k]
            boxes = self.coder.decode(out.deltas[i, top].detach().double(), anchors.boxes[top].double())
            boxes = clip_boxes(boxes, h, w)
            keep = nonempty(boxes)
            boxes, scores = boxes[keep].numpy(), torch.sigmoid(logits[top][keep]).numpy()
            kept = nms_indices(boxes, scores, self.config.nms_thr)[:post_nms_k]
            results.append([Proposal(Box.from_array(boxes[j]), float(scores[j]), ProposalSource.RPN)
                            for j in kept])
        return results

    def segmenter_proposals(self, image, grid_n, image_id=None):
        """
        Segmenter proposals of one image, cached by ``(image_id, grid_n)``.
        """
        if self.segmenter is None:
            raise RuntimeError('No segmenter attached to the RPN')
        key = (image_id, grid_n)
        if image_id is not None and key in self.seg_cache:
            return self.seg_cache[key]
        props = segmenter_proposals(image, self.segmenter, grid_n,
                                    self.config.min_area, self.config.max_area_frac)
        if image_id is not None:
            self.seg_cache[key] = props
        return props

    def open_set_propose(self, images, rpn_props, mode, image_ids=None, grid_n=None):
        """
        Proposals of the requested mode per image.

        Parameters
        ----------
        images : list of array
            ``(H, W, 3)`` images in [0, 1].
        rpn_props : list of list of Proposal
            Output of :meth:`propose`.
        mode : ProposalMode or str
            RPN_ONLY returns ``rpn_props``; SEG_ONLY runs the segmenter on
            a ``seg_grid_n`` grid with NMS at ``seg_nms_thr``; OPEN_SET fuses
            both at ``merge_threshold``.
        grid_n : int, optional
            Overrides the OPEN_SET grid.
        """
        mode = ProposalMode(mode)
        if mode is ProposalMode.RPN_ONLY:
            return rpn_props
        image_ids = [None] * len(images) if image_ids is None else image_ids
        results = []
        for i, image in enumerate(images):
            if mode is ProposalMode.SEG_ONLY:
                seg = self.segmenter_proposals(image, self.config.seg_grid_n, image_ids[i])
                results.append(nms(seg, self.config.seg_nms_thr))
            else:
                grid = self.config.grid_n if grid_n is None else grid_n
                seg = self.segmenter_proposals(image, grid, image_ids[i])
                results.append(merge_open_set(rpn_props[i], seg, self.config.merge_threshold))
        return results
