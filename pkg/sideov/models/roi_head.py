"""
Cascade ROI head with open-vocabulary classification.

Each cascade stage refines the boxes of the previous one with a
class-agnostic delta head. Region embeddings ``F_B`` meet the concept
embeddings ``F_T`` only at the dot product, giving the similarity matrix
``S`` that is trained with a sigmoid focal loss.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from sideov.core.errors import DEGENERATE_BOX, EMPTY_MASK, ZERO_POSITIVES, ShapeError
from sideov.core.geometry import BinaryMask, Box, mask_to_rle, nms_indices
from sideov.models.boxes import BoxCoder, box_iou, clip_boxes, nonempty, sample_labels
from sideov.models.foundation import FeatureMap

logger = logging.getLogger(__name__)

# delta weights of the cascade stages
STAGE_WEIGHTS = ((10., 10., 5., 5.), (20., 20., 10., 10.), (30., 30., 15., 15.))


@dataclass
class Detection:
    """
    A scored box.

    ``scores`` is the row of post-sigmoid similarities over the concept set
    and ``label`` its argmax.
    """
    box: Box
    scores: np.ndarray
    label: int
    concept: str
    mask: Optional[BinaryMask] = None
    flags: set = field(default_factory=set)

    @property
    def score(self):
        return float(self.scores[self.label])

    def to_json(self, with_rle=True):
        out = {'box': [self.box.x1, self.box.y1, self.box.x2, self.box.y2],
               'label_concept': self.concept,
               'score': self.score}
        if with_rle and self.mask is not None:
            out['mask_rle'] = mask_to_rle(self.mask)
        if self.flags:
            out['flags'] = sorted(self.flags)
        return out


def roi_align(features, boxes, out_size=7, stride=16, flags=None):
    """
    Bilinear pooling of box regions.

    Samples are taken at the bin centres of an ``out_size x out_size``
    partition of each box; feature cell ``i`` is centred at
    ``(i + 0.5) * stride`` pixels and values beyond the map take the edge.

    Parameters
    ----------
    features : FeatureMap or Tensor
        Map of one image, ``(D, H, W)`` or a single-image FeatureMap.
    boxes : Tensor
        ``(K, 4)`` boxes in pixels, already clipped.
    out_size : int
        Output side.
    stride : int
        Pixels per feature cell.
    flags : set, optional
        Receives ``DegenerateBox`` when a box is skipped.

    Returns
    -------
    Tensor
        ``(K, D, out_size, out_size)``; skipped boxes are zero.
    Tensor
        Boolean keep mask ``(K,)``; boxes with area below one pixel are skipped.
    """
    if isinstance(features, FeatureMap):
        if features.batch != 1:
            raise ShapeError('roi_align takes a single-image FeatureMap')
        features = features.to_grid()[0]
    d, h, w = features.shape
    k = boxes.shape[0]
    keep = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) >= 1.0) & \
        (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    if flags is not None and not bool(keep.all()):
        flags.add(DEGENERATE_BOX)
    out = features.new_zeros((k, d, out_size, out_size))
    if k == 0 or not bool(keep.any()):
        return out, keep
    kb = boxes[keep].to(features.dtype)
    steps = (torch.arange(out_size, dtype=features.dtype, device=features.device) + 0.5) / out_size
    xs = kb[:, 0:1] + steps[None, :] * (kb[:, 2:3] - kb[:, 0:1])
    ys = kb[:, 1:2] + steps[None, :] * (kb[:, 3:4] - kb[:, 1:2])
    gx = 2 * xs / (w * stride) - 1
    gy = 2 * ys / (h * stride) - 1
    grid = torch.stack((gx[:, None, :].expand(-1, out_size, -1),
                        gy[:, :, None].expand(-1, -1, out_size)), dim=-1)
    inp = features[None].expand(kb.shape[0], -1, -1, -1)
    pooled = F.grid_sample(inp, grid, mode='bilinear', padding_mode='border', align_corners=False)
    if bool(keep.all()):
        return pooled, keep
    out[keep] = pooled
    return out, keep


def similarity(f_b, f_t, temperature=1.0):
    """
    ``S = F_B F_T^T / temperature``, logits of shape ``(K, M)``.
    """
    if f_b.shape[-1] != f_t.shape[-1]:
        raise ShapeError(f'Region width {f_b.shape[-1]} differs from text width {f_t.shape[-1]}')
    return (f_b @ f_t.transpose(-2, -1)) / temperature


def alignment_loss(s, targets, alpha=0.25, gamma=2.0):
    """
    Sigmoid focal loss over all region-concept pairs, averaged over ``K * M``.
    """
    targets = targets.to(s.dtype)
    prob = s.sigmoid()
    ce = F.binary_cross_entropy_with_logits(s, targets, reduction='none')
    p_t = prob * targets + (1 - prob) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
        loss = alpha_t * loss
    if loss.numel() == 0:
        return s.sum() * 0.0
    return loss.mean()


def regression_loss(pred, target, flags=None):
    """
    SmoothL1 (beta 1) averaged over positives and coordinates.

    Without positives the loss is zero and ``ZeroPositives`` is flagged.
    """
    if pred.shape != target.shape:
        raise ShapeError(f'Delta shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}')
    if pred.numel() == 0:
        if flags is not None:
            flags.add(ZERO_POSITIVES)
        return pred.sum() * 0.0
    return F.smooth_l1_loss(pred, target.to(pred.dtype), beta=1.0, reduction='mean')


class StageHead(nn.Module):
    """
    Two-layer box head with a zero-initialized delta predictor.
    """

    def __init__(self, in_dim, hidden, out_dim, embed=True):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.delta = nn.Linear(hidden, 4)
        nn.init.constant_(self.delta.weight, 0.)
        nn.init.constant_(self.delta.bias, 0.)
        self.embed = nn.Linear(hidden, out_dim) if embed else None

    def forward(self, pooled):
        x = F.relu(self.fc2(F.relu(self.fc1(pooled.flatten(1)))))
        emb = self.embed(x) if self.embed is not None else None
        return self.delta(x), emb


class CascadeROIHead(nn.Module):
    """
    Cascade refinement and region-concept classification.

    Parameters
    ----------
    dim : int
        Feature and embedding width D.
    config : andes.core.Config
        The ``ROIHead`` config section.
    stride : int
        Pixels per feature cell.
    """

    def __init__(self, dim, config, stride=16):
        super().__init__()
        self.dim = dim
        self.config = config
        self.stride = stride
        self.n_stages = int(config.stages)
        self.stage_ious = [float(v) for v in str(config.stage_ious).split(',')][:self.n_stages]
        self.coders = [BoxCoder(STAGE_WEIGHTS[min(i, len(STAGE_WEIGHTS) - 1)]) for i in range(self.n_stages)]
        in_dim = dim * config.out_size ** 2
        for i in range(self.n_stages):
            embed = config.embed_source == 'mean' or i == self.n_stages - 1
            self.add_module(f'stage{i}', StageHead(in_dim, config.hidden, dim, embed=embed))
        self.logit_scale = nn.Parameter(torch.tensor(float(config.logit_scale)))
        prior = float(config.prior_prob)
        self.logit_bias = nn.Parameter(torch.tensor(-math.log((1 - prior) / prior)))

    def stage(self, i):
        return getattr(self, f'stage{i}')

    def temperature(self):
        return 1.0 / self.logit_scale.clamp(self.config.scale_min, self.config.scale_max)

    def logits(self, f_b, f_t):
        """
        Similarity logits of normalized region embeddings plus the prior bias.
        """
        return similarity(F.normalize(f_b, dim=-1), f_t.to(f_b.dtype), self.temperature()) + self.logit_bias

    def _pool(self, grid, boxes, flags):
        pooled, keep = roi_align(grid, boxes, self.config.out_size, self.stride, flags)
        return pooled, keep

    def cascade_forward(self, features: FeatureMap, proposals, image_size, flags=None):
        """
        Refine proposals through all stages.

        Parameters
        ----------
        features : FeatureMap
            Batched fused features.
        proposals : list of Tensor
            ``(K_i, 4)`` boxes per image.
        image_size : tuple
            ``(H, W)`` in pixels.

        Returns
        -------
        list of Tensor
            Refined boxes per image after the last stage.
        Tensor
            Region embeddings ``F_B`` of all boxes, ``(sum K_i, D)``.
        list of dict
            Per-stage records with ``boxes`` (stage inputs), ``deltas`` and
            ``embed`` concatenated over images.
        """
        grids = features.to_grid()
        h, w = image_size
        boxes = [clip_boxes(p.to(grids.dtype), h, w) for p in proposals]
        counts = [b.shape[0] for b in boxes]
        records = []
        for s in range(self.n_stages):
            pooled = torch.cat([self._pool(grids[i], boxes[i], flags)[0] for i in range(len(boxes))]) \
                if sum(counts) > 0 else grids.new_zeros((0, self.dim, self.config.out_size, self.config.out_size))
            deltas, emb = self.stage(s)(pooled)
            cat_in = torch.cat(boxes) if sum(counts) > 0 else grids.new_zeros((0, 4))
            records.append({'boxes': cat_in, 'deltas': deltas, 'embed': emb})
            decoded = self.coders[s].decode(deltas, cat_in.detach()) if sum(counts) > 0 else cat_in
            decoded = clip_boxes(decoded, h, w)
            boxes = list(torch.split(decoded.detach(), counts))
        if self.config.embed_source == 'mean':
            f_b = torch.stack([r['embed'] for r in records]).mean(0)
        else:
            f_b = records[-1]['embed']
        return boxes, f_b, records

    def _assign(self, rois, gt):
        if gt.numel() == 0 or rois.numel() == 0:
            return (torch.zeros(rois.shape[0], dtype=rois.dtype),
                    torch.zeros(rois.shape[0], dtype=torch.long))
        ious = box_iou(rois, gt.to(rois.dtype))
        return ious.max(dim=1)

    def sample_rois(self, proposals, gt_boxes, generator=None):
        """
        Add GT boxes to the proposals and sample ROIs at the first-stage IoU.
        """
        out = []
        for props, gt in zip(proposals, gt_boxes):
            cand = torch.cat((props.to(torch.float64), gt.to(torch.float64)))
            cand = cand[nonempty(cand)]
            max_iou, _ = self._assign(cand, gt.to(torch.float64))
            labels = (max_iou >= self.stage_ious[0]).long()
            pos, neg = sample_labels(labels, self.config.rois_per_image, self.config.pos_fraction, generator)
            out.append(cand[torch.cat((pos, neg))])
        return out

    def loss(self, features, proposals, gt_boxes, gt_labels, f_t, image_size, generator=None, flags=None):
        """
        Alignment and per-stage regression losses.

        Parameters
        ----------
        features : FeatureMap
            Batched fused features.
        proposals : list of Tensor
            Detached proposal boxes per image.
        gt_boxes : list of Tensor
            ``(G_i, 4)`` GT boxes per image.
        gt_labels : list of Tensor
            ``(G_i, M)`` multi-hot concept targets per image.
        f_t : Tensor
            ``(M, D)`` concept embeddings.
        image_size : tuple
            ``(H, W)``.

        Returns
        -------
        dict
            ``align`` and ``reg{s}`` for each stage.
        """
        flags = set() if flags is None else flags
        rois = self.sample_rois(proposals, gt_boxes, generator)
        rois = [r.to(features.tokens.dtype) for r in rois]
        counts = [r.shape[0] for r in rois]
        _, f_b, records = self.cascade_forward(features, rois, image_size, flags)

        losses = {}
        m = f_t.shape[0]
        for s, rec in enumerate(records):
            stage_boxes = torch.split(rec['boxes'], counts)
            pos_pred, pos_tgt, targets = [], [], []
            offset = 0
            for i, (bx, gt) in enumerate(zip(stage_boxes, gt_boxes)):
                max_iou, matched = self._assign(bx, gt)
                pos = torch.nonzero(max_iou >= self.stage_ious[s]).flatten() if gt.numel() else \
                    torch.zeros(0, dtype=torch.long)
                if len(pos) > 0:
                    gtb = gt.to(bx.dtype)[matched[pos]]
                    pos_pred.append(rec['deltas'][offset + pos])
                    pos_tgt.append(self.coders[s].encode(gtb, bx[pos]))
                if s == self.n_stages - 1:
                    tgt = torch.zeros((bx.shape[0], m), dtype=f_b.dtype)
                    if len(pos) > 0:
                        tgt[pos] = gt_labels[i].to(f_b.dtype)[matched[pos]]
                    targets.append(tgt)
                offset += bx.shape[0]
            pred = torch.cat(pos_pred) if pos_pred else rec['deltas'][:0]
            tgt = torch.cat(pos_tgt) if pos_tgt else rec['deltas'][:0].detach()
            losses[f'reg{s}'] = regression_loss(pred, tgt, flags)
        s_mat = self.logits(f_b, f_t)
        losses['align'] = alignment_loss(s_mat, torch.cat(targets), self.config.focal_alpha,
                                         self.config.focal_gamma)
        return losses

    @torch.no_grad()
    def predict(self, features, proposals, f_t, concepts, image_size, score_thr=None, max_dets=None):
        """
        Detections per image after class-agnostic NMS.
        """
        score_thr = self.config.score_thr if score_thr is None else score_thr
        max_dets = self.config.max_dets if max_dets is None else max_dets
        counts = [p.shape[0] for p in proposals]
        boxes, f_b, _ = self.cascade_forward(features, proposals, image_size)
        if sum(counts) == 0:
            return [[] for _ in counts]
        probs = torch.sigmoid(self.logits(f_b, f_t)).double().numpy()
        results = []
        offset = 0
        for i, bx in enumerate(boxes):
            bx = bx.double()
            p = probs[offset:offset + counts[i]]
            offset += counts[i]
            ok = nonempty(bx).numpy()
            if p.shape[1] == 0:
                results.append([])
                continue
            best = p.max(axis=1)
            ok &= best >= score_thr
            idx = np.flatnonzero(ok)
            kept = nms_indices(bx.numpy()[idx], best[idx], self.config.test_nms)[:max_dets]
            dets = []
            for j in idx[kept]:
                label = int(np.argmax(p[j]))
                dets.append(Detection(Box.from_array(bx[j].numpy()), p[j].copy(), label, concepts[label]))
            results.append(dets)
        return results


def boxes_to_masks(image, detections, segmenter):
    """
    Prompt the segmenter with each detection box and attach the mask.

    Detections whose box prompt yields an empty mask keep ``mask=None`` and
    gain the ``EmptyMask`` flag.

    Returns
    -------
    list of Detection
        New detections; the inputs are left unchanged.
    """
    out = []
    for det in detections:
        mask = segmenter.segment_box(image, det.box)
        flags = set(det.flags)
        if mask.is_empty():
            flags.add(EMPTY_MASK)
            out.append(Detection(det.box, det.scores, det.label, det.concept, None, flags))
        else:
            out.append(Detection(det.box, det.scores, det.label, det.concept, mask, flags))
    return out
