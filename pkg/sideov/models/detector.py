"""
The assembled detector: frozen foundation stubs, SideFormer, open-set RPN
and cascade ROI head.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List

import numpy as np
import torch
from torch import nn

from sideov.core.errors import CheckpointError, InvalidConcept
from sideov.core.geometry import boxes_to_array, mask_to_box
from sideov.data.vocab import ConceptEmbedder
from sideov.models.foundation import (ClipVisualStub, FloodFillSegmenter, SamEncoderStub,
                                      TextEncoderStub, parameter_checksum, to_hwc)
from sideov.models.roi_head import CascadeROIHead, Detection, boxes_to_masks
from sideov.models.rpn import OpenSetRPN, ProposalMode
from sideov.models.sideformer import SideFormer
from sideov.shared import get_dtype, sub_seed

logger = logging.getLogger(__name__)

# trainable components, in optimizer order
TRAINABLE = ('sideformer', 'rpn', 'roi_head')
FROZEN = ('sam', 'clip')


@dataclass
class DetectionResult:
    """
    Detections and the proposals they were refined from, for one image.
    """
    detections: List[Detection]
    proposals: list
    flags: set = field(default_factory=set)


def proposal_tensor(proposals, dtype=torch.float64):
    return torch.as_tensor(boxes_to_array(proposals), dtype=dtype)


class Detector(nn.Module):
    """
    Open-vocabulary two-stage detector.

    Parameters
    ----------
    config : RunConfig
        Merged run configuration.

    Attributes
    ----------
    sam, clip : FrozenModule
        Frozen image encoders.
    text : TextEncoderStub
        Frozen text encoder.
    segmenter : FloodFillSegmenter
        Promptable segmenter.
    sideformer : SideFormer
    rpn : OpenSetRPN
    roi_head : CascadeROIHead
    embedder : ConceptEmbedder
        Cached concept embeddings.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        seed = config.seed
        fcfg, scfg = config.Foundation, config.SideFormer
        size = config.Data.image_size
        self.dtype = get_dtype(config.System.dtype)

        self.sam = SamEncoderStub(fcfg.dim, size, fcfg.patch, fcfg.sam_layers, fcfg.heads, seed)
        self.clip = ClipVisualStub(fcfg.dim, size, seed)
        self.text = TextEncoderStub(fcfg.dim, config.Data.n_templates, seed, fcfg.text_mix)
        self.segmenter = FloodFillSegmenter(fcfg.tau)
        self.embedder = ConceptEmbedder(self.text)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(sub_seed(seed, 'init', 'sideformer'))
            self.sideformer = SideFormer(fcfg.dim, fcfg.patch, scfg.heads, scfg.attention, scfg.points,
                                         scfg.ffn_ratio, scfg.injector_gate, scfg.variant)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(sub_seed(seed, 'init', 'rpn'))
            self.rpn = OpenSetRPN(fcfg.dim, config.RPN, self.segmenter)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(sub_seed(seed, 'init', 'roi_head'))
            self.roi_head = CascadeROIHead(fcfg.dim, config.ROIHead, stride=fcfg.patch)
        self.to(self.dtype)

    @property
    def image_size(self):
        return (self.config.Data.image_size, self.config.Data.image_size)

    def features(self, images):
        """
        Fused SideFormer features of a ``(B, 3, H, W)`` batch.
        """
        images = images.to(self.dtype)
        blocks = self.sam(images)
        f_clip = self.clip(images) if self.sideformer.variant == 'full' else None
        return self.sideformer(images, blocks, f_clip)

    def proposals(self, features, np_images, mode, image_ids=None, grid_n=None):
        """
        Second-stage proposals of the requested mode, one list per image.
        """
        mode = ProposalMode(mode)
        if mode is ProposalMode.SEG_ONLY:
            rpn_props = [[] for _ in np_images]
        else:
            out = self.rpn(features)
            rpn_props = self.rpn.propose(out, self.rpn.anchors(features), self.image_size)
        return self.rpn.open_set_propose(np_images, rpn_props, mode, image_ids, grid_n)

    def forward_train(self, batch, generator=None, mode=ProposalMode.RPN_ONLY, grid_n=None, flags=None):
        """
        All training losses of a batch.

        Parameters
        ----------
        batch : Batch
        generator : torch.Generator, optional
            Drives anchor and ROI sampling.
        mode : ProposalMode
            Proposals used to train the ROI head.
        grid_n : int, optional
            Point grid of OPEN_SET proposals.
        flags : set, optional
            Collects non-fatal flags.

        Returns
        -------
        OrderedDict
            ``rpn_cls``, ``rpn_reg``, ``reg{s}`` per stage and ``align``.
        """
        feats = self.features(batch.images)
        out = self.rpn(feats)
        anchors = self.rpn.anchors(feats)
        rpn_cls, rpn_reg = self.rpn.loss(out, anchors, batch.gt_boxes, generator)
        props = self.rpn.propose(out, anchors, batch.image_size)
        mode = ProposalMode(mode)
        if mode is not ProposalMode.RPN_ONLY:
            flips = batch.flipped or [False] * batch.size
            keys = [(i, f) for i, f in zip(batch.image_ids, flips)]
            props = self.rpn.open_set_propose(batch.np_images, props, mode, keys, grid_n)
        roi_losses = self.roi_head.loss(feats, [proposal_tensor(p) for p in props], batch.gt_boxes,
                                        batch.gt_labels, batch.concepts.embeddings.to(self.dtype),
                                        batch.image_size, generator, flags)
        losses = OrderedDict(rpn_cls=rpn_cls, rpn_reg=rpn_reg)
        losses.update(roi_losses)
        return losses

    def concept_embeddings(self, concepts):
        if len(concepts) == 0:
            raise InvalidConcept('The concept list is empty')
        return self.embedder.ensemble(list(concepts), self.dtype)

    @torch.no_grad()
    def detect(self, images, np_images, concepts, mode=ProposalMode.RPN_ONLY, with_masks=False,
               image_ids=None, score_thr=None, max_dets=None, embeddings=None):
        """
        Detect ``concepts`` in a batch.

        ``embeddings`` replaces the concept embeddings, row-aligned with
        ``concepts``.

        Returns
        -------
        list of DetectionResult
        """
        f_t = self.concept_embeddings(concepts) if embeddings is None else embeddings.to(self.dtype)
        feats = self.features(images)
        props = self.proposals(feats, np_images, mode, image_ids)
        dets = self.roi_head.predict(feats, [proposal_tensor(p, self.dtype) for p in props], f_t,
                                     list(concepts), tuple(images.shape[-2:]), score_thr, max_dets)
        results = []
        for i, d in enumerate(dets):
            if with_masks:
                d = boxes_to_masks(np_images[i], d, self.segmenter)
            flags = set().union(*(x.flags for x in d)) if d else set()
            results.append(DetectionResult(d, props[i], flags))
        return results

    @torch.no_grad()
    def detect_point(self, image, point, concepts):
        """
        Recognize the object under a point prompt.

        The segmenter masks the prompted object, the mask's box is pooled
        through the ROI head and classified against ``concepts``.

        Parameters
        ----------
        image : array
            ``(H, W, 3)`` image in [0, 1].
        point : tuple
            ``(x, y)`` in pixels.

        Returns
        -------
        Detection
            With the segmenter mask attached.
        """
        f_t = self.concept_embeddings(concepts)
        image = to_hwc(image)
        mask, _ = self.segmenter.segment_point(image, point)
        box = mask_to_box(mask)
        images = torch.as_tensor(image.transpose(2, 0, 1)[None].copy(), dtype=self.dtype)
        feats = self.features(images)
        _, f_b, _ = self.roi_head.cascade_forward(feats, [proposal_tensor([box], self.dtype)],
                                                  image.shape[:2])
        scores = torch.sigmoid(self.roi_head.logits(f_b, f_t))[0].double().numpy()
        label = int(np.argmax(scores))
        return Detection(box, scores, label, list(concepts)[label], mask)

    def parameter_partition(self):
        """
        Names of trainable and frozen parameters.

        Returns
        -------
        list, list
        """
        trainable, frozen = [], []
        for name, p in self.named_parameters():
            (trainable if p.requires_grad else frozen).append(name)
        return trainable, frozen

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def frozen_flags(self):
        return {name: not p.requires_grad for name, p in self.named_parameters()}

    def frozen_checksum(self):
        """
        Checksum of the frozen encoder weights.
        """
        return parameter_checksum([getattr(self, name) for name in FROZEN])

    def component_counts(self):
        """
        Trainable and frozen parameter counts per component.
        """
        out = OrderedDict()
        for name in FROZEN + TRAINABLE:
            module = getattr(self, name)
            n_train = sum(p.numel() for p in module.parameters() if p.requires_grad)
            n_frozen = sum(p.numel() for p in module.parameters() if not p.requires_grad)
            out[name] = (n_train, n_frozen)
        return out

    def load_tensors(self, tensors):
        """
        Load a checkpoint ``state_dict``; the frozen weights must match.
        """
        missing, unexpected = self.load_state_dict(tensors, strict=False)
        if missing or unexpected:
            raise CheckpointError(f'Checkpoint tensors do not fit the model: missing {missing[:5]}, '
                                  f'unexpected {unexpected[:5]}')
        return self
