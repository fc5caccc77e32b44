import unittest

import numpy as np
import torch
from torch.autograd import gradcheck

from sideov.core.config import RunConfig
from sideov.core.errors import ShapeError
from sideov.core.geometry import BinaryMask, Box, Proposal, ProposalSource, iou, mask_to_box
from sideov.core.metrics import average_recall
from sideov.data.synth import generate_dataset
from sideov.models.boxes import BoxCoder, box_iou, clip_boxes, sample_labels
from sideov.models.foundation import FeatureMap, FloodFillSegmenter
from sideov.models.rpn import OpenSetRPN, ProposalMode, RpnOutput, make_anchors, segmenter_proposals


def disk_image(size=64, radius=8, center=(32, 32)):
    """
    Gray image with one green disk; returns the image and the disk mask.
    """
    yy, xx = np.mgrid[:size, :size] + 0.5
    mask = (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius ** 2
    image = np.full((size, size, 3), 0.5)
    image[mask] = (0.1, 0.8, 0.2)
    return image, mask


class TestBoxes(unittest.TestCase):

    def test_coder(self):
        coder = BoxCoder((10., 10., 5., 5.))
        ref = torch.tensor([[0., 0., 10., 10.], [5., 5., 25., 15.]], dtype=torch.float64)
        boxes = torch.tensor([[1., 2., 12., 9.], [5., 5., 25., 15.]], dtype=torch.float64)
        deltas = coder.encode(boxes, ref)
        self.assertTrue(torch.equal(deltas[1], torch.zeros(4, dtype=torch.float64)))
        torch.testing.assert_close(coder.decode(deltas, ref), boxes)

    def test_box_iou(self):
        a = torch.tensor([[0., 0., 10., 10.]], dtype=torch.float64)
        b = torch.tensor([[5., 0., 15., 10.], [20., 20., 30., 30.]], dtype=torch.float64)
        torch.testing.assert_close(box_iou(a, b), torch.tensor([[50 / 150, 0.]], dtype=torch.float64))

    def test_clip(self):
        boxes = torch.tensor([[-5., 2., 70., 80.]])
        self.assertEqual(clip_boxes(boxes, 64, 64).tolist(), [[0., 2., 64., 64.]])

    def test_sample_labels(self):
        labels = torch.tensor([1, 1, 1, 0, 0, 0, 0, -1])
        pos, neg = sample_labels(labels, 4, 0.25, torch.Generator().manual_seed(0))
        self.assertEqual(len(pos), 1)
        self.assertEqual(len(neg), 3)
        self.assertTrue(all(int(labels[i]) == 1 for i in pos))
        self.assertTrue(all(int(labels[i]) == 0 for i in neg))


class TestAnchors(unittest.TestCase):

    def test_layout(self):
        anchors = make_anchors(8, 8)
        self.assertEqual(anchors.counts, (192, 48))
        self.assertEqual(len(anchors), 240)
        self.assertEqual(anchors.boxes[0].tolist(), [2., 2., 14., 14.])
        self.assertEqual(anchors.boxes[2].tolist(), [-8., -8., 24., 24.])
        self.assertEqual(anchors.boxes[192].tolist(), [-8., -8., 40., 40.])
        # second cell of the first level
        self.assertEqual(anchors.boxes[3].tolist(), [18., 2., 30., 14.])


class TestOpenSetRPN(unittest.TestCase):

    def setUp(self) -> None:
        self.rc = RunConfig(default_config=True, options=['Data.n_images=4', 'RPN.post_nms_k=50'])
        torch.manual_seed(0)
        self.rpn = OpenSetRPN(16, self.rc.RPN, FloodFillSegmenter(self.rc.Foundation.tau))
        g = torch.Generator().manual_seed(0)
        self.features = FeatureMap(torch.randn(2, 64, 16, generator=g), 8, 8)
        self.anchors = self.rpn.anchors(self.features)

    def test_forward(self):
        out = self.rpn(self.features)
        self.assertEqual(tuple(out.logits.shape), (2, 240))
        self.assertEqual(tuple(out.deltas.shape), (2, 240, 4))
        with self.assertRaises(ShapeError):
            self.rpn(FeatureMap(torch.zeros(1, 64, 8), 8, 8))

    def test_assign(self):
        gt = self.anchors.boxes[5:6].clone()
        labels, matched = self.rpn.assign(self.anchors, gt)
        self.assertEqual(int(labels[5]), 1)
        self.assertEqual(int(matched[5]), 0)
        self.assertTrue(set(labels.tolist()) <= {-1, 0, 1})

        labels, _ = self.rpn.assign(self.anchors, torch.zeros((0, 4)))
        self.assertTrue(bool((labels == 0).all()))

    def test_loss(self):
        out = self.rpn(self.features)
        gt = [torch.tensor([[10., 10., 40., 30.]], dtype=torch.float64), torch.zeros((0, 4), dtype=torch.float64)]
        cls_loss, reg_loss = self.rpn.loss(out, self.anchors, gt, torch.Generator().manual_seed(0))
        self.assertTrue(torch.isfinite(cls_loss))
        self.assertTrue(torch.isfinite(reg_loss))
        self.assertGreater(float(reg_loss), 0.0)
        (cls_loss + reg_loss).backward()
        self.assertIsNotNone(self.rpn.cls.weight.grad)
        self.assertIsNotNone(self.rpn.reg.weight.grad)

    def test_loss_gradcheck(self):
        """
        Loss gradients with respect to logits and deltas match finite differences.
        """
        rpn = self.rpn.double()
        features = FeatureMap(self.features.tokens.double(), 8, 8)
        anchors = rpn.anchors(features)
        out = rpn(features)
        gt = [torch.tensor([[10., 10., 40., 30.]], dtype=torch.float64),
              torch.tensor([[60., 64., 100., 120.]], dtype=torch.float64)]
        logits = out.logits.detach().clone().requires_grad_(True)
        deltas = out.deltas.detach().clone().requires_grad_(True)

        def run(logits, deltas):
            return rpn.loss(RpnOutput(logits, deltas), anchors, gt, torch.Generator().manual_seed(0))

        self.assertTrue(gradcheck(run, (logits, deltas), eps=1e-6, atol=1e-8, rtol=1e-4))

    def test_propose(self):
        out = self.rpn(self.features)
        props = self.rpn.propose(out, self.anchors, (128, 128))
        self.assertEqual(len(props), 2)
        for image_props in props:
            self.assertLessEqual(len(image_props), 50)
            scores = [p.score for p in image_props]
            self.assertEqual(scores, sorted(scores, reverse=True))
            for p in image_props:
                self.assertIs(p.source, ProposalSource.RPN)
                self.assertTrue(0 <= p.box.x1 and p.box.x2 <= 128 and 0 <= p.box.y1 and p.box.y2 <= 128)
            for i, p in enumerate(image_props):
                for q in image_props[:i]:
                    self.assertLessEqual(iou(p.box, q.box), self.rc.RPN.nms_thr)
        with self.assertRaises(ValueError):
            self.rpn.propose(out, self.anchors, (128, 128), post_nms_k=0)


class TestSegmenterProposals(unittest.TestCase):

    def setUp(self) -> None:
        self.rc = RunConfig(default_config=True, options=['Data.n_images=4', 'RPN.post_nms_k=50'])
        self.ds = generate_dataset(self.rc.Data, seed=0)
        self.segmenter = FloodFillSegmenter(self.rc.Foundation.tau)

    def test_objects_found(self):
        """
        Every synthetic object is boxed exactly by some segmenter proposal.
        """
        for rec in self.ds.records:
            props = segmenter_proposals(rec.float_image(), self.segmenter, grid_n=32)
            boxes = [p.box for p in props]
            for ann in rec.annotations:
                self.assertIn(ann.box, boxes)
            self.assertTrue(all(p.source is ProposalSource.SEGMENTER for p in props))
            # the background covers more than max_area_frac of the image
            self.assertTrue(all(p.box.area <= 0.9 * 128 * 128 for p in props))

    def test_open_set_recall(self):
        """
        Fusing segmenter proposals never lowers recall of RPN proposals.
        """
        torch.manual_seed(0)
        rpn = OpenSetRPN(16, self.rc.RPN, self.segmenter)
        g = torch.Generator().manual_seed(1)
        features = FeatureMap(torch.randn(len(self.ds.records), 64, 16, generator=g), 8, 8)
        rpn_props = rpn.propose(rpn(features), rpn.anchors(features), (128, 128))
        images = [rec.float_image() for rec in self.ds.records]
        ids = [rec.image_id for rec in self.ds.records]
        gts = [[a.box for a in rec.annotations] for rec in self.ds.records]

        self.assertIs(rpn.open_set_propose(images, rpn_props, 'rpn'), rpn_props)
        seg = rpn.open_set_propose(images, rpn_props, ProposalMode.SEG_ONLY, ids)
        merged = rpn.open_set_propose(images, rpn_props, ProposalMode.OPEN_SET, ids)

        self.assertEqual(average_recall(seg, gts, 1000), 1.0)
        self.assertGreaterEqual(average_recall(merged, gts, 1000), average_recall(rpn_props, gts, 1000))
        for i, props in enumerate(merged):
            self.assertEqual(props[:len(rpn_props[i])], rpn_props[i])

    def test_cache(self):
        rpn = OpenSetRPN(16, self.rc.RPN, self.segmenter)
        image = self.ds.records[0].float_image()
        first = rpn.segmenter_proposals(image, 16, image_id=0)
        self.assertIs(rpn.segmenter_proposals(image, 16, image_id=0), first)
        self.assertIsNot(rpn.segmenter_proposals(image, 8, image_id=0), first)
        self.assertEqual(set(rpn.seg_cache), {(0, 16), (0, 8)})

    def test_no_segmenter(self):
        rpn = OpenSetRPN(16, self.rc.RPN)
        with self.assertRaises(RuntimeError):
            rpn.segmenter_proposals(self.ds.records[0].float_image(), 8)

    def test_single_disk(self):
        """
        One disk on a plain background gives exactly one proposal, its box.
        """
        image, mask = disk_image()
        props = segmenter_proposals(image, self.segmenter, grid_n=16)
        self.assertEqual(len(props), 1)
        self.assertEqual(props[0].box, mask_to_box(BinaryMask(mask)))

    def test_open_set_rescues_missed_object(self):
        """
        An object the RPN misses is recalled once segmenter proposals are fused.
        """
        image, mask = disk_image()
        gts = [[mask_to_box(BinaryMask(mask))]]
        rpn = OpenSetRPN(16, self.rc.RPN, self.segmenter)
        rpn_props = [[Proposal(Box(0, 0, 8, 8), 0.9, ProposalSource.RPN)]]
        merged = rpn.open_set_propose([image], rpn_props, ProposalMode.OPEN_SET)
        self.assertEqual(average_recall(rpn_props, gts, 100), 0.0)
        self.assertEqual(average_recall(merged, gts, 100), 1.0)
        self.assertEqual(merged[0][0], rpn_props[0][0])

    def test_small_object_deficit(self):
        """
        Shapes below the mask area floor are lost by the segmenter but not by
        an RPN whose deltas fit them.
        """
        image = np.full((64, 64, 3), 0.5)
        # 3 x 3 squares, one near each of three stride-16 cell centres
        gts = [Box(7, 7, 10, 10), Box(39, 23, 42, 26), Box(23, 55, 26, 58)]
        for gt, color in zip(gts, ((0.9, 0.1, 0.1), (0.1, 0.9, 0.1), (0.1, 0.1, 0.9))):
            image[int(gt.y1):int(gt.y2), int(gt.x1):int(gt.x2)] = color
        rpn = OpenSetRPN(16, self.rc.RPN, self.segmenter).double()
        anchors = make_anchors(4, 4, rpn.sizes, dtype=torch.float64)
        targets = torch.tensor([g.as_array() for g in gts], dtype=torch.float64)
        best = box_iou(anchors.boxes, targets).argmax(0)
        logits = torch.full((1, len(anchors.boxes)), -10.0, dtype=torch.float64)
        deltas = torch.zeros((1, len(anchors.boxes), 4), dtype=torch.float64)
        logits[0, best] = 10.0
        deltas[0, best] = rpn.coder.encode(targets, anchors.boxes[best])
        rpn_props = rpn.propose(RpnOutput(logits, deltas), anchors, (64, 64))

        seg = rpn.open_set_propose([image], rpn_props, ProposalMode.SEG_ONLY)
        merged = rpn.open_set_propose([image], rpn_props, ProposalMode.OPEN_SET)
        ar = {name: average_recall(props, [gts], 100)
              for name, props in (('rpn', rpn_props), ('seg', seg), ('open', merged))}
        self.assertEqual(ar['seg'], 0.0)
        self.assertEqual(ar['rpn'], 1.0)
        self.assertGreaterEqual(ar['open'], max(ar['rpn'], ar['seg']))
