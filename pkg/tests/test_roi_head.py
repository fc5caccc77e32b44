import unittest

import numpy as np
import torch
import torch.nn.functional as F
from torch.autograd import gradcheck

from sideov.core.config import RunConfig
from sideov.core.errors import DEGENERATE_BOX, EMPTY_MASK, ZERO_POSITIVES, ShapeError
from sideov.core.geometry import Box
from sideov.models.foundation import FeatureMap, FloodFillSegmenter
from sideov.models.roi_head import (CascadeROIHead, Detection, alignment_loss, boxes_to_masks,
                                    regression_loss, roi_align, similarity)


class TestRoiAlign(unittest.TestCase):

    def test_linear_map(self):
        """
        Sampling a map that is linear in x returns the bin-centre coordinates.
        """
        cols = torch.arange(4, dtype=torch.float64)
        features = cols[None, None, :].expand(1, 4, 4).clone()
        boxes = torch.tensor([[16., 16., 48., 48.]], dtype=torch.float64)
        pooled, keep = roi_align(features, boxes, out_size=2, stride=16)
        self.assertTrue(bool(keep.all()))
        expected = torch.tensor([[1., 2.], [1., 2.]], dtype=torch.float64)
        torch.testing.assert_close(pooled[0, 0], expected)

    def test_constant_map(self):
        features = torch.full((3, 4, 4), 2.5, dtype=torch.float64)
        boxes = torch.tensor([[0., 0., 64., 64.], [3., 5., 9., 7.]], dtype=torch.float64)
        pooled, _ = roi_align(features, boxes, out_size=7)
        self.assertEqual(tuple(pooled.shape), (2, 3, 7, 7))
        torch.testing.assert_close(pooled, torch.full_like(pooled, 2.5))

    def test_degenerate(self):
        features = torch.ones((2, 4, 4), dtype=torch.float64)
        boxes = torch.tensor([[0., 0., 10., 10.], [5., 5., 5.5, 5.5]], dtype=torch.float64)
        flags = set()
        pooled, keep = roi_align(features, boxes, out_size=3, flags=flags)
        self.assertEqual(keep.tolist(), [True, False])
        self.assertIn(DEGENERATE_BOX, flags)
        self.assertTrue(torch.equal(pooled[1], torch.zeros((2, 3, 3), dtype=torch.float64)))
        self.assertTrue(torch.equal(pooled[0], torch.ones((2, 3, 3), dtype=torch.float64)))

    def test_feature_map_batch(self):
        fmap = FeatureMap(torch.zeros(2, 4, 3), 2, 2)
        with self.assertRaises(ShapeError):
            roi_align(fmap, torch.zeros((0, 4)))


class TestLosses(unittest.TestCase):

    def test_similarity(self):
        g = torch.Generator().manual_seed(0)
        f_b = torch.randn(5, 8, generator=g, dtype=torch.float64)
        f_t = torch.randn(3, 8, generator=g, dtype=torch.float64)
        s = similarity(f_b, f_t, temperature=0.5)
        self.assertEqual(tuple(s.shape), (5, 3))
        for k in range(5):
            for m in range(3):
                self.assertAlmostEqual(float(s[k, m]), float(f_b[k] @ f_t[m]) / 0.5, places=12)
        with self.assertRaises(ShapeError):
            similarity(f_b, torch.randn(3, 4, dtype=torch.float64))

    def test_alignment_loss(self):
        g = torch.Generator().manual_seed(1)
        s = torch.randn(6, 4, generator=g, dtype=torch.float64)
        targets = torch.zeros(6, 4, dtype=torch.float64)
        targets[0, 1] = targets[3, 2] = 1.0
        # without focusing and weighting the focal loss is plain BCE
        plain = alignment_loss(s, targets, alpha=-1, gamma=0.0)
        torch.testing.assert_close(plain, F.binary_cross_entropy_with_logits(s, targets))
        # focusing only lowers the loss of well-classified pairs
        self.assertLess(float(alignment_loss(s, targets, alpha=-1, gamma=2.0)), float(plain))
        empty = torch.zeros((0, 4), dtype=torch.float64, requires_grad=True)
        self.assertEqual(float(alignment_loss(empty, empty.detach())), 0.0)

    def test_regression_loss(self):
        flags = set()
        pred = torch.zeros((0, 4), dtype=torch.float64, requires_grad=True)
        loss = regression_loss(pred, pred.detach(), flags)
        self.assertEqual(float(loss), 0.0)
        self.assertIn(ZERO_POSITIVES, flags)
        loss.backward()

        pred = torch.tensor([[0.5, -2.0, 0.0, 0.25]], dtype=torch.float64)
        target = torch.zeros_like(pred)
        # SmoothL1 with beta 1: 0.5 x^2 below 1, |x| - 0.5 above
        expected = (0.125 + 1.5 + 0.0 + 0.03125) / 4
        self.assertAlmostEqual(float(regression_loss(pred, target)), expected, places=12)
        with self.assertRaises(ShapeError):
            regression_loss(pred, torch.zeros((1, 3)))

    def test_gradcheck(self):
        g = torch.Generator().manual_seed(2)
        s = torch.randn(4, 3, generator=g, dtype=torch.float64, requires_grad=True)
        targets = (torch.rand(4, 3, generator=g) > 0.7).double()
        self.assertTrue(gradcheck(lambda x: alignment_loss(x, targets), (s,)))
        pred = torch.randn(3, 4, generator=g, dtype=torch.float64, requires_grad=True)
        target = torch.randn(3, 4, generator=g, dtype=torch.float64)
        self.assertTrue(gradcheck(lambda x: regression_loss(x, target), (pred,)))


class TestCascadeROIHead(unittest.TestCase):

    def setUp(self) -> None:
        self.rc = RunConfig(default_config=True, options=['ROIHead.hidden=32', 'ROIHead.rois_per_image=32'])
        torch.manual_seed(0)
        self.head = CascadeROIHead(8, self.rc.ROIHead)
        g = torch.Generator().manual_seed(0)
        self.features = FeatureMap(torch.randn(2, 16, 8, generator=g), 4, 4)
        self.proposals = [torch.tensor([[4., 4., 30., 30.], [20., 10., 60., 40.]]),
                          torch.tensor([[0., 0., 64., 64.]])]
        self.gt_boxes = [torch.tensor([[5., 5., 30., 28.]], dtype=torch.float64),
                         torch.zeros((0, 4), dtype=torch.float64)]
        self.gt_labels = [torch.tensor([[0., 1., 0.]], dtype=torch.float64),
                          torch.zeros((0, 3), dtype=torch.float64)]
        self.f_t = F.normalize(torch.randn(3, 8, generator=g), dim=-1)

    def test_structure(self):
        self.assertEqual(self.head.n_stages, 3)
        self.assertEqual(self.head.stage_ious, [0.5, 0.6, 0.7])
        self.assertIsNone(self.head.stage(0).embed)
        self.assertIsNotNone(self.head.stage(2).embed)
        self.assertAlmostEqual(float(torch.sigmoid(self.head.logit_bias)), 0.01, places=6)
        self.assertAlmostEqual(float(self.head.temperature()), 1 / 14.0, places=6)

    def test_cascade_identity_at_init(self):
        """
        Zero-initialized delta heads leave the proposals unchanged.
        """
        boxes, f_b, records = self.head.cascade_forward(self.features, self.proposals, (64, 64))
        for before, after in zip(self.proposals, boxes):
            torch.testing.assert_close(after, before)
        self.assertEqual(tuple(f_b.shape), (3, 8))
        self.assertEqual(len(records), 3)

    def test_loss(self):
        flags = set()
        losses = self.head.loss(self.features, self.proposals, self.gt_boxes, self.gt_labels,
                                self.f_t, (64, 64), torch.Generator().manual_seed(0), flags)
        self.assertEqual(sorted(losses), ['align', 'reg0', 'reg1', 'reg2'])
        total = sum(losses.values())
        self.assertTrue(torch.isfinite(total))
        total.backward()
        self.assertIsNotNone(self.head.logit_scale.grad)
        self.assertIsNotNone(self.head.stage(2).embed.weight.grad)

    def test_predict(self):
        dets = self.head.predict(self.features, self.proposals, self.f_t, ['a', 'b', 'c'], (64, 64),
                                 score_thr=0.0, max_dets=10)
        self.assertEqual(len(dets), 2)
        for image_dets in dets:
            self.assertLessEqual(len(image_dets), 10)
            for det in image_dets:
                self.assertIsInstance(det, Detection)
                self.assertEqual(det.scores.shape, (3,))
                self.assertEqual(det.concept, 'abc'[det.label])
                self.assertEqual(det.score, float(det.scores.max()))
        self.assertEqual(len(dets[1]), 1)

    def test_predict_threshold(self):
        dets = self.head.predict(self.features, self.proposals, self.f_t, ['a', 'b', 'c'], (64, 64),
                                 score_thr=1.0)
        self.assertEqual(dets, [[], []])
        empty = self.head.predict(self.features, [torch.zeros((0, 4)), torch.zeros((0, 4))],
                                  self.f_t, ['a', 'b', 'c'], (64, 64))
        self.assertEqual(empty, [[], []])

    def test_mean_embedding(self):
        rc = RunConfig(default_config=True, options=['ROIHead.hidden=32', 'ROIHead.embed_source=mean',
                                                     'ROIHead.stages=2'])
        head = CascadeROIHead(8, rc.ROIHead)
        self.assertIsNotNone(head.stage(0).embed)
        _, f_b, records = head.cascade_forward(self.features, self.proposals, (64, 64))
        torch.testing.assert_close(f_b, (records[0]['embed'] + records[1]['embed']) / 2)


class TestDetection(unittest.TestCase):

    def test_to_json(self):
        det = Detection(Box(1, 2, 3, 4), np.array([0.1, 0.7]), 1, 'red circle')
        self.assertEqual(det.to_json(), {'box': [1, 2, 3, 4], 'label_concept': 'red circle', 'score': 0.7})
        det.flags.add(EMPTY_MASK)
        self.assertEqual(det.to_json()['flags'], [EMPTY_MASK])

    def test_boxes_to_masks(self):
        image = np.full((32, 32, 3), 0.5)
        image[4:12, 4:12] = (0.1, 0.2, 0.9)
        dets = [Detection(Box(3, 3, 13, 13), np.array([0.9]), 0, 'blue square'),
                Detection(Box(20, 20, 28, 28), np.array([0.8]), 0, 'blue square')]
        out = boxes_to_masks(image, dets, FloodFillSegmenter())
        self.assertEqual(out[0].mask.area, 64)
        self.assertIsNone(out[1].mask)
        self.assertIn(EMPTY_MASK, out[1].flags)
        self.assertEqual(dets[1].flags, set())
        self.assertIn('mask_rle', out[0].to_json())
        self.assertNotIn('mask_rle', out[0].to_json(with_rle=False))
