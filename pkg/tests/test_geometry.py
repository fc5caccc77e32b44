import unittest

import numpy as np

from sideov.core.errors import EmptyMask, InvalidBox
from sideov.core.geometry import (BinaryMask, Box, Proposal, ProposalSource, box_to_mask, iou,
                                  iou_matrix, mask_iou, mask_to_box, mask_to_rle, merge_open_set,
                                  nms, point_grid, rle_to_mask)
from sideov.shared import skip_unittest_without_extra


def random_proposals(rng, n, source=ProposalSource.RPN, extent=128.0):
    out = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, extent - 8, size=2)
        w, h = rng.uniform(2, 40, size=2)
        out.append(Proposal(Box(float(x1), float(y1), float(x1 + w), float(y1 + h)),
                            float(rng.uniform()), source))
    return out


def brute_nms(proposals, threshold):
    """
    O(n^2) greedy NMS with the scalar IoU.
    """
    order = sorted(range(len(proposals)), key=lambda i: -proposals[i].score)
    kept = []
    for i in order:
        if all(iou(proposals[i].box, proposals[k].box) <= threshold for k in kept):
            kept.append(i)
    return [proposals[i] for i in kept]


def brute_merge(rpn, seg, threshold):
    survivors = [s for s in seg if all(iou(s.box, r.box) <= threshold for r in rpn)]
    return list(rpn) + brute_nms(survivors, threshold)


class TestBox(unittest.TestCase):

    def test_invalid_box(self):
        """
        Boxes with non-positive area or non-finite coordinates are rejected.
        """
        with self.assertRaises(InvalidBox):
            Box(0, 0, 0, 5)
        with self.assertRaises(InvalidBox):
            Box(3, 0, 1, 5)
        with self.assertRaises(InvalidBox):
            Box(0, 0, float('nan'), 5)

    def test_xywh(self):
        box = Box.from_xywh([2.5, 3.0, 4.0, 1.5])
        self.assertEqual(box, Box(2.5, 3.0, 6.5, 4.5))
        self.assertEqual(box.to_xywh(), [2.5, 3.0, 4.0, 1.5])

    def test_hflip(self):
        self.assertEqual(Box(1, 2, 4, 6).hflip(10), Box(6, 2, 9, 6))

    def test_clip(self):
        self.assertEqual(Box(-5, -5, 5, 5).clip(10, 10), Box(0, 0, 5, 5))
        self.assertIsNone(Box(12, 12, 15, 15).clip(10, 10))


class TestIoU(unittest.TestCase):

    def test_iou_values(self):
        a = Box(0, 0, 10, 10)
        self.assertEqual(iou(a, a), 1.0)
        self.assertEqual(iou(a, Box(20, 20, 30, 30)), 0.0)
        self.assertAlmostEqual(iou(a, Box(5, 0, 15, 10)), 50 / 150)

    def test_iou_matrix_matches_scalar(self):
        """
        The vectorized IoU is bit-identical to the scalar one.
        """
        rng = np.random.default_rng(0)
        a = random_proposals(rng, 20)
        b = random_proposals(rng, 15)
        mat = iou_matrix(np.stack([p.box.as_array() for p in a]), np.stack([p.box.as_array() for p in b]))
        for i, p in enumerate(a):
            for j, q in enumerate(b):
                self.assertEqual(mat[i, j], iou(p.box, q.box))


class TestNMS(unittest.TestCase):

    def _check_nms(self, n_cases, n_boxes, seed):
        rng = np.random.default_rng(seed)
        for _ in range(n_cases):
            props = random_proposals(rng, n_boxes)
            thr = float(rng.uniform(0.2, 0.9))
            self.assertEqual(nms(props, thr), brute_nms(props, thr))

    def _check_merge(self, n_cases, n_boxes, seed):
        rng = np.random.default_rng(seed)
        for _ in range(n_cases):
            rpn = nms(random_proposals(rng, n_boxes), 0.7)
            seg = random_proposals(rng, n_boxes, ProposalSource.SEGMENTER)
            merged = merge_open_set(rpn, seg, 0.7)
            self.assertEqual(merged, brute_merge(rpn, seg, 0.7))

    def test_nms_brute_force(self):
        """
        NMS equals the brute-force oracle on random cases.
        """
        self._check_nms(50, 60, seed=1)

    def test_merge_brute_force(self):
        self._check_merge(50, 60, seed=2)

    @skip_unittest_without_extra
    def test_nms_brute_force_extra_test(self):
        """
        1,000 random 200-box cases.
        """
        self._check_nms(1000, 200, seed=11)
        self._check_merge(1000, 200, seed=12)

    def test_nms_keeps_highest(self):
        a = Proposal(Box(0, 0, 10, 10), 0.9)
        b = Proposal(Box(1, 0, 11, 10), 0.8)
        c = Proposal(Box(50, 50, 60, 60), 0.7)
        self.assertEqual(nms([c, b, a], 0.5), [a, c])
        # suppression needs IoU strictly above the threshold
        self.assertEqual(nms([a, b], iou(a.box, b.box)), [a, b])

    def test_nms_bad_threshold(self):
        with self.assertRaises(ValueError):
            nms([], 0.0)

    def test_merge_invariants(self):
        """
        All RPN proposals are kept and every kept segmenter proposal has
        IoU at most the threshold with all RPN boxes.
        """
        rng = np.random.default_rng(3)
        rpn = nms(random_proposals(rng, 80), 0.7)
        seg = random_proposals(rng, 80, ProposalSource.SEGMENTER)
        merged = merge_open_set(rpn, seg, 0.7)
        self.assertEqual(merged[:len(rpn)], rpn)
        for p in merged[len(rpn):]:
            self.assertIs(p.source, ProposalSource.SEGMENTER)
            self.assertTrue(all(iou(p.box, r.box) <= 0.7 for r in rpn))

    def test_merge_never_compares_scores(self):
        """
        A low-scored segmenter box survives a high-scored overlapping RPN box
        only by IoU, never by score.
        """
        rpn = [Proposal(Box(0, 0, 10, 10), 0.1)]
        seg = [Proposal(Box(0, 0, 10, 10), 0.99, ProposalSource.SEGMENTER),
               Proposal(Box(40, 40, 50, 50), 0.01, ProposalSource.SEGMENTER)]
        self.assertEqual(merge_open_set(rpn, seg), [rpn[0], seg[1]])


class TestMask(unittest.TestCase):

    def test_box_mask_round_trip(self):
        box = Box(2, 3, 5, 7)
        mask = box_to_mask(box, 10, 10)
        self.assertEqual(mask.area, 12)
        self.assertEqual(mask_to_box(mask), box)

    def test_empty_mask(self):
        with self.assertRaises(EmptyMask):
            mask_to_box(BinaryMask(np.zeros((4, 4), dtype=bool)))

    def test_mask_iou(self):
        a = box_to_mask(Box(0, 0, 4, 4), 8, 8)
        b = box_to_mask(Box(2, 0, 6, 4), 8, 8)
        self.assertAlmostEqual(mask_iou(a, b), 8 / 24)
        self.assertEqual(mask_iou(np.zeros((2, 2)), np.zeros((2, 2))), 0.0)

    def test_rle(self):
        mask = BinaryMask(np.array([[0, 1], [1, 1]]))
        self.assertEqual(mask_to_rle(mask), {'size': [2, 2], 'counts': [1, 3]})
        first = BinaryMask(np.array([[1, 0], [0, 0]]))
        self.assertEqual(mask_to_rle(first)['counts'], [0, 1, 3])
        self.assertEqual(rle_to_mask(mask_to_rle(first)), first)
        with self.assertRaises(ValueError):
            rle_to_mask({'size': [2, 2], 'counts': [1, 1]})

    def test_point_grid(self):
        self.assertEqual(point_grid(2, 10, 10), [(2.5, 2.5), (7.5, 2.5), (2.5, 7.5), (7.5, 7.5)])
        self.assertEqual(len(point_grid(32, 128, 128)), 1024)
