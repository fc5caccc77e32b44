"""
Tensor box utilities shared by the RPN and the ROI head.
"""

import math

import torch

# upper bound of predicted log-scale deltas
SCALE_CLAMP = math.log(1000.0 / 16)


def box_iou(a, b):
    """
    Pairwise IoU of ``(N, 4)`` and ``(M, 4)`` boxes in ``x1, y1, x2, y2``.
    """
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union.clamp(min=torch.finfo(a.dtype).tiny)


class BoxCoder:
    """
    Encode and decode ``(dx, dy, dw, dh)`` regression targets.

    Parameters
    ----------
    weights : tuple
        Scaling of the four deltas.
    """

    def __init__(self, weights=(1.0, 1.0, 1.0, 1.0)):
        self.weights = tuple(float(w) for w in weights)

    def encode(self, boxes, ref):
        """
        Deltas that map ``ref`` onto ``boxes``.
        """
        wx, wy, ww, wh = self.weights
        rw = ref[:, 2] - ref[:, 0]
        rh = ref[:, 3] - ref[:, 1]
        rx = ref[:, 0] + 0.5 * rw
        ry = ref[:, 1] + 0.5 * rh
        bw = boxes[:, 2] - boxes[:, 0]
        bh = boxes[:, 3] - boxes[:, 1]
        bx = boxes[:, 0] + 0.5 * bw
        by = boxes[:, 1] + 0.5 * bh
        return torch.stack((wx * (bx - rx) / rw, wy * (by - ry) / rh,
                            ww * torch.log(bw / rw), wh * torch.log(bh / rh)), dim=1)

    def decode(self, deltas, ref):
        """
        Apply ``deltas`` to ``ref`` boxes.
        """
        wx, wy, ww, wh = self.weights
        rw = ref[:, 2] - ref[:, 0]
        rh = ref[:, 3] - ref[:, 1]
        rx = ref[:, 0] + 0.5 * rw
        ry = ref[:, 1] + 0.5 * rh
        dx = deltas[:, 0] / wx
        dy = deltas[:, 1] / wy
        dw = (deltas[:, 2] / ww).clamp(max=SCALE_CLAMP)
        dh = (deltas[:, 3] / wh).clamp(max=SCALE_CLAMP)
        cx = dx * rw + rx
        cy = dy * rh + ry
        w = torch.exp(dw) * rw
        h = torch.exp(dh) * rh
        return torch.stack((cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h), dim=1)


def clip_boxes(boxes, height, width):
    """
    Clamp ``(N, 4)`` boxes to the image extent.
    """
    x = boxes[:, 0::2].clamp(0, width)
    y = boxes[:, 1::2].clamp(0, height)
    return torch.stack((x[:, 0], y[:, 0], x[:, 1], y[:, 1]), dim=1)


def nonempty(boxes, min_size=1e-3):
    """
    Mask of boxes whose sides both exceed ``min_size``.
    """
    return ((boxes[:, 2] - boxes[:, 0]) > min_size) & ((boxes[:, 3] - boxes[:, 1]) > min_size)


def sample_labels(labels, num, pos_fraction, generator=None):
    """
    Sample positives (label 1) and negatives (label 0) without replacement.

    Parameters
    ----------
    labels : Tensor
        ``(N,)`` with 1 for positives, 0 for negatives and -1 for ignored.
    num : int
        Total samples.
    pos_fraction : float
        Upper share of positives.
    generator : torch.Generator, optional
        Source of randomness.

    Returns
    -------
    Tensor, Tensor
        Indices of sampled positives and negatives.
    """
    pos = torch.nonzero(labels == 1).flatten()
    neg = torch.nonzero(labels == 0).flatten()
    n_pos = min(pos.numel(), int(num * pos_fraction))
    n_neg = min(neg.numel(), num - n_pos)
    perm_pos = torch.randperm(pos.numel(), generator=generator)[:n_pos]
    perm_neg = torch.randperm(neg.numel(), generator=generator)[:n_neg]
    return pos[perm_pos], neg[perm_neg]
