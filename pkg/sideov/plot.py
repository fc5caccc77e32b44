"""
Annotated image rendering: detections with labels and mask overlays, and
proposal comparisons between proposal modes.
"""

import logging

import numpy as np

from sideov.core.geometry import boxes_to_array, iou_matrix
from sideov.utils.paths import atomic_path

logger = logging.getLogger(__name__)

# edge colors cycled over concepts
PALETTE = ('#e6194b', '#3cb44b', '#4363d8', '#f58231', '#911eb4',
           '#46f0f0', '#f032e6', '#bcf60c', '#008080', '#9a6324')


def _figure(image, ncols=1, scale=4.0):
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(nrows=1, ncols=ncols, figsize=(scale * ncols, scale), frameon=False,
                             squeeze=False)
    for ax in axes[0]:
        ax.axis('off')
        ax.imshow(image)
    return fig, list(axes[0])


def _draw_boxes(ax, boxes, labels=None, edgecolor='g', linestyle='-', linewidth=1.5):
    """
    Draw ``(x1, y1, x2, y2)`` boxes and optional labels on an axis.
    """
    from matplotlib.patches import Rectangle

    for i, (x1, y1, x2, y2) in enumerate(boxes):
        color = edgecolor[i] if isinstance(edgecolor, (list, tuple)) else edgecolor
        rect = Rectangle((x1, y1), x2 - x1, y2 - y1, linewidth=linewidth, linestyle=linestyle,
                         edgecolor=color, facecolor='none')
        ax.add_patch(rect)
        if labels is not None:
            text = ax.annotate(labels[i], (x1, y1), fontsize=6, color='white', ha='left', va='bottom')
            text.set_bbox(dict(facecolor=color, alpha=0.5, edgecolor=color, pad=1))
    return ax


def _save(fig, path):
    import matplotlib.pyplot as plt

    with atomic_path(path, suffix='.png') as tmp:
        fig.savefig(tmp, format='png', dpi=100, bbox_inches='tight')
    plt.close(fig)
    logger.info('Figure written to "%s".', path)
    return path


def overlay_masks(image, masks, colors, alpha=0.45):
    """
    Blend boolean masks into a float ``(H, W, 3)`` image.
    """
    from matplotlib.colors import to_rgb

    out = np.asarray(image, dtype=np.float64).copy()
    for mask, color in zip(masks, colors):
        if mask is None:
            continue
        sel = mask.data
        out[sel] = (1 - alpha) * out[sel] + alpha * np.asarray(to_rgb(color))
    return out


def render_detections(image, detections, path, concepts=None):
    """
    Write ``image`` with detection boxes, labels and masks to a PNG.

    Parameters
    ----------
    image : array
        ``(H, W, 3)`` uint8 or float image.
    detections : list of Detection
    path : str
        Output file.
    concepts : list of str, optional
        Fixes the concept-to-color assignment.
    """
    image = np.asarray(image)
    if image.dtype == np.uint8:
        image = image.astype(np.float64) / 255.0
    names = list(concepts) if concepts is not None else sorted({d.concept for d in detections})
    colors = [PALETTE[names.index(d.concept) % len(PALETTE)] if d.concept in names else PALETTE[0]
              for d in detections]
    image = overlay_masks(image, [d.mask for d in detections], colors)
    fig, (ax, ) = _figure(image)
    labels = [f'{d.concept} {d.score:.2f}' for d in detections]
    _draw_boxes(ax, [d.box.as_array() for d in detections], labels, edgecolor=colors)
    return _save(fig, path)


def matched_proposals(proposals, annotations, threshold=0.7):
    """
    Proposals with IoU above ``threshold`` to any GT, or the best one per GT
    when none qualifies.
    """
    if len(proposals) == 0 or len(annotations) == 0:
        return []
    ious = iou_matrix(boxes_to_array(proposals), boxes_to_array([a.box for a in annotations]))
    keep = set(np.nonzero((ious > threshold).any(axis=1))[0].tolist())
    for g in range(ious.shape[1]):
        if not (ious[:, g] > threshold).any():
            keep.add(int(np.argmax(ious[:, g])))
    return [proposals[i] for i in sorted(keep)]


def render_proposals(image, annotations, proposals_by_mode, path, threshold=0.7):
    """
    Side-by-side proposals of several proposal modes on one image.

    Parameters
    ----------
    annotations : list of Annotation
        GT objects, drawn dashed.
    proposals_by_mode : dict
        Mode name to the proposal list of that mode.
    """
    image = np.asarray(image)
    if image.dtype == np.uint8:
        image = image.astype(np.float64) / 255.0
    fig, axes = _figure(image, ncols=len(proposals_by_mode))
    gts = [a.box.as_array() for a in annotations]
    for ax, (mode, props) in zip(axes, proposals_by_mode.items()):
        kept = matched_proposals(props, annotations, threshold)
        _draw_boxes(ax, gts, edgecolor='w', linestyle='--', linewidth=1.0)
        colors = ['#4363d8' if p.source.value == 'rpn' else '#e6194b' for p in kept]
        _draw_boxes(ax, [p.box.as_array() for p in kept], edgecolor=colors)
        ax.set_title(f'{mode}: {len(kept)}/{len(props)}', fontsize=8)
    return _save(fig, path)
