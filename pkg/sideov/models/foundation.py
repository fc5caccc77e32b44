"""
Frozen stand-ins of the foundation models: the segmentation image encoder,
the visual encoder of the vision-language model, the text encoder and the
promptable mask head.

All stubs are built from a fixed seed, never trained and safe to share
between concurrent inference calls.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from sideov.core.errors import DegenerateEnsemble, EmptyMask, InvalidConcept, ShapeError
from sideov.core.geometry import BinaryMask, Box, iou, mask_to_box
from sideov.shared import sub_seed

logger = logging.getLogger(__name__)

# mean and std of the pixel normalization
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

TEMPLATES = (
    'a photo of a {}.',
    'a drawing of a {}.',
    'there is a {} in the scene.',
    'a rendering of a {}.',
    'a close-up picture of the {}.',
    'an image containing a {}.',
    'a toy {}.',
    'a cropped photo of the {}.',
)


@dataclass
class FeatureMap:
    """
    Token grid of shape ``(B, grid_h * grid_w, D)``.
    """
    tokens: torch.Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.dim() != 3:
            raise ShapeError(f'FeatureMap tokens must be (B, N, D), got {tuple(self.tokens.shape)}')
        if self.tokens.shape[1] != self.grid_h * self.grid_w:
            raise ShapeError(f'FeatureMap has {self.tokens.shape[1]} tokens for a '
                             f'{self.grid_h}x{self.grid_w} grid')

    @property
    def dim(self):
        return self.tokens.shape[-1]

    @property
    def batch(self):
        return self.tokens.shape[0]

    def to_grid(self):
        """
        Return the ``(B, D, grid_h, grid_w)`` view.
        """
        b, _, d = self.tokens.shape
        return self.tokens.transpose(1, 2).reshape(b, d, self.grid_h, self.grid_w)

    @classmethod
    def from_grid(cls, x):
        b, d, h, w = x.shape
        return cls(x.flatten(2).transpose(1, 2), h, w)

    def check_like(self, other):
        """
        Raise ShapeError unless ``other`` has the same grid, batch and width.
        """
        if (self.grid_h, self.grid_w) != (other.grid_h, other.grid_w) or \
                self.tokens.shape != other.tokens.shape:
            raise ShapeError(f'FeatureMap mismatch: {tuple(self.tokens.shape)} on '
                             f'{self.grid_h}x{self.grid_w} vs {tuple(other.tokens.shape)} on '
                             f'{other.grid_h}x{other.grid_w}')


@dataclass
class BlockFeatures:
    """
    The four block outputs of the segmentation encoder and its patch tokens.
    """
    maps: List[FeatureMap]
    patch: FeatureMap = field(default=None)

    def __post_init__(self):
        if len(self.maps) != 4:
            raise ShapeError(f'BlockFeatures needs exactly 4 maps, got {len(self.maps)}')
        for m in self.maps[1:]:
            self.maps[0].check_like(m)
        if self.patch is not None:
            self.maps[0].check_like(self.patch)

    def __getitem__(self, i):
        return self.maps[i]

    def __len__(self):
        return len(self.maps)


def freeze(module):
    """
    Exclude all parameters of ``module`` from training.
    """
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def check_image(images, image_size, patch):
    """
    Validate a ``(B, 3, H, W)`` batch in [0, 1].
    """
    if images.dim() != 4 or images.shape[1] != 3:
        raise ShapeError(f'Images must be (B, 3, H, W), got {tuple(images.shape)}')
    h, w = images.shape[-2:]
    if h % patch or w % patch:
        raise ShapeError(f'Image size {h}x{w} is not divisible by patch {patch}')
    if image_size is not None and (h, w) != (image_size, image_size):
        raise ShapeError(f'Image size {h}x{w} does not match the encoder size {image_size}')


class FrozenModule(nn.Module):
    """
    Module that stays in eval mode and never receives gradients.
    """
    frozen = True

    def train(self, mode=True):
        return super().train(False)


class SamEncoderStub(FrozenModule):
    """
    Segmentation image encoder stub.

    A seeded pre-norm transformer over 16x16 patches whose layers are
    grouped into four blocks; the last layer of each block is exposed.

    Parameters
    ----------
    dim : int
        Feature width D.
    image_size : int
        Input side in pixels.
    patch : int
        Patch size.
    layers : int
        Number of layers, a multiple of 4.
    heads : int
        Attention heads.
    seed : int
        Global seed; the weights derive from its ``sam`` sub-seed.
    """

    def __init__(self, dim=64, image_size=128, patch=16, layers=8, heads=8, seed=0):
        super().__init__()
        if layers % 4:
            raise ShapeError(f'Encoder layers must be a multiple of 4, got {layers}')
        self.dim = dim
        self.image_size = image_size
        self.patch = patch
        self.grid = image_size // patch
        self.per_block = layers // 4
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(sub_seed(seed, 'init', 'sam'))
            self.patch_embed = nn.Conv2d(3, dim, patch, patch)
            self.pos_embed = nn.Parameter(torch.randn(1, self.grid * self.grid, dim) * 0.02)
            self.layers = nn.ModuleList([
                nn.TransformerEncoderLayer(dim, heads, 4 * dim, dropout=0.0, activation='gelu',
                                           batch_first=True, norm_first=True)
                for _ in range(layers)])
        freeze(self)

    def patch_tokens(self, images):
        x = self.patch_embed((images - PIXEL_MEAN) / PIXEL_STD)
        return FeatureMap.from_grid(x)

    @torch.no_grad()
    def forward(self, images):
        """
        Encode a batch and return the four block features.
        """
        check_image(images, self.image_size, self.patch)
        patch = self.patch_tokens(images)
        x = patch.tokens + self.pos_embed
        maps = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if (i + 1) % self.per_block == 0:
                maps.append(FeatureMap(x, self.grid, self.grid))
        return BlockFeatures(maps, patch)


class ClipVisualStub(FrozenModule):
    """
    Vision-language visual encoder stub: four stride-2 convolutions and a
    1x1 projection to D, giving a stride-16 map that sees only pixels.
    """

    def __init__(self, dim=64, image_size=128, seed=0):
        super().__init__()
        self.image_size = image_size
        widths = (3, 16, 32, 64, 128)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(sub_seed(seed, 'init', 'clip'))
            convs = []
            for cin, cout in zip(widths[:-1], widths[1:]):
                convs += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU()]
            self.body = nn.Sequential(*convs)
            self.proj = nn.Conv2d(widths[-1], dim, 1)
        freeze(self)

    @torch.no_grad()
    def forward(self, images):
        check_image(images, self.image_size, 16)
        x = self.proj(self.body((images - PIXEL_MEAN) / PIXEL_STD))
        return FeatureMap.from_grid(x)


class TextEncoderStub:
    """
    Seeded-hash text encoder.

    A concept embeds as the normalized sum, over its words, of a word vector
    plus a template-specific word vector scaled by ``mix``. Compositions of
    seen words are therefore linear in the word vectors.

    Parameters
    ----------
    dim : int
        Embedding width D.
    n_templates : int
        Number of prompt templates.
    seed : int
        Global seed.
    mix : float
        Weight of the template-specific component.

    Attributes
    ----------
    calls : int
        Number of ``text_embed`` evaluations so far.
    """

    def __init__(self, dim=64, n_templates=8, seed=0, mix=0.3):
        self.dim = dim
        self.n_templates = n_templates
        self.seed = seed
        self.mix = mix
        self.calls = 0

    def template(self, template_id):
        base = TEMPLATES[template_id % len(TEMPLATES)]
        if template_id >= len(TEMPLATES):
            base = f'{base} ({template_id // len(TEMPLATES)})'
        return base

    def prompt(self, concept, template_id):
        return self.template(template_id).format(concept)

    def _word(self, word, *keys):
        rng = np.random.default_rng(sub_seed(self.seed, 'text', word, *keys))
        return rng.standard_normal(self.dim)

    def text_embed(self, concept, template_id=0):
        """
        Unit embedding of ``concept`` under one template.

        Raises
        ------
        InvalidConcept
            If the concept is empty or the template is out of range.
        """
        if not isinstance(concept, str) or concept.strip() == '':
            raise InvalidConcept(f'Invalid concept <{concept}>')
        if not 0 <= template_id < self.n_templates:
            raise InvalidConcept(f'Template id {template_id} out of range [0, {self.n_templates})')
        self.calls += 1
        vec = np.zeros(self.dim)
        for word in concept.lower().split():
            vec += self._word(word) + self.mix * self._word(word, 'template', template_id)
        return vec / np.linalg.norm(vec)

    def ensemble_embed(self, concept):
        """
        Mean of the template embeddings, re-normalized.
        """
        if not isinstance(concept, str) or concept.strip() == '':
            raise InvalidConcept(f'Invalid concept <{concept}>')
        mean = np.mean([self.text_embed(concept, t) for t in range(self.n_templates)], axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise DegenerateEnsemble(f'Template ensemble of <{concept}> has zero norm')
        return mean / norm


def to_hwc(image):
    """
    Return an ``(H, W, 3)`` float64 array from a tensor or array image.
    """
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 3 and image.shape[-1] != 3:
        image = image.transpose(1, 2, 0)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f'Image must be (H, W, 3), got {image.shape}')
    return image


class FloodFillSegmenter:
    """
    Promptable segmenter stub.

    A point prompt returns the 4-connected component of pixels whose
    Chebyshev RGB distance to the prompted pixel is at most ``tau``.
    """

    def __init__(self, tau=0.08):
        self.tau = tau

    def segment_point(self, image, point):
        """
        Segment the component at ``point``.

        Parameters
        ----------
        image : array
            ``(H, W, 3)`` image in [0, 1].
        point : tuple
            ``(x, y)`` in pixel coordinates.

        Returns
        -------
        BinaryMask
            The component, possibly the background.
        float
            Stability score: share of component pixels within ``tau/2``.
        """
        image = to_hwc(image)
        h, w = image.shape[:2]
        x, y = point
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f'Point {point} outside the {w}x{h} image')
        r, c = int(math.floor(y)), int(math.floor(x))
        dist = np.abs(image - image[r, c]).max(axis=2)
        labels, _ = ndimage.label(dist <= self.tau)
        mask = labels == labels[r, c]
        score = float((dist[mask] <= self.tau / 2).mean())
        return BinaryMask(mask), score

    def segment_box(self, image, box: Box):
        """
        Segment the object inside a box prompt.

        The flood fill is seeded at the box centre and then a 3x3 lattice of
        interior points; a component is accepted when its tight box has IoU
        at least 0.5 with the prompt or lies inside it. The best accepted
        component, clipped to the prompt, is returned; otherwise the mask is
        empty.
        """
        image = to_hwc(image)
        h, w = image.shape[:2]
        clipped = box.clip(h, w)
        if clipped is None:
            return BinaryMask(np.zeros((h, w), dtype=bool))
        fracs = (0.5, 0.25, 0.75)
        seeds = [(clipped.x1 + fx * clipped.width, clipped.y1 + fy * clipped.height)
                 for fy in fracs for fx in fracs]
        best, best_iou = None, -1.0
        for px, py in seeds:
            px, py = min(px, w - 1e-6), min(py, h - 1e-6)
            mask, _ = self.segment_point(image, (px, py))
            try:
                mb = mask_to_box(mask)
            except EmptyMask:
                continue
            overlap = iou(mb, clipped)
            inside = (mb.x1 >= math.floor(clipped.x1) and mb.y1 >= math.floor(clipped.y1) and
                      mb.x2 <= math.ceil(clipped.x2) and mb.y2 <= math.ceil(clipped.y2))
            if (overlap >= 0.5 or inside) and overlap > best_iou:
                best, best_iou = mask, overlap
        if best is None:
            return BinaryMask(np.zeros((h, w), dtype=bool))
        keep = np.zeros((h, w), dtype=bool)
        keep[int(math.floor(clipped.y1)):int(math.ceil(clipped.y2)),
             int(math.floor(clipped.x1)):int(math.ceil(clipped.x2))] = True
        return BinaryMask(best.data & keep)


def parameter_checksum(modules):
    """
    SHA-256 over the raw bytes of all parameters of ``modules``, in name order.
    """
    digest = hashlib.sha256()
    for module in modules:
        for name, p in sorted(module.state_dict().items()):
            digest.update(name.encode('utf-8'))
            digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
