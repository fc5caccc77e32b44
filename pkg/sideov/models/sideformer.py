"""
SideFormer: the ladder-side adapter over the frozen encoders.

Each of the four blocks pairs an extractor layer, which fuses the matching
segmentation-encoder block feature, with an injector layer, which
cross-attends to the vision-language visual features. Both are gated by
per-channel vectors ``gamma`` initialized to zero, so a freshly built
adapter returns the last encoder block feature unchanged.
"""

import logging

import torch
from torch import nn
from torch.nn.init import constant_

from sideov.models.attention import make_attention
from sideov.models.foundation import FeatureMap, check_image

logger = logging.getLogger(__name__)

VARIANTS = ('baseline', 'extractor', 'full')


class FFN(nn.Module):
    """
    Two-layer GELU feed-forward network.
    """

    def __init__(self, dim, ratio=4, zero_out=False):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(ratio * dim, dim)
        if zero_out:
            constant_(self.fc2.weight, 0.)
            constant_(self.fc2.bias, 0.)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SidePatchEmbed(nn.Module):
    """
    Trainable patch embedding, structured like the encoder's but not shared.

    The output is summed with the encoder's patch tokens. The projection
    sees raw pixels and starts with a zero bias.
    """

    def __init__(self, dim=64, patch=16):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(3, dim, patch, patch)
        constant_(self.proj.bias, 0.)

    def forward(self, images, sam_patch: FeatureMap):
        check_image(images, None, self.patch)
        side = FeatureMap.from_grid(self.proj(images))
        side.check_like(sam_patch)
        return FeatureMap(side.tokens + sam_patch.tokens, side.grid_h, side.grid_w)


class ExtractorLayer(nn.Module):
    """
    Fuse an encoder block feature into the side state.

    ``F_hat = F_side + Attn(norm1(F_side))`` and
    ``out = F_sam + gamma * (F_hat + FFN(norm2(F_hat)))``.
    """

    def __init__(self, dim=64, heads=8, attention='dense', points=4, ffn_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = make_attention(attention, dim, heads, points)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FFN(dim, ffn_ratio)
        self.gamma = nn.Parameter(torch.zeros(dim))

    def forward(self, f_side: FeatureMap, f_sam: FeatureMap):
        f_side.check_like(f_sam)
        grid = (f_side.grid_h, f_side.grid_w)
        x = f_side.tokens
        hat = x + self.attn(self.norm1(x), key_grid=grid)
        out = f_sam.tokens + self.gamma * (hat + self.ffn(self.norm2(hat)))
        return FeatureMap(out, f_side.grid_h, f_side.grid_w)


class InjectorLayer(nn.Module):
    """
    Inject visual semantics into the side state.

    Self-attention with residual, then
    ``F* = F' + gamma * Attn(norm_q(F'), norm_kv(F_clip))`` with the side
    tokens as queries, then an FFN with residual. With ``gate='all'`` the
    self-attention and FFN residuals are gated by ``gamma`` as well.

    The self-attention and FFN output projections start at zero.
    """

    def __init__(self, dim=64, heads=8, attention='dense', points=4, ffn_ratio=4, gate='cross'):
        super().__init__()
        if gate not in ('cross', 'all'):
            raise ValueError(f'Unknown injector gate <{gate}>')
        self.gate = gate
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = make_attention(attention, dim, heads, points, zero_out=True)
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.cross_attn = make_attention(attention, dim, heads, points)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = FFN(dim, ffn_ratio, zero_out=True)
        self.gamma = nn.Parameter(torch.zeros(dim))

    def forward(self, f_side: FeatureMap, f_clip: FeatureMap):
        f_side.check_like(f_clip)
        grid = (f_side.grid_h, f_side.grid_w)
        x = f_side.tokens
        sa = self.self_attn(self.norm1(x), key_grid=grid)
        x = x + (self.gamma * sa if self.gate == 'all' else sa)
        x = x + self.gamma * self.cross_attn(self.norm_q(x), self.norm_kv(f_clip.tokens), key_grid=grid)
        ff = self.ffn(self.norm3(x))
        x = x + (self.gamma * ff if self.gate == 'all' else ff)
        return FeatureMap(x, f_side.grid_h, f_side.grid_w)


class SideBlock(nn.Module):
    def __init__(self, dim, heads, attention, points, ffn_ratio, gate, injector=True):
        super().__init__()
        self.extractor = ExtractorLayer(dim, heads, attention, points, ffn_ratio)
        self.injector = InjectorLayer(dim, heads, attention, points, ffn_ratio, gate) if injector else None


class SideFormer(nn.Module):
    """
    Four-block ladder-side adapter.

    Parameters
    ----------
    dim : int
        Feature width D.
    patch : int
        Patch size.
    heads : int
        Attention heads.
    attention : {'dense', 'deformable'}
        Attention operator.
    points : int
        Sampling points of deformable attention.
    ffn_ratio : int
        FFN expansion ratio.
    injector_gate : {'cross', 'all'}
        Residuals gated in the injectors.
    variant : {'baseline', 'extractor', 'full'}
        ``baseline`` bypasses the adapter and returns the last encoder
        block; ``extractor`` omits the injectors.
    """

    def __init__(self, dim=64, patch=16, heads=8, attention='dense', points=4,
                 ffn_ratio=4, injector_gate='cross', variant='full'):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f'Unknown SideFormer variant <{variant}>')
        self.variant = variant
        self.n_blocks = 0
        if variant == 'baseline':
            return
        self.patch_embed = SidePatchEmbed(dim, patch)
        for i in range(4):
            self.add_module(f'block{i}', SideBlock(dim, heads, attention, points, ffn_ratio,
                                                   injector_gate, injector=(variant == 'full')))
        self.n_blocks = 4

    def block(self, i):
        return getattr(self, f'block{i}')

    def gammas(self):
        """
        Return all gate vectors by parameter name.
        """
        return {name: p for name, p in self.named_parameters() if name.endswith('gamma')}

    def forward(self, images, blocks, f_clip=None):
        """
        Run the extractor and injector of each block in turn.

        Parameters
        ----------
        images : Tensor
            ``(B, 3, H, W)`` batch in [0, 1].
        blocks : BlockFeatures
            Encoder block features with patch tokens.
        f_clip : FeatureMap, optional
            Visual features; required by the ``full`` variant.

        Returns
        -------
        FeatureMap
            Fused features on the encoder grid.
        """
        if self.variant == 'baseline':
            return blocks[3]
        state = self.patch_embed(images, blocks.patch)
        for i in range(self.n_blocks):
            blk = self.block(i)
            state = blk.extractor(state, blocks[i])
            if blk.injector is not None:
                state = blk.injector(state, f_clip)
        return state
