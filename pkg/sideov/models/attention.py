"""
Attention operators of the side adapter.

All projections are bias-free, so attending to an all-zero key/value map
yields exactly zero.
"""

import logging
import math

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.init import constant_, xavier_uniform_

from sideov.core.errors import ShapeError

logger = logging.getLogger(__name__)


class DenseAttention(nn.Module):
    """
    Multi-head scaled dot-product attention.

    Parameters
    ----------
    dim : int
        Token width.
    heads : int
        Number of heads; must divide ``dim``.
    zero_out : bool
        Zero-initialize the output projection.
    """

    def __init__(self, dim, heads=8, zero_out=False):
        super().__init__()
        if dim % heads:
            raise ShapeError(f'Width {dim} is not divisible by {heads} heads')
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)
        if zero_out:
            constant_(self.to_out.weight, 0.)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, query, key=None, key_grid=None):
        """
        Attend from ``query`` tokens ``(B, Nq, D)`` to ``key`` tokens ``(B, Nk, D)``.

        ``key`` defaults to ``query``; ``key_grid`` is accepted for interface
        parity with :class:`DeformableAttention`.
        """
        key = query if key is None else key
        if key.shape[0] != query.shape[0] or key.shape[-1] != query.shape[-1]:
            raise ShapeError(f'Query {tuple(query.shape)} and key {tuple(key.shape)} do not match')
        q = self._split(self.to_q(query))
        k = self._split(self.to_k(key))
        v = self._split(self.to_v(key))
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(query.shape)
        return self.to_out(out)


class DeformableAttention(nn.Module):
    """
    Single-scale deformable attention.

    Each query samples ``points`` locations per head around its own cell
    centre on the key grid by bilinear interpolation and mixes them with
    softmax weights predicted from the query.

    Parameters
    ----------
    dim : int
        Token width.
    heads : int
        Number of heads.
    points : int
        Sampling points per head.
    zero_out : bool
        Zero-initialize the output projection.
    """

    def __init__(self, dim, heads=8, points=4, zero_out=False):
        super().__init__()
        if dim % heads:
            raise ShapeError(f'Width {dim} is not divisible by {heads} heads')
        self.heads = heads
        self.points = points
        self.value_proj = nn.Linear(dim, dim, bias=False)
        self.sampling_offsets = nn.Linear(dim, heads * points * 2)
        self.attention_weights = nn.Linear(dim, heads * points)
        self.output_proj = nn.Linear(dim, dim, bias=False)
        self._reset_parameters(zero_out)

    def _reset_parameters(self, zero_out):
        constant_(self.sampling_offsets.weight.data, 0.)
        thetas = torch.arange(self.heads, dtype=torch.float32) * (2.0 * math.pi / self.heads)
        grid_init = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid_init = (grid_init / grid_init.abs().max(-1, keepdim=True)[0]).view(self.heads, 1, 2)
        grid_init = grid_init.repeat(1, self.points, 1)
        for i in range(self.points):
            grid_init[:, i, :] *= i + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid_init.view(-1))
        constant_(self.attention_weights.weight.data, 0.)
        constant_(self.attention_weights.bias.data, 0.)
        xavier_uniform_(self.value_proj.weight.data)
        if zero_out:
            constant_(self.output_proj.weight.data, 0.)
        else:
            xavier_uniform_(self.output_proj.weight.data)

    def forward(self, query, key=None, key_grid=None):
        """
        Parameters
        ----------
        query : Tensor
            ``(B, Nq, D)`` tokens laid out on a ``key_grid``-shaped grid.
        key : Tensor, optional
            ``(B, Nk, D)`` value tokens; defaults to ``query``.
        key_grid : tuple
            ``(H, W)`` of the key grid with ``H * W == Nk``.
        """
        key = query if key is None else key
        b, nq, d = query.shape
        if key_grid is None:
            side = int(round(math.sqrt(key.shape[1])))
            key_grid = (side, side)
        hk, wk = key_grid
        if hk * wk != key.shape[1] or nq != key.shape[1]:
            raise ShapeError(f'Deformable attention needs query and key on one {hk}x{wk} grid')
        h, p = self.heads, self.points
        dh = d // h

        value = self.value_proj(key).view(b, hk * wk, h, dh)
        value = value.permute(0, 2, 3, 1).reshape(b * h, dh, hk, wk)

        ys = (torch.arange(hk, dtype=query.dtype, device=query.device) + 0.5) / hk
        xs = (torch.arange(wk, dtype=query.dtype, device=query.device) + 0.5) / wk
        ref = torch.stack(torch.meshgrid(xs, ys, indexing='xy'), -1).view(1, nq, 1, 1, 2)

        offsets = self.sampling_offsets(query).view(b, nq, h, p, 2)
        norm = torch.tensor([wk, hk], dtype=query.dtype, device=query.device)
        loc = ref + offsets / norm
        grid = (2 * loc - 1).permute(0, 2, 1, 3, 4).reshape(b * h, nq, p, 2)
        sampled = F.grid_sample(value, grid, mode='bilinear', padding_mode='zeros', align_corners=False)

        weights = torch.softmax(self.attention_weights(query).view(b, nq, h, p), -1)
        weights = weights.permute(0, 2, 1, 3).reshape(b * h, 1, nq, p)
        out = (sampled * weights).sum(-1).view(b, h * dh, nq).transpose(1, 2)
        return self.output_proj(out.contiguous())


def make_attention(kind, dim, heads=8, points=4, zero_out=False):
    """
    Build a ``dense`` or ``deformable`` attention operator.
    """
    if kind == 'dense':
        return DenseAttention(dim, heads, zero_out=zero_out)
    if kind == 'deformable':
        return DeformableAttention(dim, heads, points, zero_out=zero_out)
    raise ValueError(f'Unknown attention kind <{kind}>')
