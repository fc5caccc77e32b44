import math
import unittest

import torch
from torch.autograd import gradcheck
from torch.func import functional_call

from sideov.core.errors import ShapeError
from sideov.models.attention import DeformableAttention, DenseAttention, make_attention
from sideov.models.foundation import BlockFeatures, FeatureMap, SamEncoderStub
from sideov.models.sideformer import ExtractorLayer, InjectorLayer, SideFormer


def feature_map(seed, batch=1, grid=2, dim=8, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return FeatureMap(torch.randn(batch, grid * grid, dim, generator=g, dtype=dtype), grid, grid)


def randomize_gammas(module, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith('gamma'):
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype))


def randomize(module, seed):
    """
    Draw every parameter, zero-initialized ones included, from N(0, 1/2).
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(0.5 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return {name: p.detach() for name, p in module.named_parameters()}


def ref_layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * w + b


def ref_attention(query, key, p, prefix, heads):
    """
    Multi-head softmax(q k^T / sqrt(d)) v with explicit per-head slices.
    """
    d = query.shape[-1] // heads
    outs = []
    for h in range(heads):
        rows = slice(h * d, (h + 1) * d)
        q = query @ p[prefix + 'to_q.weight'][rows].T
        k = key @ p[prefix + 'to_k.weight'][rows].T
        v = key @ p[prefix + 'to_v.weight'][rows].T
        s = q @ k.transpose(-2, -1) / math.sqrt(d)
        e = torch.exp(s - s.max(-1, keepdim=True).values)
        outs.append(e / e.sum(-1, keepdim=True) @ v)
    return torch.cat(outs, -1) @ p[prefix + 'to_out.weight'].T


def ref_ffn(x, p, prefix):
    h = x @ p[prefix + 'fc1.weight'].T + p[prefix + 'fc1.bias']
    h = 0.5 * h * (1 + torch.erf(h / math.sqrt(2)))
    return h @ p[prefix + 'fc2.weight'].T + p[prefix + 'fc2.bias']


def ref_extractor(side, sam, p, heads):
    n1 = ref_layer_norm(side, p['norm1.weight'], p['norm1.bias'])
    hat = side + ref_attention(n1, n1, p, 'attn.', heads)
    n2 = ref_layer_norm(hat, p['norm2.weight'], p['norm2.bias'])
    return sam + p['gamma'] * (hat + ref_ffn(n2, p, 'ffn.'))


def ref_injector(side, clip, p, heads, gate):
    gamma = p['gamma']
    n1 = ref_layer_norm(side, p['norm1.weight'], p['norm1.bias'])
    sa = ref_attention(n1, n1, p, 'self_attn.', heads)
    x = side + (gamma * sa if gate == 'all' else sa)
    q = ref_layer_norm(x, p['norm_q.weight'], p['norm_q.bias'])
    kv = ref_layer_norm(clip, p['norm_kv.weight'], p['norm_kv.bias'])
    x = x + gamma * ref_attention(q, kv, p, 'cross_attn.', heads)
    ff = ref_ffn(ref_layer_norm(x, p['norm3.weight'], p['norm3.bias']), p, 'ffn.')
    return x + (gamma * ff if gate == 'all' else ff)


def assert_exact(actual, expected):
    torch.testing.assert_close(actual, expected, rtol=0, atol=1e-12)


class TestAttention(unittest.TestCase):

    def test_dense_shapes(self):
        attn = DenseAttention(8, heads=2).double()
        q = feature_map(0, batch=2).tokens
        kv = torch.randn(2, 9, 8, dtype=torch.float64)
        self.assertEqual(tuple(attn(q, kv).shape), (2, 4, 8))
        with self.assertRaises(ShapeError):
            attn(q, torch.randn(2, 9, 4, dtype=torch.float64))
        with self.assertRaises(ShapeError):
            DenseAttention(8, heads=3)

    def test_dense_oracle(self):
        """
        Multi-head attention equals per-head softmax(q k^T / sqrt(d)) v.
        """
        for seed in range(100):
            heads = (1, 2, 4)[seed % 3]
            attn = DenseAttention(8, heads=heads).double()
            p = randomize(attn, seed)
            q, k = feature_map(2 * seed).tokens, feature_map(2 * seed + 1, grid=3).tokens
            assert_exact(attn(q, k), ref_attention(q, k, p, '', heads))

    def test_zero_keys(self):
        """
        Bias-free projections give zero output on all-zero keys.
        """
        for kind in ('dense', 'deformable'):
            attn = make_attention(kind, 8, heads=2, points=2).double()
            q = feature_map(3).tokens
            out = attn(q, torch.zeros_like(q), key_grid=(2, 2))
            self.assertTrue(torch.equal(out, torch.zeros_like(out)))

    def test_deformable_shapes(self):
        attn = DeformableAttention(8, heads=2, points=3).double()
        q = feature_map(4, batch=2, grid=3).tokens
        self.assertEqual(tuple(attn(q, key_grid=(3, 3)).shape), (2, 9, 8))
        with self.assertRaises(ShapeError):
            attn(q, key_grid=(2, 4))

    def test_unknown_kind(self):
        with self.assertRaises(ValueError):
            make_attention('sparse', 8)


class TestLayers(unittest.TestCase):

    def test_extractor_identity(self):
        """
        With zero gates the extractor returns the encoder feature.
        """
        layer = ExtractorLayer(8, heads=2).double()
        side, sam = feature_map(0), feature_map(1)
        self.assertTrue(torch.equal(layer(side, sam).tokens, sam.tokens))

    def test_extractor_equation(self):
        for seed in range(100):
            layer = ExtractorLayer(8, heads=2, ffn_ratio=2).double()
            p = randomize(layer, seed)
            side, sam = feature_map(3 * seed), feature_map(3 * seed + 1)
            assert_exact(layer(side, sam).tokens, ref_extractor(side.tokens, sam.tokens, p, 2))

    def test_injector_identity(self):
        for gate in ('cross', 'all'):
            for kind in ('dense', 'deformable'):
                layer = InjectorLayer(8, heads=2, attention=kind, points=2, gate=gate).double()
                side, clip = feature_map(0), feature_map(1)
                self.assertTrue(torch.equal(layer(side, clip).tokens, side.tokens))

    def test_injector_equation(self):
        for seed in range(100):
            gate = ('cross', 'all')[seed % 2]
            layer = InjectorLayer(8, heads=2, ffn_ratio=2, gate=gate).double()
            p = randomize(layer, seed)
            side, clip = feature_map(3 * seed), feature_map(3 * seed + 2)
            assert_exact(layer(side, clip).tokens, ref_injector(side.tokens, clip.tokens, p, 2, gate))

    def test_bad_gate(self):
        with self.assertRaises(ValueError):
            InjectorLayer(8, heads=2, gate='none')

    def test_gradcheck(self):
        """
        Analytic gradients of the layers match finite differences.
        """
        torch.manual_seed(0)
        ext = ExtractorLayer(8, heads=2, ffn_ratio=2).double()
        inj = InjectorLayer(8, heads=2, ffn_ratio=2).double()
        randomize_gammas(ext, 1)
        randomize_gammas(inj, 2)
        sam, clip = feature_map(1), feature_map(2)

        def run(tokens):
            side = FeatureMap(tokens, 2, 2)
            return inj(ext(side, sam), clip).tokens

        tokens = feature_map(0).tokens.requires_grad_(True)
        self.assertTrue(gradcheck(run, (tokens,), eps=1e-6, atol=1e-5))

    def test_gate_central_difference(self):
        """
        The gate gradient at zero matches a central difference.
        """
        torch.manual_seed(0)
        layer = ExtractorLayer(8, heads=2).double()
        side, sam = feature_map(0), feature_map(1)

        def loss():
            return layer(side, sam).tokens.pow(2).sum()

        loss().backward()
        analytic = float(layer.gamma.grad.reshape(-1)[0])
        h = 1e-6
        with torch.no_grad():
            layer.gamma.reshape(-1)[0] += h
            up = float(loss())
            layer.gamma.reshape(-1)[0] -= 2 * h
            down = float(loss())
        self.assertAlmostEqual(analytic, (up - down) / (2 * h), places=5)


class TestSideFormer(unittest.TestCase):

    def setUp(self) -> None:
        self.sam = SamEncoderStub(dim=16, image_size=32, patch=16, layers=4, heads=2, seed=0).double()
        self.images = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        self.blocks = self.sam(self.images)
        self.clip = feature_map(5, batch=2, grid=2, dim=16)

    def test_zero_gate_identity(self):
        """
        A fresh adapter returns the last encoder block bit for bit.
        """
        for variant in ('extractor', 'full'):
            for attention in ('dense', 'deformable'):
                sf = SideFormer(16, heads=2, attention=attention, points=2, variant=variant).double()
                out = sf(self.images, self.blocks, self.clip)
                self.assertTrue(torch.equal(out.tokens, self.blocks[3].tokens))

    def test_baseline(self):
        sf = SideFormer(16, heads=2, variant='baseline')
        self.assertEqual(len(list(sf.parameters())), 0)
        self.assertIs(sf(self.images, self.blocks), self.blocks[3])

    def test_variants(self):
        full = SideFormer(16, heads=2, variant='full')
        ext = SideFormer(16, heads=2, variant='extractor')
        self.assertEqual(len(full.gammas()), 8)
        self.assertEqual(len(ext.gammas()), 4)
        self.assertIsNone(ext.block(0).injector)
        with self.assertRaises(ValueError):
            SideFormer(16, variant='tiny')

    def test_gates_receive_gradient(self):
        sf = SideFormer(16, heads=2, variant='full').double()
        sf(self.images, self.blocks, self.clip).tokens.pow(2).sum().backward()
        gammas = sf.gammas()
        self.assertGreater(float(gammas['block3.extractor.gamma'].grad.abs().sum()), 0.0)
        self.assertGreater(float(gammas['block3.injector.gamma'].grad.abs().sum()), 0.0)

    def test_parameter_gradcheck(self):
        """
        Gradients with respect to every adapter parameter match finite differences.
        """
        sam = SamEncoderStub(dim=4, image_size=8, patch=4, layers=4, heads=2, seed=0).double()
        images = torch.rand(1, 3, 8, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        blocks = sam(images)
        clip = feature_map(6, grid=2, dim=4)
        sf = SideFormer(4, patch=4, heads=2, ffn_ratio=1, variant='full').double()
        randomize(sf, 0)
        names = [name for name, _ in sf.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for p in sf.parameters())

        def run(*flat):
            return functional_call(sf, dict(zip(names, flat)), (images, blocks, clip)).tokens

        self.assertTrue(gradcheck(run, params, eps=1e-6, atol=1e-5))

    def test_encoder_untouched(self):
        """
        Training the adapter never sends gradient into the frozen encoder.
        """
        sf = SideFormer(16, heads=2, variant='full').double()
        randomize_gammas(sf)
        sf(self.images, self.blocks, self.clip).tokens.sum().backward()
        self.assertTrue(all(p.grad is None for p in self.sam.parameters()))

    def test_block_mismatch(self):
        sf = SideFormer(16, heads=2, variant='extractor').double()
        other = SamEncoderStub(dim=8, image_size=32, patch=16, layers=4, heads=2, seed=0).double()
        with self.assertRaises(ShapeError):
            BlockFeatures(self.blocks.maps[:3] + [other(self.images)[3]])
        with self.assertRaises(ShapeError):
            sf(self.images, other(self.images))
