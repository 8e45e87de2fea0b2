from fractions import Fraction

import numpy as np
import pytest

from macunet import blocks, ops
from macunet.blocks import (AggregateParams, acb_forward, acb_fuse, aggregate_node, block_macs,
                            cab_attention, cab_forward, fused_forward, init_acb, init_cab)
from macunet.gradcheck import grad_check
from macunet.models import NetworkConfig, build_network
from macunet.tensor import ShapeError, Tensor, no_grad

F64 = np.float64


def rand(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape))


def random_acb(rng, cin, cout, dtype=F64, branches=blocks.BRANCHES):
    p = init_acb(rng, cin, cout, branches, dtype)
    p.bn.gamma.data[:] = rng.uniform(0.5, 1.5, cout)
    p.bn.beta.data[:] = rng.uniform(-0.5, 0.5, cout)
    p.bn.running_mean[:] = rng.uniform(-0.5, 0.5, cout)
    p.bn.running_var[:] = rng.uniform(0.5, 2.0, cout)
    return p


def conv_ref(x, k, pad):
    """Direct correlation, ``k`` [out, in, kh, kw]."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))
    out = np.zeros((n, o, h, w))
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("nchw,oc->nohw", xp[:, :, i:i + h, j:j + w], k[:, :, i, j])
    return out


# -- ACB -------------------------------------------------------------------------------

def test_acb_branches_share_output_shape():
    rng = np.random.default_rng(0)
    p = random_acb(rng, 3, 5)
    x = rand(rng, 2, 3, 7, 6)
    shapes = {spec(x).shape for spec in p.branches()}
    assert shapes == {(2, 5, 7, 6)}


def test_acb_equals_sum_of_three_branch_oracles():
    rng = np.random.default_rng(1)
    p = random_acb(rng, 3, 4)
    x = rng.uniform(-1, 1, size=(2, 3, 6, 6))
    s = sum(conv_ref(x, spec.kernel.data, spec.padding) for spec in p.branches())
    mean = s.mean(axis=(0, 2, 3), keepdims=True)
    var = s.var(axis=(0, 2, 3), keepdims=True)
    g = p.bn.gamma.data[None, :, None, None]
    b = p.bn.beta.data[None, :, None, None]
    ref = np.maximum(g * (s - mean) / np.sqrt(var + p.bn.eps) + b, 0)
    y = acb_forward(Tensor(x), p, training=True)
    assert np.max(np.abs(y.data - ref)) < 1e-6


def test_acb_zero_side_branches_is_plain_conv():
    rng = np.random.default_rng(2)
    p = random_acb(rng, 3, 4)
    p.hor.kernel.data[:] = 0
    p.ver.kernel.data[:] = 0
    x = rand(rng, 2, 3, 5, 5)
    plain = ops.relu(ops.batchnorm2d(p.square(x), p.bn.gamma, p.bn.beta, p.bn.running_mean.copy(),
                                     p.bn.running_var.copy(), True))
    np.testing.assert_allclose(acb_forward(x, p, True).data, plain.data, atol=1e-12)


def test_acb_zero_input_gives_relu_of_shift():
    rng = np.random.default_rng(3)
    p = random_acb(rng, 3, 4)
    y = acb_forward(Tensor(np.zeros((1, 3, 4, 4))), p, training=False)
    shift = p.bn.beta.data - p.bn.gamma.data * p.bn.running_mean / np.sqrt(p.bn.running_var + p.bn.eps)
    np.testing.assert_allclose(y.data, np.broadcast_to(np.maximum(shift, 0)[None, :, None, None],
                                                       y.shape), atol=1e-12)
    # training mode: zero batch normalizes to beta
    y = acb_forward(Tensor(np.zeros((1, 3, 4, 4))), p, training=True)
    np.testing.assert_allclose(y.data[0, :, 0, 0], np.maximum(p.bn.beta.data, 0))


def test_acb_channel_mismatch():
    p = init_acb(np.random.default_rng(0), 3, 4)
    with pytest.raises(ShapeError):
        acb_forward(Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)), p, False)


def test_acb_gradients():
    rng = np.random.default_rng(4)
    p = random_acb(rng, 2, 3)
    x = rand(rng, 2, 2, 5, 5)
    w = rng.uniform(-1, 1, size=(2, 3, 5, 5))
    wrt = [x, p.bn.gamma, p.bn.beta] + [s.kernel for s in p.branches()]
    err = grad_check(lambda: ops.sum_all(ops.mul(acb_forward(x, p, True), Tensor(w))), wrt)
    assert err < 1e-4


# -- fusion ----------------------------------------------------------------------------

def test_fuse_identity_fold():
    rng = np.random.default_rng(5)
    p = init_acb(rng, 3, 4, dtype=F64)
    p.hor.kernel.data[:] = 0
    p.ver.kernel.data[:] = 0
    p.bn.eps = 0.0
    f = acb_fuse(p)
    np.testing.assert_array_equal(f.spec.kernel.data, p.square.kernel.data)
    np.testing.assert_array_equal(f.scale.data, 1.0)
    np.testing.assert_array_equal(f.shift.data, 0.0)


def test_fuse_kernel_layout():
    rng = np.random.default_rng(6)
    p = random_acb(rng, 2, 3)
    k = acb_fuse(p).spec.kernel.data
    ref = p.square.kernel.data.copy()
    ref[:, :, 1, :] += p.hor.kernel.data[:, :, 0, :]
    ref[:, :, :, 1] += p.ver.kernel.data[:, :, :, 0]
    np.testing.assert_allclose(k, ref, atol=1e-15)


@pytest.mark.parametrize("branches", [("square",), ("square", "hor"), ("square", "ver"),
                                      blocks.BRANCHES])
def test_fused_matches_unfused(branches):
    rng = np.random.default_rng(7)
    for _ in range(10):
        p = random_acb(rng, 3, 4, F64, branches)
        x = rand(rng, 2, 3, 6, 6)
        ref = acb_forward(x, p, training=False).data
        assert np.max(np.abs(fused_forward(x, acb_fuse(p)).data - ref)) < 1e-10


def test_fused_matches_unfused_f32():
    rng = np.random.default_rng(8)
    p = random_acb(rng, 3, 4, np.float32)
    x = Tensor(rng.uniform(-1, 1, size=(2, 3, 6, 6)).astype(np.float32))
    diff = fused_forward(x, acb_fuse(p)).data - acb_forward(x, p, False).data
    assert np.max(np.abs(diff)) < 1e-5


def test_fuse_rejects_bad_statistics():
    p = init_acb(np.random.default_rng(0), 2, 2)
    p.bn.running_var[0] = np.nan
    with pytest.raises(ValueError):
        acb_fuse(p)


def test_fused_block_refuses_training():
    f = acb_fuse(init_acb(np.random.default_rng(0), 2, 2))
    with pytest.raises(ValueError):
        blocks.block_forward(Tensor(np.zeros((1, 2, 3, 3), dtype=np.float32)), f, True)


def test_mac_ratio_nine_fifteenths():
    p = init_acb(np.random.default_rng(0), 7, 5)
    unfused = block_macs(p, 11, 13)
    fused = block_macs(acb_fuse(p), 11, 13)
    assert unfused == 15 * 7 * 5 * 11 * 13
    assert fused == 9 * 7 * 5 * 11 * 13
    assert Fraction(fused, unfused) == Fraction(9, 15)


# -- CAB -------------------------------------------------------------------------------

def cab_oracle(f_cat, p):
    """Step-by-step scalar re-implementation of the attention block."""
    n, cin, h, w = f_cat.shape
    red = p.reduce.kernel.data[:, :, 0, 0]
    cout = red.shape[0]
    fprime = np.zeros((n, cout, h, w))
    for b in range(n):
        for o in range(cout):
            for y in range(h):
                for x in range(w):
                    acc = p.reduce.bias.data[o]
                    for c in range(cin):
                        acc += red[o, c] * f_cat[b, c, y, x]
                    fprime[b, o, y, x] = acc

    def mlp(v, comp, rest):
        mid = [max(0.0, comp.bias.data[j] + sum(comp.kernel.data[j, c, 0, 0] * v[c]
                                                for c in range(len(v))))
               for j in range(comp.out_channels)]
        return [rest.bias.data[o] + sum(rest.kernel.data[o, j, 0, 0] * mid[j] for j in range(len(mid)))
                for o in range(rest.out_channels)]

    out = np.zeros_like(fprime)
    for b in range(n):
        avg = [fprime[b, o].sum() / (h * w) for o in range(cout)]
        mx = [fprime[b, o].max() for o in range(cout)]
        a = mlp(avg, p.compress_avg, p.restore_avg)
        m = mlp(mx, p.compress_max, p.restore_max)
        for o in range(cout):
            out[b, o] = fprime[b, o] / (1.0 + np.exp(-(a[o] + m[o])))
    return out


def _randomize_cab_biases(rng, p):
    for spec in (p.reduce, p.compress_avg, p.compress_max, p.restore_avg, p.restore_max):
        spec.bias.data[:] = rng.uniform(-0.3, 0.3, spec.bias.shape)


def test_cab_matches_scalar_oracle():
    rng = np.random.default_rng(9)
    p = init_cab(rng, 48, 32, ratio=16, dtype=F64)
    _randomize_cab_biases(rng, p)
    f_cat = rng.uniform(-1, 1, size=(1, 48, 4, 4))
    y = cab_forward(Tensor(f_cat), p)
    assert y.shape == (1, 32, 4, 4)
    assert np.max(np.abs(y.data - cab_oracle(f_cat, p))) < 1e-6


def test_cab_zero_bottleneck_halves():
    rng = np.random.default_rng(10)
    p = init_cab(rng, 8, 16, ratio=4, dtype=F64)
    for spec in (p.compress_avg, p.compress_max, p.restore_avg, p.restore_max):
        spec.kernel.data[:] = 0
        spec.bias.data[:] = 0
    x = rand(rng, 2, 8, 3, 3)
    fprime = p.reduce(x)
    np.testing.assert_allclose(cab_attention(fprime, p).data, 0.5)
    np.testing.assert_allclose(cab_forward(x, p).data, 0.5 * fprime.data)


def test_cab_attention_bounds_and_product():
    rng = np.random.default_rng(11)
    p = init_cab(rng, 12, 16, ratio=4, dtype=F64)
    _randomize_cab_biases(rng, p)
    x = Tensor(rng.normal(0, 3, size=(3, 12, 4, 4)))
    fprime = p.reduce(x)
    wc = cab_attention(fprime, p).data
    assert wc.shape == (3, 16, 1, 1)
    assert np.all((wc > 0) & (wc < 1))
    np.testing.assert_array_equal(cab_forward(x, p).data, wc * fprime.data)


def test_cab_ratio_must_divide():
    with pytest.raises(ValueError):
        init_cab(np.random.default_rng(0), 8, 20, ratio=16)


# -- aggregation node ------------------------------------------------------------------

def encoder_maps(rng, widths, side, n=1, dtype=np.float32):
    return [Tensor(rng.uniform(-1, 1, size=(n, c, side >> k, side >> k)).astype(dtype))
            for k, c in enumerate(widths)]


def test_aggregate_bottom_level_is_identity():
    rng = np.random.default_rng(12)
    enc = encoder_maps(rng, [16, 32, 64, 128, 256], 32)
    assert aggregate_node(5, enc, {}, None, False) is enc[-1]


def test_aggregate_level3_shapes():
    cfg = NetworkConfig("macu", levels=5, base_width=16)
    net = build_network(cfg, seed=0)
    node = net.nodes[3]
    assert node.cab.reduce.in_channels == 320 and node.cab.reduce.out_channels == 128
    rng = np.random.default_rng(13)
    enc = encoder_maps(rng, cfg.widths, 256)
    dec = {5: enc[4], 4: Tensor(rng.uniform(-1, 1, size=(1, 256, 32, 32)).astype(np.float32))}
    with no_grad():
        branches = [blocks.block_forward(ops.maxpool2d(enc[k - 1], 2 ** (3 - k)), node.down[k], False)
                    for k in (1, 2)]
        branches.append(enc[2])
        branches += [blocks.block_forward(node.up[k][0].transposed(dec[k]), node.up[k][1], False)
                     for k in (4, 5)]
        assert [b.shape for b in branches] == [(1, 64, 64, 64)] * 5
        assert ops.concat_channels(branches).shape == (1, 320, 64, 64)
        out = aggregate_node(3, enc, dec, node, False)
    assert out.shape == (1, 128, 64, 64)


def test_aggregate_same_level_branch_isolation():
    rng = np.random.default_rng(14)
    widths = [4, 8, 16]
    node = AggregateParams(level=2, levels=3)
    node.down[1] = init_acb(rng, 4, 8, dtype=F64)
    node.up[3] = (blocks.init_upconv(rng, 16, 8, 2, F64), init_acb(rng, 8, 8, dtype=F64))
    node.cab = init_cab(rng, 24, 16, ratio=4, dtype=F64)
    for blk in (node.down[1], node.up[3][1]):
        blk.bn.gamma.data[:] = 0
        blk.bn.beta.data[:] = 0
    enc = encoder_maps(rng, widths, 8, n=2, dtype=F64)
    out = aggregate_node(2, enc, {3: enc[2]}, node, False)
    zeros = Tensor(np.zeros((2, 8, 4, 4)))
    ref = cab_forward(ops.concat_channels([zeros, enc[1], zeros]), node.cab)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-14)


def test_aggregate_missing_decoder_level():
    net = build_network(NetworkConfig("macu", levels=3, base_width=4, cab_ratio=4), seed=0)
    enc = encoder_maps(np.random.default_rng(0), [4, 8, 16], 8)
    with pytest.raises(ShapeError):
        aggregate_node(1, enc, {3: enc[2]}, net.nodes[1], False)


def test_aggregate_spatial_contract():
    cfg = NetworkConfig("macu", levels=4, base_width=4, cab_ratio=4)
    net = build_network(cfg, seed=1)
    enc = encoder_maps(np.random.default_rng(15), cfg.widths, 16, n=2)
    dec = {4: enc[3]}
    with no_grad():
        for i in (3, 2, 1):
            dec[i] = aggregate_node(i, enc, dec, net.nodes[i], False)
            assert dec[i].shape == (2, cfg.decoder_widths[i - 1]) + enc[i - 1].shape[2:]
            arity = len(net.nodes[i].down) + 1 + len(net.nodes[i].up)
            assert arity == cfg.levels
