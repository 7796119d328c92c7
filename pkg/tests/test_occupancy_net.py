import numpy as np
import pytest

from voxocc import ops
from voxocc.errors import ContractViolation
from voxocc.gradcheck import gradient_check
from voxocc.occupancy_net import (Decoder3d, DecoderBypass, Encoder3d,
                                  EncoderBypass, FusionGate, OccupancyHead,
                                  ResBlock3d, ScaleMerger, logits_to_labels)
from voxocc.tensor import Tensor


def rng(i):
    return np.random.default_rng(np.random.PCG64(4100 + i))


def vol(r, shape):
    return Tensor(r.standard_normal(shape).astype(np.float32))


def upcast(module):
    for p in module.parameters():
        p.data = p.data.astype(np.float64)


# -- gated fusion ---------------------------------------------------------

def test_saturated_gate_selects_local():
    r = rng(0)
    g = FusionGate(3, r)
    g.gate.bias.data[...] = 100.0
    local, bev = vol(r, (3, 4, 4, 2)), vol(r, (3, 4, 4))
    fused = g(local, bev)
    assert np.allclose(fused.data, local.data, atol=1e-6)


def test_saturated_gate_selects_global():
    r = rng(1)
    g = FusionGate(3, r)
    g.gate.bias.data[...] = -100.0
    local, bev = vol(r, (3, 4, 4, 2)), vol(r, (3, 4, 4))
    fused = g(local, bev)
    assert np.allclose(fused.data, bev.data[..., None] *
                       np.ones((1, 1, 1, 2), np.float32), atol=1e-6)


def test_zero_gate_blends_evenly():
    r = rng(2)
    g = FusionGate(2, r)
    g.gate.weight.data[...] = 0.0
    g.gate.bias.data[...] = 0.0
    local, bev = vol(r, (2, 4, 4, 2)), vol(r, (2, 4, 4))
    fused = g(local, bev)
    want = 0.5 * local.data + 0.5 * bev.data[..., None]
    assert np.allclose(fused.data, want, atol=1e-6)


def test_fusion_shape_guard():
    r = rng(3)
    g = FusionGate(2, r)
    with pytest.raises(ContractViolation):
        g(vol(r, (2, 4, 4, 2)), vol(r, (2, 4, 3)))


# -- scale merger ---------------------------------------------------------

def test_single_scale_merge_is_identity():
    r = rng(4)
    m = ScaleMerger([3], r)
    v = vol(r, (3, 4, 4, 2))
    assert m([v]) is v


def test_zero_coarse_leaves_fine_unchanged():
    r = rng(5)
    m = ScaleMerger([2, 2], r)
    fine = vol(r, (2, 8, 8, 4))
    coarse = Tensor(np.zeros((2, 4, 4, 2), dtype=np.float32))
    out = m([fine, coarse])
    assert np.array_equal(out.data, fine.data)


def test_constant_fields_add():
    r = rng(6)
    m = ScaleMerger([2, 2], r)
    fine = Tensor(np.full((2, 8, 8, 4), 1.5, dtype=np.float32))
    coarse = Tensor(np.full((2, 4, 4, 2), 0.25, dtype=np.float32))
    out = m([fine, coarse])
    assert np.allclose(out.data, 1.75, atol=1e-6)


def test_merger_projects_channel_mismatch():
    r = rng(7)
    m = ScaleMerger([2, 4], r)
    fine = vol(r, (2, 8, 8, 4))
    coarse = vol(r, (4, 4, 4, 2))
    out = m([fine, coarse])
    assert out.shape == (2, 8, 8, 4)
    with pytest.raises(ContractViolation):
        m([fine])


# -- 3d encoder -----------------------------------------------------------

def test_encoder_stage_dims_halve():
    enc = Encoder3d(3, base=2, rng=rng(8))
    taps = enc(vol(rng(9), (1, 3, 16, 16, 8)))
    assert [t.shape for t in taps] == [(1, 2, 16, 16, 8), (1, 4, 8, 8, 4),
                                       (1, 8, 4, 4, 2), (1, 16, 2, 2, 1)]


def test_residual_block_identity_when_second_conv_zero():
    r = rng(10)
    blk = ResBlock3d(4, 4, 1, r)
    blk.conv2.weight.data[...] = 0.0
    x = Tensor(r.random((1, 4, 4, 4, 2)).astype(np.float32))  # >= 0
    out = blk(x)
    assert np.allclose(out.data, x.data, atol=1e-6)


def test_encoder_gradients():
    enc = Encoder3d(2, base=2, rng=rng(11))
    enc.eval()
    upcast(enc)
    base = rng(12).random((1, 2, 4, 4, 4))
    scale = Tensor(1.0 + 0.1 * rng(13).standard_normal((1, 2, 1, 1, 1)),
                   requires_grad=True, dtype=np.float64)

    def f(ts):
        x = ops.mul(ops.const(base, dtype=ts[0].data.dtype), ts[0])
        taps = enc(x)
        total = ops.sum(taps[0])
        for t in taps[1:]:
            total = ops.add(total, ops.sum(t))
        return total

    rep = gradient_check(f, [scale], tol=1e-3)
    assert rep.passed, rep


def test_encoder_bypass_keeps_stride_schedule():
    enc = EncoderBypass(3, base=2, rng=rng(14))
    taps = enc(vol(rng(15), (1, 3, 8, 8, 4)))
    assert [t.shape for t in taps] == [(1, 2, 8, 8, 4), (1, 4, 4, 4, 2),
                                       (1, 8, 2, 2, 1), (1, 16, 1, 1, 1)]


# -- 3d decoder -----------------------------------------------------------

def decoder_taps(r, widths=(2, 4, 8, 16)):
    dims = [(16, 16, 8), (8, 8, 4), (4, 4, 2), (2, 2, 1)]
    return [vol(r, (1, w) + d) for w, d in zip(widths, dims)]


def test_decoder_output_scales_and_width():
    dec = Decoder3d([2, 4, 8, 16], c_out=3, rng=rng(16))
    outs = dec(decoder_taps(rng(17)))
    assert [o.shape for o in outs] == [(1, 3, 16, 16, 8), (1, 3, 8, 8, 4),
                                       (1, 3, 4, 4, 2), (1, 3, 2, 2, 1)]


def test_decoder_zero_propagation():
    dec = Decoder3d([2, 4, 8, 16], c_out=3, rng=rng(18))
    taps = [Tensor(np.zeros(t.shape, dtype=np.float32))
            for t in decoder_taps(rng(19))]
    for o in dec(taps):
        assert not o.data.any()


def test_decoder_tap_count_guard():
    dec = Decoder3d([2, 4], c_out=3, rng=rng(20))
    with pytest.raises(ContractViolation):
        dec(decoder_taps(rng(21)))


def test_decoder_gradients():
    dec = Decoder3d([2, 4], c_out=2, rng=rng(22))
    upcast(dec)
    r = rng(23)
    bases = [r.random((1, 2, 4, 4, 2)), r.random((1, 4, 2, 2, 1))]
    scale = Tensor(1.0 + 0.1 * r.standard_normal(2), requires_grad=True,
                   dtype=np.float64)

    def f(ts):
        taps = [ops.mul(ops.const(b, dtype=ts[0].data.dtype),
                        ops.reshape(ops.slice_axis(ts[0], 0, i, i + 1),
                                    (1, 1, 1, 1, 1)))
                for i, b in enumerate(bases)]
        outs = dec(taps)
        return ops.add(ops.sum(outs[0]), ops.sum(outs[1]))

    rep = gradient_check(f, [scale], tol=1e-3)
    assert rep.passed, rep


def test_decoder_bypass_projects_each_scale():
    dec = DecoderBypass([2, 4, 8, 16], c_out=3, rng=rng(24))
    outs = dec(decoder_taps(rng(25)))
    assert [o.shape for o in outs] == [(1, 3, 16, 16, 8), (1, 3, 8, 8, 4),
                                       (1, 3, 4, 4, 2), (1, 3, 2, 2, 1)]


# -- class head -----------------------------------------------------------

def test_uniform_logits_argmax_breaks_ties_low():
    logits = np.zeros((5, 3, 3, 2), dtype=np.float32)
    assert not logits_to_labels(logits).any()
    assert logits_to_labels(logits).dtype == np.uint8


def test_dominant_bias_wins_everywhere():
    r = rng(26)
    head = OccupancyHead(4, hidden=4, n_classes=6, rng=r)
    head.fc2.bias.data[3] = 10.0
    feats = [vol(r, (1, 4, 4, 4, 2))]
    logits = head(feats)[0]
    labels = logits_to_labels(logits.data[0])
    assert (labels == 3).all()


def test_probabilities_normalize():
    r = rng(27)
    head = OccupancyHead(4, hidden=4, n_classes=6, rng=r)
    logits = head([vol(r, (1, 4, 4, 4, 2))])[0]
    probs = ops.softmax(Tensor(logits.data), axis=1)
    sums = probs.data.sum(axis=1)
    assert np.abs(sums - 1.0).max() < 1e-6
