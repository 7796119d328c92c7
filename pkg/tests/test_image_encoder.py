import numpy as np
import pytest

from voxocc import ops
from voxocc.errors import ContractViolation
from voxocc.gradcheck import gradient_check
from voxocc.image_encoder import ImageEncoder, grid_mask, make_grid_mask
from voxocc.tensor import Tensor


def rng(i):
    return np.random.default_rng(np.random.PCG64(3300 + i))


def test_pyramid_shapes_are_strides_8_16_32():
    enc = ImageEncoder(c_out=4, rng=rng(0), widths=(4, 4, 8, 8, 8))
    feats = enc(Tensor(rng(1).random((2, 3, 64, 64)).astype(np.float32)))
    assert [f.shape for f in feats] == [(2, 4, 8, 8), (2, 4, 4, 4),
                                        (2, 4, 2, 2)]


def test_input_validation():
    enc = ImageEncoder(c_out=4, rng=rng(0), widths=(4, 4, 8, 8, 8))
    with pytest.raises(ContractViolation):
        enc(Tensor(np.zeros((2, 1, 64, 64), dtype=np.float32)))
    with pytest.raises(ContractViolation):
        enc(Tensor(np.zeros((2, 3, 48, 64), dtype=np.float32)))


@pytest.mark.parametrize("training", [True, False])
def test_zero_input_gives_zero_pyramid(training):
    enc = ImageEncoder(c_out=4, rng=rng(2), widths=(4, 4, 8, 8, 8))
    enc.train(training)
    feats = enc(Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32)))
    for f in feats:
        assert not f.data.any()


def test_camera_permutation_permutes_features():
    enc = ImageEncoder(c_out=4, rng=rng(3), widths=(4, 4, 8, 8, 8))
    imgs = rng(4).random((4, 3, 32, 32)).astype(np.float32)
    perm = [2, 0, 3, 1]
    enc.eval()
    base = [f.data.copy() for f in enc(Tensor(imgs))]
    swapped = enc(Tensor(imgs[perm]))
    for a, b in zip(base, swapped):
        assert np.array_equal(a[perm], b.data)
    # training mode couples cameras only through batch statistics, which
    # are permutation invariant up to float32 summation order
    enc.train()
    base = [f.data.copy() for f in enc(Tensor(imgs))]
    enc2 = ImageEncoder(c_out=4, rng=rng(3), widths=(4, 4, 8, 8, 8))
    swapped = enc2(Tensor(imgs[perm]))
    for a, b in zip(base, swapped):
        assert np.allclose(a[perm], b.data, atol=1e-4)


def test_gradients_flow_through_whole_encoder():
    enc = ImageEncoder(c_out=2, rng=rng(5), widths=(3, 3, 4, 4, 4))
    enc.eval()
    for p in enc.parameters():
        p.data = p.data.astype(np.float64)
    img = rng(6).random((1, 3, 32, 32))
    mix = Tensor(np.eye(3) + 0.1 * rng(7).standard_normal((3, 3)),
                 requires_grad=True, dtype=np.float64)

    def f(ts):
        base = ops.const(img, dtype=ts[0].data.dtype)
        mixed = ops.reshape(
            ops.matmul(ts[0], ops.reshape(base, (3, 32 * 32))),
            (1, 3, 32, 32))
        feats = enc(mixed)
        return ops.add(ops.add(ops.sum(feats[0]), ops.sum(feats[1])),
                       ops.sum(feats[2]))

    rep = gradient_check(f, [mix], tol=1e-3)
    assert rep.passed, rep


# -- grid mask ------------------------------------------------------------

def test_prob_zero_is_identity():
    imgs = Tensor(rng(8).random((2, 3, 32, 32)).astype(np.float32))
    assert grid_mask(imgs, rng(9), prob=0.0) is imgs


def test_quarter_of_pixels_dropped_at_half_ratio():
    r = rng(10)
    imgs = Tensor(np.ones((3, 3, 64, 64), dtype=np.float32))
    out = grid_mask(imgs, r, prob=1.0, ratio=0.5, period_range=(16, 16))
    for i in range(3):
        # hole side 8 in period 16 and 64 divisible by 16: exactly 25%
        zeros = (out.data[i] == 0.0).mean()
        assert zeros == 0.25


def test_mask_is_periodic_and_per_camera():
    mask = make_grid_mask((2, 3, 48, 48), rng(11), ratio=0.5,
                          period_range=(12, 12))
    for i in range(2):
        m = mask[i, 0]
        assert np.array_equal(m[:, :36], m[:, 12:])
        assert np.array_equal(m[:36, :], m[12:, :])
        assert (m == 0).mean() == 0.25
    # independent offsets per camera make collisions unlikely at this seed
    assert not np.array_equal(mask[0], mask[1])


def test_grid_mask_reproducible():
    imgs = Tensor(rng(12).random((2, 3, 32, 32)).astype(np.float32))
    a = grid_mask(imgs, rng(13), prob=1.0)
    b = grid_mask(imgs, rng(13), prob=1.0)
    assert a.data.tobytes() == b.data.tobytes()


def test_grid_mask_rejects_bad_arguments():
    imgs = Tensor(np.ones((1, 3, 32, 32), dtype=np.float32))
    with pytest.raises(ContractViolation):
        grid_mask(imgs, rng(14), prob=1.5)
    with pytest.raises(ContractViolation):
        grid_mask(imgs, rng(14), prob=0.5, ratio=1.0)
