import numpy as np
import pytest

from voxocc import ops
from voxocc.errors import ContractViolation, GradientError
from voxocc.gradcheck import gradient_check
from voxocc.tensor import Tensor, record

RNG = np.random.default_rng(np.random.PCG64(21))


def test_sum_of_squares_tight():
    x = Tensor(RNG.standard_normal(5).astype(np.float32),
               requires_grad=True)
    rep = gradient_check(lambda ts: ops.sum(ops.mul(ts[0], ts[0])), [x])
    assert rep.passed
    assert rep.max_rel_err < 1e-5


def test_constant_function_passes():
    x = Tensor(RNG.standard_normal(4).astype(np.float32),
               requires_grad=True)

    def f(ts):
        # touches the input, then throws the dependence away by scaling,
        # leaving the true gradient exactly zero
        return ops.mul_scalar(ops.sum(ts[0]), 0.0)

    rep = gradient_check(f, [x])
    assert rep.passed and rep.max_rel_err == 0.0


def test_trilinear_sample_passes():
    feat = Tensor(RNG.standard_normal((2, 4, 4, 4)).astype(np.float32),
                  requires_grad=True)
    coords = Tensor(np.array([[1.3, 2.2, 0.7], [0.4, 1.6, 2.3]],
                             dtype=np.float32), requires_grad=True)
    w = RNG.standard_normal((2, 2))

    def f(ts):
        out = ops.trilinear_sample(ts[0], ts[1])
        return ops.sum(ops.mul(out, ops.const(w, dtype=ts[0].data.dtype)))

    rep = gradient_check(f, [feat, coords])
    assert rep.passed, rep


def test_catches_wrong_backward():
    # an op whose backward is off by a factor of two must be flagged
    def doubled_grad_mul(a):
        out = a.data * a.data

        def backward(g):
            return (4.0 * a.data * g,)
        return record("bad_square", (a,), out, backward)

    x = Tensor(np.array([1.5, -0.5], dtype=np.float32), requires_grad=True)
    rep = gradient_check(lambda ts: ops.sum(doubled_grad_mul(ts[0])), [x])
    assert not rep.passed
    assert rep.max_rel_err > 0.3


def test_rejects_nondeterministic_function():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    state = {"calls": 0}

    def f(ts):
        state["calls"] += 1
        return ops.mul_scalar(ops.sum(ts[0]), float(state["calls"]))

    with pytest.raises(ContractViolation):
        gradient_check(f, [x])


def test_rejects_nonscalar_output():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ContractViolation):
        gradient_check(lambda ts: ops.mul_scalar(ts[0], 2.0), [x])


def test_rejects_disconnected_output():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)

    def f(ts):
        return ops.sum(Tensor(np.ones(2, dtype=ts[0].data.dtype),
                              dtype=ts[0].data.dtype))

    with pytest.raises(GradientError):
        gradient_check(f, [x])


def test_focal_loss_gradients():
    from voxocc.losses import focal_loss
    logits = Tensor((RNG.standard_normal((9, 4)) * 1.5).astype(np.float32),
                    requires_grad=True)
    targets = RNG.integers(0, 4, size=9)

    def f(ts):
        loss, _ = focal_loss(ops.softmax(ts[0], axis=1), targets,
                             gamma=2.0, alpha=1.0)
        return loss

    rep = gradient_check(f, [logits])
    assert rep.passed, rep
