import numpy as np

from voxocc.optim import AdamW
from voxocc.tensor import Tensor


def scalar_param(v):
    return Tensor(np.array([v], dtype=np.float32), requires_grad=True,
                  name="p")


def test_zero_grad_zero_decay_is_fixed_point():
    p = scalar_param(3.0)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(1, dtype=np.float32)
    for _ in range(5):
        opt.step()
    assert np.array_equal(p.data, [3.0])


def test_single_step_matches_hand_formula():
    p = scalar_param(1.0)
    opt = AdamW([p], lr=2e-4, betas=(0.9, 0.999), eps=1e-8,
                weight_decay=0.0)
    p.grad = np.ones(1, dtype=np.float32)
    opt.step()
    # bias-corrected m_hat = v_hat = 1, update = lr / (1 + eps)
    assert abs(p.data[0] - (1.0 - 2e-4)) < 1e-7


def test_decoupled_decay_without_grad():
    p = scalar_param(1.0)
    opt = AdamW([p], lr=2e-4, weight_decay=0.01)
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert abs(p.data[0] - (1.0 - 2e-4 * 0.01)) < 1e-9


def test_decay_applies_even_with_missing_grad():
    p = scalar_param(2.0)
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = None
    opt.step()
    assert abs(p.data[0] - 2.0 * (1.0 - 0.05)) < 1e-6


def test_two_steps_match_reference_loop():
    rng = np.random.default_rng(np.random.PCG64(3))
    w0 = rng.standard_normal(4).astype(np.float32)
    g1 = rng.standard_normal(4).astype(np.float32)
    g2 = rng.standard_normal(4).astype(np.float32)
    lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 1e-8, 0.1

    # plain float64 reference of the decoupled update
    w = w0.astype(np.float64).copy()
    m = np.zeros(4)
    v = np.zeros(4)
    for i, g in enumerate((g1, g2), start=1):
        w *= 1.0 - lr * wd
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** i)
        vh = v / (1 - b2 ** i)
        w -= lr * mh / (np.sqrt(vh) + eps)

    p = Tensor(w0.copy(), requires_grad=True, name="w")
    opt = AdamW([p], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    for g in (g1, g2):
        p.grad = g.copy()
        opt.step()
    assert np.allclose(p.data, w, atol=1e-6)


def test_zero_grad_helper():
    p = scalar_param(1.0)
    opt = AdamW([p], lr=0.1)
    p.grad = np.ones(1, dtype=np.float32)
    opt.zero_grad()
    assert p.grad is None


def test_state_round_trip_resumes_identically():
    rng = np.random.default_rng(np.random.PCG64(11))
    p1 = Tensor(rng.standard_normal(3).astype(np.float32),
                requires_grad=True, name="a")
    p2 = Tensor(rng.standard_normal(3).astype(np.float32),
                requires_grad=True, name="b")
    opt = AdamW([p1, p2], lr=1e-2, weight_decay=0.01)
    grads = [rng.standard_normal((2, 3)).astype(np.float32)
             for _ in range(4)]
    for g in grads[:2]:
        p1.grad, p2.grad = g[0].copy(), g[1].copy()
        opt.step()

    saved = {k: v.copy() for k, v in opt.state_tensors().items()}
    snap1, snap2 = p1.data.copy(), p2.data.copy()

    # continue the original
    for g in grads[2:]:
        p1.grad, p2.grad = g[0].copy(), g[1].copy()
        opt.step()
    expect1, expect2 = p1.data.copy(), p2.data.copy()

    # rebuild from the snapshot and replay
    q1 = Tensor(snap1.copy(), requires_grad=True, name="a")
    q2 = Tensor(snap2.copy(), requires_grad=True, name="b")
    opt2 = AdamW([q1, q2], lr=1e-2, weight_decay=0.01)
    opt2.load_state_tensors(saved)
    for g in grads[2:]:
        q1.grad, q2.grad = g[0].copy(), g[1].copy()
        opt2.step()
    assert np.array_equal(q1.data, expect1)
    assert np.array_equal(q2.data, expect2)
