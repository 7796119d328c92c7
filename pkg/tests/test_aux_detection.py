import numpy as np
import pytest

from voxocc.aux_detection import (CrossAttention, DetectionBranch,
                                  SparseSelfAttention, sample_bev,
                                  sample_visual, sample_volume)
from voxocc.errors import ContractViolation
from voxocc.geometry import VoxelGridSpec, make_ring_rig
from voxocc.tensor import Tensor


def rng(i):
    return np.random.default_rng(np.random.PCG64(5200 + i))


def t32(a):
    return Tensor(np.asarray(a, dtype=np.float32))


GRID = VoxelGridSpec(-8, 8, -8, 8, -2, 2, 16, 16, 4)


def forward_x_rig():
    return make_ring_rig(1, radius=0.0, height=0.0, pitch_deg=0.0,
                         focal=50.0, image_width=64, image_height=48)


def zero_mlp(mlp, final_bias=None):
    mlp.zero_()
    if final_bias is not None:
        mlp.layers[-1].bias.data[...] = final_bias


# -- point decoding -------------------------------------------------------

def test_zero_queries_decode_to_extent_midpoint():
    branch = DetectionBranch(4, n_queries=3, n_layers=1, n_det_classes=3,
                             n_occ_classes=5, n_levels=3, hidden=4,
                             size_bias=(1.5, 1.5, 1.5), rng=rng(0))
    zero_mlp(branch.point_mlp)
    pts = branch.decode_points(t32(np.zeros((3, 4))), GRID)
    assert np.allclose(pts.data, [[0.0, 0.0, 0.0]] * 3, atol=1e-6)


def test_saturated_queries_decode_to_min_corner():
    branch = DetectionBranch(4, n_queries=2, n_layers=1, n_det_classes=3,
                             n_occ_classes=5, n_levels=3, hidden=4,
                             size_bias=(1.5, 1.5, 1.5), rng=rng(1))
    zero_mlp(branch.point_mlp, final_bias=-50.0)
    pts = branch.decode_points(t32(np.zeros((2, 4))), GRID)
    assert np.allclose(pts.data, [[-8, -8, -2]] * 2, atol=1e-4)


def test_decode_points_matches_affine_formula():
    r = rng(2)
    branch = DetectionBranch(4, n_queries=6, n_layers=1, n_det_classes=3,
                             n_occ_classes=5, n_levels=3, hidden=4,
                             size_bias=(1.5, 1.5, 1.5), rng=r)
    q = r.standard_normal((6, 4)).astype(np.float32)
    pts = branch.decode_points(t32(q), GRID)
    l0, l1 = branch.point_mlp.layers
    h = np.maximum(q @ l0.weight.data + l0.bias.data, 0)
    raw = h @ l1.weight.data + l1.bias.data
    want = GRID.mins + (1.0 / (1.0 + np.exp(-raw.astype(np.float64)))) \
        * (GRID.maxs - GRID.mins)
    assert np.allclose(pts.data, want, atol=1e-5)
    assert (pts.data >= GRID.mins - 1e-6).all()
    assert (pts.data <= GRID.maxs + 1e-6).all()


# -- sparse self-attention ------------------------------------------------

CENTER_TAP = 13  # offset (0,0,0) in the 3x3x3 enumeration


def test_zero_weights_leave_queries_alone():
    sa = SparseSelfAttention(3, rng(3), group=4)
    sa.weight.data[...] = 0.0
    q = t32(rng(4).standard_normal((4, 3)))
    pts = t32(rng(5).uniform(-7, 7, (4, 3)) * [1, 1, 0.2])
    out = sa(q, pts, GRID)
    assert np.array_equal(out.data, q.data)


def test_identity_center_tap_doubles_isolated_query():
    sa = SparseSelfAttention(3, rng(6), group=4)
    sa.weight.data[...] = 0.0
    sa.weight.data[CENTER_TAP] = np.eye(3)
    q = t32([[1.0, -2.0, 0.5]])
    out = sa(q, t32([[-7.0, -7.0, 0.0]]), GRID)
    assert np.allclose(out.data, 2 * q.data, atol=1e-6)


def test_same_cell_queries_receive_their_sum():
    sa = SparseSelfAttention(2, rng(7), group=4)
    sa.weight.data[...] = 0.0
    sa.weight.data[CENTER_TAP] = np.eye(2)
    q = t32([[1.0, 2.0], [10.0, 20.0]])
    # both points in the 4-voxel cell at the grid's min corner
    pts = t32([[-7.5, -7.5, 0.0], [-6.0, -6.5, 0.3]])
    out = sa(q, pts, GRID)
    assert np.allclose(out.data, q.data + [[11.0, 22.0]], atol=1e-6)


def test_distant_cells_do_not_interact():
    sa = SparseSelfAttention(2, rng(8), group=4)
    sa.weight.data[...] = rng(9).standard_normal((27, 2, 2))
    sa.weight.data[CENTER_TAP] = 0.0
    sa.bias.data[...] = 0.0
    q = t32(rng(10).standard_normal((2, 2)))
    pts = t32([[-7.0, -7.0, 0.0], [5.0, 5.0, 0.0]])  # cells (0,0) vs (3,3)
    out = sa(q, pts, GRID)
    assert np.allclose(out.data, q.data, atol=1e-6)


# -- feature samplers -----------------------------------------------------

def test_visual_sample_hits_stored_feature_on_grid():
    r = rng(11)
    rig = forward_x_rig()
    feat = t32(r.standard_normal((1, 3, 6, 8)))  # stride 8 of 48x64
    # projects to pixel (u, v) = (16, 8) -> feature coords (1, 2)
    pts = t32([[5.0, 1.6, 1.6]])
    out = sample_visual(feat, rig, 8, pts)
    assert np.allclose(out.data[0], feat.data[0, :, 1, 2], atol=1e-5)


def test_visual_sample_zeros_for_hidden_point():
    r = rng(12)
    rig = forward_x_rig()
    feat = t32(r.standard_normal((1, 3, 6, 8)))
    out = sample_visual(feat, rig, 8, t32([[-5.0, 0.0, 0.0]]))
    assert not out.data.any()


def test_visual_sample_averages_over_seeing_cameras():
    r = rng(13)
    rig = make_ring_rig(4, radius=0.5, height=0.0, pitch_deg=0.0,
                        focal=30.0, image_width=64, image_height=48)
    feat = t32(r.standard_normal((4, 3, 6, 8)))
    pts = t32([[6.0, 0.0, 0.0]])
    out = sample_visual(feat, rig, 8, pts)
    u, v, d, valid = __import__("voxocc.geometry", fromlist=["x"]) \
        .project_points(rig, pts.data.astype(np.float64))
    seeing = np.nonzero(valid[:, 0])[0]
    assert seeing.size >= 1
    acc = np.zeros(3)
    for i in seeing:
        from voxocc.kernels import numpy_impl
        coords = np.array([[v[i, 0] / 8, u[i, 0] / 8]])
        acc += numpy_impl.bilinear_forward(
            feat.data[i].astype(np.float64), coords)[0]
    assert np.allclose(out.data[0], acc / seeing.size, atol=1e-4)


def test_bev_sample_ignores_z():
    r = rng(14)
    bev = t32(r.standard_normal((3, 16, 16)))
    a = sample_bev(bev, GRID, t32([[1.3, -2.7, -1.9]]))
    b = sample_bev(bev, GRID, t32([[1.3, -2.7, 1.9]]))
    assert np.array_equal(a.data, b.data)


def test_bev_sample_zero_outside_extent():
    bev = t32(rng(15).standard_normal((3, 16, 16)))
    out = sample_bev(bev, GRID, t32([[25.0, 25.0, 0.0]]))
    assert not out.data.any()


def test_constant_bev_field_reproduced_inside():
    bev = t32(np.full((2, 16, 16), 4.5, dtype=np.float32))
    pts = t32(rng(16).uniform(-7.4, 7.4, (10, 3)) * [1, 1, 0.25])
    out = sample_bev(bev, GRID, pts)
    assert np.allclose(out.data, 4.5, atol=1e-5)


def test_volume_sample_at_center_returns_stored_vector():
    r = rng(17)
    vol = t32(r.standard_normal((5, 16, 16, 4)))
    center = GRID.mins + (np.array([3, 7, 2]) + 0.5) * GRID.cell_sizes
    out = sample_volume(vol, GRID, t32(center[None]))
    assert np.allclose(out.data[0], vol.data[:, 3, 7, 2], atol=1e-6)


def test_volume_sample_zero_field():
    vol = t32(np.zeros((5, 16, 16, 4)))
    out = sample_volume(vol, GRID, t32(rng(18).uniform(-7, 7, (6, 3))))
    assert not out.data.any()


def test_volume_sample_matches_corner_blend():
    r = rng(19)
    vol = t32(r.standard_normal((4, 16, 16, 4)))
    p = np.array([2.3, -4.1, 0.7])
    out = sample_volume(vol, GRID, t32(p[None]))
    c = (p - GRID.mins) / GRID.cell_sizes - 0.5
    i0 = np.floor(c).astype(int)
    f = c - i0
    want = np.zeros(4)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1])
                     * (f[2] if dz else 1 - f[2]))
                want += w * vol.data[:, i0[0] + dx, i0[1] + dy, i0[2] + dz]
    assert np.allclose(out.data[0], want, atol=1e-5)


# -- cross-attention ------------------------------------------------------

def test_one_hot_weights_select_single_source():
    r = rng(20)
    ca = CrossAttention(4, n_src=3, src_dim=4, hidden=4, rng=r)
    zero_mlp(ca.w_mlp)
    ca.w_mlp.layers[-1].bias.data[0] = 50.0  # softmax -> (1, 0, 0)
    zero_mlp(ca.reg_mlp)
    q = t32(r.standard_normal((5, 4)))
    pts = t32(r.uniform(-7, 7, (5, 3)) * [1, 1, 0.25])
    sampled = [t32(r.standard_normal((5, 4))) for _ in range(3)]
    q2, pts2 = ca(q, pts, sampled, GRID.mins.astype(np.float32),
                  GRID.maxs.astype(np.float32))
    assert np.allclose(q2.data, q.data + sampled[0].data, atol=1e-5)
    assert np.array_equal(pts2.data, pts.data)  # zero offset fixed point


def test_offsets_are_clamped_to_extent():
    r = rng(21)
    ca = CrossAttention(4, n_src=1, src_dim=4, hidden=4, rng=r)
    zero_mlp(ca.w_mlp)
    zero_mlp(ca.reg_mlp, final_bias=1000.0)
    q = t32(r.standard_normal((3, 4)))
    pts = t32(np.zeros((3, 3)))
    _, pts2 = ca(q, pts, [t32(np.zeros((3, 4)))],
                 GRID.mins.astype(np.float32), GRID.maxs.astype(np.float32))
    assert np.allclose(pts2.data, [[8, 8, 2]] * 3, atol=1e-6)


def test_source_count_guard():
    ca = CrossAttention(4, n_src=2, src_dim=4, hidden=4, rng=rng(22))
    with pytest.raises(ContractViolation):
        ca(t32(np.zeros((2, 4))), t32(np.zeros((2, 3))),
           [t32(np.zeros((2, 4)))], GRID.mins.astype(np.float32),
           GRID.maxs.astype(np.float32))


# -- full branch ----------------------------------------------------------

def branch_inputs(r, n_classes=5, c=4, n_levels=3):
    grid = VoxelGridSpec(-8, 8, -8, 8, -2, 2, 8, 8, 8)
    rig = make_ring_rig(2, radius=0.5, height=0.3, pitch_deg=5.0,
                        focal=40.0, image_width=64, image_height=64)
    feats = [t32(r.standard_normal((2, c, 64 // (8 * 2 ** i),
                                    64 // (8 * 2 ** i))))
             for i in range(n_levels)]
    bev_grids = [grid.scaled(2 ** i) for i in range(n_levels)]
    bevs = [t32(r.standard_normal((c, g.nx, g.ny))) for g in bev_grids]
    vol_grids = [grid.scaled(2 ** i) for i in range(n_levels + 1)]
    vols = [t32(r.standard_normal((n_classes,) + g.dims)) for g in vol_grids]
    return grid, rig, feats, bevs, bev_grids, vols, vol_grids


@pytest.mark.parametrize("n_layers,expected", [(1, 3), (2, 6), (6, 18)])
def test_head_output_count(n_layers, expected):
    r = rng(23)
    branch = DetectionBranch(4, n_queries=5, n_layers=n_layers,
                             n_det_classes=3, n_occ_classes=5, n_levels=3,
                             hidden=4, size_bias=(1.5, 1.5, 1.5), rng=r)
    grid, rig, feats, bevs, bev_grids, vols, vol_grids = branch_inputs(r)
    outs = branch(feats, bevs, vols, vol_grids, rig, grid, bev_grids)
    assert len(outs) == expected
    assert [o.module for o in outs[:3]] == ["visual", "bev", "volume"]
    assert [o.layer for o in outs[:3]] == [0, 0, 0]
    for o in outs:
        assert o.class_logits.shape == (5, 4)  # 3 classes + background
        assert o.boxes.shape == (5, 9)


def test_zero_parameter_trace():
    r = rng(24)
    branch = DetectionBranch(4, n_queries=4, n_layers=2, n_det_classes=3,
                             n_occ_classes=5, n_levels=3, hidden=4,
                             size_bias=(1.5, 2.0, 2.5), rng=r)
    for p in branch.parameters():
        p.data[...] = 0.0
    grid, rig, feats, bevs, bev_grids, vols, vol_grids = branch_inputs(r)
    outs = branch(feats, bevs, vols, vol_grids, rig, grid, bev_grids)
    midpoint = (grid.mins + grid.maxs) / 2.0
    for o in outs:
        assert not o.class_logits.data.any()
        assert np.allclose(o.boxes.data[:, :3], midpoint, atol=1e-5)
        assert np.allclose(o.boxes.data[:, 3:6], [1.5, 2.0, 2.5], atol=1e-6)
        assert np.allclose(o.boxes.data[:, 6:], 0.0, atol=1e-6)


def test_disabled_modules_shrink_head_count():
    r = rng(25)
    branch = DetectionBranch(4, n_queries=4, n_layers=2, n_det_classes=3,
                             n_occ_classes=5, n_levels=3, hidden=4,
                             size_bias=(1.5, 1.5, 1.5), rng=r,
                             use_visual=False, use_self_attention=False)
    grid, rig, feats, bevs, bev_grids, vols, vol_grids = branch_inputs(r)
    outs = branch(feats, bevs, vols, vol_grids, rig, grid, bev_grids)
    assert len(outs) == 4
    assert {o.module for o in outs} == {"bev", "volume"}
    with pytest.raises(ContractViolation):
        DetectionBranch(4, n_queries=4, n_layers=1, n_det_classes=3,
                        n_occ_classes=5, n_levels=3, hidden=4,
                        size_bias=(1.5, 1.5, 1.5), rng=r, use_visual=False,
                        use_bev=False, use_volume=False)
