import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajfuse.fusion_head import (
    AnchorConfig,
    LossWeights,
    Targets,
    assign_targets,
    decode_boxes,
    decode_detections,
    detection_loss,
    direction_bins,
    encode_boxes,
    focal_loss,
    fuse_cbr,
    fuse_cbr_backward,
    head_backward,
    head_forward,
    init_cbr_params,
    init_head_params,
    make_anchors,
    reproject,
    reproject_backward,
    smooth_l1,
)
from trajfuse.geometry import BevGridSpec, BevIndex
from trajfuse.numerics import ParamBundle, grad_check

GRID = BevGridSpec(0.0, 12.8, -6.4, 6.4, 0.4, 0.4)  # 32 x 32


def cell(ix, iy, ok=True):
    return BevIndex(ix, iy, ix + 0.5, iy + 0.5, ok)


def cbr_params(rng, C):
    pb = ParamBundle()
    init_cbr_params(pb, C, rng)
    return {k: pb["cbr." + k] for k in ("W", "b", "gamma", "beta", "running_mean", "running_var")}


# ---------------------------------------------------------------- reprojection

def test_reproject_examples(rng):
    v = rng.normal(size=(1, 4))
    m, dropped = reproject(v, [cell(10, 20)], (32, 32))
    assert dropped == 0
    assert np.array_equal(m[:, 20, 10], v[0])
    m[:, 20, 10] = 0
    assert not m.any()
    empty, _ = reproject(np.zeros((0, 4)), [], (32, 32))
    assert not empty.any()


def test_reproject_collision_and_drop(rng):
    u, v, w = rng.normal(size=(3, 4))
    m, dropped = reproject(np.stack([u, v, w]), [cell(3, 3), cell(3, 3), cell(40, 1, ok=False)], (32, 32))
    assert dropped == 1
    # scalar scatter oracle
    ref = np.zeros((4, 32, 32))
    for vec, (ix, iy) in ((u, (3, 3)), (v, (3, 3))):
        for c in range(4):
            ref[c, iy, ix] += vec[c]
    np.testing.assert_array_equal(m, ref)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 31), st.integers(0, 31)), min_size=1, max_size=12, unique=True))
def test_reproject_readback(cells):
    F = np.random.default_rng(len(cells)).normal(size=(len(cells), 5))
    idx = [cell(ix, iy) for ix, iy in cells]
    m, _ = reproject(F, idx, (32, 32))
    np.testing.assert_array_equal(reproject_backward(m, idx), F)


# ---------------------------------------------------------------- CBR

def test_cbr_zero_inputs(rng):
    p = cbr_params(rng, 4)
    z = np.zeros((4, 6, 6))
    out, _ = fuse_cbr(z, z, z, p, training=False)
    assert not out.any()
    out, _ = fuse_cbr(z, z, z, cbr_params(rng, 4), training=True)
    assert not out.any()


def test_cbr_pass_through(rng):
    C = 4
    p = cbr_params(rng, C)
    p["W"][...] = 0.0
    for c in range(C):
        p["W"][c, 2 * C + c, 1, 1] = 1.0
    cur = np.abs(rng.normal(size=(C, 6, 6)))
    out, _ = fuse_cbr(rng.normal(size=(C, 6, 6)), rng.normal(size=(C, 6, 6)), cur, p, training=False, eps=0.0)
    assert np.array_equal(out, cur)


def test_cbr_shape_mismatch(rng):
    p = cbr_params(rng, 4)
    with pytest.raises(ValueError):
        fuse_cbr(np.zeros((4, 6, 6)), np.zeros((4, 6, 5)), np.zeros((4, 6, 6)), p)


def naive_cbr(L, G, cur, p, eps=1e-5):
    x = np.concatenate([L, G, cur])
    Cin, H, W = x.shape
    C = p["W"].shape[0]
    out = np.zeros((C, H, W))
    for o in range(C):
        for i in range(H):
            for j in range(W):
                acc = p["b"][o]
                for c in range(Cin):
                    for ky in range(3):
                        for kx in range(3):
                            yy, xx = i + ky - 1, j + kx - 1
                            if 0 <= yy < H and 0 <= xx < W:
                                acc += p["W"][o, c, ky, kx] * x[c, yy, xx]
                bn = (acc - p["running_mean"][o]) / math.sqrt(p["running_var"][o] + eps)
                out[o, i, j] = max(0.0, p["gamma"][o] * bn + p["beta"][o])
    return out


def test_cbr_naive_oracle(rng):
    C = 2
    p = cbr_params(rng, C)
    p["b"][...] = rng.normal(size=C)
    p["running_mean"][...] = rng.normal(size=C)
    p["running_var"][...] = rng.uniform(0.5, 2, size=C)
    p["gamma"][...] = rng.uniform(0.5, 1.5, size=C)
    p["beta"][...] = rng.normal(size=C)
    maps = [rng.normal(size=(C, 5, 4)) for _ in range(3)]
    out, _ = fuse_cbr(*maps, p, training=False)
    np.testing.assert_allclose(out, naive_cbr(*maps, p), atol=1e-10)


@pytest.mark.parametrize("training", [True, False])
def test_cbr_gradients(rng, training):
    C = 2
    for _ in range(20):
        p = cbr_params(rng, C)
        p["beta"][...] = rng.normal(size=C) * 0.5
        maps = [rng.normal(size=(C, 4, 4)) for _ in range(3)]
        G = rng.normal(size=(C, 4, 4))
        rm, rv = p["running_mean"].copy(), p["running_var"].copy()

        def f(_):
            p["running_mean"][...] = rm
            p["running_var"][...] = rv
            return float((fuse_cbr(*maps, p, training)[0] * G).sum())

        f(None)
        _, cache = fuse_cbr(*maps, p, training)
        p["running_mean"][...] = rm
        p["running_var"][...] = rv
        dL, dG, dc, g = fuse_cbr_backward(G, cache, p)
        for arr, d in zip(maps, (dL, dG, dc)):
            assert grad_check(f, arr, d) < 1e-4
        for k, v in g.items():
            if k == "b" and training:
                # batch statistics subtract the conv bias right back out
                assert np.abs(v).max() < 1e-12
                continue
            assert grad_check(f, p[k], v) < 1e-4, k


# ---------------------------------------------------------------- head and box coding

def test_zero_head_decodes_to_anchors(rng):
    acfg = AnchorConfig()
    anchors, _ = make_anchors(GRID, acfg)
    pb = ParamBundle()
    init_head_params(pb, 4, acfg, rng)
    p = pb.sub("head")
    for v in p.values():
        v[...] = 0.0
    cls, box, dr, _ = head_forward(rng.normal(size=(4, 32, 32)), p, acfg)
    assert not cls.any() and not box.any() and not dr.any()
    np.testing.assert_allclose(decode_boxes(box, anchors), anchors, atol=1e-12)


def test_head_sigmoid_score():
    acfg = AnchorConfig()
    grid = BevGridSpec(0.0, 0.4, 0.0, 0.4, 0.4, 0.4)
    anchors, _ = make_anchors(grid, acfg)
    pb = ParamBundle()
    init_head_params(pb, 1, acfg, np.random.default_rng(0))
    p = pb.sub("head")
    for v in p.values():
        v[...] = 0.0
    p["b_cls"][...] = -20.0
    p["W_cls"][0, 0] = 23.0  # anchor 0, class 0 -> logit 3
    cls, box, dr, _ = head_forward(np.ones((1, 1, 1)), p, acfg)
    assert cls[0, 0] == pytest.approx(3.0)
    dets = decode_detections(cls, box, dr, anchors, score_thr=0.5)
    assert len(dets) == 1
    assert dets[0].score == pytest.approx(0.9525741268, abs=1e-9)
    assert dets[0].cls == 0


def test_head_gradients(rng):
    acfg = AnchorConfig()
    for _ in range(20):
        pb = ParamBundle()
        init_head_params(pb, 3, acfg, rng)
        p = pb.sub("head")
        F = rng.normal(size=(3, 2, 2))
        Gs = [rng.normal(size=s) for s in ((24, 3), (24, 7), (24, 2))]
        f = lambda _: float(sum((o * g).sum() for o, g in zip(head_forward(F, p, acfg)[:3], Gs)))
        _, _, _, cache = head_forward(F, p, acfg)
        dF, g = head_backward(*Gs, cache, p)
        assert grad_check(f, F, dF) < 1e-4
        for k, v in g.items():
            assert grad_check(f, p[k], v) < 1e-4, k


def test_encode_decode_round_trip(rng):
    for _ in range(200):
        a = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-1, 1),
                      *rng.uniform(0.5, 4, size=3), rng.choice([0, np.pi / 2])])
        g = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-1, 1),
                      *rng.uniform(0.3, 5, size=3), rng.uniform(-np.pi, np.pi)])
        d = encode_boxes(g[None], a[None])
        back = decode_boxes(d, a[None], direction_bins(g[6:7]))[0]
        np.testing.assert_allclose(back[:6], g[:6], atol=1e-9)
        assert abs(math.remainder(back[6] - g[6], 2 * math.pi)) < 1e-9


def test_anchor_config_validation():
    with pytest.raises(ValueError):
        AnchorConfig(sizes=((1, 1, 0), (1, 1, 1), (1, 1, 1)))
    with pytest.raises(ValueError):
        AnchorConfig(match_thr=(0.4, 0.5, 0.5))
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1)


# ---------------------------------------------------------------- targets and loss

def test_assign_targets_basic():
    acfg = AnchorConfig()
    anchors, acls = make_anchors(GRID, acfg)
    gt = np.array([[5.0, 0.2, 0.78, 3.9, 1.6, 1.56, 0.1]])
    t = assign_targets(anchors, acls, gt, [0], acfg)
    pos = np.flatnonzero(t.labels == 1)
    assert len(pos) >= 1
    assert np.all(acls[pos] == 0)
    assert np.all(t.cls_onehot[pos, 0] == 1)
    np.testing.assert_allclose(decode_boxes(t.box[pos], anchors[pos], t.dir[pos]), np.repeat(gt, len(pos), 0),
                               atol=1e-9)
    empty = assign_targets(anchors, acls, np.zeros((0, 7)), [], acfg)
    assert not (empty.labels == 1).any() and not (empty.labels == -1).any()


def three_anchor_case(rng):
    labels = np.array([1, 0, -1])
    onehot = np.zeros((3, 3))
    onehot[0, 1] = 1.0
    box_t = np.zeros((3, 7))
    box_t[0] = rng.normal(size=7) * 0.2
    t = Targets(labels, onehot, box_t, np.array([1, 0, 0]))
    return t, rng.normal(size=(3, 3)), rng.normal(size=(3, 7)) * 0.2, rng.normal(size=(3, 2))


def scalar_reference(cls, box, dr, t, w):
    def sig(x):
        return 1.0 / (1.0 + math.exp(-x))

    a, g = w.focal_alpha, w.focal_gamma
    L_cls = 0.0
    for i in range(3):
        if t.labels[i] < 0:
            continue
        for k in range(3):
            p = sig(cls[i, k])
            if t.cls_onehot[i, k]:
                L_cls += -a * (1 - p) ** g * math.log(p)
            else:
                L_cls += -(1 - a) * p ** g * math.log(1 - p)
    L_loc = 0.0
    for k in range(7):
        d = box[0, k] - t.box[0, k]
        b = w.smooth_l1_beta
        L_loc += 0.5 * d * d / b if abs(d) < b else abs(d) - 0.5 * b
    z = dr[0]
    L_dir = -(z[t.dir[0]] - math.log(math.exp(z[0]) + math.exp(z[1])))
    return w.beta1 * L_loc + w.beta2 * L_cls + w.beta3 * L_dir, L_loc, L_cls, L_dir


def test_loss_scalar_oracle_and_gradients(rng):
    w = LossWeights()
    for _ in range(20):
        t, cls, box, dr = three_anchor_case(rng)
        out = detection_loss(cls, box, dr, t, w)
        ref = scalar_reference(cls, box, dr, t, w)
        assert out.total == pytest.approx(ref[0], abs=1e-12)
        assert (out.loc, out.cls, out.dir) == pytest.approx(ref[1:], abs=1e-12)
        f = lambda _: detection_loss(cls, box, dr, t, w).total
        assert grad_check(f, cls, out.dcls) < 1e-4
        assert grad_check(f, box, out.dbox) < 1e-4
        assert grad_check(f, dr, out.ddir) < 1e-4


def test_loss_decomposition_and_masking(rng):
    for _ in range(30):
        t, cls, box, dr = three_anchor_case(rng)
        b = rng.uniform(0.1, 3, size=3)
        out = detection_loss(cls, box, dr, t, LossWeights(*b))
        assert out.total == b[0] * out.loc + b[1] * out.cls + b[2] * out.dir
        only = detection_loss(cls, box, dr, t, LossWeights(0.0, b[1], 0.0))
        assert only.total == b[1] * only.cls


def test_loss_perfect_fit(rng):
    t, _, _, _ = three_anchor_case(rng)
    cls = np.where(t.cls_onehot > 0, 40.0, -40.0)
    dr = np.zeros((3, 2))
    dr[np.arange(3), t.dir] = 50.0
    out = detection_loss(cls, t.box.copy(), dr, t, LossWeights())
    assert out.loc == 0.0
    assert out.dir < 1e-20
    assert out.cls < 1e-20
    assert out.total == pytest.approx(LossWeights().beta2 * out.cls, abs=1e-30)


def test_direction_loss_period_invariance(rng):
    acfg = AnchorConfig()
    anchors, acls = make_anchors(GRID, acfg)
    for _ in range(20):
        gt = np.array([[rng.uniform(2, 10), rng.uniform(-4, 4), 0.78, 3.9, 1.6, 1.56, rng.uniform(-np.pi, np.pi)]])
        shifted = gt.copy()
        shifted[0, 6] += 2 * np.pi
        t1 = assign_targets(anchors, acls, gt, [0], acfg)
        t2 = assign_targets(anchors, acls, shifted, [0], acfg)
        N = len(anchors)
        cls, box, dr = rng.normal(size=(N, 3)), rng.normal(size=(N, 7)) * 0.1, rng.normal(size=(N, 2))
        a = detection_loss(cls, box, dr, t1, LossWeights())
        b = detection_loss(cls, box, dr, t2, LossWeights())
        assert a.dir == b.dir
        assert a.loc == pytest.approx(b.loc, abs=1e-12)


def test_focal_and_smooth_l1_pointwise(rng):
    x = rng.normal(size=50) * 3
    for onehot in (np.ones(50), np.zeros(50)):
        l, g = focal_loss(x, onehot)
        for i in range(50):
            h = 1e-6
            num = (focal_loss(x[i:i + 1] + h, onehot[i:i + 1])[0] - focal_loss(x[i:i + 1] - h, onehot[i:i + 1])[0]) / (2 * h)
            assert g[i] == pytest.approx(num[0], rel=1e-5, abs=1e-9)
    d = np.array([-1.0, -0.05, 0.0, 0.05, 1.0])
    l, g = smooth_l1(d, 0.1)
    np.testing.assert_allclose(l, [0.95, 0.0125, 0.0, 0.0125, 0.95])
    np.testing.assert_allclose(g, [-1, -0.5, 0, 0.5, 1])


# ---------------------------------------------------------------- decoding

def test_nms_classwise():
    anchors = np.array([[5.0, 0.0, 0.78, 3.9, 1.6, 1.56, 0.0]] * 3)
    anchors[2, 0] = 10.0
    cls = np.full((3, 3), -10.0)
    cls[0, 0], cls[1, 0], cls[2, 0] = 2.0, 1.0, 0.5
    box = np.zeros((3, 7))
    dr = np.zeros((3, 2))
    dets = decode_detections(cls, box, dr, anchors, score_thr=0.1, nms_thr=0.1)
    assert len(dets) == 2  # the duplicate at x=5 is suppressed
    assert dets[0].score > dets[1].score
    cls[1] = [-10.0, 1.0, -10.0]  # a different class survives its overlap
    dets = decode_detections(cls, box, dr, anchors, score_thr=0.1, nms_thr=0.1)
    assert sorted(d.cls for d in dets) == [0, 0, 1]
    assert decode_detections(np.full((3, 3), -10.0), box, dr, anchors) == []
