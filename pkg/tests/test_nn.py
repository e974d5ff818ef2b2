"""Autodiff engine tests: finite-difference oracles per op, then network-level
shape/equivariance contracts and checkpoint round trips."""

import numpy as np
import pytest

from motrack import nn
from motrack.geom import Box3D, RTM4, rtm_between, transform_box, transform_points
from motrack.nn import tensor as T


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def check_grad(build, x0, tol=1e-4, h=1e-5):
    """Compare autodiff gradients of build(Tensor) against finite differences.

    build maps a Tensor to a scalar Tensor; x0 is the evaluation point.
    Returns the worst relative error.
    """
    t = T.Tensor(np.array(x0, dtype=np.float64), requires_grad=True)
    build(t).backward()
    ana = t.grad.copy()
    num = numeric_grad(lambda x: float(build(T.Tensor(x)).data), np.array(x0))
    denom = np.maximum(np.abs(num), np.abs(ana))
    err = np.abs(ana - num) / np.maximum(denom, 1e-6)
    worst = float(err.max()) if err.size else 0.0
    assert worst < tol, f"gradient mismatch {worst:.2e}"
    return worst


RNG = np.random.default_rng(20)


def test_grad_arithmetic_ops():
    x0 = RNG.normal(size=(3, 4)) + 0.1
    y0 = RNG.normal(size=(3, 4)) + 2.0
    yc = T.Tensor(y0)
    check_grad(lambda t: (t + yc).sum(), x0)
    check_grad(lambda t: (t - yc).sum(), x0)
    check_grad(lambda t: (t * yc).sum(), x0)
    check_grad(lambda t: (t / yc).sum(), x0)
    check_grad(lambda t: (-t).sum(), x0)
    check_grad(lambda t: (t ** 3).sum(), x0)
    check_grad(lambda t: (2.0 / (t + 5.0)).sum(), x0)


def test_grad_broadcasting():
    x0 = RNG.normal(size=(4,))
    other = T.Tensor(RNG.normal(size=(3, 4)))
    check_grad(lambda t: (t * other).sum(), x0)
    check_grad(lambda t: (other / (t + 4.0)).sum(), x0)
    check_grad(lambda t: (t.reshape(1, 4) + other).sum(), x0)


def test_grad_matmul():
    x0 = RNG.normal(size=(3, 5))
    w = T.Tensor(RNG.normal(size=(5, 2)))
    check_grad(lambda t: (t @ w).sum(), x0)
    a = T.Tensor(RNG.normal(size=(4, 3)))
    check_grad(lambda t: (a @ t).sum(), x0)


def test_grad_matmul_vector_cases():
    # numpy matmul strips the promoted axis for 1-D operands; the backward
    # pass has to mirror that on both sides
    v0 = RNG.normal(size=(5,))
    w = T.Tensor(RNG.normal(size=(5, 3)))
    check_grad(lambda t: ((t @ w) ** 2).sum(), v0)

    a = T.Tensor(RNG.normal(size=(4, 5)))
    check_grad(lambda t: ((a @ t) ** 2).sum(), v0)

    u = T.Tensor(RNG.normal(size=(5,)))
    check_grad(lambda t: (t @ u) ** 2, v0)

    # weight gradient when the activation is a bare vector
    wv0 = RNG.normal(size=(5, 3))
    act = T.Tensor(RNG.normal(size=(5,)))
    check_grad(lambda t: ((act @ t) ** 2).sum(), wv0)


def test_grad_reductions_and_shape_ops():
    x0 = RNG.normal(size=(4, 3))
    check_grad(lambda t: t.sum(), x0)
    check_grad(lambda t: t.mean(axis=0).sum(), x0)
    check_grad(lambda t: (t.sum(axis=1, keepdims=True) ** 2).sum(), x0)
    check_grad(lambda t: t.reshape(12).sum(), x0)
    check_grad(lambda t: (t[1:, :2] * 3.0).sum(), x0)
    check_grad(lambda t: T.concat([t, t * 2.0], axis=1).sum(), x0)
    check_grad(lambda t: T.stack([t[0], t[2]], axis=0).sum(), x0)


def test_grad_max_pool():
    # ensure a unique argmax so finite differences stay valid
    x0 = np.arange(12, dtype=np.float64).reshape(4, 3) + RNG.uniform(0, 0.1, (4, 3))
    check_grad(lambda t: (t.max(axis=0) ** 2).sum(), x0)
    check_grad(lambda t: (t.max(axis=1, keepdims=True) * 2.0).sum(), x0)
    # single point: identity
    one = T.Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    pooled = one.max(axis=0)
    np.testing.assert_array_equal(pooled.data, [1.0, -2.0])
    pooled.sum().backward()
    np.testing.assert_array_equal(one.grad, [[1.0, 1.0]])


def test_max_pool_gradient_routes_to_first_argmax():
    x = T.Tensor(np.array([[1.0, 5.0], [5.0, 2.0], [5.0, 0.0]]), requires_grad=True)
    x.max(axis=0).sum().backward()
    np.testing.assert_array_equal(x.grad, [[0, 1], [1, 0], [0, 0]])


def test_grad_elementwise_nonlinear():
    x0 = np.abs(RNG.normal(size=(3, 3))) + 0.2  # stay clear of relu/log kinks
    check_grad(lambda t: t.relu().sum(), x0)
    check_grad(lambda t: ((-t).relu() + t.relu()).sum(), x0)
    check_grad(lambda t: t.exp().sum(), x0)
    check_grad(lambda t: t.log().sum(), x0)
    check_grad(lambda t: t.sqrt().sum(), x0)
    check_grad(lambda t: t.sin().sum(), x0)
    check_grad(lambda t: t.cos().sum(), x0)


def test_relu_forward_and_mask():
    x = T.Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    y = x.relu()
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_grad_atan2():
    y0 = RNG.normal(size=(5,)) + 1.5
    xc = T.Tensor(RNG.normal(size=(5,)) + 2.0)
    check_grad(lambda t: T.atan2(t, xc).sum(), y0)
    check_grad(lambda t: T.atan2(xc, t).sum(), y0)


def test_grad_softmax_cross_entropy():
    logits = RNG.normal(size=(6, 3))
    labels = np.array([0, 1, 2, 1, 0, 2])
    check_grad(lambda t: T.softmax_cross_entropy(t, labels).mean(), logits)
    # hand value: uniform logits, C classes -> log(C)
    u = T.Tensor(np.zeros((1, 4)))
    assert abs(T.softmax_cross_entropy(u, np.array([2])).data[0] - np.log(4)) < 1e-12


def test_huber_closed_form_and_grad():
    pred = T.Tensor(np.array([0.5, 2.0, -3.0]))
    loss = T.huber(pred, np.zeros(3), delta=1.0)
    np.testing.assert_allclose(loss.data, [0.125, 1.5, 2.5])
    # residuals away from the |r| = delta kink
    x0 = np.array([0.4, -0.7, 1.8, -2.5, 0.0001])
    target = np.zeros(5)
    check_grad(lambda t: T.huber(t, target).sum(), x0)
    # gradient w.r.t. the target side as well
    check_grad(lambda t: T.huber(T.Tensor(x0), t, delta=1.0).sum(), target + 0.05)


def test_backward_rejects_non_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_grad_accumulates_over_shared_use():
    x = T.Tensor(np.array(2.0), requires_grad=True)
    y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
    y.backward()
    assert abs(float(x.grad) - 7.0) < 1e-12


def test_simple_linear_identity():
    w = T.Tensor(RNG.normal(size=(3, 2)), requires_grad=True)
    x = np.array([[1.0, 2.0, 3.0]])
    (T.Tensor(x) @ w).sum().backward()
    np.testing.assert_allclose(w.grad, np.tile(x.T, (1, 2)))


def test_no_grad_blocks_graph():
    x = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad and y._backward is None


def test_three_layer_mlp_fd_check():
    rng = np.random.default_rng(21)
    mlp = nn.VectorMLP([4, 8, 8, 2], rng)
    x = rng.normal(size=(5, 4))
    for name, p in dict(mlp.params("m")).items():
        p0 = p.data.copy()

        def run(v, p=p):
            p.data = v
            out = (mlp(T.Tensor(x)) ** 2).sum()
            p.data = p0
            return float(out.data)

        for q in dict(mlp.params("m")).values():
            q.grad = None
        (mlp(T.Tensor(x)) ** 2).sum().backward()
        ana = p.grad
        num = numeric_grad(run, p0)
        denom = np.maximum(np.maximum(np.abs(num), np.abs(ana)), 1e-6)
        assert np.max(np.abs(ana - num) / denom) < 1e-4, name


def test_zero_init_relu_net_grad_paths():
    """With all-zero weights only the final bias can receive gradient."""
    rng = np.random.default_rng(22)
    mlp = nn.VectorMLP([3, 4, 4, 2], rng)
    params = dict(mlp.params("m"))
    for p in params.values():
        p.data = np.zeros_like(p.data)
    out = mlp(T.Tensor(np.abs(rng.normal(size=(6, 3)))))
    out.sum().backward()
    for name, p in params.items():
        if name == "m.2.b":
            np.testing.assert_array_equal(p.grad, np.full(2, 6.0))
        else:
            assert p.grad is None or not np.any(p.grad), name


# ---------------------------------------------------------------------------
# feature normalization

def test_feature_norm_statistics():
    rng = np.random.default_rng(23)
    fn = nn.FeatureNorm(5)
    x = T.Tensor(rng.normal(2.0, 3.0, (64, 5)))
    y = fn(x, training=True)
    mu = y.data.mean(axis=0)
    var = y.data.var(axis=0)
    assert np.all(np.abs(mu) < 1e-6)
    assert np.all(np.abs(var - 1.0) < 1e-3)  # eps shifts variance slightly


def test_feature_norm_per_sample_independence():
    """Batched and per-sample application agree exactly (no cross-talk)."""
    rng = np.random.default_rng(24)
    fn = nn.FeatureNorm(4)
    a, b = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    batched = fn(T.Tensor(np.stack([a, b])), training=True).data
    np.testing.assert_allclose(batched[0], fn(T.Tensor(a), True).data, atol=1e-12)
    np.testing.assert_allclose(batched[1], fn(T.Tensor(b), True).data, atol=1e-12)


def test_feature_norm_eval_uses_running_stats():
    rng = np.random.default_rng(25)
    fn = nn.FeatureNorm(3)
    for _ in range(200):
        fn(T.Tensor(rng.normal(1.0, 2.0, (32, 3))), training=True)
    np.testing.assert_allclose(fn.running_mean, np.ones(3), atol=0.2)
    np.testing.assert_allclose(fn.running_var, np.full(3, 4.0), atol=0.8)
    y = fn(T.Tensor(np.ones((4, 3))), training=False)
    assert y.data.shape == (4, 3)


def test_feature_norm_grad():
    rng = np.random.default_rng(26)
    fn = nn.FeatureNorm(3)
    x0 = rng.normal(size=(7, 3))
    w = T.Tensor(rng.normal(size=(7, 3)))  # non-degenerate readout weights

    def build(t):
        return (fn(t, training=True) * w).sum()

    check_grad(build, x0)


# ---------------------------------------------------------------------------
# networks

def seed_nets(norm=True, seed=27):
    rng = np.random.default_rng(seed)
    return nn.SegNet(rng, norm), nn.Stage1Net(rng, norm), nn.Stage2Net(rng, norm)


def test_segnet_shapes_and_equivariance():
    seg, _, _ = seed_nets()
    rng = np.random.default_rng(28)
    x = rng.normal(size=(128, 14))
    logits, feats = seg(x)
    assert logits.data.shape == (128, 2) and feats.data.shape == (128, 9)
    perm = rng.permutation(128)
    logits_p, feats_p = seg(x[perm])
    np.testing.assert_allclose(logits_p.data, logits.data[perm], atol=1e-9)
    np.testing.assert_allclose(feats_p.data, feats.data[perm], atol=1e-9)


def test_segnet_duplicate_points_invariance():
    seg, _, _ = seed_nets(norm=False)  # duplication changes per-cloud statistics
    rng = np.random.default_rng(29)
    x = rng.normal(size=(32, 14))
    logits, feats = seg(x)
    logits_d, feats_d = seg(np.vstack([x, x]))
    np.testing.assert_allclose(logits_d.data[:32], logits.data, atol=1e-9)
    np.testing.assert_allclose(logits_d.data[32:], logits.data, atol=1e-9)
    np.testing.assert_allclose(feats_d.data[:32], feats.data, atol=1e-9)


def test_segnet_rejects_empty():
    seg, s1, s2 = seed_nets()
    with pytest.raises(ValueError):
        seg(np.zeros((0, 14)))
    with pytest.raises(ValueError):
        s1(np.zeros((0, 13)))
    with pytest.raises(ValueError):
        s2(np.zeros((0, 12)))


def test_stage1_outputs_and_invariance():
    _, s1, _ = seed_nets()
    rng = np.random.default_rng(30)
    x = rng.normal(size=(40, 13))
    rtm, logits, refine = s1(x)
    assert rtm.data.shape == (4,) and logits.data.shape == (2,)
    assert refine.data.shape == (4,)
    rtm_p, logits_p, refine_p = s1(x[rng.permutation(40)])
    np.testing.assert_allclose(rtm_p.data, rtm.data, atol=1e-9)
    np.testing.assert_allclose(logits_p.data, logits.data, atol=1e-9)
    np.testing.assert_allclose(refine_p.data, refine.data, atol=1e-9)


def test_stage2_invariance_and_translation_sensitivity():
    _, _, s2 = seed_nets()
    rng = np.random.default_rng(31)
    x = rng.normal(size=(24, 12))
    out = s2(x)
    assert out.data.shape == (4,)
    out_p = s2(x[rng.permutation(24)])
    np.testing.assert_allclose(out_p.data, out.data, atol=1e-9)
    shifted = x.copy()
    shifted[:, :3] += 1.0
    assert np.abs(s2(shifted).data - out.data).max() > 1e-6


def test_batched_forward_matches_per_sample():
    seg, s1, _ = seed_nets()
    rng = np.random.default_rng(32)
    xs = rng.normal(size=(3, 16, 14))
    logits_b, feats_b = seg(xs)
    for i in range(3):
        li, fi = seg(xs[i])
        np.testing.assert_allclose(logits_b.data[i], li.data, atol=1e-12)
        np.testing.assert_allclose(feats_b.data[i], fi.data, atol=1e-12)


def test_mvanilla_shapes():
    net = nn.MVanillaNet(np.random.default_rng(33))
    out = net(np.random.default_rng(34).normal(size=(64, 14)))
    assert out.data.shape == (4,)


def test_forward_deterministic():
    a1, _, _ = seed_nets(seed=35)
    a2, _, _ = seed_nets(seed=35)
    x = np.random.default_rng(36).normal(size=(20, 14))
    l1, f1 = a1(x)
    l2, f2 = a2(x)
    np.testing.assert_array_equal(l1.data, l2.data)
    np.testing.assert_array_equal(f1.data, f2.data)


# ---------------------------------------------------------------------------
# differentiable box algebra vs the numpy reference

def test_tbox_ops_match_numpy_reference():
    rng = np.random.default_rng(37)
    for _ in range(50):
        box = Box3D(rng.uniform(-5, 5, 3), rng.uniform(-3, 3), rng.uniform(0.5, 3, 3))
        rtm = rng.uniform(-1, 1, 4)
        tb = nn.TBox.from_box(box)
        moved = nn.t_transform_box(tb, T.Tensor(rtm))
        ref = transform_box(box, RTM4.from_array(rtm))
        np.testing.assert_allclose(moved.center.data, ref.center, atol=1e-12)
        assert abs(float(nn.wrap_t(moved.yaw - T.Tensor(ref.yaw)).data)) < 1e-12

        other = Box3D(rng.uniform(-5, 5, 3), rng.uniform(-3, 3), box.size)
        rel = nn.t_rtm_between(tb, nn.TBox.from_box(other))
        np.testing.assert_allclose(
            rel.data, rtm_between(box, other).as_array(), atol=1e-12
        )

        pts = rng.uniform(-5, 5, (6, 3))
        out = nn.t_transform_points(T.Tensor(pts), tb, T.Tensor(rtm))
        np.testing.assert_allclose(
            out.data, transform_points(pts, box, RTM4.from_array(rtm)), atol=1e-12
        )


def test_tbox_gradients():
    rng = np.random.default_rng(38)
    box = Box3D([1.0, -2.0, 0.5], 0.7, [2.0, 4.0, 1.5])
    pts = rng.uniform(-3, 3, (5, 3))
    target = rng.uniform(-3, 3, (5, 3))

    def through_motion(rtm_t):
        tb = nn.TBox.from_box(box)
        moved = nn.t_transform_points(T.Tensor(pts), tb, rtm_t)
        return ((moved - T.Tensor(target)) ** 2).sum()

    check_grad(through_motion, np.array([0.3, -0.2, 0.1, 0.4]))

    def through_box_chain(rtm_t):
        tb = nn.t_transform_box(nn.TBox.from_box(box), rtm_t)
        rel = nn.t_rtm_between(nn.TBox.from_box(box), tb)
        return (T.huber(rel, np.array([0.1, 0.1, 0.0, 0.05]))).sum()

    check_grad(through_box_chain, np.array([0.3, -0.2, 0.1, 0.4]))

    def through_distance_map(center_t):
        tb = nn.TBox(center_t, T.Tensor(box.yaw), box.size)
        return nn.t_distance_map(T.Tensor(pts), tb).sum()

    check_grad(through_distance_map, box.center.copy())


def test_t_to_canonical_matches_numpy():
    rng = np.random.default_rng(39)
    box = Box3D([0.5, 1.0, -0.2], -1.1, [2, 3, 1])
    pts = rng.uniform(-4, 4, (7, 3))
    out = nn.t_to_canonical(T.Tensor(pts), nn.TBox.from_box(box))
    from motrack.geom import to_canonical

    np.testing.assert_allclose(out.data, to_canonical(pts, box), atol=1e-12)


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip(tmp_path):
    seg, s1, s2 = seed_nets(seed=40)
    x = np.random.default_rng(41).normal(size=(12, 14))
    seg(x)  # nudge running stats away from init
    path = tmp_path / "seg.ckpt"
    nn.save_checkpoint(path, seg, extra={"step": np.array([7.0])})
    seg2, _, _ = seed_nets(seed=99)
    extra = nn.load_checkpoint(path, seg2)
    assert extra["step"][0] == 7.0
    seg.eval(), seg2.eval()
    l1, f1 = seg(x)
    l2, f2 = seg2(x)
    np.testing.assert_array_equal(l1.data, l2.data)
    np.testing.assert_array_equal(f1.data, f2.data)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        nn.load_arrays(path)


def test_checkpoint_rejects_mismatched_state(tmp_path):
    _, s1, _ = seed_nets(seed=42)
    path = tmp_path / "s1.ckpt"
    nn.save_checkpoint(path, s1)
    seg, _, _ = seed_nets(seed=43)
    with pytest.raises(ValueError, match="state mismatch"):
        nn.load_checkpoint(path, seg)
